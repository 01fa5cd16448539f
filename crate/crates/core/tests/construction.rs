use collapse_lab::arch::{
    init_resnet, objective, objective_and_gradient, penalty, Inputs, LossKind, Network, NormPlacement, Regularization,
    ResBlock, Variant,
};
use collapse_lab::data::Dataset;
use collapse_lab::experiments::{make_synthetic_classification, make_synthetic_language};
use collapse_lab::gufm::{solve_closed_form, GufmSolution};
use collapse_lab::numerics::{finite_diff_check, one_hot, LnMode, Matrix};
use collapse_lab::synthesis::{synthesize, BlockOwner, Synthesis, SynthesisConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn solved(dataset: &Dataset, dim: usize, lambda: f64) -> GufmSolution {
    solve_closed_form(&dataset.gufm_problem(dim, lambda, LossKind::Ce.into()).unwrap()).unwrap()
}

fn end_to_end(net: &Network, dataset: &Dataset, lambda: f64) -> f64 {
    let reg = Regularization::uniform(lambda);
    objective(net, &dataset.inputs, &dataset.targets(), LossKind::Ce, reg, NormPlacement::Post, LnMode::Exact).unwrap()
}

fn block_is_zero(b: &ResBlock) -> bool {
    match b {
        ResBlock::One { w, b } => w.is_zero() && b.is_zero(),
        ResBlock::Two { w1, b1, w2, b2 } => w1.is_zero() && b1.is_zero() && w2.is_zero() && b2.is_zero(),
    }
}

#[test]
fn three_block_rn1_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = Network::ResNet(init_resnet(Variant::Rn1, 5, 8, 3, 3, false, &mut rng));
    let inputs = Inputs::Dense(Matrix::from_fn(5, 6, |_, _| rng.random_range(-1.0..1.0)));
    let targets = one_hot(&[0, 1, 2, 0, 1, 2], 3);
    let reg = Regularization::uniform(0.01);
    let mode = LnMode::train();
    let (_, grads) =
        objective_and_gradient(&net, &inputs, &targets, LossKind::Ce, reg, NormPlacement::Post, mode).unwrap();
    let report = finite_diff_check(
        &net.flatten(),
        1e-5,
        |t| objective(&net.unflatten(t), &inputs, &targets, LossKind::Ce, reg, NormPlacement::Post, mode).unwrap(),
        |_| grads.clone(),
    );
    assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
}

#[test]
fn deeper_resnet_constructions_verify_and_do_not_lose_objective() {
    let dataset = make_synthetic_classification(3, 2, 4, 7).unwrap();
    let solution = solved(&dataset, 8, 0.005);
    for variant in [Variant::Rn1, Variant::Rn2] {
        let mut previous = f64::INFINITY;
        for l in [25, 50] {
            let config = SynthesisConfig { l1: l, l2: l, variant, ..Default::default() };
            let built = synthesize(&dataset, &solution, &config).unwrap();
            let report = built.verify(&dataset).unwrap();
            assert!(report.passed, "{variant} L={l}: {:?}", report.failures());
            assert!(built.ledger().sums_within_bounds());
            let net = built.network();
            assert!(end_to_end(&net, &dataset, config.lambda) > solution.loss);
            // The two-layer hidden penalty stays of constant order, so RN2 only
            // improves with depth once λ shrinks like 1/ln(L)².
            let value = match variant {
                Variant::Rn1 => end_to_end(&net, &dataset, config.lambda),
                _ => penalty(&net).value(Regularization::uniform((l as f64).ln().powi(-2))),
            };
            assert!(value <= previous + 1e-9, "{variant}: {value} after {previous}");
            previous = value;

            let Synthesis::ResNet(s) = &built else { panic!("ResNet expected") };
            for (owner, block) in s.ledger.owners.iter().zip(&s.params.blocks) {
                if let BlockOwner::Stage1 { active: false, .. } = owner {
                    assert!(block_is_zero(block));
                }
            }
        }
    }
}

#[test]
fn every_transformer_variant_verifies_on_a_language_toy() {
    let dataset = make_synthetic_language(3, 4, 2, 3, 0).unwrap();
    let solution = solved(&dataset, 10, 0.005);
    for variant in [Variant::T11, Variant::T12, Variant::T21, Variant::T22] {
        let config = SynthesisConfig { l1: 10, l2: 10, variant, ..Default::default() };
        let built = synthesize(&dataset, &solution, &config).unwrap();
        let report = built.verify(&dataset).unwrap();
        assert!(report.passed, "{variant}: {:?}", report.failures());
        assert!(built.ledger().gamma.is_some());
        assert!(end_to_end(&built.network(), &dataset, config.lambda) > solution.loss);
    }
}
