use collapse_lab::arch::{
    deepen_resnet, forward_resnet, init_resnet, LossKind, NormPlacement, Variant,
};
use collapse_lab::gufm::{
    feasibility_error, gufm_loss, project_feasible, solve_closed_form, GufmLoss, GufmProblem,
};
use collapse_lab::metrics::{etf_matrix, nc2a, report, EtfForm, NcReport};
use collapse_lab::numerics::{causal_softmax, layer_norm, LnMode, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn orthogonal(n: usize) -> impl Strategy<Value = Matrix> {
    matrix(n, n).prop_map(|m| Matrix::from_nalgebra(&m.to_nalgebra().qr().q()))
}

const LABELS: [usize; 9] = [0, 0, 0, 1, 1, 1, 2, 2, 2];

fn metrics_of(w: &Matrix, x: &Matrix) -> Option<NcReport> {
    report(w, x, &LABELS, LossKind::Ce, false).ok()
}

fn assert_same(a: &NcReport, b: &NcReport, tol: f64) {
    for (u, v) in [(a.nc1, b.nc1), (a.nc2a, b.nc2a), (a.nc2b, b.nc2b), (a.nc3, b.nc3)] {
        assert!((u - v).abs() <= tol, "{u} vs {v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_norm_output_is_centered_with_norm_sqrt_d(x in matrix(6, 4)) {
        let out = layer_norm(&x, LnMode::Exact).unwrap().normalized;
        for col in out.columns() {
            let mean = col.iter().sum::<f64>() / 6.0;
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((norm - 6f64.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn causal_softmax_columns_are_distributions_over_the_prefix(s in matrix(5, 5)) {
        let p = causal_softmax(&s);
        for j in 0..5 {
            let sum: f64 = (0..5).map(|i| p[(i, j)]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for i in j + 1..5 {
                prop_assert_eq!(p[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn metrics_ignore_positive_rescaling(
        w in matrix(3, 4), x in matrix(4, 9), alpha in 0.1f64..10.0, beta in 0.1f64..10.0,
    ) {
        if let Some(base) = metrics_of(&w, &x) {
            let scaled = metrics_of(&w.scale(beta), &x.scale(alpha)).unwrap();
            assert_same(&base, &scaled, 1e-10);
        }
    }

    #[test]
    fn metrics_are_rotation_equivariant(w in matrix(3, 4), x in matrix(4, 9), q in orthogonal(4)) {
        if let Some(base) = metrics_of(&w, &x) {
            let rotated = metrics_of(&w.matmul_t(&q), &q.matmul(&x)).unwrap();
            assert_same(&base, &rotated, 1e-10);
        }
    }

    #[test]
    fn nc2a_closed_form_matches_grid_scan(w in matrix(3, 4)) {
        let gram = w.matmul_t(&w);
        let e = etf_matrix(3, EtfForm::Centered);
        let c_max = 2.0 * gram.frobenius() / e.frobenius();
        let scan = (0..=10_000)
            .map(|t| {
                let mut d = gram.clone();
                d.axpy(c_max * t as f64 / 10_000.0, &e.scale(-1.0));
                d.frobenius() / gram.frobenius()
            })
            .fold(f64::INFINITY, f64::min);
        let exact = nc2a(&w).unwrap();
        prop_assert!(scan >= exact - 1e-12);
        prop_assert!(scan - exact < 1e-6, "{} vs {}", scan, exact);
    }

    #[test]
    fn projection_is_feasible_and_idempotent(x in matrix(5, 4)) {
        let classes: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let p = project_feasible(&x, &classes).unwrap();
        prop_assert!(feasibility_error(&p, &classes) < 1e-10);
        prop_assert!(project_feasible(&p, &classes).unwrap().sub(&p).max_abs() < 1e-12);
    }

    #[test]
    fn closed_form_optima_are_feasible_certified_and_scale_unique(
        k in 2usize..=6, extra in 1usize..=10, lambda in 0.01f64..0.5, per_class in 1usize..=3, mse in any::<bool>(),
    ) {
        let d = (k + extra).min(16);
        let loss = if mse { GufmLoss::Mse } else { GufmLoss::Ce };
        let problem = GufmProblem::balanced(k, per_class, d, lambda, loss).unwrap();
        let sol = solve_closed_form(&problem).unwrap();
        prop_assert!(feasibility_error(&sol.x, &problem.classes) < 1e-10);
        prop_assert!(sol.certificate.unwrap().max_selected() < 1e-10);
        for c in [0.5, 0.9, 0.99, 1.01, 1.1, 2.0] {
            prop_assert!(gufm_loss(&sol.w.scale(c), &sol.x, &problem) > sol.loss);
        }
    }

    #[test]
    fn deepen_changes_nothing(seed in any::<u64>(), extra in 0usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_resnet(Variant::Rn1, 4, 6, 3, 3, false, &mut rng);
        let x = Matrix::from_fn(4, 9, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let deep = deepen_resnet(&params, extra);
        let a = forward_resnet(&params, &x, NormPlacement::Post, LnMode::Exact, false).unwrap();
        let b = forward_resnet(&deep, &x, NormPlacement::Post, LnMode::Exact, false).unwrap();
        prop_assert_eq!(&a.logits, &b.logits);
        prop_assert_eq!(&a.features, &b.features);
    }
}
