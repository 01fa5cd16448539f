//! Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
//! as arguments to run a subset. Exits non-zero when a criterion fails that
//! is not listed in `KNOWN_UNATTAINABLE`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use collapse_lab::arch::{
    deepen_resnet, forward_resnet, objective, penalty, LossKind, Network, NormPlacement, Regularization, Variant,
};
use collapse_lab::data::Dataset;
use collapse_lab::experiments::{
    depth_sweep, flatness_experiment, gradcheck_architecture, init_network, make_synthetic_classification, measure,
    train, trend_test, GradCheckConfig, Metric, SweepResult, TrainConfig, TrainOptions,
};
use collapse_lab::gufm::{
    aligned_distance, mse_optimal_norm, unscaled_mse_norm, solve_ce_closed_form, solve_mse_closed_form, solve_numeric,
    stability_probe, GufmLoss, GufmProblem, GufmSolution, NumericOptions, ProbeOptions,
};
use collapse_lab::numerics::{norm, LnMode};
use collapse_lab::synthesis::{
    prologue_margin, synthesize, transformer_prologue, Synthesis, SynthesisConfig, VerificationReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The unscaled MSE classifier norm disagrees with the optimum of the stated
/// objective, so criterion 2 cannot pass as written.
const KNOWN_UNATTAINABLE: [usize; 1] = [2];

const GRID: [usize; 4] = [50, 100, 200, 400];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn c1() -> Outcome {
    let start = Instant::now();
    let config = GradCheckConfig::default();
    let mut worst = (0.0, String::new());
    for variant in Variant::ALL {
        for placement in [NormPlacement::Post, NormPlacement::Pre] {
            let row = gradcheck_architecture(variant, placement, &config).unwrap();
            if row.max_rel_error >= worst.0 {
                worst = (row.max_rel_error, format!("{variant}/{placement}"));
            }
        }
    }
    let t = start.elapsed();
    Outcome::new(
        worst.0 < 1e-5 && within(t, 30.0),
        format!("max relative error {:.2e} at {} over 12 cases, {:.1}s", worst.0, worst.1, t.as_secs_f64()),
    )
}

fn row_norms(sol: &GufmSolution) -> Vec<f64> {
    (0..sol.w.rows()).map(|k| norm(&sol.w.row(k))).collect()
}

fn c2() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for (d, k, lambda) in [(4, 2, 0.25), (8, 3, 0.1), (16, 6, 0.05)] {
        let problem = GufmProblem::balanced(k, 2, d, lambda, GufmLoss::Mse).unwrap();
        let exact = solve_mse_closed_form(&problem).unwrap();
        let norms = row_norms(&exact);
        let unscaled = unscaled_mse_norm(d, k, lambda);
        let optimal = mse_optimal_norm(d, k, lambda);
        let unscaled_ok = norms.iter().all(|n| (n - unscaled).abs() <= 1e-12);
        let optimal_ok = norms.iter().all(|n| (n - optimal).abs() <= 1e-12);
        let numeric = solve_numeric(&problem, &NumericOptions::default()).unwrap();
        let loss_gap = (numeric.loss - exact.loss).abs();
        let cert = exact.certificate.unwrap();
        let cert_max = cert.nc1.max(cert.nc2b).max(cert.nc3);
        pass &= unscaled_ok && optimal_ok && loss_gap <= 1e-6 && cert_max < 1e-10;
        notes.push(format!(
            "(d={d},K={k},λ={lambda}) ‖w‖={:.6} unscaled {:.6} [{}] optimum {:.6} [{}] numeric gap {loss_gap:.1e} cert {cert_max:.1e}",
            norms[0],
            unscaled,
            if unscaled_ok { "ok" } else { "mismatch" },
            optimal,
            if optimal_ok { "ok" } else { "mismatch" },
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

fn c3() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for (d, k, lambda) in [(8, 4, 0.05), (6, 3, 0.1)] {
        let problem = GufmProblem::balanced(k, 2, d, lambda, GufmLoss::Ce).unwrap();
        let exact = solve_ce_closed_form(&problem).unwrap();
        let numeric = solve_numeric(&problem, &NumericOptions::default()).unwrap();
        let gap = (numeric.loss - exact.loss).abs();
        let cert = numeric.certificate.unwrap();
        let worst = cert.nc1.max(cert.nc2a).max(cert.nc3);
        let aligned = aligned_distance(&numeric.w, &numeric.x, &exact.w, &exact.x);
        pass &= gap <= 1e-5 && worst < 1e-3;
        notes.push(format!("(d={d},K={k},λ={lambda}) loss gap {gap:.1e} metrics {worst:.1e} aligned distance {aligned:.1e}"));
    }
    Outcome::new(pass, notes.join("; "))
}

fn c4() -> Outcome {
    let problem = GufmProblem::balanced(2, 2, 4, 0.25, GufmLoss::Mse).unwrap();
    let eps: Vec<f64> = (0..7).map(|i| 1e-2 / 2f64.powi(i)).collect();
    let rows = stability_probe(&problem, &eps, &ProbeOptions::default()).unwrap();
    let monotone = rows
        .windows(2)
        .all(|p| p[1].distance <= p[0].distance + 2.0 * p[0].noise.max(p[1].noise));
    // C is fitted at the largest ε; the bound must then hold at every smaller ε.
    let c = rows[0].distance / rows[0].epsilon.powf(0.25);
    let bounded = rows.iter().all(|r| r.distance <= c * r.epsilon.powf(0.25) + 2.0 * r.noise);
    let dists: Vec<String> = rows.iter().map(|r| format!("{:.2e}", r.distance)).collect();
    Outcome::new(
        monotone && bounded && rows.iter().all(|r| r.distance > 0.0),
        format!("distances [{}], C = {c:.3}, nonincreasing {monotone}, under Cε^(1/4) {bounded}", dists.join(", ")),
    )
}

fn construction_data() -> &'static (Dataset, GufmSolution) {
    static DATA: OnceLock<(Dataset, GufmSolution)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dataset = make_synthetic_classification(3, 2, 4, 7).unwrap();
        let problem = dataset.gufm_problem(8, 0.005, GufmLoss::Ce).unwrap();
        let solution = solve_ce_closed_form(&problem).unwrap();
        (dataset, solution)
    })
}

struct Run {
    l: usize,
    built: Synthesis,
    report: VerificationReport,
    objective: f64,
}

fn construct(variant: Variant) -> (Vec<Run>, Duration) {
    let (dataset, solution) = construction_data();
    let start = Instant::now();
    let runs = GRID
        .iter()
        .map(|&l| {
            let config = SynthesisConfig { l1: l, l2: l, variant, ..Default::default() };
            let built = synthesize(dataset, solution, &config).unwrap();
            let report = built.verify(dataset).unwrap();
            let objective = objective(
                &built.network(),
                &dataset.inputs,
                &dataset.targets(),
                LossKind::Ce,
                Regularization::uniform(config.lambda),
                NormPlacement::Post,
                LnMode::Exact,
            )
            .unwrap();
            Run { l, built, report, objective }
        })
        .collect();
    (runs, start.elapsed())
}

fn rn1_runs() -> &'static (Vec<Run>, Duration) {
    static RUNS: OnceLock<(Vec<Run>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| construct(Variant::Rn1))
}

fn c5() -> Outcome {
    let (runs, t) = rn1_runs();
    let gufm = construction_data().1.loss;
    let verified = runs.iter().all(|r| r.report.passed);
    let bounded = runs.iter().all(|r| r.built.ledger().sums_within_bounds());
    let gaps: Vec<f64> = runs.iter().map(|r| r.objective - gufm).collect();
    let decreasing = gaps.iter().all(|&g| g > 0.0) && gaps.windows(2).all(|w| w[1] < w[0]);
    let halved = gaps[3] < gaps[0] / 2.0;
    let failed: Vec<String> = runs
        .iter()
        .flat_map(|r| r.report.failures().into_iter().map(move |a| format!("L={} {}", r.l, a.name)))
        .collect();
    Outcome::new(
        verified && bounded && decreasing && halved && within(*t, 300.0),
        format!(
            "verified {verified} {failed:?}, ledger bounds {bounded}, gaps {:?}, halved {halved}, {:.1}s",
            gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>(),
            t.as_secs_f64()
        ),
    )
}

fn c6() -> Outcome {
    let (runs, _) = rn1_runs();
    let mut pass = true;
    let mut checks = 0;
    let mut worst = f64::NEG_INFINITY;
    for r in runs {
        let a = r.report.get("stage1_exclusivity").expect("exclusivity is always checked");
        pass &= a.passed && a.worst <= 1e-12;
        checks += a.checks;
        worst = worst.max(a.worst);
    }
    Outcome::new(pass, format!("{checks} non-owner activations, largest pre-activation {worst:.2e}"))
}

fn c7() -> Outcome {
    let (runs, t) = construct(Variant::Rn2);
    let verified = runs.iter().all(|r| r.report.passed);
    let equivalence = runs
        .iter()
        .map(|r| r.report.get("rn2_equivalence").expect("two-layer runs check equivalence").worst)
        .fold(0.0, f64::max);
    let hidden: Vec<f64> =
        runs.iter().map(|r| r.built.ledger().stage1_reg_sum + r.built.ledger().stage2_reg_sum).collect();
    let steady = hidden.iter().all(|&h| h >= 0.5 * hidden[0] && h <= 2.0 * hidden[0]);
    let decayed: Vec<f64> = runs
        .iter()
        .map(|r| penalty(&r.built.network()).value(Regularization::uniform((r.l as f64).ln().powi(-2))))
        .collect();
    let vanishing = decayed[3] < decayed[0];
    Outcome::new(
        verified && equivalence <= 1e-10 && steady && vanishing,
        format!(
            "verified {verified}, block mismatch {equivalence:.1e}, hidden sums {:?}, penalty at λ=1/ln(L)² {:.2} → {:.2}, {:.1}s",
            hidden.iter().map(|h| format!("{h:.2}")).collect::<Vec<_>>(),
            decayed[0],
            decayed[3],
            t.as_secs_f64()
        ),
    )
}

fn c8() -> Outcome {
    let start = Instant::now();
    let prologue = transformer_prologue(Variant::T11, 3, 4, 10, 0.1, 1e-3).unwrap();
    let m = prologue_margin(&prologue, 3, 4).unwrap();
    let t = start.elapsed();
    Outcome::new(
        m.contexts == 120 && m.m_tilde > 0.0 && m.min_distance >= m.bound && within(t, 10.0),
        format!(
            "{} contexts, m̃ = {:.4e}, min distance {:.4e} ≥ γ√d·m̃ = {:.4e}, {:.3}s",
            m.contexts,
            m.m_tilde,
            m.min_distance,
            m.bound,
            t.as_secs_f64()
        ),
    )
}

fn rn1_sweep() -> &'static (SweepResult, Duration) {
    static SWEEP: OnceLock<(SweepResult, Duration)> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let start = Instant::now();
        let sweep = depth_sweep(&TrainConfig::default(), 0).unwrap();
        (sweep, start.elapsed())
    })
}

fn c9() -> Outcome {
    let (sweep, t) = rn1_sweep();
    let trend = trend_test(&sweep.rows, Metric::Nc1);
    let first = trend.median_log10[0];
    let last = *trend.median_log10.last().unwrap();
    Outcome::new(
        trend.spearman <= -0.6 && last < first && sweep.dropped.is_empty() && within(*t, 1200.0),
        format!(
            "Spearman {:.3}, median log10 NC1 {:?}, dropped {}, {:.1}s",
            trend.spearman,
            trend.median_log10.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            sweep.dropped.len(),
            t.as_secs_f64()
        ),
    )
}

fn c10() -> Outcome {
    let (reference, _) = rn1_sweep();
    let report = flatness_experiment(&TrainConfig::two_layer_contrast(), 0, Some(&reference.rows)).unwrap();
    let limit = report.contrast_change.unwrap() / 2.0;
    Outcome::new(
        report.change <= limit && report.sweep.dropped.is_empty(),
        format!(
            "RN2 change {:.3} vs limit {limit:.3} (RN1 change {:.3}), spread {:.3}",
            report.change,
            report.contrast_change.unwrap(),
            report.spread
        ),
    )
}

fn c11() -> Outcome {
    let config = TrainConfig::default();
    let dataset = config.data.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = init_network(&config, &dataset, 5, &mut rng);
    let options = TrainOptions {
        learning_rate: config.learning_rate,
        steps: 300,
        momentum: config.momentum,
        optimizer: config.optimizer,
        lambda: config.lambda,
        loss: config.loss,
        placement: config.placement,
    };
    let trained = train(&net, &dataset, &options).unwrap().net;
    let Network::ResNet(params) = &trained else { unreachable!("the default protocol trains a ResNet") };
    let deep = Network::ResNet(deepen_resnet(params, 5));
    let collapse_lab::arch::Inputs::Dense(x) = &dataset.inputs else { unreachable!("dense data") };
    let Network::ResNet(deep_params) = &deep else { unreachable!() };
    let before = forward_resnet(params, x, NormPlacement::Post, LnMode::Exact, false).unwrap();
    let after = forward_resnet(deep_params, x, NormPlacement::Post, LnMode::Exact, false).unwrap();
    let logit_change = before.logits.sub(&after.logits).max_abs();
    let (a, _) = measure(&trained, &dataset, config.loss, NormPlacement::Post, LnMode::Exact).unwrap();
    let (b, _) = measure(&deep, &dataset, config.loss, NormPlacement::Post, LnMode::Exact).unwrap();
    let metric_change =
        [(a.nc1, b.nc1), (a.nc2a, b.nc2a), (a.nc2b, b.nc2b), (a.nc3, b.nc3)].iter().map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    Outcome::new(
        logit_change == 0.0 && metric_change < 1e-12,
        format!("logit change {logit_change:e}, largest metric change {metric_change:e} after 5 identity blocks"),
    )
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "gradient correctness", c1),
        (2, "MSE closed form", c2),
        (3, "CE closed form", c3),
        (4, "stability probe", c4),
        (5, "RN1 construction", c5),
        (6, "non-target exactness", c6),
        (7, "RN2 construction", c7),
        (8, "transformer prologue", c8),
        (9, "depth-sweep trend", c9),
        (10, "flatness contrast", c10),
        (11, "deepen invariance", c11),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Outcome::new(false, "panicked".into()));
        let known = KNOWN_UNATTAINABLE.contains(&n);
        let verdict = match (outcome.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known unattainable)",
            (false, false) => "FAIL",
        };
        println!("criterion {n:>2} {name}: {verdict} [{:.1}s] {}", start.elapsed().as_secs_f64(), outcome.detail);
        if !outcome.pass && !known {
            unexpected.push(n);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
