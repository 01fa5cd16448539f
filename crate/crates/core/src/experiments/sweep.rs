//! Depth sweeps, trend tests and the two-layer flatness contrast.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{measure, train, TrainOptions};
use super::{DataSpec, ExperimentError, TrainConfig};
use crate::arch::{init_resnet, init_transformer, Inputs, Network, Variant};
use crate::data::Dataset;
use crate::metrics::format_sig17;
use crate::numerics::LnMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub architecture: Variant,
    pub depth: usize,
    pub seed: u64,
    pub objective: f64,
    pub accuracy: f64,
    pub nc1: f64,
    pub nc2a: f64,
    pub nc2b: f64,
    pub nc3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedRun {
    pub depth: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub dropped: Vec<DroppedRun>,
}

pub const SWEEP_HEADER: &str = "architecture,depth,seed,objective,accuracy,nc1,nc2a,nc2b,nc3";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let nums = [r.objective, r.accuracy, r.nc1, r.nc2a, r.nc2b, r.nc3].map(format_sig17).join(",");
            out.push_str(&format!("{},{},{},{}\n", r.architecture, r.depth, r.seed, nums));
        }
        out
    }
}

/// Sidecar written next to the sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSidecar {
    pub config: TrainConfig,
    pub master_seed: u64,
    pub dropped_count: usize,
    pub dropped: Vec<DroppedRun>,
}

impl DataSpec {
    pub fn build(&self) -> Result<Dataset, ExperimentError> {
        match *self {
            DataSpec::Classification { classes, per_class, input_dim, seed } => {
                super::make_synthetic_classification(classes, per_class, input_dim, seed)
            }
            DataSpec::Language { vocab, context, classes, sequences, rule_seed } => {
                super::make_synthetic_language(vocab, context, classes, sequences, rule_seed)
            }
        }
    }
}

/// Fresh network for one sweep cell.
pub fn init_network(config: &TrainConfig, dataset: &Dataset, depth: usize, rng: &mut ChaCha8Rng) -> Network {
    let k = dataset.num_classes;
    match &dataset.inputs {
        Inputs::Dense(x) => Network::ResNet(init_resnet(
            config.architecture,
            x.rows(),
            config.width,
            k,
            depth,
            config.last_bias,
            rng,
        )),
        Inputs::Tokens(b) => Network::Transformer(init_transformer(
            config.architecture,
            b.vocab,
            b.context,
            config.width,
            k,
            depth,
            config.last_bias,
            rng,
        )),
    }
}

/// Stream of one `(depth, seed)` cell: independent of scheduling.
fn cell_rng(master_seed: u64, depth: usize, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((depth as u64) << 32) ^ seed);
    rng
}

fn run_cell(
    config: &TrainConfig,
    dataset: &Dataset,
    master_seed: u64,
    depth: usize,
    seed: u64,
) -> Result<SweepRow, ExperimentError> {
    let mut rng = cell_rng(master_seed, depth, seed);
    let net = init_network(config, dataset, depth, &mut rng);
    let options = TrainOptions {
        learning_rate: config.learning_rate,
        steps: config.steps,
        momentum: config.momentum,
        optimizer: config.optimizer,
        lambda: config.lambda_at(depth),
        loss: config.loss,
        placement: config.placement,
    };
    let out = train(&net, dataset, &options)?;
    let (nc, accuracy) = measure(&out.net, dataset, config.loss, config.placement, LnMode::train())?;
    let row = SweepRow {
        architecture: config.architecture,
        depth,
        seed,
        objective: out.final_objective(),
        accuracy,
        nc1: nc.nc1,
        nc2a: nc.nc2a,
        nc2b: nc.nc2b,
        nc3: nc.nc3,
    };
    if [row.nc1, row.nc2a, row.nc2b, row.nc3].iter().any(|v| !v.is_finite()) {
        return Err(ExperimentError::NonFinite { step: config.steps });
    }
    Ok(row)
}

/// Trains every `(depth, seed)` cell from a fresh initialization. Cells run
/// in parallel; rows come back sorted by `(depth, seed)`. Divergent cells
/// are dropped and listed.
pub fn depth_sweep(config: &TrainConfig, master_seed: u64) -> Result<SweepResult, ExperimentError> {
    config.validate()?;
    let dataset = config.data.build()?;
    let mut cells: Vec<(usize, u64)> =
        config.depths.iter().flat_map(|&d| config.seeds.iter().map(move |&s| (d, s))).collect();
    cells.sort_unstable();
    cells.dedup();
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(depth, seed)| (depth, seed, run_cell(config, &dataset, master_seed, depth, seed)))
        .collect();
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for (depth, seed, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e @ ExperimentError::NonFinite { .. }) => dropped.push(DroppedRun { depth, seed, reason: e.to_string() }),
            Err(e) => return Err(e),
        }
    }
    Ok(SweepResult { rows, dropped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Nc1,
    Nc2a,
    Nc2b,
    Nc3,
}

impl Metric {
    pub fn of(self, row: &SweepRow) -> f64 {
        match self {
            Metric::Nc1 => row.nc1,
            Metric::Nc2a => row.nc2a,
            Metric::Nc2b => row.nc2b,
            Metric::Nc3 => row.nc3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub metric: Metric,
    pub depths: Vec<usize>,
    /// Median over seeds of `log₁₀(metric)` per depth.
    pub median_log10: Vec<f64>,
    pub spearman: f64,
    /// Least-squares slope of median `log₁₀(metric)` against `log₁₀(depth)`.
    pub slope: f64,
}

impl TrendResult {
    /// `|median log₁₀(metric)` at the deepest minus at the shallowest depth|.
    pub fn end_to_end_change(&self) -> f64 {
        match (self.median_log10.first(), self.median_log10.last()) {
            (Some(a), Some(b)) => (b - a).abs(),
            _ => 0.0,
        }
    }

    /// Largest minus smallest median `log₁₀(metric)` across depths.
    pub fn spread(&self) -> f64 {
        let lo = self.median_log10.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.median_log10.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() { hi - lo } else { 0.0 }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Average ranks (ties share the mean rank).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| r[k] = avg);
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 { 0.0 } else { sxy / (sxx * syy).sqrt() }
}

/// Spearman correlation between depth and the per-depth median over seeds of
/// `log₁₀(metric)`; zero when either side is constant.
pub fn trend_test(rows: &[SweepRow], metric: Metric) -> TrendResult {
    let mut depths: Vec<usize> = rows.iter().map(|r| r.depth).collect();
    depths.sort_unstable();
    depths.dedup();
    let median_log10: Vec<f64> = depths
        .iter()
        .map(|&d| median(rows.iter().filter(|r| r.depth == d).map(|r| metric.of(r).log10()).collect()))
        .collect();
    let x: Vec<f64> = depths.iter().map(|&d| d as f64).collect();
    let spearman = if depths.len() < 2 { 0.0 } else { pearson(&ranks(&x), &ranks(&median_log10)) };
    let lx: Vec<f64> = x.iter().map(|v| v.log10()).collect();
    let slope = {
        let n = lx.len() as f64;
        let (mx, my) = (lx.iter().sum::<f64>() / n, median_log10.iter().sum::<f64>() / n);
        let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
        let sxy: f64 = lx.iter().zip(&median_log10).map(|(a, b)| (a - mx) * (b - my)).sum();
        if sxx > 0.0 { sxy / sxx } else { 0.0 }
    };
    TrendResult { metric, depths, median_log10, spearman, slope }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub sweep: SweepResult,
    pub trend: TrendResult,
    /// Max minus min of median `log₁₀ NC1` across depths.
    pub spread: f64,
    /// `|log₁₀ NC1(deepest) − log₁₀ NC1(shallowest)|` for the medians.
    pub change: f64,
    /// The same change for a contrasting sweep, when given.
    pub contrast_change: Option<f64>,
}

/// Depth sweep of a two-layer architecture at constant `λ`, optionally set
/// against another sweep's NC1 change over the same depths.
pub fn flatness_experiment(
    config: &TrainConfig,
    master_seed: u64,
    contrast: Option<&[SweepRow]>,
) -> Result<FlatnessReport, ExperimentError> {
    if !config.architecture.two_layer_mlp() {
        return Err(ExperimentError::Invalid("flatness contrast needs a two-layer architecture".into()));
    }
    let sweep = depth_sweep(config, master_seed)?;
    let trend = trend_test(&sweep.rows, Metric::Nc1);
    Ok(FlatnessReport {
        spread: trend.spread(),
        change: trend.end_to_end_change(),
        contrast_change: contrast.map(|rows| trend_test(rows, Metric::Nc1).end_to_end_change()),
        sweep,
        trend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(depth: usize, seed: u64, nc1: f64) -> SweepRow {
        SweepRow {
            architecture: Variant::Rn1,
            depth,
            seed,
            objective: 0.0,
            accuracy: 1.0,
            nc1,
            nc2a: 1.0,
            nc2b: 1.0,
            nc3: 1.0,
        }
    }

    #[test]
    fn decreasing_medians_give_minus_one() {
        let rows: Vec<SweepRow> =
            [2, 3, 5, 8].iter().flat_map(|&d| (0..3).map(move |s| row(d, s, 1.0 / d as f64 + s as f64 * 1e-3))).collect();
        let t = trend_test(&rows, Metric::Nc1);
        assert!((t.spearman + 1.0).abs() < 1e-12);
        assert!((t.slope + 1.0).abs() < 0.05);
    }

    #[test]
    fn constant_medians_give_zero() {
        let rows: Vec<SweepRow> = [2, 3, 5].iter().map(|&d| row(d, 0, 0.5)).collect();
        assert_eq!(trend_test(&rows, Metric::Nc1).spearman, 0.0);
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn csv_has_seventeen_digits() {
        let csv = SweepResult { rows: vec![row(2, 0, 1.0 / 3.0)], dropped: vec![] }.to_csv();
        let line = csv.lines().nth(1).unwrap();
        assert!(line.starts_with("rn1,2,0,"));
        assert!(line.contains("3.3333333333333331e-1"));
    }
}
