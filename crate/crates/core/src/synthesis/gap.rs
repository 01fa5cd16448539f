//! End-to-end objective of synthesized networks against the GUFM loss as
//! depth grows.

use serde::{Deserialize, Serialize};

use super::{synthesize, SynthesisConfig, SynthesisError};
use crate::arch::{objective, LossKind, Network, NormPlacement, Regularization};
use crate::data::Dataset;
use crate::gufm::GufmSolution;
use crate::numerics::LnMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub l1: usize,
    pub l2: usize,
    pub depth: usize,
    pub objective: f64,
    pub gufm_loss: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub rows: Vec<GapRow>,
    /// Least-squares slope of `ln gap` against `ln L₁`; `None` when some gap
    /// is not positive or the grid has fewer than two points.
    pub slope: Option<f64>,
}

impl GapCurve {
    pub fn write_csv(&self, w: impl std::io::Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    /// Positive everywhere and strictly decreasing along the grid.
    pub fn positive_and_decreasing(&self) -> bool {
        self.rows.iter().all(|r| r.gap > 0.0) && self.rows.windows(2).all(|w| w[1].gap < w[0].gap)
    }
}

fn log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || ys.iter().any(|&y| !(y > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Synthesizes at `L₁ = L₂ = L` for each `L` in `grid` and records the
/// network objective (post-LN, exact normalization, uniform `λ`) minus the
/// GUFM loss of `solution`.
pub fn loss_gap_curve(
    dataset: &Dataset,
    solution: &GufmSolution,
    loss: LossKind,
    grid: &[usize],
    config: &SynthesisConfig,
) -> Result<GapCurve, SynthesisError> {
    let targets = dataset.targets();
    let mut rows = Vec::with_capacity(grid.len());
    for &l in grid {
        let cfg = SynthesisConfig { l1: l, l2: l, ..*config };
        let net = synthesize(dataset, solution, &cfg)?.network();
        let depth = match &net {
            Network::ResNet(p) => p.depth(),
            Network::Transformer(p) => p.blocks.len(),
        };
        let value = objective(
            &net,
            &dataset.inputs,
            &targets,
            loss,
            Regularization::uniform(cfg.lambda),
            NormPlacement::Post,
            LnMode::Exact,
        )?;
        rows.push(GapRow { l1: l, l2: l, depth, objective: value, gufm_loss: solution.loss, gap: value - solution.loss });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.l1 as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    Ok(GapCurve { slope: log_slope(&xs, &ys), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let xs = [50.0, 100.0, 200.0, 400.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(log_slope(&xs, &[1.0, 0.0, 1.0, 1.0]), None);
    }
}
