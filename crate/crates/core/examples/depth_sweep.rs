//! A shortened version of the training protocol: NC1 across depths, then the
//! Spearman trend of its median.
//!
//! Usage: `cargo run --release --example depth_sweep [steps]`

use collapse_lab::experiments::{depth_sweep, trend_test, Metric, TrainConfig};

fn main() {
    let steps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(400);
    let config = TrainConfig { steps, ..TrainConfig::default() };
    let sweep = depth_sweep(&config, 0).unwrap();
    print!("{}", sweep.to_csv());
    for metric in [Metric::Nc1, Metric::Nc3] {
        let t = trend_test(&sweep.rows, metric);
        println!("# {metric:?}: Spearman {:.3}, change {:.3} decades", t.spearman, t.end_to_end_change());
    }
}
