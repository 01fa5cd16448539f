//! Objective gap between synthesized ResNets and the GUFM optimum as the
//! construction deepens. Prints CSV and the fitted log-log slope.

use collapse_lab::arch::LossKind;
use collapse_lab::experiments::make_synthetic_classification;
use collapse_lab::gufm::solve_closed_form;
use collapse_lab::synthesis::{loss_gap_curve, SynthesisConfig};

fn main() {
    let dataset = make_synthetic_classification(3, 2, 4, 7).unwrap();
    let solution = solve_closed_form(&dataset.gufm_problem(8, 0.005, LossKind::Ce.into()).unwrap()).unwrap();
    let curve =
        loss_gap_curve(&dataset, &solution, LossKind::Ce, &[25, 50, 100, 200], &SynthesisConfig::default()).unwrap();
    print!("{}", curve.to_csv());
    println!("# slope {:?}, positive and decreasing {}", curve.slope, curve.positive_and_decreasing());
}
