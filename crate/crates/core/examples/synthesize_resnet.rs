//! Builds one- and two-layer ResNets whose features reach a collapsed GUFM
//! optimum, verifies every construction bound and saves the first network.
//!
//! Usage: `cargo run --release --example synthesize_resnet [L]`

use collapse_lab::arch::{Container, NormPlacement, Variant};
use collapse_lab::experiments::make_synthetic_classification;
use collapse_lab::gufm::{solve_closed_form, GufmLoss};
use collapse_lab::synthesis::{synthesize, SynthesisConfig};

fn main() {
    let l: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(50);
    let dataset = make_synthetic_classification(3, 2, 4, 7).unwrap();
    let solution = solve_closed_form(&dataset.gufm_problem(8, 0.005, GufmLoss::Ce).unwrap()).unwrap();

    for variant in [Variant::Rn1, Variant::Rn2] {
        let config = SynthesisConfig { l1: l, l2: l, variant, ..Default::default() };
        let built = synthesize(&dataset, &solution, &config).unwrap();
        let report = built.verify(&dataset).unwrap();
        let ledger = built.ledger();
        println!("{variant}: {} blocks, margin m = {:.4}, verification {}", ledger.owners.len(), ledger.m, report.passed);
        println!("  stage 1 penalty {:.4} (bound {:.4})", ledger.stage1_reg_sum, ledger.stage1_bound);
        println!("  stage 2 penalty {:.4} (bound {:.4})", ledger.stage2_reg_sum, ledger.stage2_bound);
        for a in &report.assertions {
            println!("  {:<20} {:<5} worst {:.3e} limit {:.3e}", a.name, a.passed, a.worst, a.limit);
        }
        if variant == Variant::Rn1 {
            let path = std::env::temp_dir().join("rn1_synthesized.bin");
            Container::from_network(&built.network(), NormPlacement::Post, serde_json::json!({ "l": l }))
                .save(&path)
                .unwrap();
            println!("  saved to {}", path.display());
        }
    }
}
