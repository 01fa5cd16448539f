//! The attention prologue that separates every context, then a full
//! transformer construction for each variant on a small language task.

use collapse_lab::arch::Variant;
use collapse_lab::experiments::make_synthetic_language;
use collapse_lab::gufm::{solve_closed_form, GufmLoss};
use collapse_lab::synthesis::{prologue_margin, synthesize, transformer_prologue, SynthesisConfig};

fn main() {
    let prologue = transformer_prologue(Variant::T11, 3, 4, 10, 0.1, 1e-3).unwrap();
    let m = prologue_margin(&prologue, 3, 4).unwrap();
    println!(
        "prologue: {} contexts, m̃ = {:.4e}, min distance {:.4e}, guaranteed {:.4e}",
        m.contexts, m.m_tilde, m.min_distance, m.bound
    );

    let dataset = make_synthetic_language(3, 4, 2, 3, 0).unwrap();
    let solution = solve_closed_form(&dataset.gufm_problem(10, 0.005, GufmLoss::Ce).unwrap()).unwrap();
    for variant in [Variant::T11, Variant::T12, Variant::T21, Variant::T22] {
        let config = SynthesisConfig { l1: 20, l2: 20, variant, ..Default::default() };
        let built = synthesize(&dataset, &solution, &config).unwrap();
        let report = built.verify(&dataset).unwrap();
        let ledger = built.ledger();
        println!(
            "{variant}: {} blocks, γ = {:.3}, prologue penalty {:.3e}, verification {}",
            ledger.owners.len(),
            ledger.gamma.unwrap(),
            ledger.prologue_reg_sum.unwrap(),
            report.passed
        );
    }
}
