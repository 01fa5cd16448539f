//! Reverse-mode gradients against central differences for every
//! architecture and norm placement.

use collapse_lab::arch::{NormPlacement, Variant};
use collapse_lab::experiments::{gradcheck_architecture, GradCheckConfig};

fn main() {
    let config = GradCheckConfig::default();
    for variant in Variant::ALL {
        for placement in [NormPlacement::Post, NormPlacement::Pre] {
            let row = gradcheck_architecture(variant, placement, &config).unwrap();
            println!("{variant:>4} {placement:>4}: {:>5} coordinates, max relative error {:.2e}", row.coordinates, row.max_rel_error);
        }
    }
}
