//! Closed-form GUFM optima for both losses, checked against the numeric
//! solver, followed by the stability probe around the MSE optimum.

use collapse_lab::gufm::{
    aligned_distance, solve_closed_form, solve_numeric, stability_probe, GufmLoss, GufmProblem, NumericOptions,
    ProbeOptions,
};

fn main() {
    for (name, loss) in [("ce", GufmLoss::Ce), ("mse", GufmLoss::Mse)] {
        let problem = GufmProblem::balanced(4, 2, 8, 0.05, loss).unwrap();
        let exact = solve_closed_form(&problem).unwrap();
        let numeric = solve_numeric(&problem, &NumericOptions::default()).unwrap();
        let cert = exact.certificate.unwrap();
        println!(
            "{name}: closed form {:.10}  numeric {:.10}  aligned distance {:.2e}  certificate max {:.1e}",
            exact.loss,
            numeric.loss,
            aligned_distance(&numeric.w, &numeric.x, &exact.w, &exact.x),
            cert.max_selected()
        );
    }

    let problem = GufmProblem::balanced(2, 2, 4, 0.25, GufmLoss::Mse).unwrap();
    let eps: Vec<f64> = (0..7).map(|i| 1e-2 / 2f64.powi(i)).collect();
    println!("epsilon,distance");
    for row in stability_probe(&problem, &eps, &ProbeOptions::default()).unwrap() {
        println!("{:.6e},{:.6e}", row.epsilon, row.distance);
    }
}
