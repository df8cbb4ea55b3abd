//! Maximum-principle checks on the smoke scenario: the adjoint-based
//! directional derivative against a common-noise finite difference, and the
//! stationarity residual of the Riccati feedback law.
//!
//! cargo run --release --example adjoint_checks

use mfpo::adjoint::{ansatz_discrepancy, solve_adjoint_regression, stationarity_residual, variational_derivative};
use mfpo::lq::build_feedback_law;
use mfpo::mfsim::{simulate_ensemble, ControlLaw, SimConfig};
use mfpo::model::Scenario;
use mfpo::riccati::{solve, Normalization};
use nalgebra::DVector;

fn main() -> mfpo::Result<()> {
    let s = Scenario::smoke();
    let g = s.grid();

    println!("directional derivative, base u = 0, direction u = 1");
    let base = ControlLaw::zero(1, &g);
    let dir = ControlLaw::constant(DVector::from_element(1, 1.0), &g);
    for m in [2_000, 8_000, 32_000] {
        let e = simulate_ensemble(&s, &base, &SimConfig::new(m, 1, g))?;
        let a = solve_adjoint_regression(&e, &s)?;
        let r = variational_derivative(&s, &base, &dir, &e, &a, 1e-3)?;
        println!(
            "  M = {m:>6}  adjoint {:.6}  finite difference {:.6}  gap {:.2e}",
            r.adjoint, r.finite_difference, r.relative_gap
        );
    }

    println!("stationarity residual of the feedback law");
    for (m, steps) in [(1_000, 400), (4_000, 400), (16_000, 400), (16_000, 100), (16_000, 200)] {
        let g = s.grid_with_steps(steps)?;
        let sol = solve(&s, &g, Normalization::Unit)?;
        let cfg = SimConfig::new(m, 1, g);
        let e = simulate_ensemble(&s, &build_feedback_law(&sol), &cfg)?;
        let a = solve_adjoint_regression(&e, &s)?;
        let r = stationarity_residual(&e, &a, &s)?;
        let z = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &cfg)?;
        let za = solve_adjoint_regression(&z, &s)?;
        let zr = stationarity_residual(&z, &za, &s)?;
        let ans = ansatz_discrepancy(&e, &a, &sol)?;
        println!(
            "  M = {m:>6}  n_steps = {steps:>4}  residual {:.3e}  zero-control {:.3e}  ansatz gap {:.2e}",
            r.norm, zr.norm, ans.relative
        );
    }
    Ok(())
}
