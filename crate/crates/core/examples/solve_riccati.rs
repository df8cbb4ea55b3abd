//! Solves the variance and mean Riccati equations, prints a few grid points and
//! the optimal value, and compares the two weight normalizations.
//!
//! cargo run --example solve_riccati -- [steps]

use mfpo::riccati::{ode_residual, solve, summarize, Equation, Normalization};
use mfpo::model::Scenario;

fn main() -> mfpo::Result<()> {
    let s = Scenario::smoke();
    let steps: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(s.n_steps);
    let g = s.grid_with_steps(steps)?;
    let sol = solve(&s, &g, Normalization::Unit)?;

    println!("{:>6} {:>12} {:>12} {:>12} {:>12}", "t", "P", "Pi", "K0", "K1");
    for j in (0..=steps).step_by((steps / 8).max(1)) {
        println!(
            "{:>6.3} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            g.t(j),
            sol.p[j][(0, 0)],
            sol.pi[j][(0, 0)],
            sol.k0[j][(0, 0)],
            sol.k1[j][(0, 0)]
        );
    }

    let sum = summarize(&sol, &s)?;
    println!("optimal value <Pi(0)x0,x0> = {:.8}", sum.optimal_value);
    println!("ODE residuals: P {:.2e}, Pi {:.2e}", sum.residual_p, sum.residual_pi);

    let coarse = solve(&s, &s.grid_with_steps(steps / 2)?, Normalization::Unit)?;
    println!(
        "residual ratio on halving dt: P {:.2}, Pi {:.2}",
        ode_residual(&coarse, &s, Equation::P)? / sum.residual_p,
        ode_residual(&coarse, &s, Equation::Pi)? / sum.residual_pi
    );

    let doubled = solve(&s, &g, Normalization::Doubled)?;
    println!(
        "doubled running weights: <Pi(0)x0,x0> = {:.8}",
        mfpo::lq::optimal_value(&doubled, s.x0.as_slice())
    );
    Ok(())
}
