//! Reference-measure simulation: the terminal Girsanov weight should average
//! to one, and its running supremum has finite fourth moment.
//!
//! cargo run --release --example girsanov_weights -- [particles] [seed]

use mfpo::mfsim::{bayes_expectation, moment_report, simulate_ensemble, ControlLaw, Functional, SimConfig};
use mfpo::model::Scenario;

fn main() -> mfpo::Result<()> {
    let mut args = std::env::args().skip(1);
    let particles: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50_000);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);

    let s = Scenario::smoke();
    let g = s.grid();
    let e = simulate_ensemble(&s, &ControlLaw::zero(s.k, &g), &SimConfig::new(particles, seed, g))?;

    let one = |_: usize, _: &[f64]| 1.0;
    let z = bayes_expectation(&e, Functional::Terminal(&one));
    println!("mean Z(T)       {:.6} +- {:.2e}", z.value, z.std_error);
    println!("|mean - 1| / SE {:.2}", (z.value - 1.0).abs() / z.std_error);

    // Expectation of x(T)^2 under the controlled measure, via the weights.
    let sq = |_: usize, x: &[f64]| x[0] * x[0];
    let w = bayes_expectation(&e, Functional::Terminal(&sq));
    println!("E^u[x(T)^2]     {:.6} +- {:.2e}", w.value, w.std_error);

    for (beta, alpha) in [(2.0, 2.0), (4.0, 4.0)] {
        let m = moment_report(&e, &s, beta, alpha)?;
        println!(
            "E sup|x|^{beta} = {:.4} +- {:.1e}   E sup Z^{alpha} = {:.4} +- {:.1e}",
            m.sup_state_moment, m.sup_state_std_error, m.sup_weight_moment, m.sup_weight_std_error
        );
    }
    Ok(())
}
