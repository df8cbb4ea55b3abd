//! Optimality of the Riccati feedback law against perturbed gains, and the
//! coercivity bound J(u) >= delta E int |u|^2 for random open-loop controls.
//!
//! cargo run --release --example lq_optimality -- [particles]

use mfpo::lq::{coercivity_check, local_optimality, random_open_loop_laws};
use mfpo::mfsim::SimConfig;
use mfpo::model::Scenario;
use mfpo::riccati::{solve, Normalization};

fn main() -> mfpo::Result<()> {
    let particles: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10_000);
    let s = Scenario::smoke();
    let g = s.grid();
    let cfg = SimConfig::new(particles, 1, g);
    let sol = solve(&s, &g, Normalization::Unit)?;

    let r = local_optimality(&s, &sol, &cfg, 20, 0.1, 2)?;
    println!("feedback J = {:.6} +- {:.2e}", r.feedback_cost, r.feedback_std_error);
    for (i, e) in r.entries.iter().enumerate() {
        println!("  perturbation {i:>2}: J = {:.6}  excess {:+.2e}", e.cost, e.excess);
    }
    println!("local optimality: {}", if r.all_passed() { "holds" } else { "violated" });

    let laws = random_open_loop_laws(&s, &cfg, 10, 8, 2.0, 3);
    let c = coercivity_check(&s, &laws, &cfg)?;
    for e in &c.entries {
        println!("  J = {:>9.4} +- {:.1e}  delta*energy = {:>8.4}", e.cost, e.std_error, c.delta * e.energy);
    }
    println!("coercivity: {}", if c.all_passed() { "holds" } else { "violated" });
    Ok(())
}
