//! Simulates the Riccati feedback law on the smoke scenario and compares the
//! Monte Carlo cost with the value predicted by the mean Riccati equation.
//!
//! cargo run --release --example simulate_feedback -- [particles] [seed]

use mfpo::lq::{build_feedback_law, decomposed_cost, evaluate_cost, optimal_value};
use mfpo::mfsim::{simulate_ensemble, SimConfig};
use mfpo::model::Scenario;
use mfpo::riccati::{solve, Normalization};

fn main() -> mfpo::Result<()> {
    let mut args = std::env::args().skip(1);
    let particles: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50_000);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);

    let s = Scenario::smoke();
    let g = s.grid();
    let sol = solve(&s, &g, Normalization::Unit)?;
    let value = optimal_value(&sol, s.x0.as_slice());

    let start = std::time::Instant::now();
    let e = simulate_ensemble(&s, &build_feedback_law(&sol), &SimConfig::new(particles, seed, g))?;
    let raw = evaluate_cost(&e, &s)?;
    let split = decomposed_cost(&e, &s)?;

    println!("particles        {particles}");
    println!("<Pi(0)x0,x0>     {value:.6}");
    println!("J (Monte Carlo)  {:.6} +- {:.6}", raw.total, raw.std_error);
    println!("gap / SE         {:.2}", (raw.total - value) / raw.std_error);
    println!("decomposed J     {:.6}", split.total);
    println!("elapsed          {:.2?}", start.elapsed());
    Ok(())
}
