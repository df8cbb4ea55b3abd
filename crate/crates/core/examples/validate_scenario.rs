//! Loads a scenario file (TOML or JSON) and prints every assumption check.
//!
//! cargo run --example validate_scenario -- [path]

use mfpo::model::{load_scenario, scenario_hash, validate_assumptions, Scenario};

fn main() -> mfpo::Result<()> {
    let s = match std::env::args().nth(1) {
        Some(p) => load_scenario(p.as_ref())?,
        None => Scenario::smoke(),
    };
    let report = validate_assumptions(&s, &s.grid());
    println!("scenario {} (n = {}, k = {}, {} steps)", &scenario_hash(&s)[..12], s.n, s.k, s.n_steps);
    for c in &report.checks {
        let at = c.t_index.map(|j| format!(" at step {j}")).unwrap_or_default();
        println!(
            "  [{}] {:<30} {:<22} worst {:>10.4} bound {:>6.3}{at}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.clause,
            c.worst,
            c.bound
        );
    }
    if !report.all_passed() {
        std::process::exit(1);
    }
    Ok(())
}
