//! Spike-free convex perturbation `u + eps (v - u)` of an open-loop control:
//! the gamma-moment of the state difference scales like eps^gamma.
//!
//! cargo run --release --example perturbation_scaling -- [particles]

use mfpo::checks::{gradient_laws, SCALING_EPS};
use mfpo::mfsim::{perturbation_scaling, SimConfig};
use mfpo::model::Scenario;

fn main() -> mfpo::Result<()> {
    let particles: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4_000);
    let s = Scenario::smoke();
    let g = s.grid();
    let (base, dir) = gradient_laws(&s, &g);
    let cfg = SimConfig::new(particles, 1, g);
    for gamma in [2.0, 3.0, 4.0] {
        let r = perturbation_scaling(&s, &base, &dir, &SCALING_EPS, gamma, &cfg)?;
        let devs: Vec<String> = r.deviation.iter().map(|d| format!("{d:.3e}")).collect();
        println!(
            "gamma {gamma}: deviations [{}]  slope {:.4}",
            devs.join(", "),
            r.slope.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
