//! Hessian block audit of the Hamiltonian for the smoke scenario and for a
//! variant whose mean-state weight is negative but dominated by Q1.
//!
//! cargo run --example convexity_audit

use mfpo::adjoint::{convexity_audit, ConvexityReport};
use mfpo::model::{CoefficientPath, Scenario};

fn show(label: &str, r: &ConvexityReport) {
    println!("{label}");
    for (route, blocks, ok) in [("pointwise", &r.pointwise, r.pointwise_passed), ("summed", &r.summed, r.summed_passed)] {
        let parts: Vec<String> = blocks
            .iter()
            .map(|b| format!("{} {:+.3}", b.block, b.min_eigenvalue))
            .collect();
        println!("  {route:<9} {}  -> {}", parts.join(", "), if ok { "convex" } else { "not certified" });
    }
}

fn main() -> mfpo::Result<()> {
    let s = Scenario::smoke();
    show("smoke scenario", &convexity_audit(&s)?);

    let mut t = s.clone();
    t.coeffs.q2 = CoefficientPath::scalar(-0.4);
    show("Q2 = -0.4", &convexity_audit(&t)?);

    t.coeffs.q2 = CoefficientPath::scalar(-1.5);
    show("Q2 = -1.5", &convexity_audit(&t)?);
    Ok(())
}
