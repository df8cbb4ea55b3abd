//! Named numerical checks with default protocols and JSON verdicts.

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::adjoint::{convexity_audit, solve_adjoint_regression, stationarity_residual, variational_derivative};
use crate::error::{Error, Result};
use crate::lq::{
    build_feedback_law, coercivity_check, decomposed_cost, evaluate_cost, local_optimality, optimal_value,
    random_open_loop_laws,
};
use crate::mfsim::{
    bayes_expectation, moment_report, perturbation_scaling, simulate_ensemble, ControlLaw, Functional, SimConfig,
};
use crate::model::{scenario_hash, Scenario, TimeGrid};
use crate::riccati::{solve, Normalization};

/// Names accepted by [`run_check`].
pub const CHECK_NAMES: [&str; 8] = ["smp", "gradient", "scaling", "coercivity", "convexity", "bayes", "value", "local"];

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub scenario_hash: String,
    pub measured: Value,
    pub tolerances: Value,
}

/// Overrides of the default protocol parameters.
#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub seed: u64,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
    /// Moment order for `scaling`.
    pub gamma: Option<f64>,
    /// Number of random laws for `coercivity` or perturbations for `local`.
    pub count: Option<usize>,
}

impl CheckOptions {
    fn grid(&self, s: &Scenario) -> Result<TimeGrid> {
        s.grid_with_steps(self.steps.unwrap_or(s.n_steps))
    }

    fn cfg(&self, s: &Scenario, default_particles: usize) -> Result<SimConfig> {
        Ok(SimConfig::new(self.particles.unwrap_or(default_particles), self.seed, self.grid(s)?))
    }
}

/// Default particle counts per check.
pub fn default_particles(name: &str) -> usize {
    match name {
        "value" | "bayes" => 50_000,
        "smp" | "gradient" => 16_000,
        "local" => 10_000,
        "scaling" => 4_000,
        "coercivity" => 2_000,
        _ => 0,
    }
}

fn verdict(name: &str, s: &Scenario, passed: bool, measured: Value, tolerances: Value) -> Verdict {
    Verdict {
        check: name.into(),
        passed,
        scenario_hash: scenario_hash(s),
        measured,
        tolerances,
    }
}

pub fn run_check(name: &str, s: &Scenario, o: &CheckOptions) -> Result<Verdict> {
    match name {
        "smp" => check_smp(s, o),
        "gradient" => check_gradient(s, o),
        "scaling" => check_scaling(s, o),
        "coercivity" => check_coercivity(s, o),
        "convexity" => check_convexity(s),
        "bayes" => check_bayes(s, o),
        "value" => check_value(s, o),
        "local" => check_local(s, o),
        other => Err(Error::InvalidConfig(format!(
            "unknown check `{other}`; expected one of {}",
            CHECK_NAMES.join(", ")
        ))),
    }
}

/// Feedback cost against `⟨Π(0)x0, x0⟩`.
pub fn check_value(s: &Scenario, o: &CheckOptions) -> Result<Verdict> {
    let cfg = o.cfg(s, default_particles("value"))?;
    let sol = solve(s, &cfg.grid, Normalization::Unit)?;
    let value = optimal_value(&sol, s.x0.as_slice());
    let e = simulate_ensemble(s, &build_feedback_law(&sol), &cfg)?;
    let c = evaluate_cost(&e, s)?;
    let d = decomposed_cost(&e, s)?;
    let gap = c.total - value;
    Ok(verdict(
        "value",
        s,
        gap.abs() <= 3.0 * c.std_error,
        json!({
            "optimal_value": value,
            "cost": c.total,
            "std_error": c.std_error,
            "gap_in_std_errors": gap / c.std_error,
            "decomposed_cost": d.total,
            "particles": cfg.n_particles,
            "n_steps": cfg.grid.n_steps(),
        }),
        json!({ "max_gap_in_std_errors": 3.0 }),
    ))
}

/// Random gain perturbations never beat the feedback law by more than 2 SE.
pub fn check_local(s: &Scenario, o: &CheckOptions) -> Result<Verdict> {
    let cfg = o.cfg(s, default_particles("local"))?;
    let sol = solve(s, &cfg.grid, Normalization::Unit)?;
    let r = local_optimality(s, &sol, &cfg, o.count.unwrap_or(20), 0.1, o.seed.wrapping_add(1))?;
    let min_excess = r.entries.iter().map(|e| e.excess).fold(f64::INFINITY, f64::min);
    Ok(verdict(
        "local",
        s,
        r.all_passed(),
        json!({
            "feedback_cost": r.feedback_cost,
            "feedback_std_error": r.feedback_std_error,
            "min_excess": min_excess,
            "excess": r.entries.iter().map(|e| e.excess).collect::<Vec<_>>(),
        }),
        json!({ "gain_perturbation_norm": r.eps, "min_excess_in_std_errors": -2.0 }),
    ))
}

/// Stationarity residual of the feedback law against the zero control, over
/// a sweep of particle counts and step counts.
#[derive(Debug, Clone, Serialize)]
pub struct StationarityStudy {
    pub particles: Vec<usize>,
    pub by_particles: Vec<f64>,
    pub steps: Vec<usize>,
    pub by_steps: Vec<f64>,
    pub final_residual: f64,
    pub final_residual_with_qt: f64,
    pub zero_control_residual: f64,
}

impl StationarityStudy {
    pub fn decreasing_in_particles(&self) -> bool {
        self.by_particles.windows(2).all(|w| w[1] < w[0])
    }

    pub fn decreasing_in_steps(&self) -> bool {
        self.by_steps.windows(2).all(|w| w[1] < w[0])
    }

    pub fn ratio_to_zero_control(&self) -> f64 {
        self.final_residual / self.zero_control_residual
    }
}

fn feedback_residual(s: &Scenario, cfg: &SimConfig) -> Result<(f64, f64)> {
    let sol = solve(s, &cfg.grid, Normalization::Unit)?;
    let e = simulate_ensemble(s, &build_feedback_law(&sol), cfg)?;
    let a = solve_adjoint_regression(&e, s)?;
    let r = stationarity_residual(&e, &a, s)?;
    Ok((r.norm, r.norm_with_qt))
}

/// Residuals at `M/16, M/4, M` on the finest grid and at `N/4, N/2, N` steps
/// with `M` particles.
pub fn stationarity_study(s: &Scenario, particles: usize, steps: usize, seed: u64) -> Result<StationarityStudy> {
    let ms = vec![particles / 16, particles / 4, particles];
    let ns = vec![steps / 4, steps / 2, steps];
    let fine = s.grid_with_steps(steps)?;
    let mut by_m = Vec::new();
    let mut last = (0.0, 0.0);
    for &m in &ms {
        last = feedback_residual(s, &SimConfig::new(m, seed, fine))?;
        by_m.push(last.0);
    }
    let mut by_n = Vec::new();
    for &n in &ns[..2] {
        by_n.push(feedback_residual(s, &SimConfig::new(particles, seed, s.grid_with_steps(n)?))?.0);
    }
    by_n.push(last.0);
    let zero = {
        let cfg = SimConfig::new(particles, seed, fine);
        let e = simulate_ensemble(s, &ControlLaw::zero(s.k, &fine), &cfg)?;
        let a = solve_adjoint_regression(&e, s)?;
        stationarity_residual(&e, &a, s)?.norm
    };
    Ok(StationarityStudy {
        particles: ms,
        by_particles: by_m,
        steps: ns,
        by_steps: by_n,
        final_residual: last.0,
        final_residual_with_qt: last.1,
        zero_control_residual: zero,
    })
}

pub fn check_smp(s: &Scenario, o: &CheckOptions) -> Result<Verdict> {
    let m = o.particles.unwrap_or(default_particles("smp"));
    let n = o.steps.unwrap_or(s.n_steps);
    if m < 32 || n < 4 || !n.is_multiple_of(4) {
        return Err(Error::InvalidConfig(
            "smp needs at least 32 particles and a step count divisible by 4".into(),
        ));
    }
    let st = stationarity_study(s, m, n, o.seed)?;
    let passed = st.decreasing_in_particles() && st.decreasing_in_steps() && st.ratio_to_zero_control() <= 0.1;
    Ok(verdict(
        "smp",
        s,
        passed,
        serde_json::to_value(&st).expect("serializable"),
        json!({ "max_ratio_to_zero_control": 0.1, "monotone_in_particles": true, "monotone_in_steps": true }),
    ))
}

/// Base and direction of the default directional-derivative probe.
pub fn gradient_laws(s: &Scenario, g: &TimeGrid) -> (ControlLaw, ControlLaw) {
    (
        ControlLaw::zero(s.k, g),
        ControlLaw::constant(DVector::from_element(s.k, 1.0), g),
    )
}

pub fn check_gradient(s: &Scenario, o: &CheckOptions) -> Result<Verdict> {
    let cfg = o.cfg(s, default_particles("gradient"))?;
    let (base, dir) = gradient_laws(s, &cfg.grid);
    let e = simulate_ensemble(s, &base, &cfg)?;
    let a = solve_adjoint_regression(&e, s)?;
    let r = variational_derivative(s, &base, &dir, &e, &a, 1e-3)?;
    Ok(verdict(
        "gradient",
        s,
        r.relative_gap <= 0.05,
        serde_json::to_value(&r).expect("serializable"),
        json!({ "max_relative_gap": 0.05 }),
    ))
}

pub const SCALING_EPS: [f64; 4] = [0.4, 0.2, 0.1, 0.05];

pub fn check_scaling(s: &Scenario, o: &CheckOptions) -> Result<Verdict> {
    let gamma = o.gamma.unwrap_or(2.0);
    let cfg = o.cfg(s, default_particles("scaling"))?;
    let (base, dir) = gradient_laws(s, &cfg.grid);
    let r = perturbation_scaling(s, &base, &dir, &SCALING_EPS, gamma, &cfg)?;
    let passed = r.slope.is_some_and(|k| (k - gamma).abs() <= 0.15);
    Ok(verdict(
        "scaling",
        s,
        passed,
        serde_json::to_value(&r).expect("serializable"),
        json!({ "slope_tolerance": 0.15 }),
    ))
}

pub fn check_coercivity(s: &Scenario, o: &CheckOptions) -> Result<Verdict> {
    let cfg = o.cfg(s, default_particles("coercivity"))?;
    let laws = random_open_loop_laws(s, &cfg, o.count.unwrap_or(50), 8, 2.0, o.seed.wrapping_add(2));
    let r = coercivity_check(s, &laws, &cfg)?;
    let min_margin = r.entries.iter().map(|e| e.margin).fold(f64::INFINITY, f64::min);
    Ok(verdict(
        "coercivity",
        s,
        r.all_passed(),
        json!({ "delta": r.delta, "laws": r.entries.len(), "min_margin": min_margin, "entries": r.entries }),
        json!({ "std_errors_allowed": 3.0 }),
    ))
}

pub fn check_convexity(s: &Scenario) -> Result<Verdict> {
    let r = convexity_audit(s)?;
    Ok(verdict(
        "convexity",
        s,
        r.summed_passed,
        serde_json::to_value(&r).expect("serializable"),
        json!({ "psd_tolerance": "1e-12 (1 + max|entry|)" }),
    ))
}

/// Girsanov weights: `Ê[Z(T)]` against 1 and the fourth sup-moment.
pub fn check_bayes(s: &Scenario, o: &CheckOptions) -> Result<Verdict> {
    let cfg = o.cfg(s, default_particles("bayes"))?;
    let e = simulate_ensemble(s, &ControlLaw::zero(s.k, &cfg.grid), &cfg)?;
    let one = |_: usize, _: &[f64]| 1.0;
    let z = bayes_expectation(&e, Functional::Terminal(&one));
    let mom = moment_report(&e, s, 2.0, 4.0)?;
    let passed = (z.value - 1.0).abs() <= 3.0 * z.std_error && mom.sup_weight_moment.is_finite();
    Ok(verdict(
        "bayes",
        s,
        passed,
        json!({
            "mean_terminal_weight": z.value,
            "std_error": z.std_error,
            "sup_weight_fourth_moment": mom.sup_weight_moment,
            "sup_state_second_moment": mom.sup_state_moment,
            "moment_bound_ratio": mom.bound_ratio,
        }),
        json!({ "max_deviation_in_std_errors": 3.0 }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_check_is_rejected() {
        let s = Scenario::smoke();
        assert!(matches!(
            run_check("nope", &s, &CheckOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn convexity_passes_on_smoke() {
        let v = check_convexity(&Scenario::smoke()).unwrap();
        assert!(v.passed);
        assert_eq!(v.scenario_hash.len(), 64);
    }

    #[test]
    fn scaling_slope_is_exact_for_open_loop() {
        let o = CheckOptions {
            particles: Some(200),
            steps: Some(50),
            gamma: Some(4.0),
            ..Default::default()
        };
        let v = check_scaling(&Scenario::smoke(), &o).unwrap();
        assert!(v.passed);
        let slope = v.measured["slope"].as_f64().unwrap();
        assert!((slope - 4.0).abs() < 1e-9);
    }
}
