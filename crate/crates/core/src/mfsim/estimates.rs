//! Empirical moment bounds, perturbation scaling and Bayes-weighted
//! expectations computed from simulated ensembles.

use serde::Serialize;

use super::{simulate_ensemble, ControlLaw, EnsemblePath, SimConfig};
use crate::error::{Error, Result};
use crate::linalg::norm_sq;
use crate::model::Scenario;

/// Empirical a-priori moment estimates of one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub beta: f64,
    pub alpha: f64,
    /// `Ê[sup_t |x(t)|^β]`
    pub sup_state_moment: f64,
    pub sup_state_std_error: f64,
    /// `Ê[sup_t Z(t)^α]`
    pub sup_weight_moment: f64,
    pub sup_weight_std_error: f64,
    /// `Ê[(∫|u|² dt)^{β/2}]`
    pub control_energy_moment: f64,
    /// `Ê[sup|x|^β] / (1 + |x0|^β + Ê[(∫|u|²dt)^{β/2}])`
    pub bound_ratio: f64,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Sup-moments of the state and of the Girsanov weight, and the ratio of the
/// state moment to its a-priori bound.
pub fn moment_report(e: &EnsemblePath, s: &Scenario, beta: f64, alpha: f64) -> Result<MomentReport> {
    if beta != 2.0 && beta != 4.0 {
        return Err(Error::InvalidConfig(format!("beta must be 2 or 4, got {beta}")));
    }
    if !(alpha >= 2.0) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 2, got {alpha}")));
    }
    let dt = e.grid.dt();
    let steps = e.n_steps();
    let mp = e.n_particles;
    let mut sup_x = vec![0.0f64; mp];
    let mut sup_z = vec![0.0f64; mp];
    let mut energy = vec![0.0f64; mp];
    for j in 0..=steps {
        for i in 0..mp {
            sup_x[i] = sup_x[i].max(norm_sq(e.x_at(j, i)).sqrt());
            sup_z[i] = sup_z[i].max(e.z_at(j, i).abs());
            if j < steps {
                energy[i] += norm_sq(e.u_at(j, i)) * dt;
            }
        }
    }
    let xb: Vec<f64> = sup_x.iter().map(|v| v.powf(beta)).collect();
    let za: Vec<f64> = sup_z.iter().map(|v| v.powf(alpha)).collect();
    let eb: Vec<f64> = energy.iter().map(|v| v.powf(beta / 2.0)).collect();
    let (sx, sx_se) = mean_and_se(&xb);
    let (sz, sz_se) = mean_and_se(&za);
    let (en, _) = mean_and_se(&eb);
    let x0_b = norm_sq(s.x0.as_slice()).sqrt().powf(beta);
    Ok(MomentReport {
        beta,
        alpha,
        sup_state_moment: sx,
        sup_state_std_error: sx_se,
        sup_weight_moment: sz,
        sup_weight_std_error: sz_se,
        control_energy_moment: en,
        bound_ratio: sx / (1.0 + x0_b + en),
    })
}

/// Scaling of the state/weight perturbation in the control perturbation size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub gamma: f64,
    pub eps: Vec<f64>,
    /// `Ê[sup|x^ε − x̄|^γ] + Ê[sup|Z^ε − Z̄|^γ]` per ε.
    pub deviation: Vec<f64>,
    /// Least-squares slope of `log D` against `log ε`; `None` when every
    /// deviation vanishes.
    pub slope: Option<f64>,
}

/// Measures how the γ-moment of the state and weight deviations scales with
/// ε for the controls `base + ε (dir − base)`, reusing the same noise for
/// every run.
pub fn perturbation_scaling(
    s: &Scenario,
    base: &ControlLaw,
    dir: &ControlLaw,
    eps_list: &[f64],
    gamma: f64,
    cfg: &SimConfig,
) -> Result<ScalingReport> {
    if !(2.0..=4.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("gamma must lie in [2, 4], got {gamma}")));
    }
    if let Some(bad) = eps_list.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
        return Err(Error::InvalidConfig(format!("eps values must lie in (0, 1], got {bad}")));
    }
    let mut distinct = eps_list.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidConfig("need at least 3 distinct eps values".into()));
    }
    if !base.is_open_loop() || !dir.is_open_loop() {
        return Err(Error::InvalidConfig("perturbation scaling needs open-loop laws".into()));
    }

    let reference = simulate_ensemble(s, base, cfg)?;
    let mut deviation = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let law = base.interpolate(dir, eps)?;
        let pert = simulate_ensemble(s, &law, cfg)?;
        deviation.push(sup_deviation_moment(&reference, &pert, gamma));
    }

    let slope = if deviation.iter().all(|d| *d > 0.0) {
        let pts: Vec<(f64, f64)> = eps_list.iter().zip(&deviation).map(|(e, d)| (e.ln(), d.ln())).collect();
        Some(ls_slope(&pts))
    } else {
        None
    };
    Ok(ScalingReport {
        gamma,
        eps: eps_list.to_vec(),
        deviation,
        slope,
    })
}

fn sup_deviation_moment(a: &EnsemblePath, b: &EnsemblePath, gamma: f64) -> f64 {
    let mp = a.n_particles;
    let mut sup_x = vec![0.0f64; mp];
    let mut sup_z = vec![0.0f64; mp];
    for j in 0..=a.n_steps() {
        for i in 0..mp {
            let d: f64 = a
                .x_at(j, i)
                .iter()
                .zip(b.x_at(j, i))
                .map(|(p, q)| (p - q).powi(2))
                .sum();
            sup_x[i] = sup_x[i].max(d.sqrt());
            sup_z[i] = sup_z[i].max((a.z_at(j, i) - b.z_at(j, i)).abs());
        }
    }
    let inv = 1.0 / mp as f64;
    sup_x.iter().map(|v| v.powf(gamma)).sum::<f64>() * inv + sup_z.iter().map(|v| v.powf(gamma)).sum::<f64>() * inv
}

fn ls_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Per-particle functional for Bayes-weighted expectations.
pub enum Functional<'a> {
    /// `φ_i = f(i, x_i(T))`
    Terminal(&'a dyn Fn(usize, &[f64]) -> f64),
    /// `φ_i(t_j) = f(j, i, x_i(t_j), u_i(t_j))`, integrated over `[0, T)`.
    Running(&'a dyn Fn(usize, usize, &[f64], &[f64]) -> f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Reference-measure estimate `Ê[Z φ]` of an expectation under the
/// observation-dependent measure.
pub fn bayes_expectation(e: &EnsemblePath, phi: Functional<'_>) -> BayesEstimate {
    let mp = e.n_particles;
    let steps = e.n_steps();
    let dt = e.grid.dt();
    let per: Vec<f64> = match phi {
        Functional::Terminal(f) => (0..mp).map(|i| e.z_at(steps, i) * f(i, e.x_at(steps, i))).collect(),
        Functional::Running(f) => (0..mp)
            .map(|i| {
                (0..steps)
                    .map(|j| e.z_at(j, i) * f(j, i, e.x_at(j, i), e.u_at(j, i)) * dt)
                    .sum()
            })
            .collect(),
    };
    let (value, std_error) = mean_and_se(&per);
    BayesEstimate { value, std_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientPath;
    use nalgebra::DVector;

    fn quiet_smoke() -> Scenario {
        let mut s = Scenario::smoke();
        for p in [&mut s.coeffs.c1, &mut s.coeffs.c2, &mut s.coeffs.d2, &mut s.coeffs.a1, &mut s.coeffs.a2] {
            *p = CoefficientPath::scalar(0.0);
        }
        s.x0 = DVector::from_element(1, -1.5);
        s
    }

    #[test]
    fn frozen_state_moment_is_exact() {
        let s = quiet_smoke();
        let g = s.grid_with_steps(20).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(10, 0, g)).unwrap();
        for beta in [2.0, 4.0] {
            let r = moment_report(&e, &s, beta, 2.0).unwrap();
            assert_eq!(r.sup_state_moment, 1.5f64.powf(beta));
            assert!(r.bound_ratio.is_finite());
        }
    }

    #[test]
    fn unit_weights_have_unit_moment() {
        let mut s = Scenario::smoke();
        s.coeffs.h = CoefficientPath::scalar(0.0);
        let g = s.grid_with_steps(20).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(10, 0, g)).unwrap();
        assert_eq!(moment_report(&e, &s, 2.0, 3.5).unwrap().sup_weight_moment, 1.0);
        assert!(moment_report(&e, &s, 3.0, 2.0).is_err());
        assert!(moment_report(&e, &s, 2.0, 1.0).is_err());
    }

    #[test]
    fn zero_direction_gives_zero_deviation() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(20).unwrap();
        let base = ControlLaw::constant(DVector::from_element(1, 0.4), &g);
        let r = perturbation_scaling(&s, &base, &base, &[0.5, 0.25, 0.1], 2.0, &SimConfig::new(16, 1, g)).unwrap();
        assert!(r.deviation.iter().all(|d| *d == 0.0));
        assert_eq!(r.slope, None);
    }

    #[test]
    fn scaling_rejects_bad_input() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(10).unwrap();
        let base = ControlLaw::zero(1, &g);
        let cfg = SimConfig::new(4, 1, g);
        assert!(perturbation_scaling(&s, &base, &base, &[0.5, 0.0, 0.1], 2.0, &cfg).is_err());
        assert!(perturbation_scaling(&s, &base, &base, &[0.5, -0.2, 0.1], 2.0, &cfg).is_err());
        assert!(perturbation_scaling(&s, &base, &base, &[0.5, 0.5, 0.1], 2.0, &cfg).is_err());
        assert!(perturbation_scaling(&s, &base, &base, &[0.5, 0.2, 0.1], 5.0, &cfg).is_err());
    }

    #[test]
    fn unit_weights_reduce_to_plain_mean() {
        let mut s = Scenario::smoke();
        s.coeffs.h = CoefficientPath::scalar(0.0);
        let g = s.grid_with_steps(20).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(100, 4, g)).unwrap();
        let f = |_: usize, x: &[f64]| x[0] * x[0] + 1.0;
        let plain = (0..100).map(|i| f(i, e.x_at(20, i))).sum::<f64>() / 100.0;
        let b = bayes_expectation(&e, Functional::Terminal(&f));
        assert!((b.value - plain).abs() < 1e-14);
    }

    #[test]
    fn weights_average_to_one() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(50).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(4000, 8, g)).unwrap();
        let one = |_: usize, _: &[f64]| 1.0;
        let b = bayes_expectation(&e, Functional::Terminal(&one));
        assert!((b.value - 1.0).abs() <= 3.0 * b.std_error, "{b:?}");
    }
}
