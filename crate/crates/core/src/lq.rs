//! Feedback law from the Riccati gains, Monte Carlo cost evaluation and the
//! cost-level optimality checks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;
use crate::linalg::quad_form;
use crate::mfsim::{mean_rows, simulate_ensemble, ControlLaw, EnsemblePath, SimConfig};
use crate::model::{scenario_hash, Scenario};
use crate::riccati::RiccatiSolution;

/// Number of contiguous particle batches behind every standard error.
pub const N_BATCHES: usize = 32;

/// `u_i = −K0 (x̂_i − m) − K1 m`.
pub fn build_feedback_law(sol: &RiccatiSolution) -> ControlLaw {
    ControlLaw::Feedback {
        gain_dev: sol.k0.iter().map(|k| -k).collect(),
        gain_mean: sol.k1.iter().map(|k| -k).collect(),
    }
}

/// Feedback law with time-constant offsets added to both gains.
pub fn perturbed_feedback_law(sol: &RiccatiSolution, d0: &DMatrix<f64>, d1: &DMatrix<f64>) -> ControlLaw {
    ControlLaw::Feedback {
        gain_dev: sol.k0.iter().map(|k| -(k + d0)).collect(),
        gain_mean: sol.k1.iter().map(|k| -(k + d1)).collect(),
    }
}

/// Cost split into its six quadratic contributions.
///
/// For the raw form the components are `Ê⟨Q1x,x⟩`, `⟨Q2m,m⟩`, `Ê⟨N1u,u⟩`,
/// `⟨N2ū,ū⟩`, `Ê⟨M1x,x⟩`, `⟨M2m,m⟩` (time-integrated where running). For the
/// decomposed form the first of each pair acts on deviations from the mean
/// and the second carries the summed weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub running_state: f64,
    pub running_state_mean: f64,
    pub running_control: f64,
    pub running_control_mean: f64,
    pub terminal_state: f64,
    pub terminal_state_mean: f64,
    pub total: f64,
    pub std_error: f64,
}

#[derive(Clone, Copy, Default)]
struct Parts([f64; 6]);

impl Parts {
    fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Form {
    Raw,
    Decomposed,
}

/// Cost parts over particles `lo..hi`, using that range's own means.
fn parts_over(e: &EnsemblePath, s: &Scenario, lo: usize, hi: usize, form: Form) -> Result<Parts> {
    let (n, k) = (e.n, e.k);
    let g = &e.grid;
    let dt = g.dt();
    let steps = e.n_steps();
    let cnt = (hi - lo) as f64;
    let full = lo == 0 && hi == e.n_particles;

    let at_step = |j: usize, terminal: bool| -> Result<[f64; 4]> {
        let xs = &e.x_step(j)[lo * n..hi * n];
        let m = if full { e.m_at(j).to_vec() } else { mean_rows(xs, n) };
        let c = s.step(g, j)?;
        let (w_dev, w_mean) = if terminal {
            (s.coeffs.m1.clone(), s.coeffs.m2.clone())
        } else {
            (c.q1.clone(), c.q2.clone())
        };
        let mut out = [0.0; 4];
        match form {
            Form::Raw => {
                out[0] = xs.chunks_exact(n).map(|x| quad_form(&w_dev, x)).sum::<f64>() / cnt;
                out[1] = quad_form(&w_mean, &m);
            }
            Form::Decomposed => {
                let mut dev = vec![0.0; n];
                out[0] = xs
                    .chunks_exact(n)
                    .map(|x| {
                        for d in 0..n {
                            dev[d] = x[d] - m[d];
                        }
                        quad_form(&w_dev, &dev)
                    })
                    .sum::<f64>()
                    / cnt;
                out[1] = quad_form(&(w_dev + w_mean), &m);
            }
        }
        if !terminal {
            let us = &e.u_step(j)[lo * k..hi * k];
            let ub = if full { e.ubar_at(j).to_vec() } else { mean_rows(us, k) };
            match form {
                Form::Raw => {
                    out[2] = us.chunks_exact(k).map(|u| quad_form(c.n1, u)).sum::<f64>() / cnt;
                    out[3] = quad_form(c.n2, &ub);
                }
                Form::Decomposed => {
                    let mut dev = vec![0.0; k];
                    out[2] = us
                        .chunks_exact(k)
                        .map(|u| {
                            for d in 0..k {
                                dev[d] = u[d] - ub[d];
                            }
                            quad_form(c.n1, &dev)
                        })
                        .sum::<f64>()
                        / cnt;
                    out[3] = quad_form(&(c.n1 + c.n2), &ub);
                }
            }
        }
        Ok(out)
    };

    let per_step: Vec<[f64; 4]> = (0..steps).into_par_iter().map(|j| at_step(j, false)).collect::<Result<_>>()?;
    let mut parts = Parts::default();
    for r in &per_step {
        for (p, v) in parts.0.iter_mut().zip(r) {
            *p += v * dt;
        }
    }
    let term = at_step(steps, true)?;
    parts.0[4] = term[0];
    parts.0[5] = term[1];
    Ok(parts)
}

fn batch_ranges(m: usize) -> Vec<(usize, usize)> {
    let b = N_BATCHES.min(m / 2).max(2).min(m);
    (0..b).map(|i| (i * m / b, (i + 1) * m / b)).collect()
}

fn batch_std_error(values: &[f64]) -> f64 {
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0);
    (var / b).sqrt()
}

fn breakdown(e: &EnsemblePath, s: &Scenario, form: Form) -> Result<CostBreakdown> {
    let p = parts_over(e, s, 0, e.n_particles, form)?;
    let batches: Vec<f64> = batch_ranges(e.n_particles)
        .into_iter()
        .map(|(lo, hi)| parts_over(e, s, lo, hi, form).map(|b| b.total()))
        .collect::<Result<_>>()?;
    Ok(CostBreakdown {
        running_state: p.0[0],
        running_state_mean: p.0[1],
        running_control: p.0[2],
        running_control_mean: p.0[3],
        terminal_state: p.0[4],
        terminal_state_mean: p.0[5],
        total: p.total(),
        std_error: batch_std_error(&batches),
    })
}

/// Empirical cost in the raw form, running terms by the left-endpoint rule.
pub fn evaluate_cost(e: &EnsemblePath, s: &Scenario) -> Result<CostBreakdown> {
    breakdown(e, s, Form::Raw)
}

/// Empirical cost in the deviation/mean split.
pub fn decomposed_cost(e: &EnsemblePath, s: &Scenario) -> Result<CostBreakdown> {
    breakdown(e, s, Form::Decomposed)
}

/// `⟨Π(0) x0, x0⟩`
pub fn optimal_value(sol: &RiccatiSolution, x0: &[f64]) -> f64 {
    quad_form(&sol.pi[0], x0)
}

/// JSON form of a cost breakdown tagged with the scenario hash.
pub fn cost_json(c: &CostBreakdown, s: &Scenario) -> Value {
    json!({
        "scenario_hash": scenario_hash(s),
        "running_state": c.running_state,
        "running_state_mean": c.running_state_mean,
        "running_control": c.running_control,
        "running_control_mean": c.running_control_mean,
        "terminal_state": c.terminal_state,
        "terminal_state_mean": c.terminal_state_mean,
        "total": c.total,
        "std_error": c.std_error,
    })
}

/// `Ê∫|u|² dt`
pub fn control_energy(e: &EnsemblePath) -> f64 {
    let dt = e.grid.dt();
    let mp = e.n_particles as f64;
    (0..e.n_steps())
        .map(|j| e.u_step(j).iter().map(|v| v * v).sum::<f64>() / mp * dt)
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct CoercivityEntry {
    pub law: usize,
    pub cost: f64,
    pub std_error: f64,
    pub energy: f64,
    /// `J + 3 SE − δ Ê∫|u|²dt`
    pub margin: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoercivityReport {
    pub delta: f64,
    pub entries: Vec<CoercivityEntry>,
}

impl CoercivityReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

/// Checks `J(u) + 3 SE ≥ δ Ê∫|u|²dt` for every law on common noise.
pub fn coercivity_check(s: &Scenario, laws: &[ControlLaw], cfg: &SimConfig) -> Result<CoercivityReport> {
    let mut entries = Vec::with_capacity(laws.len());
    for (i, law) in laws.iter().enumerate() {
        let e = simulate_ensemble(s, law, cfg)?;
        let c = evaluate_cost(&e, s)?;
        let energy = control_energy(&e);
        let margin = c.total + 3.0 * c.std_error - s.delta * energy;
        entries.push(CoercivityEntry {
            law: i,
            cost: c.total,
            std_error: c.std_error,
            energy,
            margin,
            passed: margin >= 0.0,
        });
    }
    Ok(CoercivityReport { delta: s.delta, entries })
}

/// `count` open-loop laws with piecewise-constant values drawn uniformly from
/// `[-scale, scale]` on `pieces` equal intervals.
pub fn random_open_loop_laws(s: &Scenario, cfg: &SimConfig, count: usize, pieces: usize, scale: f64, seed: u64) -> Vec<ControlLaw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = cfg.grid.n_steps();
    let pieces = pieces.clamp(1, steps);
    (0..count)
        .map(|_| {
            let vals: Vec<nalgebra::DVector<f64>> = (0..pieces)
                .map(|_| nalgebra::DVector::from_fn(s.k, |_, _| rng.gen_range(-scale..=scale)))
                .collect();
            ControlLaw::OpenLoop {
                u: (0..=steps).map(|j| vals[(j * pieces / steps).min(pieces - 1)].clone()).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationEntry {
    pub cost: f64,
    /// `J_perturbed − J_feedback`, common noise.
    pub excess: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalOptimalityReport {
    pub eps: f64,
    pub feedback_cost: f64,
    pub feedback_std_error: f64,
    pub entries: Vec<PerturbationEntry>,
}

impl LocalOptimalityReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

/// Random unit-Frobenius `k × n` direction.
fn unit_direction(rng: &mut ChaCha8Rng, k: usize, n: usize) -> DMatrix<f64> {
    loop {
        let d = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..=1.0));
        let norm = d.norm();
        if norm > 1e-6 {
            return d / norm;
        }
    }
}

/// Compares the feedback cost with `count` laws whose gains are shifted by
/// `eps` times random unit directions, all on the same noise.
pub fn local_optimality(
    s: &Scenario,
    sol: &RiccatiSolution,
    cfg: &SimConfig,
    count: usize,
    eps: f64,
    seed: u64,
) -> Result<LocalOptimalityReport> {
    let base = evaluate_cost(&simulate_ensemble(s, &build_feedback_law(sol), cfg)?, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let d0 = unit_direction(&mut rng, s.k, s.n) * eps;
        let d1 = unit_direction(&mut rng, s.k, s.n) * eps;
        let e = simulate_ensemble(s, &perturbed_feedback_law(sol, &d0, &d1), cfg)?;
        let c = evaluate_cost(&e, s)?;
        entries.push(PerturbationEntry {
            cost: c.total,
            excess: c.total - base.total,
            passed: c.total >= base.total - 2.0 * base.std_error,
        });
    }
    Ok(LocalOptimalityReport {
        eps,
        feedback_cost: base.total,
        feedback_std_error: base.std_error,
        entries,
    })
}
