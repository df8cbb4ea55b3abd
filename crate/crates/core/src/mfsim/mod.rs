//! Interacting-particle Euler–Maruyama simulation of the controlled
//! mean-field state, its observation-driven conditional mean and the Girsanov
//! weight.
//!
//! All sampling happens under the reference measure, where the state noise `W`
//! and the observation `Y` are independent scalar Brownian motions. Per step
//! and particle:
//!
//! ```text
//! g̃ = F1 x + F2 m + G1 u + G2 ū
//! x ← x + (A1 x + A2 m + B1 u + B2 ū − h g̃) dt + (C1 x + C2 m + D1 u + D2 ū) dW + g̃ dY
//! x̂ ← x̂ + (A1 x̂ + A2 m + B1 u + B2 ū − h ĝ) dt + ĝ dY,   ĝ = g̃ with x → x̂
//! log Z ← log Z + h dY − ½ h² dt
//! ```
//!
//! `m` and `ū` are ensemble means of the time-`t_j` states and controls,
//! computed before the step. Means are summed sequentially in particle order,
//! so results do not depend on the rayon pool size.

mod estimates;
mod export;

pub use estimates::{
    bayes_expectation, moment_report, perturbation_scaling, BayesEstimate, Functional, MomentReport,
    ScalingReport,
};
pub use export::{read_binary, write_binary, write_csv, BINARY_MAGIC, BINARY_VERSION};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::gemv_acc;
use crate::model::{Scenario, TimeGrid};
use crate::rng::ParticleStream;

/// Particle count, seed and grid of one simulation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n_particles: usize,
    pub seed: u64,
    pub grid: TimeGrid,
}

impl SimConfig {
    pub fn new(n_particles: usize, seed: u64, grid: TimeGrid) -> Self {
        Self { n_particles, seed, grid }
    }
}

/// A control adapted to the observation filtration.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlLaw {
    /// Deterministic control, one k-vector per grid point (the value at the
    /// terminal point is unused and may be omitted).
    OpenLoop { u: Vec<DVector<f64>> },
    /// Affine feedback on the conditional mean:
    /// `u_i = gain_dev (x̂_i − m) + gain_mean m`, gains given per grid point.
    Feedback {
        gain_dev: Vec<DMatrix<f64>>,
        gain_mean: Vec<DMatrix<f64>>,
    },
}

impl ControlLaw {
    pub fn zero(k: usize, grid: &TimeGrid) -> Self {
        Self::constant(DVector::zeros(k), grid)
    }

    pub fn constant(u: DVector<f64>, grid: &TimeGrid) -> Self {
        ControlLaw::OpenLoop {
            u: vec![u; grid.n_steps() + 1],
        }
    }

    /// `self + eps (other − self)` for two open-loop laws.
    pub fn interpolate(&self, other: &ControlLaw, eps: f64) -> Result<ControlLaw> {
        match (self, other) {
            (ControlLaw::OpenLoop { u: a }, ControlLaw::OpenLoop { u: b }) if a.len() == b.len() => {
                Ok(ControlLaw::OpenLoop {
                    u: a.iter().zip(b).map(|(x, y)| x + (y - x) * eps).collect(),
                })
            }
            _ => Err(Error::Shape("interpolation needs two open-loop laws of equal length".into())),
        }
    }

    /// Pointwise difference of two open-loop paths.
    pub fn open_loop_difference(&self, other: &ControlLaw) -> Result<Vec<DVector<f64>>> {
        match (self, other) {
            (ControlLaw::OpenLoop { u: a }, ControlLaw::OpenLoop { u: b }) if a.len() == b.len() => {
                Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
            }
            _ => Err(Error::Shape("difference needs two open-loop laws of equal length".into())),
        }
    }

    pub fn is_open_loop(&self) -> bool {
        matches!(self, ControlLaw::OpenLoop { .. })
    }

    fn check(&self, n: usize, k: usize, grid: &TimeGrid) -> Result<()> {
        let steps = grid.n_steps();
        match self {
            ControlLaw::OpenLoop { u } => {
                if u.len() != steps && u.len() != steps + 1 {
                    return Err(Error::Shape(format!(
                        "open-loop path has {} points, grid needs {} or {}",
                        u.len(),
                        steps,
                        steps + 1
                    )));
                }
                if let Some(bad) = u.iter().position(|v| v.len() != k) {
                    return Err(Error::Shape(format!("open-loop control at index {bad} is not a {k}-vector")));
                }
                if u.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                    return Err(Error::Shape("open-loop path has non-finite entries".into()));
                }
            }
            ControlLaw::Feedback { gain_dev, gain_mean } => {
                for (name, gains) in [("gain_dev", gain_dev), ("gain_mean", gain_mean)] {
                    if gains.len() != steps + 1 {
                        return Err(Error::Shape(format!(
                            "{name} has {} points, grid needs {}",
                            gains.len(),
                            steps + 1
                        )));
                    }
                    if gains.iter().any(|g| (g.nrows(), g.ncols()) != (k, n)) {
                        return Err(Error::Shape(format!("{name} gains must be {k}x{n}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Time-indexed particle arrays of one run.
///
/// Layouts are time-major: `x[(j·M + i)·n + d]`, `z[j·M + i]`,
/// `u[(j·M + i)·k + c]` (no entry at the terminal time), `dw[j·M + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePath {
    pub n: usize,
    pub k: usize,
    pub n_particles: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    /// Ensemble mean of `x`, `(n_steps + 1) × n`.
    pub m: Vec<f64>,
    /// Ensemble mean of `u`, `n_steps × k`.
    pub ubar: Vec<f64>,
    pub dw: Vec<f64>,
    pub dy: Vec<f64>,
}

impl EnsemblePath {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn x_at(&self, j: usize, i: usize) -> &[f64] {
        let o = (j * self.n_particles + i) * self.n;
        &self.x[o..o + self.n]
    }

    pub fn xhat_at(&self, j: usize, i: usize) -> &[f64] {
        let o = (j * self.n_particles + i) * self.n;
        &self.xhat[o..o + self.n]
    }

    pub fn u_at(&self, j: usize, i: usize) -> &[f64] {
        let o = (j * self.n_particles + i) * self.k;
        &self.u[o..o + self.k]
    }

    pub fn z_at(&self, j: usize, i: usize) -> f64 {
        self.z[j * self.n_particles + i]
    }

    pub fn dw_at(&self, j: usize, i: usize) -> f64 {
        self.dw[j * self.n_particles + i]
    }

    pub fn dy_at(&self, j: usize, i: usize) -> f64 {
        self.dy[j * self.n_particles + i]
    }

    pub fn m_at(&self, j: usize) -> &[f64] {
        &self.m[j * self.n..(j + 1) * self.n]
    }

    pub fn ubar_at(&self, j: usize) -> &[f64] {
        &self.ubar[j * self.k..(j + 1) * self.k]
    }

    /// All particle states at time index `j`, `M × n` row-major.
    pub fn x_step(&self, j: usize) -> &[f64] {
        let w = self.n_particles * self.n;
        &self.x[j * w..(j + 1) * w]
    }

    pub fn xhat_step(&self, j: usize) -> &[f64] {
        let w = self.n_particles * self.n;
        &self.xhat[j * w..(j + 1) * w]
    }

    pub fn u_step(&self, j: usize) -> &[f64] {
        let w = self.n_particles * self.k;
        &self.u[j * w..(j + 1) * w]
    }

    pub fn z_step(&self, j: usize) -> &[f64] {
        &self.z[j * self.n_particles..(j + 1) * self.n_particles]
    }

    /// Ensemble mean of `xhat` at time index `j`.
    pub fn xhat_mean(&self, j: usize) -> Vec<f64> {
        mean_rows(self.xhat_step(j), self.n)
    }
}

/// Column means of a row-major `rows × width` block, summed in row order.
pub(crate) fn mean_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    let rows = data.len() / width.max(1);
    for row in data.chunks_exact(width) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let inv = 1.0 / rows as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

struct Scratch {
    gt: Vec<f64>,
    drift: Vec<f64>,
    g: Vec<f64>,
}

/// Simulates `cfg.n_particles` interacting copies of the controlled system.
pub fn simulate_ensemble(s: &Scenario, law: &ControlLaw, cfg: &SimConfig) -> Result<EnsemblePath> {
    let (n, k) = (s.n, s.k);
    let mp = cfg.n_particles;
    if mp < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 particles, got {mp}")));
    }
    let grid = cfg.grid;
    s.check_grid(&grid)?;
    law.check(n, k, &grid)?;
    let steps = grid.n_steps();
    let dt = grid.dt();
    let sqdt = dt.sqrt();

    let mut x = vec![0.0; (steps + 1) * mp * n];
    let mut xhat = vec![0.0; (steps + 1) * mp * n];
    let mut z = vec![0.0; (steps + 1) * mp];
    let mut u = vec![0.0; steps * mp * k];
    let mut m = vec![0.0; (steps + 1) * n];
    let mut ubar = vec![0.0; steps * k];
    let mut dw = vec![0.0; steps * mp];
    let mut dy = vec![0.0; steps * mp];
    let mut log_z = vec![0.0; mp];

    for i in 0..mp {
        x[i * n..(i + 1) * n].copy_from_slice(s.x0.as_slice());
        xhat[i * n..(i + 1) * n].copy_from_slice(s.x0.as_slice());
        z[i] = 1.0;
    }
    m[..n].copy_from_slice(s.x0.as_slice());

    let mut streams: Vec<ParticleStream> = (0..mp).map(|i| ParticleStream::new(cfg.seed, i)).collect();

    let w = mp * n;
    for j in 0..steps {
        let c = s.step(&grid, j)?;
        let m_j = mean_rows(&x[j * w..(j + 1) * w], n);
        m[j * n..(j + 1) * n].copy_from_slice(&m_j);

        // controls at t_j
        {
            let u_row = &mut u[j * mp * k..(j + 1) * mp * k];
            match law {
                ControlLaw::OpenLoop { u: path } => {
                    for ui in u_row.chunks_exact_mut(k) {
                        ui.copy_from_slice(path[j].as_slice());
                    }
                }
                ControlLaw::Feedback { gain_dev, gain_mean } => {
                    let mut base = vec![0.0; k];
                    gemv_acc(&gain_mean[j], &m_j, 1.0, &mut base);
                    let xh_row = &xhat[j * w..(j + 1) * w];
                    u_row
                        .par_chunks_mut(k)
                        .zip(xh_row.par_chunks(n))
                        .for_each(|(ui, xh)| {
                            ui.copy_from_slice(&base);
                            let dev: Vec<f64> = xh.iter().zip(&m_j).map(|(a, b)| a - b).collect();
                            gemv_acc(&gain_dev[j], &dev, 1.0, ui);
                        });
                }
            }
        }
        let ub = mean_rows(&u[j * mp * k..(j + 1) * mp * k], k);
        ubar[j * k..(j + 1) * k].copy_from_slice(&ub);

        // parts shared by every particle
        let mut com_a = vec![0.0; n];
        gemv_acc(c.a2, &m_j, 1.0, &mut com_a);
        gemv_acc(c.b2, &ub, 1.0, &mut com_a);
        let mut com_c = vec![0.0; n];
        gemv_acc(c.c2, &m_j, 1.0, &mut com_c);
        gemv_acc(c.d2, &ub, 1.0, &mut com_c);
        let mut com_f = vec![0.0; n];
        gemv_acc(c.f2, &m_j, 1.0, &mut com_f);
        gemv_acc(c.g2, &ub, 1.0, &mut com_f);
        let h = c.h;

        let (x_prev, x_next) = x.split_at_mut((j + 1) * w);
        let (xh_prev, xh_next) = xhat.split_at_mut((j + 1) * w);
        let x_prev = &x_prev[j * w..];
        let xh_prev = &xh_prev[j * w..];
        let x_next = &mut x_next[..w];
        let xh_next = &mut xh_next[..w];
        let z_next = &mut z[(j + 1) * mp..(j + 2) * mp];
        let u_row = &u[j * mp * k..(j + 1) * mp * k];
        let dw_row = &mut dw[j * mp..(j + 1) * mp];
        let dy_row = &mut dy[j * mp..(j + 1) * mp];

        (
            x_next.par_chunks_mut(n),
            xh_next.par_chunks_mut(n),
            x_prev.par_chunks(n),
            xh_prev.par_chunks(n),
            u_row.par_chunks(k),
            z_next.par_iter_mut(),
            log_z.par_iter_mut(),
            streams.par_iter_mut(),
            dw_row.par_iter_mut(),
            dy_row.par_iter_mut(),
        )
            .into_par_iter()
            .for_each_init(
                || Scratch {
                    gt: vec![0.0; n],
                    drift: vec![0.0; n],
                    g: vec![0.0; n],
                },
                |scr, (xn, xhn, xp, xhp, ui, zn, lz, stream, dwi, dyi)| {
                    let (e1, e2) = stream.next_pair();
                    let (d_w, d_y) = (e1 * sqdt, e2 * sqdt);
                    *dwi = d_w;
                    *dyi = d_y;

                    // state
                    scr.gt.copy_from_slice(&com_f);
                    gemv_acc(c.f1, xp, 1.0, &mut scr.gt);
                    gemv_acc(c.g1, ui, 1.0, &mut scr.gt);
                    scr.drift.copy_from_slice(&com_a);
                    gemv_acc(c.a1, xp, 1.0, &mut scr.drift);
                    gemv_acc(c.b1, ui, 1.0, &mut scr.drift);
                    scr.g.copy_from_slice(&com_c);
                    gemv_acc(c.c1, xp, 1.0, &mut scr.g);
                    gemv_acc(c.d1, ui, 1.0, &mut scr.g);
                    for d in 0..n {
                        xn[d] = xp[d] + (scr.drift[d] - h * scr.gt[d]) * dt + scr.g[d] * d_w + scr.gt[d] * d_y;
                    }

                    // conditional mean
                    scr.gt.copy_from_slice(&com_f);
                    gemv_acc(c.f1, xhp, 1.0, &mut scr.gt);
                    gemv_acc(c.g1, ui, 1.0, &mut scr.gt);
                    scr.drift.copy_from_slice(&com_a);
                    gemv_acc(c.a1, xhp, 1.0, &mut scr.drift);
                    gemv_acc(c.b1, ui, 1.0, &mut scr.drift);
                    for d in 0..n {
                        xhn[d] = xhp[d] + (scr.drift[d] - h * scr.gt[d]) * dt + scr.gt[d] * d_y;
                    }

                    *lz += h * d_y - 0.5 * h * h * dt;
                    *zn = lz.exp();
                },
            );

        let fresh = &x[(j + 1) * w..(j + 2) * w];
        if fresh.iter().chain(&xhat[(j + 1) * w..(j + 2) * w]).any(|v| !v.is_finite())
            || z[(j + 1) * mp..(j + 2) * mp].iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite { step: j + 1 });
        }
    }
    let m_t = mean_rows(&x[steps * w..(steps + 1) * w], n);
    m[steps * n..].copy_from_slice(&m_t);

    Ok(EnsemblePath {
        n,
        k,
        n_particles: mp,
        seed: cfg.seed,
        grid,
        x,
        xhat,
        z,
        u,
        m,
        ubar,
        dw,
        dy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientPath, Coefficients};

    fn scalar_scenario(a1: f64, c1: f64, h: f64) -> Scenario {
        let mut coeffs = Coefficients::zeros(1, 1);
        coeffs.a1 = CoefficientPath::scalar(a1);
        coeffs.c1 = CoefficientPath::scalar(c1);
        coeffs.h = CoefficientPath::scalar(h);
        coeffs.n1 = CoefficientPath::scalar(1.0);
        Scenario {
            n: 1,
            k: 1,
            horizon: 1.0,
            n_steps: 100,
            x0: DVector::from_element(1, 1.0),
            coeffs,
            delta: 1.0,
        }
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let s = scalar_scenario(0.0, 0.0, 0.7);
        let g = s.grid();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(50, 3, g)).unwrap();
        assert!(e.x.iter().all(|&v| v == 1.0));
        assert!(e.xhat.iter().all(|&v| v == 1.0));
        assert!(e.m.iter().all(|&v| v == 1.0));
        // Z is the exact exponential of the observation integral
        for i in 0..e.n_particles {
            let int: f64 = (0..g.n_steps()).map(|j| e.dy_at(j, i)).sum();
            let expect = (0.7 * int - 0.5 * 0.49 * g.horizon()).exp();
            assert!((e.z_at(g.n_steps(), i) - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn zero_observation_drift_keeps_unit_weights() {
        let s = Scenario::smoke();
        let mut s = s;
        s.coeffs.h = CoefficientPath::scalar(0.0);
        let g = s.grid_with_steps(50).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(20, 1, g)).unwrap();
        assert!(e.z.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_decay_matches_closed_form_at_order_dt() {
        let s = scalar_scenario(-1.0, 0.0, 0.0);
        let mut errs = vec![];
        for steps in [50, 100, 200] {
            let g = s.grid_with_steps(steps).unwrap();
            let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(2, 0, g)).unwrap();
            let err = (e.m_at(steps)[0] - (-1.0f64).exp()).abs();
            assert!(err <= g.dt(), "err {err} at dt {}", g.dt());
            errs.push(err);
        }
        // first order: error halves with dt
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn stored_means_match_recomputed() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(40).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::constant(DVector::from_element(1, 0.3), &g), &SimConfig::new(64, 9, g))
            .unwrap();
        for j in 0..=40 {
            let rec = mean_rows(e.x_step(j), 1)[0];
            assert!((rec - e.m_at(j)[0]).abs() <= 1e-12 * (1.0 + rec.abs()));
            assert_eq!(e.z_at(0, 5), 1.0);
        }
        for j in 0..40 {
            assert!((e.ubar_at(j)[0] - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_single_particle_and_bad_law() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(10).unwrap();
        assert!(matches!(
            simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(1, 0, g)),
            Err(Error::InvalidConfig(_))
        ));
        let short = ControlLaw::OpenLoop { u: vec![DVector::zeros(1); 3] };
        assert!(matches!(
            simulate_ensemble(&s, &short, &SimConfig::new(4, 0, g)),
            Err(Error::Shape(_))
        ));
        let wide = ControlLaw::OpenLoop { u: vec![DVector::zeros(2); 11] };
        assert!(simulate_ensemble(&s, &wide, &SimConfig::new(4, 0, g)).is_err());
    }

    #[test]
    fn overflow_reports_step() {
        let s = scalar_scenario(1.0e6, 0.0, 0.0);
        let g = s.grid_with_steps(100).unwrap();
        match simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(2, 0, g)) {
            Err(Error::NonFinite { step }) => assert!(step > 1 && step <= 100),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn identical_inputs_give_identical_paths() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(20).unwrap();
        let law = ControlLaw::constant(DVector::from_element(1, -0.2), &g);
        let cfg = SimConfig::new(33, 7, g);
        let a = simulate_ensemble(&s, &law, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_ensemble(&s, &law, &cfg)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn increments_are_counter_addressed() {
        let s = Scenario::smoke();
        let g = s.grid_with_steps(10).unwrap();
        let e = simulate_ensemble(&s, &ControlLaw::zero(1, &g), &SimConfig::new(5, 11, g)).unwrap();
        let sq = g.dt().sqrt();
        for (i, j) in [(0, 0), (4, 9), (2, 5)] {
            let (a, b) = crate::rng::normal_pair(11, i, j);
            assert_eq!(e.dw_at(j, i), a * sq);
            assert_eq!(e.dy_at(j, i), b * sq);
        }
    }
}
