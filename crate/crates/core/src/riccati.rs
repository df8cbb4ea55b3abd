//! Backward integration of the two Riccati equations and the feedback gains.
//!
//! With `B̂ = B1 − h G1`, `Ā = A1 + A2` (and likewise for the other barred
//! sums), the variance equation is
//!
//! ```text
//! Ṗ + P A1 + A1ᵀP + C1ᵀP C1 + w Q1 − L Σ0⁻¹ Lᵀ = 0,   L  = P B̂ + C1ᵀP D1,  Σ0 = w N1 + D1ᵀP D1
//! ```
//!
//! and the mean equation, which reads the already solved `P`, is
//!
//! ```text
//! Π̇ + Π Ā + ĀᵀΠ + C̄ᵀP C̄ + w Q̄ − L̄ Σ2⁻¹ L̄ᵀ = 0,   L̄ = Π B̄ + C̄ᵀP D̄,  Σ2 = w N̄ + D̄ᵀP D̄
//! ```
//!
//! with `P(T) = M1`, `Π(T) = M1 + M2`. The weight `w` is set by
//! [`Normalization`]: `w = 1` makes `⟨Π(0)x0, x0⟩` the optimal cost of the
//! quadratic functional with no ½ factors.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize_in_place};
use crate::model::{Scenario, StepCoeffs, TimeGrid};

/// Scaling of the running weights inside the Riccati equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Normalization {
    /// Weights `Q`, `N` enter with factor 1; the value function is
    /// `⟨P(x − m), x − m⟩ + ⟨Π m, m⟩`.
    #[default]
    Unit,
    /// Weights enter as `2Q`, `2N` while the terminal data stay `M1`,
    /// `M1 + M2`. Kept for comparison only: the resulting `⟨Π(0)x0, x0⟩` is not
    /// the optimal cost.
    Doubled,
}

impl Normalization {
    pub fn weight(self) -> f64 {
        match self {
            Normalization::Unit => 1.0,
            Normalization::Doubled => 2.0,
        }
    }
}

/// Riccati paths and gains on one grid, all indexed `0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub normalization: Normalization,
    pub p: Vec<DMatrix<f64>>,
    pub pi: Vec<DMatrix<f64>>,
    pub sigma0: Vec<DMatrix<f64>>,
    pub sigma2: Vec<DMatrix<f64>>,
    pub k0: Vec<DMatrix<f64>>,
    pub k1: Vec<DMatrix<f64>>,
}

fn b_hat(c: &StepCoeffs) -> DMatrix<f64> {
    c.b1 - c.g1 * c.h
}

fn b_bar(c: &StepCoeffs) -> DMatrix<f64> {
    (c.b1 + c.b2) - (c.g1 + c.g2) * c.h
}

/// `Σ⁻¹ R` through a Cholesky factorization, checking the smallest eigenvalue
/// of `Σ` first.
fn spd_apply(sigma: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &'static str, index: usize) -> Result<DMatrix<f64>> {
    let min_eig = min_eigenvalue(sigma);
    if !(min_eig > 1e-12) {
        return Err(Error::NotPositiveDefinite { what, index, min_eig });
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { what, index, min_eig })?;
    Ok(chol.solve(rhs))
}

/// Right side `F` of `Ṗ = −F(P)`.
fn p_rhs(c: &StepCoeffs, w: f64, p: &DMatrix<f64>, index: usize) -> Result<DMatrix<f64>> {
    let ptc = p * c.c1;
    let sigma0 = c.n1 * w + c.d1.transpose() * p * c.d1;
    let l = p * b_hat(c) + c.c1.transpose() * p * c.d1;
    let s_inv_lt = spd_apply(&sigma0, &l.transpose(), "Sigma0", index)?;
    let mut f = p * c.a1 + c.a1.transpose() * p + c.c1.transpose() * ptc + c.q1 * w - l * s_inv_lt;
    symmetrize_in_place(&mut f);
    Ok(f)
}

/// Right side of `Π̇ = −F(Π; P)`.
fn pi_rhs(c: &StepCoeffs, w: f64, pi: &DMatrix<f64>, p: &DMatrix<f64>, index: usize) -> Result<DMatrix<f64>> {
    let a = c.a1 + c.a2;
    let cc = c.c1 + c.c2;
    let d = c.d1 + c.d2;
    let sigma2 = (c.n1 + c.n2) * w + d.transpose() * p * &d;
    let l = pi * b_bar(c) + cc.transpose() * p * &d;
    let s_inv_lt = spd_apply(&sigma2, &l.transpose(), "Sigma2", index)?;
    let mut f = pi * &a + a.transpose() * pi + cc.transpose() * p * &cc + (c.q1 + c.q2) * w - l * s_inv_lt;
    symmetrize_in_place(&mut f);
    Ok(f)
}

fn check_finite(m: &DMatrix<f64>, step: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

/// One backward RK4 step of size `dt` from `y` (the value at `t_{j+1}`).
fn rk4_back<F>(y: &DMatrix<f64>, dt: f64, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>, usize) -> Result<DMatrix<f64>>,
{
    // stage index: 0 at t_{j+1}, 1 and 2 at the midpoint, 3 at t_j
    let k1 = f(y, 0)?;
    let mut y2 = y + &k1 * (0.5 * dt);
    symmetrize_in_place(&mut y2);
    let k2 = f(&y2, 1)?;
    let mut y3 = y + &k2 * (0.5 * dt);
    symmetrize_in_place(&mut y3);
    let k3 = f(&y3, 2)?;
    let mut y4 = y + &k3 * dt;
    symmetrize_in_place(&mut y4);
    let k4 = f(&y4, 3)?;
    let mut out = y + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
    symmetrize_in_place(&mut out);
    Ok(out)
}

/// Variance Riccati path `P(t_j)`, `j = 0..=n_steps`.
pub fn solve_p(s: &Scenario, g: &TimeGrid, norm: Normalization) -> Result<Vec<DMatrix<f64>>> {
    s.check_grid(g)?;
    let w = norm.weight();
    let steps = g.n_steps();
    let dt = g.dt();
    let mut out = vec![DMatrix::zeros(s.n, s.n); steps + 1];
    out[steps] = s.coeffs.m1.clone();
    for j in (0..steps).rev() {
        let c = s.step(g, j)?;
        let next = rk4_back(&out[j + 1], dt, |y, _| p_rhs(&c, w, y, j))?;
        check_finite(&next, j)?;
        out[j] = next;
    }
    Ok(out)
}

/// Mean Riccati path `Π(t_j)`. Each step advances the pair `(P, Π)` with one
/// RK4 step: the `P` stage values are recomputed from `p[j + 1]` and fed to the
/// matching `Π` stages.
pub fn solve_pi(s: &Scenario, g: &TimeGrid, p: &[DMatrix<f64>], norm: Normalization) -> Result<Vec<DMatrix<f64>>> {
    s.check_grid(g)?;
    let steps = g.n_steps();
    if p.len() != steps + 1 {
        return Err(Error::Shape(format!("P path has {} points, grid needs {}", p.len(), steps + 1)));
    }
    let w = norm.weight();
    let dt = g.dt();
    let mut out = vec![DMatrix::zeros(s.n, s.n); steps + 1];
    out[steps] = &s.coeffs.m1 + &s.coeffs.m2;
    for j in (0..steps).rev() {
        let c = s.step(g, j)?;
        let mut p_stages: [DMatrix<f64>; 4] = Default::default();
        rk4_back(&p[j + 1], dt, |y, stage| {
            p_stages[stage] = y.clone();
            p_rhs(&c, w, y, j)
        })?;
        let next = rk4_back(&out[j + 1], dt, |y, stage| pi_rhs(&c, w, y, &p_stages[stage], j))?;
        check_finite(&next, j)?;
        out[j] = next;
    }
    Ok(out)
}

/// Gains at each grid point.
pub struct Gains {
    pub sigma0: Vec<DMatrix<f64>>,
    pub sigma2: Vec<DMatrix<f64>>,
    pub k0: Vec<DMatrix<f64>>,
    pub k1: Vec<DMatrix<f64>>,
}

/// `Σ0, Σ2` and `K0 = Σ0⁻¹(B̂ᵀP + D1ᵀP C1)`, `K1 = Σ2⁻¹(B̄ᵀΠ + D̄ᵀP C̄)`; the
/// control law applies them with a minus sign.
pub fn gain_matrices(
    s: &Scenario,
    g: &TimeGrid,
    p: &[DMatrix<f64>],
    pi: &[DMatrix<f64>],
    norm: Normalization,
) -> Result<Gains> {
    let steps = g.n_steps();
    if p.len() != steps + 1 || pi.len() != steps + 1 {
        return Err(Error::Shape("Riccati paths do not match the grid".into()));
    }
    let w = norm.weight();
    let mut gains = Gains {
        sigma0: Vec::with_capacity(steps + 1),
        sigma2: Vec::with_capacity(steps + 1),
        k0: Vec::with_capacity(steps + 1),
        k1: Vec::with_capacity(steps + 1),
    };
    for j in 0..=steps {
        let c = s.step(g, j)?;
        let (pj, pij) = (&p[j], &pi[j]);
        let mut s0 = c.n1 * w + c.d1.transpose() * pj * c.d1;
        symmetrize_in_place(&mut s0);
        let r0 = b_hat(&c).transpose() * pj + c.d1.transpose() * pj * c.c1;
        let k0 = spd_apply(&s0, &r0, "Sigma0", j)?;

        let d = c.d1 + c.d2;
        let cc = c.c1 + c.c2;
        let mut s2 = (c.n1 + c.n2) * w + d.transpose() * pj * &d;
        symmetrize_in_place(&mut s2);
        let r2 = b_bar(&c).transpose() * pij + d.transpose() * pj * &cc;
        let k1 = spd_apply(&s2, &r2, "Sigma2", j)?;

        gains.sigma0.push(s0);
        gains.sigma2.push(s2);
        gains.k0.push(k0);
        gains.k1.push(k1);
    }
    Ok(gains)
}

/// Solves both equations and the gains.
pub fn solve(s: &Scenario, g: &TimeGrid, norm: Normalization) -> Result<RiccatiSolution> {
    let p = solve_p(s, g, norm)?;
    let pi = solve_pi(s, g, &p, norm)?;
    let Gains { sigma0, sigma2, k0, k1 } = gain_matrices(s, g, &p, &pi, norm)?;
    Ok(RiccatiSolution {
        grid: *g,
        normalization: norm,
        p,
        pi,
        sigma0,
        sigma2,
        k0,
        k1,
    })
}

impl RiccatiSolution {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }
}

/// Which of the two equations a residual refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    P,
    Pi,
}

/// Largest Frobenius norm over interior grid points of the central-difference
/// derivative plugged into the equation.
pub fn ode_residual(sol: &RiccatiSolution, s: &Scenario, which: Equation) -> Result<f64> {
    let g = &sol.grid;
    let dt = g.dt();
    let w = sol.normalization.weight();
    let mut worst = 0.0f64;
    for j in 1..g.n_steps() {
        let c = s.step(g, j)?;
        let (path, f) = match which {
            Equation::P => (&sol.p, p_rhs(&c, w, &sol.p[j], j)?),
            Equation::Pi => (&sol.pi, pi_rhs(&c, w, &sol.pi[j], &sol.p[j], j)?),
        };
        let deriv = (&path[j + 1] - &path[j - 1]) / (2.0 * dt);
        worst = worst.max((deriv + f).norm());
    }
    Ok(worst)
}

/// Summary numbers for reports.
#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSummary {
    pub normalization: Normalization,
    pub n_steps: usize,
    pub horizon: f64,
    pub optimal_value: f64,
    pub residual_p: f64,
    pub residual_pi: f64,
    pub min_eig_p: f64,
    pub min_eig_pi: f64,
    pub min_eig_sigma0: f64,
    pub min_eig_sigma2: f64,
}

pub fn summarize(sol: &RiccatiSolution, s: &Scenario) -> Result<RiccatiSummary> {
    let min_over = |v: &[DMatrix<f64>]| v.iter().map(min_eigenvalue).fold(f64::INFINITY, f64::min);
    Ok(RiccatiSummary {
        normalization: sol.normalization,
        n_steps: sol.n_steps(),
        horizon: sol.grid.horizon(),
        optimal_value: crate::lq::optimal_value(sol, s.x0.as_slice()),
        residual_p: ode_residual(sol, s, Equation::P)?,
        residual_pi: ode_residual(sol, s, Equation::Pi)?,
        min_eig_p: min_over(&sol.p),
        min_eig_pi: min_over(&sol.pi),
        min_eig_sigma0: min_over(&sol.sigma0),
        min_eig_sigma2: min_over(&sol.sigma2),
    })
}

fn push_row_major(rec: &mut Vec<String>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            rec.push(format!("{:e}", m[(r, c)]));
        }
    }
}

fn header_for(prefix: &str, rows: usize, cols: usize) -> impl Iterator<Item = String> + '_ {
    (0..rows).flat_map(move |r| (0..cols).map(move |c| format!("{prefix}_{r}_{c}")))
}

/// `t`, row-major `P`, row-major `Π`, one row per grid point.
pub fn write_riccati_csv(sol: &RiccatiSolution, path: &Path) -> Result<()> {
    let n = sol.p[0].nrows();
    let mut header = vec!["t".to_string()];
    header.extend(header_for("P", n, n));
    header.extend(header_for("Pi", n, n));
    write_rows(path, header, (0..=sol.n_steps()).map(|j| {
        let mut rec = vec![format!("{:e}", sol.grid.t(j))];
        push_row_major(&mut rec, &sol.p[j]);
        push_row_major(&mut rec, &sol.pi[j]);
        rec
    }))
}

/// `t`, row-major `K0`, `K1`, `Σ0`, `Σ2`.
pub fn write_gains_csv(sol: &RiccatiSolution, path: &Path) -> Result<()> {
    let (k, n) = sol.k0[0].shape();
    let mut header = vec!["t".to_string()];
    header.extend(header_for("K0", k, n));
    header.extend(header_for("K1", k, n));
    header.extend(header_for("Sigma0", k, k));
    header.extend(header_for("Sigma2", k, k));
    write_rows(path, header, (0..=sol.n_steps()).map(|j| {
        let mut rec = vec![format!("{:e}", sol.grid.t(j))];
        push_row_major(&mut rec, &sol.k0[j]);
        push_row_major(&mut rec, &sol.k1[j]);
        push_row_major(&mut rec, &sol.sigma0[j]);
        push_row_major(&mut rec, &sol.sigma2[j]);
        rec
    }))
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(&header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
