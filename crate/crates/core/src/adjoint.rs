//! Hamiltonians, the regression solver for the adjoint equation and the
//! numerical maximum-principle checks.
//!
//! The backward scheme is the discrete adjoint of the Euler step used by
//! [`crate::mfsim`]: with `Ê_j` the least-squares projection on
//! `{1, x(t_j) − m(t_j)}`,
//!
//! ```text
//! c_j  = Ê_j[p_{j+1}]
//! q_j  = Ê_j[(p_{j+1} − c_j) ΔW] / Δt,    q̃_j = Ê_j[(p_{j+1} − c_j) ΔY] / Δt
//! p_j  = c_j + Δt [(A1 − hF1)ᵀc_j + (A2 − hF2)ᵀc̄_j + C1ᵀq_j + C2ᵀq̄_j + F1ᵀq̃_j + F2ᵀq̃̄_j + 2Q1 x + 2Q2 m]
//! ```
//!
//! where bars are ensemble means, and `p_N = 2M1 x + 2M2 m`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lq::evaluate_cost;
use crate::mfsim::{simulate_ensemble, ControlLaw, EnsemblePath, SimConfig};
use crate::model::{Scenario, StepCoeffs};
use crate::riccati::RiccatiSolution;

/// Arguments of the Hamiltonians.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianInput {
    pub t: f64,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub qt: DVector<f64>,
    /// Observation-adjoint scalar, used by the weak form only.
    pub rt: f64,
}

impl HamiltonianInput {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            t: 0.0,
            x: DVector::zeros(n),
            y: DVector::zeros(n),
            u: DVector::zeros(k),
            v: DVector::zeros(k),
            p: DVector::zeros(n),
            q: DVector::zeros(n),
            qt: DVector::zeros(n),
            rt: 0.0,
        }
    }

    fn check(&self, s: &Scenario) -> Result<()> {
        let n_ok = [&self.x, &self.y, &self.p, &self.q, &self.qt].iter().all(|v| v.len() == s.n);
        let k_ok = self.u.len() == s.k && self.v.len() == s.k;
        if !(n_ok && k_ok) {
            return Err(Error::Shape(format!("Hamiltonian input does not match n = {}, k = {}", s.n, s.k)));
        }
        if !(0.0..=s.horizon).contains(&self.t) {
            return Err(Error::Shape(format!("time {} outside [0, {}]", self.t, s.horizon)));
        }
        Ok(())
    }
}

struct Terms {
    b: DVector<f64>,
    g: DVector<f64>,
    gt: DVector<f64>,
    l: f64,
    h: f64,
}

fn terms(s: &Scenario, i: &HamiltonianInput) -> Terms {
    let c = s.step_at_time(i.t);
    let b = c.a1 * &i.x + c.a2 * &i.y + c.b1 * &i.u + c.b2 * &i.v;
    let g = c.c1 * &i.x + c.c2 * &i.y + c.d1 * &i.u + c.d2 * &i.v;
    let gt = c.f1 * &i.x + c.f2 * &i.y + c.g1 * &i.u + c.g2 * &i.v;
    let l = i.x.dot(&(c.q1 * &i.x)) + i.y.dot(&(c.q2 * &i.y)) + i.u.dot(&(c.n1 * &i.u)) + i.v.dot(&(c.n2 * &i.v));
    Terms { b, g, gt, l, h: c.h }
}

/// `⟨p, b − h g̃⟩ + ⟨q, g⟩ + ⟨q̃, g̃⟩ + l`
pub fn hamiltonian_strong(s: &Scenario, i: &HamiltonianInput) -> Result<f64> {
    i.check(s)?;
    let t = terms(s, i);
    Ok(i.p.dot(&(&t.b - &t.gt * t.h)) + i.q.dot(&t.g) + i.qt.dot(&t.gt) + t.l)
}

/// `⟨p, b⟩ + ⟨q, g⟩ + ⟨q̃, g̃⟩ + R̃ h + l`
pub fn hamiltonian_weak(s: &Scenario, i: &HamiltonianInput) -> Result<f64> {
    i.check(s)?;
    let t = terms(s, i);
    Ok(i.p.dot(&t.b) + i.q.dot(&t.g) + i.qt.dot(&t.gt) + i.rt * t.h + t.l)
}

/// `g̃(t, x, y, u, v)`
pub fn observation_loading(s: &Scenario, i: &HamiltonianInput) -> Result<DVector<f64>> {
    i.check(s)?;
    Ok(terms(s, i).gt)
}

/// Gradients of the strong Hamiltonian in `(x, y, u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianGradient {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

pub fn hamiltonian_gradient(s: &Scenario, i: &HamiltonianInput) -> Result<HamiltonianGradient> {
    i.check(s)?;
    let c = s.step_at_time(i.t);
    let h = c.h;
    let sym = |m: &DMatrix<f64>| m + m.transpose();
    let lin = |a: &DMatrix<f64>, f: &DMatrix<f64>, cc: &DMatrix<f64>| {
        (a - f * h).transpose() * &i.p + cc.transpose() * &i.q + f.transpose() * &i.qt
    };
    Ok(HamiltonianGradient {
        x: lin(c.a1, c.f1, c.c1) + sym(c.q1) * &i.x,
        y: lin(c.a2, c.f2, c.c2) + sym(c.q2) * &i.y,
        u: lin(c.b1, c.g1, c.d1) + sym(c.n1) * &i.u,
        v: lin(c.b2, c.g2, c.d2) + sym(c.n2) * &i.v,
    })
}

/// Adjoint driver `H_x + E[H_y]` of the LQ model, with `(p̄, q̄, q̃̄)` the means
/// entering the `y`-gradient.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_driver(
    s: &Scenario,
    t: f64,
    x: &DVector<f64>,
    m: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    qt: &DVector<f64>,
    p_bar: &DVector<f64>,
    q_bar: &DVector<f64>,
    qt_bar: &DVector<f64>,
) -> DVector<f64> {
    let c = s.step_at_time(t);
    let h = c.h;
    (c.a1 - c.f1 * h).transpose() * p
        + (c.a2 - c.f2 * h).transpose() * p_bar
        + c.c1.transpose() * q
        + c.c2.transpose() * q_bar
        + c.f1.transpose() * qt
        + c.f2.transpose() * qt_bar
        + c.q1 * x * 2.0
        + c.q2 * m * 2.0
}

/// `value(x) = intercept + slope (x − m)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineRep {
    pub intercept: Vec<f64>,
    /// Row-major `n × n`.
    pub slope: Vec<f64>,
}

impl AffineRep {
    fn from_parts(a: &DVector<f64>, s: &DMatrix<f64>) -> Self {
        let n = a.len();
        Self {
            intercept: a.as_slice().to_vec(),
            slope: (0..n * n).map(|i| s[(i / n, i % n)]).collect(),
        }
    }

    pub fn intercept_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.intercept)
    }

    pub fn slope_mat(&self) -> DMatrix<f64> {
        let n = self.intercept.len();
        DMatrix::from_row_slice(n, n, &self.slope)
    }

    /// Value at `x` given the ensemble mean `m` the representation is centred on.
    pub fn eval(&self, x: &[f64], m: &[f64]) -> Vec<f64> {
        let n = self.intercept.len();
        (0..n)
            .map(|r| self.intercept[r] + (0..n).map(|c| self.slope[r * n + c] * (x[c] - m[c])).sum::<f64>())
            .collect()
    }
}

/// Regression output of the adjoint solver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointEstimate {
    pub n: usize,
    pub n_steps: usize,
    pub horizon: f64,
    /// `p(t_j)`, `j = 0..=n_steps`.
    pub p: Vec<AffineRep>,
    /// `Ê_j[p_{j+1}]`, `j < n_steps`.
    pub cont: Vec<AffineRep>,
    pub q: Vec<AffineRep>,
    pub qt: Vec<AffineRep>,
    /// RMS regression residuals per step for `p`, `q`, `q̃`.
    pub residual_p: Vec<f64>,
    pub residual_q: Vec<f64>,
    pub residual_qt: Vec<f64>,
    /// Steps at which the design matrix was singular and only the intercept
    /// was fitted.
    pub rank_deficient_steps: Vec<usize>,
}

impl AdjointEstimate {
    pub fn rank_deficient(&self) -> bool {
        !self.rank_deficient_steps.is_empty()
    }
}

/// Least-squares fit of `targets` (row-major `M × n`) on `{1, x − m}`, given
/// the factorized deviation scatter matrix (`None` fits the intercept only).
/// Returns intercept, slope and RMS residual.
fn fit(dev: &[f64], cov_chol: Option<&nalgebra::Cholesky<f64, nalgebra::Dyn>>, targets: &[f64], n: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
    let mp = targets.len() / n;
    let inv = 1.0 / mp as f64;
    let mut a = DVector::zeros(n);
    for row in targets.chunks_exact(n) {
        for d in 0..n {
            a[d] += row[d];
        }
    }
    a *= inv;
    let mut slope = DMatrix::zeros(n, n);
    if let Some(chol) = cov_chol {
        // cross[r, c] = Σ target_r dev_c
        let mut cross = DMatrix::zeros(n, n);
        for (row, dv) in targets.chunks_exact(n).zip(dev.chunks_exact(n)) {
            for r in 0..n {
                let tr = row[r] - a[r];
                for c in 0..n {
                    cross[(r, c)] += tr * dv[c];
                }
            }
        }
        // slope = cross cov⁻¹, cov symmetric
        slope = chol.solve(&cross.transpose()).transpose();
    }
    let mut ss = 0.0;
    for (row, dv) in targets.chunks_exact(n).zip(dev.chunks_exact(n)) {
        for r in 0..n {
            let mut fitv = a[r];
            for c in 0..n {
                fitv += slope[(r, c)] * dv[c];
            }
            ss += (row[r] - fitv).powi(2);
        }
    }
    (a, slope, (ss * inv).sqrt())
}

fn eval_rows(a: &DVector<f64>, s: &DMatrix<f64>, dev: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dev.len());
    for dv in dev.chunks_exact(n) {
        for r in 0..n {
            let mut v = a[r];
            for c in 0..n {
                v += s[(r, c)] * dv[c];
            }
            out.push(v);
        }
    }
    out
}

/// Backward regression solve of the adjoint equation on one ensemble.
pub fn solve_adjoint_regression(e: &EnsemblePath, s: &Scenario) -> Result<AdjointEstimate> {
    let n = e.n;
    let mp = e.n_particles;
    let steps = e.n_steps();
    let g = &e.grid;
    let dt = g.dt();
    let c = &s.coeffs;

    let deviations = |j: usize| -> Vec<f64> {
        let m = e.m_at(j);
        e.x_step(j).chunks_exact(n).flat_map(|x| x.iter().zip(m).map(|(a, b)| a - b)).collect()
    };

    let m_t = DVector::from_column_slice(e.m_at(steps));
    let a_t = (&c.m1 + &c.m2) * &m_t * 2.0;
    let s_t = &c.m1 * 2.0;
    let mut p_reps = vec![AffineRep::from_parts(&a_t, &s_t); steps + 1];
    let mut cont = Vec::with_capacity(steps);
    let mut q_reps = Vec::with_capacity(steps);
    let mut qt_reps = Vec::with_capacity(steps);
    let mut res_p = vec![0.0; steps];
    let mut res_q = vec![0.0; steps];
    let mut res_qt = vec![0.0; steps];
    let mut deficient = Vec::new();

    let mut p_next = eval_rows(&a_t, &s_t, &deviations(steps), n);
    for j in (0..steps).rev() {
        let dev = deviations(j);
        let mut cov = DMatrix::zeros(n, n);
        for dv in dev.chunks_exact(n) {
            for r in 0..n {
                for cc in 0..n {
                    cov[(r, cc)] += dv[r] * dv[cc];
                }
            }
        }
        let tr = cov.trace();
        let chol = if tr > 0.0 && crate::linalg::min_eigenvalue(&cov) > 1e-12 * tr {
            cov.clone().cholesky()
        } else {
            None
        };
        if chol.is_none() {
            deficient.push(j);
        }

        let (a_c, s_c, r_c) = fit(&dev, chol.as_ref(), &p_next, n);
        let fitted = eval_rows(&a_c, &s_c, &dev, n);
        let mut tw = vec![0.0; mp * n];
        let mut ty = vec![0.0; mp * n];
        for i in 0..mp {
            let (dw, dy) = (e.dw_at(j, i), e.dy_at(j, i));
            for d in 0..n {
                let r = p_next[i * n + d] - fitted[i * n + d];
                tw[i * n + d] = r * dw / dt;
                ty[i * n + d] = r * dy / dt;
            }
        }
        let (a_q, s_q, r_q) = fit(&dev, chol.as_ref(), &tw, n);
        let (a_qt, s_qt, r_qt) = fit(&dev, chol.as_ref(), &ty, n);

        let st: StepCoeffs = s.step(g, j)?;
        let h = st.h;
        let a1t = (st.a1 - st.f1 * h).transpose();
        let a2t = (st.a2 - st.f2 * h).transpose();
        let m_j = DVector::from_column_slice(e.m_at(j));
        let slope = &s_c + (&a1t * &s_c + st.c1.transpose() * &s_q + st.f1.transpose() * &s_qt + st.q1 * 2.0) * dt;
        let intercept = &a_c
            + (&a1t * &a_c
                + &a2t * &a_c
                + (st.c1 + st.c2).transpose() * &a_q
                + (st.f1 + st.f2).transpose() * &a_qt
                + (st.q1 + st.q2) * &m_j * 2.0)
                * dt;

        if intercept.iter().chain(slope.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: j });
        }
        p_next = eval_rows(&intercept, &slope, &dev, n);
        p_reps[j] = AffineRep::from_parts(&intercept, &slope);
        cont.push(AffineRep::from_parts(&a_c, &s_c));
        q_reps.push(AffineRep::from_parts(&a_q, &s_q));
        qt_reps.push(AffineRep::from_parts(&a_qt, &s_qt));
        res_p[j] = r_c;
        res_q[j] = r_q;
        res_qt[j] = r_qt;
    }
    cont.reverse();
    q_reps.reverse();
    qt_reps.reverse();
    deficient.reverse();
    Ok(AdjointEstimate {
        n,
        n_steps: steps,
        horizon: g.horizon(),
        p: p_reps,
        cont,
        q: q_reps,
        qt: qt_reps,
        residual_p: res_p,
        residual_q: res_q,
        residual_qt: res_qt,
        rank_deficient_steps: deficient,
    })
}

/// Stationarity residual paths, with and without the `G`/`q̃` terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityResidual {
    /// Per-step RMS over particles of the residual without `q̃` terms.
    pub path: Vec<f64>,
    /// `sqrt(Σ_j Δt · mean_i |r_ij|²)`
    pub norm: f64,
    pub path_with_qt: Vec<f64>,
    pub norm_with_qt: f64,
}

/// Residual of `2N1u + 2N2ū + B̂1ᵀÊ[p|Y] + B̂2ᵀÊp + D1ᵀÊ[q|Y] + D2ᵀÊq` (and the
/// variant adding `G1ᵀÊ[q̃|Y] + G2ᵀÊq̃`), the conditional expectations given the
/// observations taken as the regression representations evaluated at `x̂`.
pub fn stationarity_residual(e: &EnsemblePath, a: &AdjointEstimate, s: &Scenario) -> Result<StationarityResidual> {
    check_estimate(e, a)?;
    let (n, k) = (e.n, e.k);
    let mp = e.n_particles;
    let g = &e.grid;
    let dt = g.dt();
    let mut path = Vec::with_capacity(e.n_steps());
    let mut path_qt = Vec::with_capacity(e.n_steps());
    for j in 0..e.n_steps() {
        let c = s.step(g, j)?;
        let h = c.h;
        let b1 = (c.b1 - c.g1 * h).transpose();
        let b2 = (c.b2 - c.g2 * h).transpose();
        let m = e.m_at(j);
        let ub = DVector::from_column_slice(e.ubar_at(j));
        let common = &b2 * a.cont[j].intercept_vec() + c.d2.transpose() * a.q[j].intercept_vec() + c.n2 * &ub * 2.0;
        let common_qt = c.g2.transpose() * a.qt[j].intercept_vec();
        let (mut ss, mut ss_qt) = (0.0, 0.0);
        for i in 0..mp {
            let xh = e.xhat_at(j, i);
            let pc = DVector::from_vec(a.cont[j].eval(xh, m));
            let qc = DVector::from_vec(a.q[j].eval(xh, m));
            let qtc = DVector::from_vec(a.qt[j].eval(xh, m));
            let u = DVector::from_column_slice(e.u_at(j, i));
            let r = c.n1 * &u * 2.0 + &b1 * &pc + c.d1.transpose() * &qc + &common;
            let r_qt = &r + c.g1.transpose() * &qtc + &common_qt;
            ss += r.norm_squared();
            ss_qt += r_qt.norm_squared();
        }
        debug_assert_eq!(n, m.len());
        debug_assert_eq!(k, ub.len());
        path.push((ss / mp as f64).sqrt());
        path_qt.push((ss_qt / mp as f64).sqrt());
    }
    let norm = (path.iter().map(|r| r * r * dt).sum::<f64>()).sqrt();
    let norm_qt = (path_qt.iter().map(|r| r * r * dt).sum::<f64>()).sqrt();
    Ok(StationarityResidual {
        path,
        norm,
        path_with_qt: path_qt,
        norm_with_qt: norm_qt,
    })
}

fn check_estimate(e: &EnsemblePath, a: &AdjointEstimate) -> Result<()> {
    if a.n != e.n || a.n_steps != e.n_steps() {
        return Err(Error::Shape("adjoint estimate does not match the ensemble".into()));
    }
    Ok(())
}

/// Adjoint-based and finite-difference directional derivatives of the cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationalReport {
    pub adjoint: f64,
    pub finite_difference: f64,
    pub eps: f64,
    /// `|adjoint − fd| / |fd|`
    pub relative_gap: f64,
}

/// Derivative of `J(base + ε (dir − base))` at `ε = 0` from the adjoint
/// estimate, compared with a central difference on the same noise.
pub fn variational_derivative(
    s: &Scenario,
    base: &ControlLaw,
    dir: &ControlLaw,
    e: &EnsemblePath,
    a: &AdjointEstimate,
    eps: f64,
) -> Result<VariationalReport> {
    check_estimate(e, a)?;
    if !base.is_open_loop() || !dir.is_open_loop() {
        return Err(Error::InvalidConfig("variational derivative needs open-loop laws".into()));
    }
    let delta = dir.open_loop_difference(base)?;
    let g = &e.grid;
    let dt = g.dt();
    let mut adj = 0.0;
    for (j, dj) in delta.iter().enumerate().take(e.n_steps()) {
        let c = s.step(g, j)?;
        let h = c.h;
        let ub = DVector::from_column_slice(e.ubar_at(j));
        // means over particles of H_u and H_v; affine maps average to intercepts
        let hu = (c.b1 - c.g1 * h).transpose() * a.cont[j].intercept_vec()
            + c.d1.transpose() * a.q[j].intercept_vec()
            + c.g1.transpose() * a.qt[j].intercept_vec()
            + c.n1 * &ub * 2.0;
        let hv = (c.b2 - c.g2 * h).transpose() * a.cont[j].intercept_vec()
            + c.d2.transpose() * a.q[j].intercept_vec()
            + c.g2.transpose() * a.qt[j].intercept_vec()
            + c.n2 * &ub * 2.0;
        adj += (hu + hv).dot(dj) * dt;
    }
    let cfg = SimConfig::new(e.n_particles, e.seed, e.grid);
    let plus = evaluate_cost(&simulate_ensemble(s, &base.interpolate(dir, eps)?, &cfg)?, s)?.total;
    let minus = evaluate_cost(&simulate_ensemble(s, &base.interpolate(dir, -eps)?, &cfg)?, s)?.total;
    let fd = (plus - minus) / (2.0 * eps);
    let gap = if fd == 0.0 {
        if adj == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (adj - fd).abs() / fd.abs()
    };
    Ok(VariationalReport {
        adjoint: adj,
        finite_difference: fd,
        eps,
        relative_gap: gap,
    })
}

/// Distance between the regressed `p` and `2P(x − m) + 2Π m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnsatzDiscrepancy {
    /// `sqrt(Σ_j Δt · mean_i |p_rep − p_ansatz|²)`
    pub absolute: f64,
    /// `absolute` over the same norm of the ansatz.
    pub relative: f64,
}

pub fn ansatz_discrepancy(e: &EnsemblePath, a: &AdjointEstimate, sol: &RiccatiSolution) -> Result<AnsatzDiscrepancy> {
    check_estimate(e, a)?;
    if sol.grid != e.grid {
        return Err(Error::Shape("Riccati grid differs from the ensemble grid".into()));
    }
    let dt = e.grid.dt();
    let mp = e.n_particles;
    let (mut diff, mut base) = (0.0, 0.0);
    for j in 0..=e.n_steps() {
        let m = DVector::from_column_slice(e.m_at(j));
        let da = a.p[j].intercept_vec() - &sol.pi[j] * &m * 2.0;
        let ds = a.p[j].slope_mat() - &sol.p[j] * 2.0;
        let (mut sd, mut sb) = (0.0, 0.0);
        for i in 0..mp {
            let dev = DVector::from_column_slice(e.x_at(j, i)) - &m;
            sd += (&da + &ds * &dev).norm_squared();
            sb += (&sol.pi[j] * &m * 2.0 + &sol.p[j] * &dev * 2.0).norm_squared();
        }
        let w = if j == e.n_steps() { 0.0 } else { dt };
        diff += sd / mp as f64 * w;
        base += sb / mp as f64 * w;
    }
    let absolute = diff.sqrt();
    Ok(AnsatzDiscrepancy {
        absolute,
        relative: if base > 0.0 { absolute / base.sqrt() } else { absolute },
    })
}

/// PSD verdict of one Hessian block over the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockVerdict {
    pub block: String,
    pub min_eigenvalue: f64,
    pub t_index: usize,
    pub passed: bool,
}

/// Convexity of the LQ Hamiltonian along the two sufficient-condition routes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    /// Blocks `2Q1, 2Q2, 2N1, 2N2` of the Hessian in `(x, y, u, v)`.
    pub pointwise: Vec<BlockVerdict>,
    /// Blocks controlling convexity of the ensemble-averaged Hamiltonian:
    /// deviations carry `2Q1, 2N1`, means carry `2(Q1 + Q2), 2(N1 + N2)`.
    pub summed: Vec<BlockVerdict>,
    pub pointwise_passed: bool,
    pub summed_passed: bool,
}

fn psd_tol(m: &DMatrix<f64>) -> f64 {
    1e-12 * (1.0 + m.amax())
}

/// Checks PSD of every Hessian block at every grid time.
pub fn convexity_audit(s: &Scenario) -> Result<ConvexityReport> {
    let g = s.grid();
    let worst = |name: &str, pick: &dyn Fn(&StepCoeffs) -> DMatrix<f64>| -> Result<BlockVerdict> {
        let mut v = BlockVerdict {
            block: name.into(),
            min_eigenvalue: f64::INFINITY,
            t_index: 0,
            passed: true,
        };
        for j in 0..=g.n_steps() {
            let m = pick(&s.step(&g, j)?) * 2.0;
            let ev = crate::linalg::min_eigenvalue(&m);
            if ev < v.min_eigenvalue {
                v.min_eigenvalue = ev;
                v.t_index = j;
            }
            if ev < -psd_tol(&m) {
                v.passed = false;
            }
        }
        Ok(v)
    };
    let pointwise = vec![
        worst("2Q1", &|c| c.q1.clone())?,
        worst("2Q2", &|c| c.q2.clone())?,
        worst("2N1", &|c| c.n1.clone())?,
        worst("2N2", &|c| c.n2.clone())?,
    ];
    let summed = vec![
        worst("2Q1", &|c| c.q1.clone())?,
        worst("2(Q1+Q2)", &|c| c.q1 + c.q2)?,
        worst("2N1", &|c| c.n1.clone())?,
        worst("2(N1+N2)", &|c| c.n1 + c.n2)?,
    ];
    Ok(ConvexityReport {
        pointwise_passed: pointwise.iter().all(|b| b.passed),
        summed_passed: summed.iter().all(|b| b.passed),
        pointwise,
        summed,
    })
}

fn push_rep(rec: &mut Vec<String>, r: &AffineRep) {
    rec.extend(r.intercept.iter().chain(&r.slope).map(|v| format!("{v:e}")));
}

fn rep_header(prefix: &str, n: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..n).map(|d| format!("{prefix}_a{d}")).collect();
    h.extend((0..n * n).map(|i| format!("{prefix}_s{}_{}", i / n, i % n)));
    h
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// One row per step: `t`, `p` at `t_j`, then `q`, `q̃` and the residual norms
/// (empty on the terminal row).
pub fn write_adjoint_csv(a: &AdjointEstimate, path: &Path) -> Result<()> {
    let n = a.n;
    let dt = a.horizon / a.n_steps as f64;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string()];
    header.extend(rep_header("p", n));
    header.extend(rep_header("q", n));
    header.extend(rep_header("qt", n));
    header.extend(["residual_p", "residual_q", "residual_qt"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for j in 0..=a.n_steps {
        let mut rec = vec![format!("{:e}", j as f64 * dt)];
        push_rep(&mut rec, &a.p[j]);
        if j < a.n_steps {
            push_rep(&mut rec, &a.q[j]);
            push_rep(&mut rec, &a.qt[j]);
            rec.extend([a.residual_p[j], a.residual_q[j], a.residual_qt[j]].map(|v| format!("{v:e}")));
        } else {
            rec.extend(std::iter::repeat_n(String::new(), 2 * (n + n * n) + 3));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `t`, residual, residual with `q̃` terms.
pub fn write_residual_csv(r: &StationarityResidual, horizon: f64, path: &Path) -> Result<()> {
    let dt = horizon / r.path.len() as f64;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["t", "residual", "residual_with_qt"]).map_err(csv_err)?;
    for (j, (a, b)) in r.path.iter().zip(&r.path_with_qt).enumerate() {
        w.write_record([format!("{:e}", j as f64 * dt), format!("{a:e}"), format!("{b:e}")])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
