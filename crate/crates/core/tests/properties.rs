mod common;

use mfpo::adjoint::{adjoint_driver, hamiltonian_gradient, hamiltonian_strong, hamiltonian_weak, HamiltonianInput};
use mfpo::linalg::{asymmetry, min_eigenvalue};
use mfpo::lq::{decomposed_cost, evaluate_cost, random_open_loop_laws};
use mfpo::mfsim::{simulate_ensemble, ControlLaw, SimConfig};
use mfpo::model::{validate_assumptions, CoefficientPath, Scenario};
use mfpo::riccati::{solve, solve_p, solve_pi, Normalization};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=3, 1usize..=2)
}

/// Coupled scenario with the mean-field coefficients removed.
fn without_mean_field(s: &Scenario) -> Scenario {
    let mut d = s.clone();
    let (n, k) = (s.n, s.k);
    for p in [&mut d.coeffs.a2, &mut d.coeffs.c2, &mut d.coeffs.f2, &mut d.coeffs.q2] {
        *p = CoefficientPath::zeros(n, n);
    }
    for p in [&mut d.coeffs.b2, &mut d.coeffs.d2, &mut d.coeffs.g2] {
        *p = CoefficientPath::zeros(n, k);
    }
    d.coeffs.n2 = CoefficientPath::zeros(k, k);
    d.coeffs.m2 = DMatrix::zeros(n, n);
    d
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_column_slice(common::uniform(rng, n, 1, 2.0).as_slice())
}

fn random_input(s: &Scenario, seed: u64) -> HamiltonianInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (s.n, s.k);
    let mut i = HamiltonianInput::zeros(n, k);
    i.t = 0.37;
    i.x = random_vec(&mut rng, n);
    i.y = random_vec(&mut rng, n);
    i.u = random_vec(&mut rng, k);
    i.v = random_vec(&mut rng, k);
    i.p = random_vec(&mut rng, n);
    i.q = random_vec(&mut rng, n);
    i.qt = random_vec(&mut rng, n);
    i.rt = 0.8;
    i
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    for col in (0..n).rev() {
        for c in 0..b[col].len() {
            let mut v = b[col][c];
            for k in col + 1..n {
                v -= a[col][k] * b[k][c];
            }
            b[col][c] = v / a[col][col];
        }
    }
    b
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn riccati_paths_symmetric_psd_with_exact_terminals((n, k) in dims(), seed in 0u64..10_000) {
        let s = common::coupled_scenario(n, k, seed);
        let sol = solve(&s, &s.grid(), Normalization::Unit).unwrap();
        prop_assert!(sol.p[s.n_steps] == s.coeffs.m1);
        prop_assert!(sol.pi[s.n_steps] == &s.coeffs.m1 + &s.coeffs.m2);
        for m in sol.p.iter().chain(&sol.pi) {
            prop_assert!(asymmetry(m) <= 1e-10);
            prop_assert!(min_eigenvalue(m) >= -1e-8);
        }
    }

    #[test]
    fn mean_equation_reduces_to_variance_equation((n, k) in dims(), seed in 0u64..10_000) {
        let s = without_mean_field(&common::coupled_scenario(n, k, seed));
        let g = s.grid();
        let p = solve_p(&s, &g, Normalization::Unit).unwrap();
        let pi = solve_pi(&s, &g, &p, Normalization::Unit).unwrap();
        for (a, b) in p.iter().zip(&pi) {
            prop_assert!((a - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn variance_path_is_monotone_in_terminal_weight((n, k) in dims(), seed in 0u64..10_000) {
        let s = common::coupled_scenario(n, k, seed);
        let mut bigger = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        bigger.coeffs.m1 += common::spd(&mut rng, n, 0.8, 0.0);
        let g = s.grid();
        let p = solve_p(&s, &g, Normalization::Unit).unwrap();
        let pb = solve_p(&bigger, &g, Normalization::Unit).unwrap();
        for (a, b) in p.iter().zip(&pb) {
            prop_assert!(min_eigenvalue(&(b - a)) >= -1e-8);
        }
    }

    #[test]
    fn sigma_blocks_respect_declared_margin((n, k) in dims(), seed in 0u64..10_000) {
        let s = common::coupled_scenario(n, k, seed);
        prop_assume!(validate_assumptions(&s, &s.grid()).all_passed());
        for norm in [Normalization::Unit, Normalization::Doubled] {
            let sol = solve(&s, &s.grid(), norm).unwrap();
            let bound = norm.weight() * s.delta;
            for m in sol.sigma0.iter().chain(&sol.sigma2) {
                prop_assert!(min_eigenvalue(m) >= bound * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn gains_match_gaussian_elimination(seed in 0u64..10_000, j in 0usize..=200) {
        let s = common::coupled_scenario(3, 2, seed);
        let sol = solve(&s, &s.grid(), Normalization::Unit).unwrap();
        let c = &s.coeffs;
        let g = s.grid();
        let at = |p: &CoefficientPath| p.at(&g, j).unwrap().clone();
        let h = at(&c.h)[(0, 0)];
        let p = &sol.p[j];
        let sigma0 = at(&c.n1) + at(&c.d1).transpose() * p * at(&c.d1);
        let r0 = (at(&c.b1) - at(&c.g1) * h).transpose() * p + at(&c.d1).transpose() * p * at(&c.c1);
        let k0 = gauss_solve(rows(&sigma0), rows(&r0));
        for (r, row) in k0.iter().enumerate() {
            for (col, v) in row.iter().enumerate() {
                prop_assert!((sol.k0[j][(r, col)] - v).abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn weak_and_strong_hamiltonians_differ_by_observation_terms((n, k) in dims(), seed in 0u64..10_000) {
        let s = common::coupled_scenario(n, k, seed);
        let mut i = random_input(&s, seed);
        let strong = hamiltonian_strong(&s, &i).unwrap();
        let h = s.step_at_time(i.t).h;
        let gt = mfpo::adjoint::observation_loading(&s, &i).unwrap();
        let rt = i.rt;
        i.rt = rt - gt.dot(&i.p);
        let weak = hamiltonian_weak(&s, &i).unwrap();
        let expected = strong + h * rt;
        prop_assert!((weak - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }

    #[test]
    fn gradient_matches_central_differences((n, k) in dims(), seed in 0u64..10_000) {
        let s = common::coupled_scenario(n, k, seed);
        let i = random_input(&s, seed);
        let grad = hamiltonian_gradient(&s, &i).unwrap();
        let step = 1e-5;
        let probe = |field: usize, d: usize| {
            let mut a = i.clone();
            let mut b = i.clone();
            let (va, vb) = match field {
                0 => (&mut a.x, &mut b.x),
                1 => (&mut a.y, &mut b.y),
                2 => (&mut a.u, &mut b.u),
                _ => (&mut a.v, &mut b.v),
            };
            va[d] += step;
            vb[d] -= step;
            (hamiltonian_strong(&s, &a).unwrap() - hamiltonian_strong(&s, &b).unwrap()) / (2.0 * step)
        };
        for (field, g) in [&grad.x, &grad.y, &grad.u, &grad.v].into_iter().enumerate() {
            for d in 0..g.len() {
                let fd = probe(field, d);
                prop_assert!((fd - g[d]).abs() <= 1e-6 * (1.0 + g[d].abs()), "field {field} dim {d}: {fd} vs {}", g[d]);
            }
        }
    }

    #[test]
    fn cost_identity_on_random_ensembles((n, k) in dims(), seed in 0u64..10_000) {
        let s = common::coupled_scenario(n, k, seed);
        let g = s.grid_with_steps(40).unwrap();
        let cfg = SimConfig::new(64, seed, g);
        for law in random_open_loop_laws(&s, &cfg, 2, 4, 2.0, seed) {
            let e = simulate_ensemble(&s, &law, &cfg).unwrap();
            let raw = evaluate_cost(&e, &s).unwrap().total;
            let dec = decomposed_cost(&e, &s).unwrap().total;
            prop_assert!((raw - dec).abs() <= 1e-10 * (1.0 + raw.abs()));
        }
    }

    #[test]
    fn cost_is_convex_along_open_loop_segments((n, k) in dims(), seed in 0u64..10_000, lambda in 0.05f64..0.95) {
        let s = common::coupled_scenario(n, k, seed);
        let g = s.grid_with_steps(40).unwrap();
        let cfg = SimConfig::new(64, seed, g);
        let laws = random_open_loop_laws(&s, &cfg, 2, 4, 2.0, seed + 1);
        let mid = laws[1].interpolate(&laws[0], lambda).unwrap();
        let cost = |law: &ControlLaw| evaluate_cost(&simulate_ensemble(&s, law, &cfg).unwrap(), &s).unwrap().total;
        let (ju, jv, jm) = (cost(&laws[0]), cost(&laws[1]), cost(&mid));
        let chord = lambda * ju + (1.0 - lambda) * jv;
        prop_assert!(jm <= chord + 1e-9 * (1.0 + chord.abs()));
    }
}

proptest! {
    #![proptest_config(config(20))]

    #[test]
    fn driver_is_the_state_and_mean_gradient((n, k) in dims(), seed in 0u64..10_000) {
        let s = common::coupled_scenario(n, k, seed);
        let i = random_input(&s, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let m = random_vec(&mut rng, n);
        let (pb, qb, qtb) = (random_vec(&mut rng, n), random_vec(&mut rng, n), random_vec(&mut rng, n));
        let driver = adjoint_driver(&s, i.t, &i.x, &m, &i.p, &i.q, &i.qt, &pb, &qb, &qtb);

        let step = 1e-5;
        let mut at_x = i.clone();
        at_x.y = m.clone();
        let mut at_mean = i.clone();
        at_mean.y = m.clone();
        at_mean.p = pb;
        at_mean.q = qb;
        at_mean.qt = qtb;
        for d in 0..n {
            let fd = |base: &HamiltonianInput, in_y: bool| {
                let mut a = base.clone();
                let mut b = base.clone();
                if in_y { a.y[d] += step; b.y[d] -= step } else { a.x[d] += step; b.x[d] -= step }
                (hamiltonian_strong(&s, &a).unwrap() - hamiltonian_strong(&s, &b).unwrap()) / (2.0 * step)
            };
            let expected = fd(&at_x, false) + fd(&at_mean, true);
            prop_assert!((driver[d] - expected).abs() <= 1e-6 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn uncontrolled_variance_equation_has_closed_form(a in -1.0f64..1.0, c in 0.0f64..1.0, q in 0.0f64..2.0, m1 in 0.0f64..2.0) {
        let mut s = Scenario::smoke();
        s.coeffs.a1 = CoefficientPath::scalar(a);
        s.coeffs.c1 = CoefficientPath::scalar(c);
        s.coeffs.q1 = CoefficientPath::scalar(q);
        s.coeffs.m1 = DMatrix::from_element(1, 1, m1);
        s.coeffs.b1 = CoefficientPath::scalar(0.0);
        s.coeffs.d1 = CoefficientPath::scalar(0.0);
        s.coeffs.g1 = CoefficientPath::scalar(0.0);
        let g = s.grid();
        let p = solve_p(&s, &g, Normalization::Unit).unwrap();
        // Ṗ = −(2a + c²) P − q
        let r = 2.0 * a + c * c;
        for (j, pj) in p.iter().enumerate() {
            let tau = s.horizon - g.t(j);
            let exact = if r.abs() < 1e-12 {
                m1 + q * tau
            } else {
                (m1 + q / r) * (r * tau).exp() - q / r
            };
            prop_assert!((pj[(0, 0)] - exact).abs() <= 1e-9 * (1.0 + exact.abs()));
        }
    }

    #[test]
    fn simulation_ignores_worker_count(seed in 0u64..10_000) {
        let s = common::coupled_scenario(2, 1, seed);
        let g = s.grid_with_steps(30).unwrap();
        let cfg = SimConfig::new(97, seed, g);
        let law = ControlLaw::zero(1, &g);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate_ensemble(&s, &law, &cfg).unwrap());
        let b = four.install(|| simulate_ensemble(&s, &law, &cfg).unwrap());
        prop_assert!(a == b);
    }

    #[test]
    fn noiseless_particles_coincide((n, k) in dims(), seed in 0u64..10_000) {
        let s = common::without_noise(&common::coupled_scenario(n, k, seed));
        let g = s.grid_with_steps(30).unwrap();
        let law = random_open_loop_laws(&s, &SimConfig::new(8, seed, g), 1, 3, 1.0, seed).remove(0);
        let e = simulate_ensemble(&s, &law, &SimConfig::new(8, seed, g)).unwrap();
        for j in 0..=g.n_steps() {
            let m = e.m_at(j);
            let first = e.x_at(j, 0);
            for i in 0..8 {
                prop_assert_eq!(e.x_at(j, i), first);
                prop_assert_eq!(e.xhat_at(j, i), first);
            }
            for d in 0..n {
                prop_assert!((first[d] - m[d]).abs() <= 1e-12 * (1.0 + m[d].abs()));
            }
            let xhat_mean = e.xhat_mean(j);
            for d in 0..n {
                prop_assert!((xhat_mean[d] - m[d]).abs() <= 1e-8 * (1.0 + m[d].abs()));
            }
        }
    }
}
