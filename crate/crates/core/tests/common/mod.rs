#![allow(dead_code)]

use mfpo::model::{CoefficientPath, Coefficients, Scenario};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

/// `L Lᵀ + floor I` with a random `L`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let l = uniform(rng, n, n, scale);
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

/// Constant-coefficient scenario with every coupling switched on.
pub fn coupled_scenario(n: usize, k: usize, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Coefficients::zeros(n, k);
    let p = |m: DMatrix<f64>| CoefficientPath::constant(m);
    c.a1 = p(uniform(&mut rng, n, n, 0.5));
    c.a2 = p(uniform(&mut rng, n, n, 0.3));
    c.b1 = p(uniform(&mut rng, n, k, 0.5));
    c.b2 = p(uniform(&mut rng, n, k, 0.5));
    c.c1 = p(uniform(&mut rng, n, n, 0.3));
    c.c2 = p(uniform(&mut rng, n, n, 0.2));
    c.d1 = p(uniform(&mut rng, n, k, 0.3));
    c.d2 = p(uniform(&mut rng, n, k, 0.2));
    c.f1 = p(uniform(&mut rng, n, n, 0.2));
    c.f2 = p(uniform(&mut rng, n, n, 0.1));
    c.g1 = p(uniform(&mut rng, n, k, 0.2));
    c.g2 = p(uniform(&mut rng, n, k, 0.1));
    c.q1 = p(spd(&mut rng, n, 0.7, 0.1));
    c.q2 = p(spd(&mut rng, n, 0.4, 0.0));
    c.n1 = p(spd(&mut rng, k, 0.5, 1.0));
    c.n2 = p(spd(&mut rng, k, 0.3, 0.0));
    c.m1 = spd(&mut rng, n, 0.6, 0.2);
    c.m2 = spd(&mut rng, n, 0.3, 0.0);
    c.h = CoefficientPath::scalar(rng.gen_range(0.2..0.8));
    Scenario {
        n,
        k,
        horizon: 1.0,
        n_steps: 200,
        x0: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        coeffs: c,
        delta: 0.5,
    }
}

/// Copy of `s` with every diffusion loading set to zero.
pub fn without_noise(s: &Scenario) -> Scenario {
    let mut d = s.clone();
    let (n, k) = (s.n, s.k);
    for path in [&mut d.coeffs.c1, &mut d.coeffs.c2, &mut d.coeffs.f1, &mut d.coeffs.f2] {
        *path = CoefficientPath::zeros(n, n);
    }
    for path in [&mut d.coeffs.d1, &mut d.coeffs.d2, &mut d.coeffs.g1, &mut d.coeffs.g2] {
        *path = CoefficientPath::zeros(n, k);
    }
    d
}
