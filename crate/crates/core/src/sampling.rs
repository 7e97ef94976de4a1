//! Seeded generators for period matrices, points and directions.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::theta::{AbelianPoint, RiemannMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random Riemann matrix: `Re τ` uniform in `[-1/2, 1/2]`, `Im τ = AAᵀ/g + 3/4·I`
/// with `A` uniform in `[-1, 1]`.
pub fn random_tau(g: usize, seed: u64) -> RiemannMatrix {
    let mut r = rng(seed);
    let mut re = DMatrix::<f64>::zeros(g, g);
    for i in 0..g {
        for j in i..g {
            let v = r.gen_range(-0.5..0.5);
            re[(i, j)] = v;
            re[(j, i)] = v;
        }
    }
    let a = DMatrix::<f64>::from_fn(g, g, |_, _| r.gen_range(-1.0..1.0));
    let im = &a * a.transpose() / g as f64 + DMatrix::<f64>::identity(g, g) * 0.75;
    RiemannMatrix::new(DMatrix::from_fn(g, g, |i, j| C64::new(re[(i, j)], im[(i, j)]))).expect("random tau is valid")
}

/// Point with lattice coordinates uniform in `[-1/2, 1/2)^{2g}`.
pub fn random_point<R: Rng>(tau: &RiemannMatrix, r: &mut R) -> AbelianPoint {
    let g = tau.genus();
    let x: Vec<f64> = (0..g).map(|_| r.gen_range(-0.5..0.5)).collect();
    let y: Vec<f64> = (0..g).map(|_| r.gen_range(-0.5..0.5)).collect();
    AbelianPoint { z: tau.from_lattice_coords(&x, &y), reduced: true }
}

pub fn sample_points(tau: &RiemannMatrix, count: usize, seed: u64) -> Vec<AbelianPoint> {
    let mut r = rng(seed);
    (0..count).map(|_| random_point(tau, &mut r)).collect()
}

/// Complex vector with entries uniform in the unit square `[-1, 1]²`.
pub fn random_cvec<R: Rng>(g: usize, r: &mut R) -> Vec<C64> {
    (0..g).map(|_| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect()
}

pub fn random_unit_cvec<R: Rng>(g: usize, r: &mut R) -> Vec<C64> {
    let v = random_cvec(g, r);
    let n = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|c| c / n).collect()
}
