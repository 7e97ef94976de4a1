//! Small helpers for complex g-vectors stored as `Vec<Complex64>`.

use num_complex::Complex64 as C64;

pub fn zeros(g: usize) -> Vec<C64> {
    vec![C64::new(0.0, 0.0); g]
}

pub fn add(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[C64], s: C64) -> Vec<C64> {
    a.iter().map(|x| x * s).collect()
}

/// `a + s·b`
pub fn axpy(a: &[C64], s: C64, b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

pub fn norm(a: &[C64]) -> f64 {
    a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

pub fn unit(g: usize, i: usize) -> Vec<C64> {
    let mut v = zeros(g);
    v[i] = C64::new(1.0, 0.0);
    v
}

pub fn is_zero(a: &[C64]) -> bool {
    a.iter().all(|c| c.re == 0.0 && c.im == 0.0)
}
