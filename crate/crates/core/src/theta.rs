//! Riemann theta functions with characteristics and their directional derivatives.
//!
//! Conventions (all evaluations use exactly these):
//!
//! ```text
//! θ[ε,δ](z, τ) = Σ_{n ∈ Z^g} exp( πi (n+ε)ᵀ τ (n+ε) + 2πi (n+ε)ᵀ (z+δ) )
//! θ(z, τ)      = θ[0,0](z, τ)
//! ```
//!
//! A derivative along directions `h_1, …, h_k` multiplies each term by
//! `Π_j 2πi (n+ε)ᵀ h_j`.
//!
//! Every evaluation first reduces the argument `w = z + δ` to the fundamental
//! cell, `w = w₀ + τm + n` with the lattice coordinates of `w₀` in `[-1/2, 1/2)`.
//! Shifting the summation index by `m` gives
//!
//! ```text
//! θ[ε,δ](z) = exp(−πi mᵀτm − 2πi mᵀw₀ + 2πi εᵀn) · Σ_k exp(πi kᵀτk + 2πi kᵀw₀) · Π_j 2πi (k−m)ᵀh_j
//! ```
//!
//! with `k ∈ Z^g + ε`. The real part of the multiplier exponent plus the Gaussian
//! offset `π y₀ᵀ Im(τ) y₀` is reported as [`ThetaJet::scale_exponent`]; the stored
//! value and derivatives are the true ones divided by `exp(scale_exponent)`, so
//! their magnitude is O(1) regardless of `Im z`.
//!
//! The sum runs over the ellipsoid `π (k+y₀)ᵀ Im(τ) (k+y₀) ≤ R²`, with `R` chosen
//! from a Gaussian tail bound (disjoint balls of radius ρ/2 around the shifted
//! lattice points, ρ² = π·λ_min(Im τ)). Terms are visited in a fixed order and
//! accumulated with Neumaier compensation.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ui;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Default absolute truncation target for normalized theta values.
pub const DEFAULT_TARGET: f64 = 1e-15;

/// Radius cap in units of `λ_min(Im τ)^{-1/2}` in index space.
pub const RADIUS_CAP: f64 = 40.0;

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RiemannMatrixJson", into = "RiemannMatrixJson")]
pub struct RiemannMatrix {
    g: usize,
    tau: DMatrix<C64>,
    re: DMatrix<f64>,
    im: DMatrix<f64>,
    im_inv: DMatrix<f64>,
    /// Upper triangular factor with `Im τ = RᵀR`.
    chol: DMatrix<f64>,
    lambda_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiemannMatrixJson {
    pub g: usize,
    pub tau_re: Vec<Vec<f64>>,
    pub tau_im: Vec<Vec<f64>>,
}

impl TryFrom<RiemannMatrixJson> for RiemannMatrix {
    type Error = Error;
    fn try_from(j: RiemannMatrixJson) -> Result<Self> {
        let m = RiemannMatrix::from_parts(&j.tau_re, &j.tau_im)?;
        if m.g != j.g {
            return Err(Error::DimensionMismatch { expected: j.g, got: m.g });
        }
        Ok(m)
    }
}

impl From<RiemannMatrix> for RiemannMatrixJson {
    fn from(m: RiemannMatrix) -> Self {
        let rows = |a: &DMatrix<f64>| (0..m.g).map(|i| (0..m.g).map(|j| a[(i, j)]).collect()).collect();
        RiemannMatrixJson { g: m.g, tau_re: rows(&m.re), tau_im: rows(&m.im) }
    }
}

impl RiemannMatrix {
    pub fn new(tau: DMatrix<C64>) -> Result<Self> {
        let g = tau.nrows();
        if g == 0 || tau.ncols() != g {
            return Err(Error::InvalidInput(format!("tau must be square and non-empty, got {}x{}", tau.nrows(), tau.ncols())));
        }
        if tau.iter().any(|t| !t.re.is_finite() || !t.im.is_finite()) {
            return Err(Error::InvalidInput("tau has non-finite entries".into()));
        }
        let scale = tau.iter().map(|t| t.norm()).fold(0.0, f64::max);
        let mut asym = 0.0f64;
        for i in 0..g {
            for j in 0..g {
                asym = asym.max((tau[(i, j)] - tau[(j, i)]).norm());
            }
        }
        if asym > 1e-12 * scale {
            return Err(Error::TauNotSymmetric(asym));
        }
        let tau = (&tau + tau.transpose()) * C64::new(0.5, 0.0);
        let re = tau.map(|t| t.re);
        let im = tau.map(|t| t.im);
        let chol = im.clone().cholesky().ok_or(Error::TauNotPositive)?;
        let l = chol.l();
        if (0..g).any(|i| !(l[(i, i)] > 0.0)) {
            return Err(Error::TauNotPositive);
        }
        let im_inv = chol.inverse();
        let lambda_min = SymmetricEigen::new(im.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(lambda_min > 0.0) {
            return Err(Error::TauNotPositive);
        }
        Ok(RiemannMatrix { g, tau, re, im, im_inv, chol: l.transpose(), lambda_min })
    }

    pub fn from_parts(re: &[Vec<f64>], im: &[Vec<f64>]) -> Result<Self> {
        let g = re.len();
        if im.len() != g || re.iter().chain(im.iter()).any(|r| r.len() != g) {
            return Err(Error::InvalidInput("tau_re and tau_im must both be g x g".into()));
        }
        Self::new(DMatrix::from_fn(g, g, |i, j| C64::new(re[i][j], im[i][j])))
    }

    /// `τ = i·I_g`.
    pub fn identity_imaginary(g: usize) -> Self {
        Self::new(DMatrix::from_fn(g, g, |i, j| if i == j { C64::i() } else { C64::new(0.0, 0.0) })).unwrap()
    }

    pub fn genus(&self) -> usize {
        self.g
    }

    pub fn tau(&self) -> &DMatrix<C64> {
        &self.tau
    }

    pub fn imag(&self) -> &DMatrix<f64> {
        &self.im
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// `k·τ`, used for the second-order theta functions (`k = 2`).
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(&self.tau * C64::new(k, 0.0))
    }

    /// `τ·v` for a real vector.
    pub fn tau_times(&self, v: &[f64]) -> Vec<C64> {
        (0..self.g).map(|i| (0..self.g).map(|j| self.tau[(i, j)] * v[j]).sum()).collect()
    }

    /// Real lattice coordinates `(x, y)` with `z = x + τy`.
    pub fn lattice_coords(&self, z: &[C64]) -> (Vec<f64>, Vec<f64>) {
        let g = self.g;
        let y: Vec<f64> = (0..g).map(|i| (0..g).map(|j| self.im_inv[(i, j)] * z[j].im).sum()).collect();
        let x: Vec<f64> = (0..g).map(|i| z[i].re - (0..g).map(|j| self.re[(i, j)] * y[j]).sum::<f64>()).collect();
        (x, y)
    }

    /// Inverse of [`lattice_coords`](Self::lattice_coords).
    pub fn from_lattice_coords(&self, x: &[f64], y: &[f64]) -> Vec<C64> {
        let ty = self.tau_times(y);
        (0..self.g).map(|i| ty[i] + x[i]).collect()
    }
}

/// A point of `C^g`, optionally flagged as reduced modulo `Z^g + τZ^g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbelianPoint {
    pub z: Vec<C64>,
    pub reduced: bool,
}

impl AbelianPoint {
    pub fn new(z: Vec<C64>) -> Self {
        AbelianPoint { z, reduced: false }
    }

    pub fn zero(g: usize) -> Self {
        AbelianPoint { z: vec![C64::new(0.0, 0.0); g], reduced: true }
    }

    pub fn genus(&self) -> usize {
        self.z.len()
    }

    pub fn shifted(&self, a: &[C64]) -> Self {
        AbelianPoint::new(self.z.iter().zip(a).map(|(z, a)| z + a).collect())
    }

    pub fn neg(&self) -> Self {
        AbelianPoint { z: self.z.iter().map(|z| -z).collect(), reduced: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Characteristic {
    pub eps: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Characteristic {
    pub fn new(eps: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        if eps.len() != delta.len() {
            return Err(Error::DimensionMismatch { expected: eps.len(), got: delta.len() });
        }
        if eps.iter().chain(delta.iter()).any(|&v| v != 0.0 && v != 0.5) {
            return Err(Error::InvalidInput("characteristic entries must be 0 or 1/2".into()));
        }
        Ok(Characteristic { eps, delta })
    }

    pub fn zero(g: usize) -> Self {
        Characteristic { eps: vec![0.0; g], delta: vec![0.0; g] }
    }

    /// Parity `4 εᵀδ mod 2`: `false` for even, `true` for odd characteristics.
    pub fn is_odd(&self) -> bool {
        let s: f64 = self.eps.iter().zip(&self.delta).map(|(e, d)| 4.0 * e * d).sum();
        (s.round() as i64) % 2 != 0
    }

    /// All `2^{2g}` characteristics, `eps` major, entries ordered by bit.
    pub fn all(g: usize) -> Vec<Self> {
        let mut out = Vec::with_capacity(1 << (2 * g));
        for e in 0..(1usize << g) {
            for d in 0..(1usize << g) {
                let bits = |b: usize| (0..g).map(|i| if (b >> i) & 1 == 1 { 0.5 } else { 0.0 }).collect();
                out.push(Characteristic { eps: bits(e), delta: bits(d) });
            }
        }
        out
    }
}

/// An ordered list of at most four directions; the empty request is the value itself.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DerivRequest(pub Vec<Vec<C64>>);

impl DerivRequest {
    pub fn value() -> Self {
        DerivRequest(Vec::new())
    }

    pub fn along(dirs: &[&[C64]]) -> Self {
        DerivRequest(dirs.iter().map(|d| d.to_vec()).collect())
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }
}

/// Theta value and derivatives at one point, all divided by `exp(scale_exponent)`.
///
/// `derivs[i]` answers `requests[i]` of the call that produced the jet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaJet {
    pub value: C64,
    pub derivs: Vec<C64>,
    pub error_bound: f64,
    pub scale_exponent: f64,
    pub radius: f64,
    pub terms: usize,
}

impl ThetaJet {
    pub fn deriv(&self, i: usize) -> C64 {
        self.derivs[i]
    }

    /// True value `exp(scale_exponent) · value`; may overflow for large `Im z`.
    pub fn unscaled_value(&self) -> C64 {
        self.value * self.scale_exponent.exp()
    }

    pub fn unscaled_deriv(&self, i: usize) -> C64 {
        self.derivs[i] * self.scale_exponent.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub point: AbelianPoint,
    pub quasiperiod_factor: C64,
    pub factor_exponent: f64,
    /// `m` in `z = z₀ + τm + n`.
    pub tau_shift: Vec<i64>,
    /// `n` in `z = z₀ + τm + n`.
    pub int_shift: Vec<i64>,
}

struct Reduced {
    w0: Vec<C64>,
    m: Vec<i64>,
    n: Vec<i64>,
    /// Complex multiplier exponent.
    log_mult: C64,
    y0: Vec<f64>,
}

fn check_point(z: &[C64], g: usize) -> Result<()> {
    if z.len() != g {
        return Err(Error::DimensionMismatch { expected: g, got: z.len() });
    }
    if z.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::InvalidInput("non-finite point coordinate".into()));
    }
    Ok(())
}

fn reduce_inner(w: &[C64], tau: &RiemannMatrix, eps: &[f64]) -> Reduced {
    let g = tau.g;
    let (x, y) = tau.lattice_coords(w);
    let m: Vec<i64> = y.iter().map(|v| (v + 0.5).floor() as i64).collect();
    let n: Vec<i64> = x.iter().map(|v| (v + 0.5).floor() as i64).collect();
    let mf: Vec<f64> = m.iter().map(|&v| v as f64).collect();
    let tm = tau.tau_times(&mf);
    let w0: Vec<C64> = (0..g).map(|i| w[i] - tm[i] - n[i] as f64).collect();
    let y0: Vec<f64> = (0..g).map(|i| y[i] - mf[i]).collect();
    let mtm: C64 = (0..g).map(|i| tm[i] * mf[i]).sum();
    let mw0: C64 = (0..g).map(|i| w0[i] * mf[i]).sum();
    let en: f64 = (0..g).map(|i| eps[i] * n[i] as f64).sum();
    let ipi = C64::new(0.0, PI);
    let log_mult = -ipi * mtm - ipi * 2.0 * mw0 + ipi * 2.0 * en;
    Reduced { w0, m, n, log_mult, y0 }
}

/// Reduce `z` modulo the period lattice, returning `z₀` and the multiplier with
/// `θ(z) = exp(factor_exponent) · quasiperiod_factor · θ(z₀)`.
pub fn reduce_point(z: &[C64], tau: &RiemannMatrix) -> Result<Reduction> {
    check_point(z, tau.g)?;
    let r = reduce_inner(z, tau, &vec![0.0; tau.g]);
    Ok(Reduction {
        point: AbelianPoint { z: r.w0, reduced: true },
        quasiperiod_factor: C64::new(0.0, r.log_mult.im).exp(),
        factor_exponent: r.log_mult.re,
        tau_shift: r.m,
        int_shift: r.n,
    })
}

/// Canonical representative of `z` modulo the lattice.
pub fn reduce(z: &[C64], tau: &RiemannMatrix) -> Vec<C64> {
    reduce_inner(z, tau, &vec![0.0; tau.g]).w0
}

/// Wrapped lattice-coordinate distance between two points modulo the lattice.
pub fn torus_distance(a: &[C64], b: &[C64], tau: &RiemannMatrix) -> f64 {
    let d: Vec<C64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
    let (x, y) = tau.lattice_coords(&d);
    let wrap = |v: f64| v - v.round();
    x.iter().chain(y.iter()).map(|&v| wrap(v).powi(2)).sum::<f64>().sqrt()
}

/// Polynomial coefficients (lowest first) of a product of linear factors `a t + b`.
fn poly_from_linear(factors: &[(f64, f64)]) -> Vec<f64> {
    let mut p = vec![1.0];
    for &(a, b) in factors {
        let mut q = vec![0.0; p.len() + 1];
        for (k, &c) in p.iter().enumerate() {
            q[k] += b * c;
            q[k + 1] += a * c;
        }
        p = q;
    }
    p
}

/// Bound on `Σ_{|p| ≥ R} exp(−|p|²) Π_j (A_j |p| + B_j)` over a shifted lattice in
/// `R^g` with minimal distance at least `rho`. Requires `R ≥ rho`.
fn tail_bound(g: usize, radius: f64, rho: f64, weights: &[(f64, f64)]) -> f64 {
    let lo = radius - rho;
    if lo < 0.0 {
        return f64::INFINITY;
    }
    let mut factors: Vec<(f64, f64)> = weights.iter().map(|&(a, b)| (a, a * rho + b)).collect();
    for _ in 1..g {
        factors.push((1.0, rho / 2.0));
    }
    let poly = poly_from_linear(&factors);
    let x = lo * lo;
    let integral: f64 = poly
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(k, c)| c * 0.5 * gamma_ui((k as f64 + 1.0) / 2.0, x))
        .sum();
    g as f64 * (2.0 / rho).powi(g as i32) * integral
}

#[derive(Default, Clone, Copy)]
struct Neumaier {
    sum: C64,
    comp: C64,
}

impl Neumaier {
    #[inline]
    fn add(&mut self, v: C64) {
        let step = |s: &mut f64, c: &mut f64, v: f64| {
            let t = *s + v;
            if s.abs() >= v.abs() {
                *c += (*s - t) + v;
            } else {
                *c += (v - t) + *s;
            }
            *s = t;
        };
        step(&mut self.sum.re, &mut self.comp.re, v.re);
        step(&mut self.sum.im, &mut self.comp.im, v.im);
    }

    fn total(&self) -> C64 {
        self.sum + self.comp
    }
}

/// Visit every `n ∈ Z^g` with `Σ_i (Σ_{j≥i} R_ij (n_j + s_j))² ≤ r2` in a fixed order.
fn enumerate_ellipsoid(chol: &DMatrix<f64>, shift: &[f64], r2: f64, f: &mut impl FnMut(&[i64])) {
    let g = shift.len();
    let mut n = vec![0i64; g];
    fn rec(level: usize, rem: f64, chol: &DMatrix<f64>, shift: &[f64], n: &mut [i64], f: &mut impl FnMut(&[i64])) {
        let g = shift.len();
        let c: f64 = (level + 1..g).map(|j| chol[(level, j)] * (n[j] as f64 + shift[j])).sum();
        let d = chol[(level, level)];
        let half = rem.max(0.0).sqrt();
        let lo = ((-c - half) / d - shift[level]).ceil() as i64;
        let hi = ((-c + half) / d - shift[level]).floor() as i64;
        for k in lo..=hi {
            n[level] = k;
            let t = d * (k as f64 + shift[level]) + c;
            let r = rem - t * t;
            if r < 0.0 {
                continue;
            }
            if level == 0 {
                f(n);
            } else {
                rec(level - 1, r, chol, shift, n, f);
            }
        }
    }
    rec(g - 1, r2, chol, shift, &mut n, f);
}

fn validate_requests(requests: &[DerivRequest], g: usize) -> Result<()> {
    for r in requests {
        if r.0.len() > MAX_ORDER {
            return Err(Error::InvalidInput(format!("derivative order {} exceeds {}", r.0.len(), MAX_ORDER)));
        }
        for h in &r.0 {
            check_point(h, g)?;
        }
    }
    Ok(())
}

fn vnorm(h: &[C64]) -> f64 {
    h.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

enum Radius {
    Target(f64),
    Fixed(f64),
}

fn eval_core(z: &[C64], tau: &RiemannMatrix, ch: &Characteristic, requests: &[DerivRequest], radius: Radius) -> Result<ThetaJet> {
    let g = tau.g;
    check_point(z, g)?;
    if ch.eps.len() != g || ch.delta.len() != g {
        return Err(Error::DimensionMismatch { expected: g, got: ch.eps.len() });
    }
    validate_requests(requests, g)?;

    let w: Vec<C64> = (0..g).map(|i| z[i] + ch.delta[i]).collect();
    let red = reduce_inner(&w, tau, &ch.eps);
    let y0 = &red.y0;
    let gauss: f64 = PI * (0..g).map(|i| (0..g).map(|j| y0[i] * tau.im[(i, j)] * y0[j]).sum::<f64>()).sum::<f64>();

    // |(k−m)ᵀh| ≤ |h| (|p| alpha + beta) with x = k + y₀ and |p|² = π xᵀ Im(τ) x.
    let alpha = 1.0 / (PI * tau.lambda_min).sqrt();
    let beta = (0..g).map(|i| (y0[i] + red.m[i] as f64).powi(2)).sum::<f64>().sqrt();
    let rho = (PI * tau.lambda_min).sqrt();
    let weight_sets: Vec<Vec<(f64, f64)>> = std::iter::once(Vec::new())
        .chain(requests.iter().map(|r| {
            r.0.iter()
                .map(|h| {
                    let s = 2.0 * PI * vnorm(h);
                    (s * alpha, s * beta)
                })
                .collect()
        }))
        .collect();
    let bound_at = |r: f64| weight_sets.iter().map(|ws| tail_bound(g, r, rho, ws)).fold(0.0, f64::max);
    let cap = RADIUS_CAP * PI.sqrt();

    let (rad, error_bound) = match radius {
        Radius::Fixed(r) => (r, bound_at(r)),
        Radius::Target(target) => {
            if !(target > 0.0) {
                return Err(Error::InvalidInput("target_abs_err must be positive".into()));
            }
            // coarse unit steps, then bisection down to the 0.125 grid
            let mut lo = rho + 1.0;
            let mut b = bound_at(lo);
            if b <= target {
                (lo, b)
            } else {
                let mut hi = lo + 1.0;
                loop {
                    if hi > cap {
                        return Err(Error::PrecisionUnreachable { radius: hi, cap });
                    }
                    b = bound_at(hi);
                    if b <= target {
                        break;
                    }
                    lo = hi;
                    hi += 1.0;
                }
                while hi - lo > 0.125 {
                    let mid = 0.5 * (lo + hi);
                    let bm = bound_at(mid);
                    if bm <= target {
                        hi = mid;
                        b = bm;
                    } else {
                        lo = mid;
                    }
                }
                (hi, b)
            }
        }
    };

    let shift: Vec<f64> = (0..g).map(|i| ch.eps[i] + y0[i]).collect();
    let ipi = C64::new(0.0, PI);
    let two_pi_i = C64::new(0.0, 2.0 * PI);
    let mut acc = vec![Neumaier::default(); requests.len() + 1];
    let mut k = vec![0.0f64; g];
    let mut terms = 0usize;
    let mut tk = vec![C64::new(0.0, 0.0); g];
    // each distinct direction is dotted once per term
    let mut dirs: Vec<Vec<C64>> = Vec::new();
    let req_idx: Vec<Vec<usize>> = requests
        .iter()
        .map(|r| {
            r.0.iter()
                .map(|h| match dirs.iter().position(|d| d == h) {
                    Some(i) => i,
                    None => {
                        dirs.push(h.clone());
                        dirs.len() - 1
                    }
                })
                .collect()
        })
        .collect();
    let dir_m: Vec<C64> = dirs.iter().map(|h| (0..g).map(|i| h[i] * red.m[i] as f64).sum()).collect();
    let mut dots = vec![C64::new(0.0, 0.0); dirs.len()];
    enumerate_ellipsoid(&tau.chol, &shift, rad * rad / PI, &mut |n: &[i64]| {
        for i in 0..g {
            k[i] = n[i] as f64 + ch.eps[i];
        }
        for i in 0..g {
            tk[i] = (0..g).map(|j| tau.tau[(i, j)] * k[j]).sum();
        }
        let ktk: C64 = (0..g).map(|i| tk[i] * k[i]).sum();
        let kw: C64 = (0..g).map(|i| red.w0[i] * k[i]).sum();
        let term = (ipi * ktk + two_pi_i * kw - gauss).exp();
        acc[0].add(term);
        for (d, h) in dots.iter_mut().zip(&dirs) {
            let hk: C64 = (0..g).map(|i| h[i] * k[i]).sum();
            *d = two_pi_i * hk;
        }
        for (d, hm) in dots.iter_mut().zip(&dir_m) {
            *d -= two_pi_i * hm;
        }
        for (slot, idx) in acc[1..].iter_mut().zip(&req_idx) {
            let mut t = term;
            for &i in idx {
                t *= dots[i];
            }
            slot.add(t);
        }
        terms += 1;
    });

    let phase = C64::new(0.0, red.log_mult.im).exp();
    Ok(ThetaJet {
        value: phase * acc[0].total(),
        derivs: acc[1..].iter().map(|a| phase * a.total()).collect(),
        error_bound,
        scale_exponent: red.log_mult.re + gauss,
        radius: rad,
        terms,
    })
}

/// `θ(z, τ)` and the requested directional derivatives.
pub fn theta_eval(z: &AbelianPoint, tau: &RiemannMatrix, requests: &[DerivRequest], target_abs_err: f64) -> Result<ThetaJet> {
    eval_core(&z.z, tau, &Characteristic::zero(tau.g), requests, Radius::Target(target_abs_err))
}

/// `θ[ε,δ](z, τ)` and the requested directional derivatives.
pub fn theta_char_eval(
    z: &AbelianPoint,
    tau: &RiemannMatrix,
    ch: &Characteristic,
    requests: &[DerivRequest],
    target_abs_err: f64,
) -> Result<ThetaJet> {
    eval_core(&z.z, tau, ch, requests, Radius::Target(target_abs_err))
}

/// Evaluation with an explicit ellipsoid radius (in the `exp(−R²)` metric);
/// `error_bound` is the tail bound at that radius.
pub fn theta_eval_with_radius(
    z: &AbelianPoint,
    tau: &RiemannMatrix,
    ch: &Characteristic,
    requests: &[DerivRequest],
    radius: f64,
) -> Result<ThetaJet> {
    eval_core(&z.z, tau, ch, requests, Radius::Fixed(radius))
}

/// Characteristic-shifted evaluation with arbitrary real `eps` (used for the
/// second-order basis, where `eps = σ/2`).
pub(crate) fn theta_shifted_eval(
    z: &[C64],
    tau: &RiemannMatrix,
    eps: &[f64],
    requests: &[DerivRequest],
    target_abs_err: f64,
) -> Result<ThetaJet> {
    let ch = Characteristic { eps: eps.to_vec(), delta: vec![0.0; eps.len()] };
    eval_core(z, tau, &ch, requests, Radius::Target(target_abs_err))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// Direct sum over |n| ≤ 100 for g = 1.
    fn naive_g1(z: C64, tau: C64, eps: f64, delta: f64) -> C64 {
        let mut s = c(0.0, 0.0);
        for n in -100..=100 {
            let k = n as f64 + eps;
            s += (c(0.0, PI) * tau * k * k + c(0.0, 2.0 * PI) * k * (z + delta)).exp();
        }
        s
    }

    #[test]
    fn theta_at_origin_for_square_lattice() {
        let tau = RiemannMatrix::identity_imaginary(1);
        let jet = theta_eval(&AbelianPoint::zero(1), &tau, &[], DEFAULT_TARGET).unwrap();
        let oracle = naive_g1(c(0.0, 0.0), c(0.0, 1.0), 0.0, 0.0);
        assert!((jet.unscaled_value() - oracle).norm() < 1e-14);
        // π^{1/4} / Γ(3/4)
        assert!((oracle.re - 1.086_434_811_213_308).abs() < 1e-12);
    }

    #[test]
    fn reduce_identity_and_integer_shift() {
        let tau = RiemannMatrix::identity_imaginary(1);
        let z0 = vec![c(0.1, 0.2)];
        let r = reduce_point(&z0, &tau).unwrap();
        assert_eq!(r.point.z, z0);
        assert_eq!(r.factor_exponent, 0.0);
        assert!((r.quasiperiod_factor - c(1.0, 0.0)).norm() < 1e-15);
        let r = reduce_point(&[z0[0] + 1.0], &tau).unwrap();
        assert!((r.point.z[0] - z0[0]).norm() < 1e-15);
        assert!((r.quasiperiod_factor - c(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(r.factor_exponent, 0.0);
    }

    #[test]
    fn reduce_tau_shift_reproduces_direct_sum() {
        let tau = RiemannMatrix::identity_imaginary(1);
        let z0 = c(0.13, -0.21);
        let z = z0 + c(0.0, 1.0);
        let r = reduce_point(&[z], &tau).unwrap();
        assert!((r.point.z[0] - z0).norm() < 1e-15);
        let expected = (c(0.0, -PI) * c(0.0, 1.0) - c(0.0, 2.0 * PI) * z0).exp();
        let got = r.quasiperiod_factor * r.factor_exponent.exp();
        assert!((got - expected).norm() < 1e-13 * expected.norm());
        let direct = naive_g1(z, c(0.0, 1.0), 0.0, 0.0);
        let via = got * naive_g1(z0, c(0.0, 1.0), 0.0, 0.0);
        assert!((direct - via).norm() < 1e-12 * direct.norm());
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let tau = RiemannMatrix::identity_imaginary(1);
        assert!(matches!(reduce_point(&[c(f64::NAN, 0.0)], &tau), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_direction_derivative_vanishes() {
        let tau = RiemannMatrix::identity_imaginary(2);
        let z = AbelianPoint::new(vec![c(0.3, 0.1), c(-0.2, 0.4)]);
        let zero = vec![c(0.0, 0.0); 2];
        let jet = theta_eval(&z, &tau, &[DerivRequest::along(&[&zero])], DEFAULT_TARGET).unwrap();
        assert_eq!(jet.derivs[0], c(0.0, 0.0));
    }

    #[test]
    fn odd_characteristic_vanishes_at_origin() {
        let tau = RiemannMatrix::identity_imaginary(1);
        let ch = Characteristic::new(vec![0.5], vec![0.5]).unwrap();
        assert!(ch.is_odd());
        let jet = theta_char_eval(&AbelianPoint::zero(1), &tau, &ch, &[], DEFAULT_TARGET).unwrap();
        assert!(jet.unscaled_value().norm() < 1e-12);
    }

    #[test]
    fn half_characteristic_matches_shifted_sum() {
        let tau = RiemannMatrix::identity_imaginary(1);
        let ch = Characteristic::new(vec![0.5], vec![0.0]).unwrap();
        let jet = theta_char_eval(&AbelianPoint::zero(1), &tau, &ch, &[], DEFAULT_TARGET).unwrap();
        let oracle = naive_g1(c(0.0, 0.0), c(0.0, 1.0), 0.5, 0.0);
        assert!((jet.unscaled_value() - oracle).norm() < 1e-12 * oracle.norm());
    }

    #[test]
    fn zero_characteristic_agrees_with_plain_theta() {
        let tau = RiemannMatrix::from_parts(&[vec![0.1, 0.2], vec![0.2, -0.3]], &[vec![1.1, 0.3], vec![0.3, 0.9]]).unwrap();
        let z = AbelianPoint::new(vec![c(0.3, 0.7), c(-1.2, 0.4)]);
        let a = theta_eval(&z, &tau, &[], DEFAULT_TARGET).unwrap();
        let b = theta_char_eval(&z, &tau, &Characteristic::zero(2), &[], DEFAULT_TARGET).unwrap();
        assert!((a.value - b.value).norm() <= 1e-14 * a.value.norm());
        assert_eq!(a.scale_exponent, b.scale_exponent);
    }

    #[test]
    fn asymmetric_tau_rejected() {
        let e = RiemannMatrix::from_parts(&[vec![0.0, 0.1], vec![0.2, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap_err();
        assert_eq!(e.code(), "TAU_NOT_SYMMETRIC");
        let e = RiemannMatrix::from_parts(&[vec![0.0]], &[vec![-1.0]]).unwrap_err();
        assert_eq!(e.code(), "TAU_NOT_POSITIVE");
    }

    #[test]
    fn tail_bound_decreases_with_radius() {
        let w = [(3.0, 1.0), (3.0, 1.0)];
        let a = tail_bound(2, 3.0, 1.0, &w);
        let b = tail_bound(2, 5.0, 1.0, &w);
        assert!(b < a && b > 0.0);
        assert!(tail_bound(2, 0.5, 1.0, &w).is_infinite());
    }

    #[test]
    fn enumeration_order_is_fixed() {
        let tau = RiemannMatrix::from_parts(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[vec![1.0, 0.2], vec![0.2, 1.5]]).unwrap();
        let collect = || {
            let mut v = Vec::new();
            enumerate_ellipsoid(&tau.chol, &[0.1, -0.3], 2.0, &mut |n: &[i64]| v.push(n.to_vec()));
            v
        };
        let a = collect();
        assert_eq!(a, collect());
        assert!(a.contains(&vec![0, 0]));
    }
}
