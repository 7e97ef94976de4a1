//! KP-type bilinear expressions in theta and their term-normalized residuals.
//!
//! Every expression is assembled from theta jets at `z` (and `z + a`). Jets are
//! stored with their exponential growth factored out; since every term is a
//! product with exactly one factor per jet (or a fixed number from the same
//! jet), those factors multiply all terms equally and are dropped. Residuals are
//! `|Σ terms| / Σ |terms|`, which lies in `[0, 1]`.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::cvec;
use crate::error::{Error, Result};
use crate::json::{from_cx, schema_id, to_cx, Cx};
use crate::theta::{theta_eval, AbelianPoint, DerivRequest, RiemannMatrix, ThetaJet, DEFAULT_TARGET};

/// Normalizers below this are treated as a degenerate sample.
pub const MIN_NORMALIZER: f64 = 1e-300;

/// Direction data `U, V, W` for `D₁, D₂, D₃`, the constants `c, d`, the
/// exponents `A, B` and the hierarchy jet `ζ_k`, `d_k` (with `d_k` multiplying
/// `ε^{k+3}`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "DirectionJetJson", into = "DirectionJetJson")]
pub struct DirectionJet {
    pub u: Option<Vec<C64>>,
    pub v: Option<Vec<C64>>,
    pub w: Option<Vec<C64>>,
    pub c: Option<C64>,
    pub d: Option<C64>,
    pub a_exp: Option<C64>,
    pub b_exp: Option<C64>,
    pub zeta: Option<Vec<Vec<C64>>>,
    pub dcoef: Option<Vec<C64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionJetJson {
    #[serde(rename = "U", default)]
    pub u: Option<Vec<Cx>>,
    #[serde(rename = "V", default)]
    pub v: Option<Vec<Cx>>,
    #[serde(rename = "W", default)]
    pub w: Option<Vec<Cx>>,
    #[serde(default)]
    pub c: Option<Cx>,
    #[serde(default)]
    pub d: Option<Cx>,
    #[serde(rename = "A", default)]
    pub a: Option<Cx>,
    #[serde(rename = "B", default)]
    pub b: Option<Cx>,
    #[serde(default)]
    pub zeta: Option<Vec<Vec<Cx>>>,
    #[serde(default)]
    pub dcoef: Option<Vec<Cx>>,
}

impl From<DirectionJetJson> for DirectionJet {
    fn from(j: DirectionJetJson) -> Self {
        let v = |o: Option<Vec<Cx>>| o.map(|v| from_cx(&v));
        DirectionJet {
            u: v(j.u),
            v: v(j.v),
            w: v(j.w),
            c: j.c.map(Into::into),
            d: j.d.map(Into::into),
            a_exp: j.a.map(Into::into),
            b_exp: j.b.map(Into::into),
            zeta: j.zeta.map(|z| z.iter().map(|v| from_cx(v)).collect()),
            dcoef: v(j.dcoef),
        }
    }
}

impl From<DirectionJet> for DirectionJetJson {
    fn from(j: DirectionJet) -> Self {
        let v = |o: Option<Vec<C64>>| o.map(|v| to_cx(&v));
        DirectionJetJson {
            u: v(j.u),
            v: v(j.v),
            w: v(j.w),
            c: j.c.map(Into::into),
            d: j.d.map(Into::into),
            a: j.a_exp.map(Into::into),
            b: j.b_exp.map(Into::into),
            zeta: j.zeta.map(|z| z.iter().map(|v| to_cx(v)).collect()),
            dcoef: v(j.dcoef),
        }
    }
}

fn missing(name: &str) -> Error {
    Error::InvalidInput(format!("direction jet is missing {name}"))
}

impl DirectionJet {
    pub fn with_uvw(u: Vec<C64>, v: Vec<C64>, w: Vec<C64>) -> Self {
        DirectionJet { u: Some(u), v: Some(v), w: Some(w), ..Default::default() }
    }

    pub fn u(&self) -> Result<&[C64]> {
        self.u.as_deref().ok_or_else(|| missing("U"))
    }

    pub fn v(&self) -> Result<&[C64]> {
        self.v.as_deref().ok_or_else(|| missing("V"))
    }

    pub fn w(&self) -> Result<&[C64]> {
        self.w.as_deref().ok_or_else(|| missing("W"))
    }

    pub fn c_or_zero(&self) -> C64 {
        self.c.unwrap_or_default()
    }

    pub fn d_or_zero(&self) -> C64 {
        self.d.unwrap_or_default()
    }

    /// `(λU, λ²V, λ³W, λ²c, λ⁴d)`; leaves the Hirota and one-point residuals unchanged.
    pub fn gauge_scaled(&self, lambda: C64) -> Self {
        let l2 = lambda * lambda;
        DirectionJet {
            u: self.u.as_ref().map(|v| cvec::scale(v, lambda)),
            v: self.v.as_ref().map(|v| cvec::scale(v, l2)),
            w: self.w.as_ref().map(|v| cvec::scale(v, l2 * lambda)),
            c: self.c.map(|c| c * l2),
            d: self.d.map(|d| d * l2 * l2),
            ..self.clone()
        }
    }

    /// Gauge factor `λ` making `|λU| = 1` with the first nonzero component real positive.
    pub fn gauge_factor(&self) -> Result<C64> {
        let u = self.u()?;
        let n = cvec::norm(u);
        let first = u.iter().find(|c| c.norm() > 0.0).ok_or_else(|| Error::InvalidInput("U vanishes".into()))?;
        Ok(first.conj() / (first.norm() * n))
    }

    pub fn gauge_normalized(&self) -> Result<Self> {
        Ok(self.gauge_scaled(self.gauge_factor()?))
    }

    /// Jet whose `W` is the time flow of the KP equation `3u_yy = (4u_t − 6uu_x − u_xxx)_x`
    /// for `u = 2∂²ₓ log θ + c`, given that `(U, V, W, d)` solves the bilinear form:
    /// `W_kp = (3W + 6cU)/4`.
    pub fn kp_flow(&self) -> Result<Self> {
        let u = self.u()?;
        let w = self.w()?;
        let c = self.c_or_zero();
        let wk: Vec<C64> = w.iter().zip(u).map(|(w, u)| (3.0 * w + 6.0 * c * u) / 4.0).collect();
        Ok(DirectionJet { w: Some(wk), ..self.clone() })
    }

    /// `ζ(ε) = Σ_k ζ_k ε^k`.
    pub fn zeta_at(&self, eps: C64) -> Result<Vec<C64>> {
        let zeta = self.zeta.as_ref().filter(|z| !z.is_empty()).ok_or_else(|| missing("zeta"))?;
        let g = zeta[0].len();
        let mut acc = cvec::zeros(g);
        let mut p = eps;
        for zk in zeta {
            acc = cvec::axpy(&acc, p, zk);
            p *= eps;
        }
        Ok(acc)
    }

    /// `d(ε) = Σ_k d_k ε^{k+3}` (coefficients start at `ε³`).
    pub fn d_at(&self, eps: C64) -> C64 {
        let mut p = eps * eps * eps;
        let mut acc = C64::new(0.0, 0.0);
        for dk in self.dcoef.iter().flatten() {
            acc += dk * p;
            p *= eps;
        }
        acc
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("jet serializes")
    }
}

/// Raw value of a bilinear expression together with its term-sum normalizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    pub value: C64,
    pub scale: f64,
}

impl Bilinear {
    pub fn from_terms(terms: &[C64]) -> Self {
        Bilinear { value: terms.iter().sum(), scale: terms.iter().map(|t| t.norm()).sum() }
    }

    /// `|value| / scale`; fails on a vanishing normalizer.
    pub fn normalized(&self) -> Result<f64> {
        if !(self.scale >= MIN_NORMALIZER) {
            return Err(Error::DegenerateSample(self.scale));
        }
        Ok((self.value.norm() / self.scale).min(1.0))
    }

    /// Like [`normalized`](Self::normalized) but an all-zero expression counts as 0.
    pub fn normalized_or_zero(&self) -> Result<f64> {
        if self.scale == 0.0 {
            Ok(0.0)
        } else {
            self.normalized()
        }
    }

    /// Complex residual `value / scale`, used as a least-squares component.
    pub fn ratio(&self) -> Result<C64> {
        if !(self.scale >= MIN_NORMALIZER) {
            return Err(Error::DegenerateSample(self.scale));
        }
        Ok(self.value / self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    TermSum,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub schema: String,
    pub sample_points: Vec<Vec<Cx>>,
    pub residuals: Vec<f64>,
    pub normalization: Normalization,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl ResidualReport {
    pub fn new(points: &[AbelianPoint], residuals: Vec<f64>, tolerance: f64) -> Self {
        let max = residuals.iter().cloned().fold(0.0, f64::max);
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &r in &residuals {
            let y = r - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let mean = if residuals.is_empty() { 0.0 } else { sum / residuals.len() as f64 };
        ResidualReport {
            schema: schema_id("residual-report"),
            sample_points: points.iter().map(|p| to_cx(&p.z)).collect(),
            residuals,
            normalization: Normalization::TermSum,
            max_residual: max,
            mean_residual: mean,
            tolerance,
            pass: max <= tolerance,
            notes: Vec::new(),
        }
    }
}

pub(crate) fn jet_at(z: &[C64], tau: &RiemannMatrix, reqs: &[DerivRequest]) -> Result<ThetaJet> {
    theta_eval(&AbelianPoint::new(z.to_vec()), tau, reqs, DEFAULT_TARGET)
}

fn req(dirs: &[&[C64]]) -> DerivRequest {
    DerivRequest::along(dirs)
}

/// Hirota form of KP at `z`.
pub fn hirota_bilinear(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet) -> Result<Bilinear> {
    let (u, v, w) = (jet.u()?, jet.v()?, jet.w()?);
    let d = jet.d.ok_or_else(|| missing("d"))?;
    let reqs = [
        req(&[u]),
        req(&[u, u]),
        req(&[u, u, u]),
        req(&[u, u, u, u]),
        req(&[v]),
        req(&[v, v]),
        req(&[u, w]),
        req(&[w]),
    ];
    let j = jet_at(&z.z, tau, &reqs)?;
    let th = j.value;
    let [d1, d11, d111, d1111, d2, d22, d13, d3]: [C64; 8] = j.derivs.try_into().unwrap();
    Ok(Bilinear::from_terms(&[
        d1111 * th,
        -4.0 * d111 * d1,
        3.0 * d11 * d11,
        3.0 * d22 * th,
        -3.0 * d2 * d2,
        -3.0 * d13 * th,
        3.0 * d3 * d1,
        -d * th * th,
    ]))
}

pub fn hirota_residual(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet) -> Result<f64> {
    hirota_bilinear(z, tau, jet)?.normalized_or_zero()
}

/// `θ, D₁θ, D₁²θ, D₂θ` at a point.
struct OnePointJet {
    th: C64,
    d1: C64,
    d11: C64,
    d2: C64,
}

fn one_point_jet(z: &[C64], tau: &RiemannMatrix, u: &[C64], v: &[C64]) -> Result<OnePointJet> {
    let j = jet_at(z, tau, &[req(&[u]), req(&[u, u]), req(&[v])])?;
    Ok(OnePointJet { th: j.value, d1: j.derivs[0], d11: j.derivs[1], d2: j.derivs[2] })
}

fn check_shift(a: &[C64], g: usize) -> Result<()> {
    if a.len() != g {
        return Err(Error::DimensionMismatch { expected: g, got: a.len() });
    }
    Ok(())
}

/// The five shared terms `D₁²θ·θ_a + θ·D₁²θ_a + D₂θ·θ_a − θ·D₂θ_a − 2D₁θ·D₁θ_a`.
fn bracket(p: &OnePointJet, q: &OnePointJet) -> [C64; 5] {
    [p.d11 * q.th, p.th * q.d11, p.d2 * q.th, -p.th * q.d2, -2.0 * p.d1 * q.d1]
}

/// One-point equation `P` with `θ_a(z) = θ(z + a)`.
pub fn p_bilinear(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet, a: &[C64]) -> Result<Bilinear> {
    let (u, v) = (jet.u()?, jet.v()?);
    let c = jet.c.ok_or_else(|| missing("c"))?;
    check_shift(a, tau.genus())?;
    let p = one_point_jet(&z.z, tau, u, v)?;
    let q = one_point_jet(&cvec::add(&z.z, a), tau, u, v)?;
    let b = bracket(&p, &q);
    Ok(Bilinear::from_terms(&[b[0], b[1], b[2], b[3], b[4], c * p.th * q.th]))
}

pub fn p_residual(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet, a: &[C64]) -> Result<f64> {
    p_bilinear(z, tau, jet, a)?.normalized_or_zero()
}

/// Bilinear equation with exponents `A, B` from `ψ = e^{Ax+By} θ(xU+yV+a+z)/θ(xU+yV+z)`.
pub fn p_ab_bilinear(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet, a: &[C64]) -> Result<Bilinear> {
    let (u, v) = (jet.u()?, jet.v()?);
    let aa = jet.a_exp.ok_or_else(|| missing("A"))?;
    let bb = jet.b_exp.ok_or_else(|| missing("B"))?;
    check_shift(a, tau.genus())?;
    let p = one_point_jet(&z.z, tau, u, v)?;
    let q = one_point_jet(&cvec::add(&z.z, a), tau, u, v)?;
    let b = bracket(&p, &q);
    Ok(Bilinear::from_terms(&[
        b[0],
        b[1],
        b[2],
        b[3],
        b[4],
        2.0 * aa * q.d1 * p.th,
        -2.0 * aa * q.th * p.d1,
        (aa * aa - bb) * p.th * q.th,
    ]))
}

pub fn p_ab_residual(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet, a: &[C64]) -> Result<f64> {
    p_ab_bilinear(z, tau, jet, a)?.normalized_or_zero()
}

/// One-point data `(V − 2A·U, c = A² − B)` equivalent to the `(V, A, B)` form.
pub fn p_ab_to_p(jet: &DirectionJet) -> Result<DirectionJet> {
    let (u, v) = (jet.u()?, jet.v()?);
    let aa = jet.a_exp.ok_or_else(|| missing("A"))?;
    let bb = jet.b_exp.ok_or_else(|| missing("B"))?;
    Ok(DirectionJet { v: Some(cvec::axpy(v, -2.0 * aa, u)), c: Some(aa * aa - bb), a_exp: None, b_exp: None, ..jet.clone() })
}

/// Local magnitude `|θ| + ‖∇θ‖` from a jet whose first `g` derivatives are the gradient.
pub(crate) fn local_scale(j: &ThetaJet, g: usize) -> f64 {
    j.value.norm() + j.derivs[..g].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

pub(crate) fn gradient_requests(g: usize) -> Vec<DerivRequest> {
    (0..g).map(|i| DerivRequest(vec![cvec::unit(g, i)])).collect()
}

/// Degree-three identity on the theta divisor (difference of its two sides).
pub fn longeq_bilinear(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet) -> Result<Bilinear> {
    let (u, v) = (jet.u()?, jet.v()?);
    let g = tau.genus();
    let mut reqs = gradient_requests(g);
    reqs.extend([req(&[u]), req(&[u, u]), req(&[u, u, u]), req(&[u, u, u, u]), req(&[v]), req(&[v, v]), req(&[u, v])]);
    let j = jet_at(&z.z, tau, &reqs)?;
    let scale = local_scale(&j, g);
    if j.value.norm() > 1e-8 * scale {
        return Err(Error::NotOnDivisor(j.value.norm() / scale));
    }
    let [d1, d11, d111, d1111, d2, d22, d12]: [C64; 7] = j.derivs[g..].try_into().unwrap();
    Ok(Bilinear::from_terms(&[
        -d11 * d2 * d2,
        2.0 * d12 * d2 * d1,
        -d22 * d1 * d1,
        d11 * d11 * d11,
        -2.0 * d11 * d111 * d1,
        d1111 * d1 * d1,
    ]))
}

pub fn longeq_residual(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet) -> Result<f64> {
    longeq_bilinear(z, tau, jet)?.normalized_or_zero()
}

/// Truncated KP hierarchy at parameter `ε`, with shift `a = 2ζ(ε)`:
///
/// ```text
/// ε·(D₁²θ·θ_a + θ·D₁²θ_a + D₂θ·θ_a − θ·D₂θ_a − 2D₁θ·D₁θ_a) − D₁θ_a·θ + θ_a·D₁θ + d(ε)θ·θ_a
/// ```
///
/// With this sign of the middle pair the first-order terms cancel when `ζ₁ = U`;
/// it is `ε` times the exponent form with `A = −1/(2ε)`, `B = A² − d(ε)/ε`.
pub fn hierarchy_bilinear(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet, eps: C64) -> Result<Bilinear> {
    let (u, v) = (jet.u()?, jet.v()?);
    if eps.norm() >= 1.0 {
        return Err(Error::InvalidInput("|epsilon| must be < 1".into()));
    }
    let a = cvec::scale(&jet.zeta_at(eps)?, C64::new(2.0, 0.0));
    check_shift(&a, tau.genus())?;
    let p = one_point_jet(&z.z, tau, u, v)?;
    let q = one_point_jet(&cvec::add(&z.z, &a), tau, u, v)?;
    let b = bracket(&p, &q);
    let d = jet.d_at(eps);
    Ok(Bilinear::from_terms(&[
        eps * b[0],
        eps * b[1],
        eps * b[2],
        eps * b[3],
        eps * b[4],
        -q.d1 * p.th,
        q.th * p.d1,
        d * p.th * q.th,
    ]))
}

pub fn hierarchy_residual(z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet, eps: C64) -> Result<f64> {
    hierarchy_bilinear(z, tau, jet, eps)?.normalized_or_zero()
}

/// The exponent-form data `(a, A, B)` matching the hierarchy at `ε`.
pub fn hierarchy_exponent_form(jet: &DirectionJet, eps: C64) -> Result<(Vec<C64>, C64, C64)> {
    let a = cvec::scale(&jet.zeta_at(eps)?, C64::new(2.0, 0.0));
    let aa = -1.0 / (2.0 * eps);
    let bb = aa * aa - jet.d_at(eps) / eps;
    Ok((a, aa, bb))
}

/// `u = 2∂²ₓ log θ(xU + yV + tW + z) + c`.
pub fn kp_field_u(x: f64, y: f64, t: f64, z: &AbelianPoint, tau: &RiemannMatrix, jet: &DirectionJet) -> Result<C64> {
    let u = jet.u()?;
    let c = jet.c_or_zero();
    if cvec::is_zero(u) {
        return Ok(c);
    }
    let mut p = cvec::axpy(&z.z, C64::new(x, 0.0), u);
    if y != 0.0 {
        p = cvec::axpy(&p, C64::new(y, 0.0), jet.v()?);
    }
    if t != 0.0 {
        p = cvec::axpy(&p, C64::new(t, 0.0), jet.w()?);
    }
    let g = tau.genus();
    let mut reqs = gradient_requests(g);
    reqs.extend([req(&[u]), req(&[u, u])]);
    let j = jet_at(&p, tau, &reqs)?;
    let scale = local_scale(&j, g);
    if j.value.norm() < 1e-10 * scale {
        return Err(Error::Pole(j.value.norm() / scale));
    }
    let (th, d1, d11) = (j.value, j.derivs[g], j.derivs[g + 1]);
    Ok(2.0 * (d11 * th - d1 * d1) / (th * th) + c)
}

/// `ψ = exp(Ax + By) · θ(xU + yV + a + z) / θ(xU + yV + z)`.
#[allow(clippy::too_many_arguments)]
pub fn baker_akhiezer(
    x: f64,
    y: f64,
    z: &AbelianPoint,
    tau: &RiemannMatrix,
    jet: &DirectionJet,
    a: &[C64],
    aa: C64,
    bb: C64,
) -> Result<C64> {
    let (u, v) = (jet.u()?, jet.v()?);
    check_shift(a, tau.genus())?;
    let p = cvec::axpy(&cvec::axpy(&z.z, C64::new(x, 0.0), u), C64::new(y, 0.0), v);
    let g = tau.genus();
    let den = jet_at(&p, tau, &gradient_requests(g))?;
    let scale = local_scale(&den, g);
    if den.value.norm() < 1e-10 * scale {
        return Err(Error::Pole(den.value.norm() / scale));
    }
    let num = jet_at(&cvec::add(&p, a), tau, &[])?;
    let log = aa * x + bb * y + (num.scale_exponent - den.scale_exponent);
    Ok(log.exp() * num.value / den.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn zero_jet(g: usize) -> DirectionJet {
        DirectionJet {
            c: Some(c(0.0, 0.0)),
            d: Some(c(0.0, 0.0)),
            ..DirectionJet::with_uvw(cvec::zeros(g), cvec::zeros(g), cvec::zeros(g))
        }
    }

    #[test]
    fn zero_directions_give_zero_residuals() {
        let tau = sampling::random_tau(2, 3);
        let jet = zero_jet(2);
        let z = AbelianPoint::new(vec![c(0.1, 0.2), c(-0.3, 0.05)]);
        assert_eq!(hirota_residual(&z, &tau, &jet).unwrap(), 0.0);
        assert_eq!(p_residual(&z, &tau, &jet, &[c(0.2, 0.1), c(0.0, 0.3)]).unwrap(), 0.0);
    }

    #[test]
    fn p_with_zero_shift_reduces_to_log_derivative() {
        let tau = RiemannMatrix::identity_imaginary(1);
        let jet = DirectionJet { c: Some(c(0.0, 0.0)), ..DirectionJet::with_uvw(vec![c(1.0, 0.0)], vec![c(0.3, -0.2)], vec![c(0.0, 0.0)]) };
        for z in sampling::sample_points(&tau, 20, 11) {
            let b = p_bilinear(&z, &tau, &jet, &[c(0.0, 0.0)]).unwrap();
            let j = jet_at(&z.z, &tau, &[req(&[&[c(1.0, 0.0)]]), req(&[&[c(1.0, 0.0)], &[c(1.0, 0.0)]])]).unwrap();
            let expect = 2.0 * (j.derivs[1] * j.value - j.derivs[0] * j.derivs[0]);
            assert!((b.value - expect).norm() < 1e-12 * b.scale);
            assert!(b.normalized().unwrap() > 1e-3);
        }
    }

    #[test]
    fn exponent_form_with_zero_exponents_matches_one_point_form() {
        let tau = sampling::random_tau(2, 5);
        let mut r = sampling::rng(9);
        let u = sampling::random_cvec(2, &mut r);
        let v = sampling::random_cvec(2, &mut r);
        let a = sampling::random_cvec(2, &mut r);
        let cc = c(0.4, -1.1);
        let p_jet = DirectionJet { c: Some(cc), ..DirectionJet::with_uvw(u.clone(), v.clone(), cvec::zeros(2)) };
        let ab_jet = DirectionJet { a_exp: Some(c(0.0, 0.0)), b_exp: Some(-cc), ..p_jet.clone() };
        for z in sampling::sample_points(&tau, 5, 1) {
            let p = p_residual(&z, &tau, &p_jet, &a).unwrap();
            let q = p_ab_residual(&z, &tau, &ab_jet, &a).unwrap();
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn exponent_form_matches_substituted_one_point_form() {
        let tau = sampling::random_tau(2, 5);
        let mut r = sampling::rng(12);
        let jet = DirectionJet {
            a_exp: Some(c(0.7, -0.2)),
            b_exp: Some(c(-0.3, 0.5)),
            ..DirectionJet::with_uvw(sampling::random_cvec(2, &mut r), sampling::random_cvec(2, &mut r), cvec::zeros(2))
        };
        let a = sampling::random_cvec(2, &mut r);
        let p_jet = p_ab_to_p(&jet).unwrap();
        for z in sampling::sample_points(&tau, 10, 2) {
            let q = p_ab_bilinear(&z, &tau, &jet, &a).unwrap();
            let p = p_bilinear(&z, &tau, &p_jet, &a).unwrap();
            assert!((q.value - p.value).norm() < 1e-13 * q.scale.max(p.scale));
        }
    }

    #[test]
    fn hierarchy_vanishes_at_zero_parameter() {
        let tau = sampling::random_tau(2, 2);
        let mut r = sampling::rng(4);
        let mut jet = DirectionJet::with_uvw(sampling::random_cvec(2, &mut r), sampling::random_cvec(2, &mut r), cvec::zeros(2));
        jet.zeta = Some(vec![jet.u.clone().unwrap()]);
        let z = sampling::sample_points(&tau, 1, 3).remove(0);
        assert_eq!(hierarchy_residual(&z, &tau, &jet, c(0.0, 0.0)).unwrap(), 0.0);
        assert!(hierarchy_residual(&z, &tau, &jet, c(1.0, 0.0)).is_err());
    }

    #[test]
    fn kp_field_constant_for_zero_direction() {
        let tau = RiemannMatrix::identity_imaginary(1);
        let jet = DirectionJet { c: Some(c(0.7, 0.1)), ..zero_jet(1) };
        let z = AbelianPoint::new(vec![c(0.2, 0.1)]);
        assert_eq!(kp_field_u(0.3, -1.0, 2.0, &z, &tau, &jet).unwrap(), c(0.7, 0.1));
    }

    #[test]
    fn baker_akhiezer_trivial_shift_is_one() {
        let tau = sampling::random_tau(2, 8);
        let jet = DirectionJet::with_uvw(vec![c(1.0, 0.0), c(0.2, 0.0)], vec![c(0.1, 0.3), c(0.0, 1.0)], cvec::zeros(2));
        let z = AbelianPoint::new(vec![c(0.1, 0.2), c(0.3, -0.1)]);
        let psi = baker_akhiezer(0.4, -0.3, &z, &tau, &jet, &cvec::zeros(2), c(0.0, 0.0), c(0.0, 0.0)).unwrap();
        assert!((psi - c(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn longeq_rejects_off_divisor_points() {
        let tau = RiemannMatrix::identity_imaginary(1);
        let jet = DirectionJet::with_uvw(vec![c(1.0, 0.0)], vec![c(0.5, 0.0)], vec![c(0.0, 0.0)]);
        let e = longeq_residual(&AbelianPoint::zero(1), &tau, &jet).unwrap_err();
        assert_eq!(e.code(), "NOT_ON_DIVISOR");
        let on = AbelianPoint::new(vec![c(0.5, 0.5)]);
        let zero_u = DirectionJet::with_uvw(vec![c(0.0, 0.0)], vec![c(0.5, 0.0)], vec![c(0.0, 0.0)]);
        assert_eq!(longeq_residual(&on, &tau, &zero_u).unwrap(), 0.0);
    }

    #[test]
    fn jet_json_uses_re_im_records_and_nulls() {
        let jet = DirectionJet { c: Some(c(1.0, 2.0)), ..DirectionJet::with_uvw(vec![c(1.0, 0.0)], vec![c(0.0, 1.0)], vec![c(0.5, 0.5)]) };
        let v = jet.to_json();
        assert_eq!(v["U"][0]["re"], 1.0);
        assert_eq!(v["c"]["im"], 2.0);
        assert!(v["d"].is_null());
        assert!(v["zeta"].is_null());
        let back: DirectionJet = serde_json::from_value(v).unwrap();
        assert_eq!(back, jet);
    }

    #[test]
    fn gauge_normalization_fixes_u() {
        let jet = DirectionJet::with_uvw(vec![c(0.0, 0.0), c(0.0, 2.0)], vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0); 2]);
        let n = jet.gauge_normalized().unwrap();
        let u = n.u().unwrap();
        assert!((cvec::norm(u) - 1.0).abs() < 1e-15);
        assert!(u[1].im.abs() < 1e-15 && u[1].re > 0.0);
    }
}
