//! Kummer map through second-order theta functions, flex tests on jets of the
//! Kummer image, and a decomposability indicator for genus 2.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvec;
use crate::error::{Error, Result};
use crate::json::{cvec as cvec_serde, schema_id};
use crate::theta::{reduce, theta_char_eval, theta_shifted_eval, AbelianPoint, Characteristic, DerivRequest, RiemannMatrix, DEFAULT_TARGET};

/// Default singular-value ratio below which a jet matrix counts as rank deficient.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// Homogeneous Kummer coordinates `Θ₂[σ](z)`, σ in binary order (σ₁ most significant).
///
/// All coordinates (and derivative rows) share one scale factor `exp(scale_exponent)`,
/// which is dropped since only the projective point matters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KummerPoint {
    #[serde(with = "cvec_serde")]
    pub coords: Vec<C64>,
    pub base: AbelianPoint,
    /// One coordinate vector per derivative request.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derivs: Vec<Vec<C64>>,
    pub scale_exponent: f64,
}

impl KummerPoint {
    pub fn unscaled_coords(&self) -> Vec<C64> {
        let s = self.scale_exponent.exp();
        self.coords.iter().map(|c| c * s).collect()
    }

    pub fn unscaled_deriv(&self, i: usize) -> Vec<C64> {
        let s = self.scale_exponent.exp();
        self.derivs[i].iter().map(|c| c * s).collect()
    }
}

fn sigma_bits(g: usize, s: usize) -> Vec<f64> {
    (0..g).map(|i| ((s >> (g - 1 - i)) & 1) as f64).collect()
}

/// `Θ₂[σ](z) = θ[σ/2, 0](2z, 2τ)` for every σ, with derivatives along the
/// requested directions (in `z`).
pub fn kummer_map(z: &AbelianPoint, tau: &RiemannMatrix, requests: &[DerivRequest]) -> Result<KummerPoint> {
    let g = tau.genus();
    if z.z.len() != g {
        return Err(Error::DimensionMismatch { expected: g, got: z.z.len() });
    }
    let tau2 = tau.scaled(2.0)?;
    let z2 = cvec::scale(&z.z, C64::new(2.0, 0.0));
    // d/dz along h of f(2z) is (d/dw along 2h) f at w = 2z
    let reqs2: Vec<DerivRequest> = requests
        .iter()
        .map(|r| DerivRequest(r.0.iter().map(|h| cvec::scale(h, C64::new(2.0, 0.0))).collect()))
        .collect();
    let jets = (0..1usize << g)
        .map(|s| {
            let eps: Vec<f64> = sigma_bits(g, s).iter().map(|b| b / 2.0).collect();
            theta_shifted_eval(&z2, &tau2, &eps, &reqs2, DEFAULT_TARGET)
        })
        .collect::<Result<Vec<_>>>()?;
    let top = jets.iter().map(|j| j.scale_exponent).fold(f64::NEG_INFINITY, f64::max);
    let factors: Vec<f64> = jets.iter().map(|j| (j.scale_exponent - top).exp()).collect();
    let coords = jets.iter().zip(&factors).map(|(j, f)| j.value * f).collect();
    let derivs = (0..requests.len())
        .map(|r| jets.iter().zip(&factors).map(|(j, f)| j.derivs[r] * f).collect())
        .collect();
    Ok(KummerPoint { coords, base: z.clone(), derivs, scale_exponent: top })
}

/// Singular values of the row-normalized matrix, descending, divided by the largest.
/// Zero rows are dropped; row normalization leaves the rank unchanged.
pub fn rank_ratios(rows: &[Vec<C64>]) -> Result<Vec<f64>> {
    let kept: Vec<Vec<C64>> = rows
        .iter()
        .filter_map(|r| {
            let n = cvec::norm(r);
            (n > 0.0 && n.is_finite()).then(|| cvec::scale(r, C64::new(1.0 / n, 0.0)))
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::DegenerateJet);
    }
    let cols = kept[0].len();
    let m = DMatrix::from_fn(kept.len(), cols, |i, j| kept[i][j]);
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv[0];
    let mut out: Vec<f64> = sv.iter().map(|s| s / top).collect();
    out.resize(rows.len(), 0.0);
    Ok(out)
}

/// Whether two Kummer points agree projectively (2-row rank ratio ≤ `tol`).
pub fn projectively_equal(a: &[C64], b: &[C64], tol: f64) -> Result<bool> {
    Ok(rank_ratios(&[a.to_vec(), b.to_vec()])?[1] <= tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlexOrder {
    /// Rows `F, F′, F″`.
    Second,
    /// Rows `F, F′, F″, F‴`.
    Third,
}

impl FlexOrder {
    pub fn from_int(k: u32) -> Result<Self> {
        match k {
            2 => Ok(FlexOrder::Second),
            3 => Ok(FlexOrder::Third),
            _ => Err(Error::InvalidInput(format!("flex order must be 2 or 3, got {k}"))),
        }
    }
}

/// Jet rows of `ε ↦ κ(b + 2Uε + 2Vε² + 2Wε³)` at `ε = 0`.
pub fn flex_rows(b: &AbelianPoint, tau: &RiemannMatrix, u: &[C64], v: &[C64], w: Option<&[C64]>, order: FlexOrder) -> Result<Vec<Vec<C64>>> {
    let g = tau.genus();
    for x in [Some(u), Some(v), w].into_iter().flatten() {
        if x.len() != g {
            return Err(Error::DimensionMismatch { expected: g, got: x.len() });
        }
    }
    if cvec::is_zero(u) {
        return Err(Error::DegenerateJet);
    }
    let mut reqs = vec![
        DerivRequest(vec![u.to_vec()]),
        DerivRequest(vec![u.to_vec(); 2]),
        DerivRequest(vec![v.to_vec()]),
    ];
    if order == FlexOrder::Third {
        let zero = cvec::zeros(g);
        reqs.push(DerivRequest(vec![u.to_vec(); 3]));
        reqs.push(DerivRequest(vec![u.to_vec(), v.to_vec()]));
        reqs.push(DerivRequest(vec![w.unwrap_or(&zero).to_vec()]));
    }
    let k = kummer_map(b, tau, &reqs)?;
    let d = &k.derivs;
    let n = k.coords.len();
    let mut rows = vec![
        k.coords.clone(),
        d[0].iter().map(|x| 2.0 * x).collect(),
        (0..n).map(|i| 4.0 * d[1][i] + 4.0 * d[2][i]).collect(),
    ];
    if order == FlexOrder::Third {
        rows.push((0..n).map(|i| 8.0 * d[3][i] + 24.0 * d[4][i] + 12.0 * d[5][i]).collect());
    }
    if rows.iter().all(|r| cvec::norm(r) == 0.0) {
        return Err(Error::DegenerateJet);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfVerdict {
    pub m: Vec<u8>,
    pub n: Vec<u8>,
    pub b: AbelianPoint,
    pub sigma_ratios: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexReport {
    pub schema: String,
    pub b: AbelianPoint,
    pub sigma_ratios: Vec<f64>,
    pub order: FlexOrder,
    pub threshold: f64,
    pub pass: bool,
    pub tested_halves: Vec<HalfVerdict>,
    pub notes: Vec<String>,
}

/// Rank test of the jet at a single base point: pass iff `σ₃/σ₁ ≤ threshold`.
pub fn flex_test(b: &AbelianPoint, u: &[C64], v: &[C64], tau: &RiemannMatrix, order: FlexOrder, w: Option<&[C64]>, threshold: f64) -> Result<FlexReport> {
    let rows = flex_rows(b, tau, u, v, w, order)?;
    let ratios = rank_ratios(&rows)?;
    let pass = ratios.get(2).copied().unwrap_or(0.0) <= threshold;
    Ok(FlexReport {
        schema: schema_id("flex"),
        b: b.clone(),
        sigma_ratios: ratios,
        order,
        threshold,
        pass,
        tested_halves: Vec::new(),
        notes: ambient_note(tau.genus()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfPoint {
    pub m: Vec<u8>,
    pub n: Vec<u8>,
    pub point: AbelianPoint,
}

/// All `b` with `2b ≡ a`: `a/2 + (m + τn)/2` for `m, n ∈ {0,1}^g`, reduced,
/// ordered lexicographically by `(m, n)`.
pub fn half_points(a: &AbelianPoint, tau: &RiemannMatrix) -> Vec<HalfPoint> {
    let g = tau.genus();
    let b0 = cvec::scale(&a.z, C64::new(0.5, 0.0));
    let mut out = Vec::with_capacity(1 << (2 * g));
    for mi in 0..1usize << g {
        let m = sigma_bits(g, mi);
        for ni in 0..1usize << g {
            let n = sigma_bits(g, ni);
            let half_m: Vec<f64> = m.iter().map(|x| x / 2.0).collect();
            let half_n: Vec<f64> = n.iter().map(|x| x / 2.0).collect();
            let shift = tau.from_lattice_coords(&half_m, &half_n);
            let mut p = AbelianPoint::new(reduce(&cvec::add(&b0, &shift), tau));
            p.reduced = true;
            out.push(HalfPoint {
                m: m.iter().map(|&x| x as u8).collect(),
                n: n.iter().map(|&x| x as u8).collect(),
                point: p,
            });
        }
    }
    out
}

fn ambient_note(g: usize) -> Vec<String> {
    if g == 1 {
        vec!["genus 1: the Kummer image spans a 2-dimensional space, so every jet has rank at most 2".into()]
    } else {
        Vec::new()
    }
}

/// Flex test at every half point of `a`; passes if any candidate passes.
/// The reported `b` and ratios are those of the candidate with the smallest `σ₃/σ₁`
/// (first in `(m, n)` order on ties).
pub fn flex_test_halves(a: &AbelianPoint, u: &[C64], v: &[C64], tau: &RiemannMatrix, order: FlexOrder, w: Option<&[C64]>, threshold: f64) -> Result<FlexReport> {
    let halves = half_points(a, tau);
    let verdicts = halves
        .par_iter()
        .map(|h| {
            let r = flex_test(&h.point, u, v, tau, order, w, threshold)?;
            Ok(HalfVerdict { m: h.m.clone(), n: h.n.clone(), b: h.point.clone(), sigma_ratios: r.sigma_ratios, pass: r.pass })
        })
        .collect::<Result<Vec<_>>>()?;
    let key = |v: &HalfVerdict| v.sigma_ratios.get(2).copied().unwrap_or(0.0);
    let best = verdicts
        .iter()
        .enumerate()
        .min_by(|x, y| key(x.1).total_cmp(&key(y.1)).then(x.0.cmp(&y.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(FlexReport {
        schema: schema_id("flex"),
        b: verdicts[best].b.clone(),
        sigma_ratios: verdicts[best].sigma_ratios.clone(),
        order,
        threshold,
        pass: verdicts.iter().any(|v| v.pass),
        tested_halves: verdicts,
        notes: [vec!["irreducibility of the closure of <a> is assumed, not tested".to_string()], ambient_note(tau.genus())].concat(),
    })
}

/// `min |θ[ch](0)| / max |θ[ch](0)|` over the ten even characteristics (genus 2 only).
/// Vanishes exactly for products of elliptic curves.
pub fn decomposability_indicator(tau: &RiemannMatrix) -> Result<f64> {
    if tau.genus() != 2 {
        return Err(Error::UnsupportedGenus(tau.genus()));
    }
    let zero = AbelianPoint::zero(2);
    let nulls = Characteristic::all(2)
        .into_iter()
        .filter(|c| !c.is_odd())
        .map(|c| theta_char_eval(&zero, tau, &c, &[], DEFAULT_TARGET).map(|j| j.unscaled_value().norm()))
        .collect::<Result<Vec<f64>>>()?;
    let max = nulls.iter().cloned().fold(0.0, f64::max);
    let min = nulls.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(if max > 0.0 { min / max } else { 0.0 })
}
