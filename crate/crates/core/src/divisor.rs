//! Newton sampling of points on `Θ`, `D₁Θ = {θ = D₁θ = 0}` and `Θ ∩ Θ_a`, and the
//! pointwise Weil-type alternatives evaluated on them.

use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilinear::{gradient_requests, jet_at, local_scale, DirectionJet, ResidualReport};
use crate::cvec;
use crate::error::{Error, Result};
use crate::json::schema_id;
use crate::sampling;
use crate::theta::{reduce, torus_distance, AbelianPoint, DerivRequest, RiemannMatrix};

/// Normalized magnitude below which a constraint counts as met.
pub const ACCEPT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivisorKind {
    Theta,
    D1Theta,
    ThetaCapThetaA,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub id: String,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivisorPoint {
    pub z: AbelianPoint,
    pub constraints_met: Vec<Constraint>,
    pub kind: DivisorKind,
    /// `|δ_last| / |δ_prev|` of the final Newton steps.
    pub last_step_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub count: usize,
    pub starts: usize,
    pub iterations: usize,
    pub tol: f64,
    pub seed: u64,
    pub dedup: f64,
}

impl Default for SamplePlan {
    fn default() -> Self {
        SamplePlan { count: 50, starts: 200, iterations: 50, tol: 1e-12, seed: 0, dedup: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub schema: String,
    pub kind: DivisorKind,
    pub points: Vec<DivisorPoint>,
    /// Newton starts that converged, before deduplication.
    pub converged_starts: usize,
    pub under_sampled: bool,
    pub notes: Vec<String>,
}

enum System<'a> {
    Theta,
    D1Theta(&'a [C64]),
    CapA(&'a [C64]),
}

impl System<'_> {
    fn kind(&self) -> DivisorKind {
        match self {
            System::Theta => DivisorKind::Theta,
            System::D1Theta(_) => DivisorKind::D1Theta,
            System::CapA(_) => DivisorKind::ThetaCapThetaA,
        }
    }
}

struct Eval {
    f: Vec<C64>,
    jac: Vec<Vec<C64>>,
    met: Vec<Constraint>,
}

fn normalized(v: C64, scale: f64) -> f64 {
    let s = v.norm() + scale;
    if s > 0.0 {
        v.norm() / s
    } else {
        1.0
    }
}

fn grad_norm(j: &crate::theta::ThetaJet, g: usize) -> f64 {
    j.derivs[..g].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn eval_system(sys: &System, z: &[C64], dirs: &[Vec<C64>], tau: &RiemannMatrix) -> Result<Eval> {
    let g = tau.genus();
    let k = dirs.len();
    let mut reqs = gradient_requests(g);
    reqs.extend(dirs.iter().map(|w| DerivRequest(vec![w.clone()])));
    match sys {
        System::Theta => {
            let j = jet_at(z, tau, &reqs)?;
            Ok(Eval {
                f: vec![j.value],
                jac: vec![j.derivs[g..g + k].to_vec()],
                met: vec![Constraint { id: "theta".into(), magnitude: normalized(j.value, local_scale(&j, g) - j.value.norm()) }],
            })
        }
        System::D1Theta(u) => {
            reqs.push(DerivRequest(vec![u.to_vec()]));
            reqs.extend(dirs.iter().map(|w| DerivRequest(vec![u.to_vec(), w.clone()])));
            let j = jet_at(z, tau, &reqs)?;
            let gn = grad_norm(&j, g);
            let d1 = j.derivs[g + k];
            Ok(Eval {
                f: vec![j.value, d1],
                jac: vec![j.derivs[g..g + k].to_vec(), j.derivs[g + k + 1..g + 2 * k + 1].to_vec()],
                met: vec![
                    Constraint { id: "theta".into(), magnitude: normalized(j.value, gn) },
                    Constraint { id: "d1_theta".into(), magnitude: normalized(d1, cvec::norm(u) * gn) },
                ],
            })
        }
        System::CapA(a) => {
            let j = jet_at(z, tau, &reqs)?;
            let ja = jet_at(&cvec::add(z, a), tau, &reqs)?;
            Ok(Eval {
                f: vec![j.value, ja.value],
                jac: vec![j.derivs[g..g + k].to_vec(), ja.derivs[g..g + k].to_vec()],
                met: vec![
                    Constraint { id: "theta".into(), magnitude: normalized(j.value, grad_norm(&j, g)) },
                    Constraint { id: "theta_a".into(), magnitude: normalized(ja.value, grad_norm(&ja, g)) },
                ],
            })
        }
    }
}

/// Solve the 1×1 or 2×2 complex system `J δ = −f`.
fn newton_step(e: &Eval) -> Option<Vec<C64>> {
    match e.f.len() {
        1 => {
            let d = e.jac[0][0];
            (d.norm() > 0.0).then(|| vec![-e.f[0] / d])
        }
        2 => {
            let (a, b, c, d) = (e.jac[0][0], e.jac[0][1], e.jac[1][0], e.jac[1][1]);
            let det = a * d - b * c;
            let scale = (a.norm() + b.norm()) * (c.norm() + d.norm());
            if !(det.norm() > 1e-14 * scale) {
                return None;
            }
            Some(vec![(-d * e.f[0] + b * e.f[1]) / det, (c * e.f[0] - a * e.f[1]) / det])
        }
        _ => None,
    }
}

fn point_at(z0: &[C64], dirs: &[Vec<C64>], s: &[C64]) -> Vec<C64> {
    let mut z = z0.to_vec();
    for (w, t) in dirs.iter().zip(s) {
        z = cvec::axpy(&z, *t, w);
    }
    z
}

fn run_start(sys: &System, tau: &RiemannMatrix, plan: &SamplePlan, start: usize) -> Option<DivisorPoint> {
    let g = tau.genus();
    let mut r = sampling::rng(plan.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let z0 = sampling::random_point(tau, &mut r).z;
    let dirs: Vec<Vec<C64>> = match sys {
        System::Theta => vec![sampling::random_unit_cvec(g, &mut r)],
        _ if g == 2 => vec![cvec::unit(2, 0), cvec::unit(2, 1)],
        _ => vec![sampling::random_unit_cvec(g, &mut r), sampling::random_unit_cvec(g, &mut r)],
    };
    let _ = r.gen::<u64>();
    let mut s = vec![C64::new(0.0, 0.0); dirs.len()];
    let mut prev_step = f64::NAN;
    let mut last_ratio = 0.0;
    let mut converged = false;
    for _ in 0..plan.iterations {
        let e = eval_system(sys, &point_at(&z0, &dirs, &s), &dirs, tau).ok()?;
        if e.met.iter().all(|c| c.magnitude <= plan.tol) {
            converged = true;
            break;
        }
        let mut d = newton_step(&e)?;
        let n = cvec::norm(&d);
        if !n.is_finite() {
            return None;
        }
        if n > 1.0 {
            d = cvec::scale(&d, C64::new(1.0 / n, 0.0));
        }
        if prev_step.is_finite() && prev_step > 0.0 {
            last_ratio = n / prev_step;
        }
        prev_step = n;
        s = cvec::add(&s, &d);
        if n <= 1e-15 * (1.0 + cvec::norm(&s)) {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }
    let mut z = AbelianPoint::new(reduce(&point_at(&z0, &dirs, &s), tau));
    z.reduced = true;
    let e = eval_system(sys, &z.z, &dirs, tau).ok()?;
    if e.met.iter().any(|c| c.magnitude > ACCEPT) {
        return None;
    }
    Some(DivisorPoint { z, constraints_met: e.met, kind: sys.kind(), last_step_ratio: last_ratio })
}

/// Deterministic deduplication modulo the lattice: sort by reduced lattice
/// coordinates, then keep points farther than `tol` from every kept point.
pub fn dedup_points(mut pts: Vec<DivisorPoint>, tau: &RiemannMatrix, tol: f64) -> Vec<DivisorPoint> {
    let key = |p: &DivisorPoint| {
        let (x, y) = tau.lattice_coords(&p.z.z);
        x.into_iter().chain(y).collect::<Vec<f64>>()
    };
    pts.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<DivisorPoint> = Vec::new();
    for p in pts {
        if kept.iter().all(|q| torus_distance(&p.z.z, &q.z.z, tau) > tol) {
            kept.push(p);
        }
    }
    kept
}

fn sample(sys: System, tau: &RiemannMatrix, plan: &SamplePlan) -> Result<SampleOutcome> {
    if plan.count == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let found: Vec<DivisorPoint> = (0..plan.starts).into_par_iter().filter_map(|i| run_start(&sys, tau, plan, i)).collect();
    let converged_starts = found.len();
    let mut points = dedup_points(found, tau, plan.dedup);
    points.truncate(plan.count);
    let under_sampled = points.len() < plan.count;
    let mut notes = Vec::new();
    if under_sampled {
        notes.push(format!("under-sampled: {} of {} requested points found", points.len(), plan.count));
    }
    if tau.genus() >= 3 && !matches!(sys, System::Theta) {
        notes.push("slice-based: Newton restricted to random 2-planes, not exhaustive".into());
    }
    Ok(SampleOutcome { schema: schema_id("divisor-points"), kind: sys.kind(), points, converged_starts, under_sampled, notes })
}

/// Points of `Θ` from 1-D Newton along random complex lines.
pub fn sample_theta_divisor(tau: &RiemannMatrix, plan: &SamplePlan) -> Result<SampleOutcome> {
    sample(System::Theta, tau, plan)
}

/// Points of `D₁Θ`: Newton on `(θ, D₁θ)` over `C²` (genus 2) or random 2-planes.
pub fn sample_d1_theta(tau: &RiemannMatrix, jet: &DirectionJet, plan: &SamplePlan) -> Result<SampleOutcome> {
    let u = jet.u()?;
    if u.len() != tau.genus() {
        return Err(Error::DimensionMismatch { expected: tau.genus(), got: u.len() });
    }
    if cvec::is_zero(u) {
        return Err(Error::DegenerateJet);
    }
    if tau.genus() == 1 {
        return Ok(SampleOutcome {
            schema: schema_id("divisor-points"),
            kind: DivisorKind::D1Theta,
            points: Vec::new(),
            converged_starts: 0,
            under_sampled: false,
            notes: vec!["genus 1: theta has simple zeros, D1Theta is empty".into()],
        });
    }
    sample(System::D1Theta(u), tau, plan)
}

/// Points of `Θ ∩ Θ_a`: Newton on `(θ(z), θ(z + a))`.
pub fn sample_theta_cap_theta_a(tau: &RiemannMatrix, a: &[C64], plan: &SamplePlan) -> Result<SampleOutcome> {
    if a.len() != tau.genus() {
        return Err(Error::DimensionMismatch { expected: tau.genus(), got: a.len() });
    }
    if tau.genus() == 1 {
        // two distinct simple zeros never meet unless a is a period
        return Ok(SampleOutcome {
            schema: schema_id("divisor-points"),
            kind: DivisorKind::ThetaCapThetaA,
            points: Vec::new(),
            converged_starts: 0,
            under_sampled: false,
            notes: vec!["genus 1: Theta and Theta_a are disjoint for a off the lattice".into()],
        });
    }
    sample(System::CapA(a), tau, plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeilKind {
    /// `(D₁² + D₂)θ · (D₁² − D₂)θ = 0` on `D₁Θ`.
    Weil,
    /// `D₁θ · D₁θ_a = 0` on `Θ ∩ Θ_a`.
    Weil1,
    /// `(D₁² + D₂)θ · θ_a = 0` on `D₁Θ`.
    Weil2,
}

fn weil_value(z: &[C64], tau: &RiemannMatrix, jet: &DirectionJet, a: Option<&[C64]>, which: WeilKind) -> Result<f64> {
    let g = tau.genus();
    let u = jet.u()?;
    let need_a = || a.ok_or_else(|| Error::InvalidInput("this relation needs the shift a".into()));
    match which {
        WeilKind::Weil | WeilKind::Weil2 => {
            let v = jet.v()?;
            let j = jet_at(z, tau, &[DerivRequest(vec![u.to_vec(); 2]), DerivRequest(vec![v.to_vec()])])?;
            let (d11, d2) = (j.derivs[0], j.derivs[1]);
            let den = d11.norm() + d2.norm();
            let f = |x: C64| if den > 0.0 { x.norm() / den } else { 0.0 };
            let plus = f(d11 + d2);
            if which == WeilKind::Weil {
                Ok(plus.min(f(d11 - d2)))
            } else {
                let ja = jet_at(&cvec::add(z, need_a()?), tau, &gradient_requests(g))?;
                Ok(plus.min(normalized(ja.value, grad_norm(&ja, g))))
            }
        }
        WeilKind::Weil1 => {
            let mut reqs = gradient_requests(g);
            reqs.push(DerivRequest(vec![u.to_vec()]));
            let un = cvec::norm(u);
            let j = jet_at(z, tau, &reqs)?;
            let ja = jet_at(&cvec::add(z, need_a()?), tau, &reqs)?;
            let one = normalized(j.derivs[g], un * grad_norm(&j, g));
            let two = normalized(ja.derivs[g], un * grad_norm(&ja, g));
            Ok(one.min(two))
        }
    }
}

/// Pointwise Weil-type alternatives; an empty list passes vacuously (flagged in `notes`).
pub fn weil_check(
    points: &[DivisorPoint],
    tau: &RiemannMatrix,
    jet: &DirectionJet,
    a: Option<&[C64]>,
    which: WeilKind,
    tolerance: f64,
) -> Result<ResidualReport> {
    let expected = match which {
        WeilKind::Weil | WeilKind::Weil2 => DivisorKind::D1Theta,
        WeilKind::Weil1 => DivisorKind::ThetaCapThetaA,
    };
    if let Some(p) = points.iter().find(|p| p.kind != expected) {
        return Err(Error::InvalidInput(format!("{which:?} needs {expected:?} points, got {:?}", p.kind)));
    }
    let values = points.iter().map(|p| weil_value(&p.z.z, tau, jet, a, which)).collect::<Result<Vec<f64>>>()?;
    let zs: Vec<AbelianPoint> = points.iter().map(|p| p.z.clone()).collect();
    let mut rep = ResidualReport::new(&zs, values, tolerance);
    rep.schema = schema_id("weil-report");
    if points.is_empty() {
        rep.notes.push("vacuous: empty point list".into());
    }
    Ok(rep)
}
