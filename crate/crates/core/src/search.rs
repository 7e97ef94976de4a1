//! Direction search: fit `(U, V, W, d)` to the Hirota form, `(U, V, a, c)` to the
//! one-point equation, and hierarchy jets `ζ_k, d_k`.
//!
//! Each restart draws a seeded start for the nonlinear parameters (`V` for
//! Hirota, `a` for one-point, `ζ_{k≥2}` for the hierarchy; `U` when freed), runs a
//! Nelder–Mead descent on them with the linear parameters (`W, d`; `V, c`; `d_k`)
//! eliminated by reweighted complex least squares, then polishes all free
//! parameters jointly with Levenberg–Marquardt on forward-difference Jacobians.
//! The reported residual is the maximum normalized residual on a holdout sample
//! set drawn from a different seed than the training set.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::f64::consts::PI;

use crate::bilinear::{Bilinear, DirectionJet};
use crate::cvec;
use crate::error::{Error, Result};
use crate::json::schema_id;
use crate::sampling;
use crate::theta::{theta_eval, AbelianPoint, DerivRequest, RiemannMatrix, DEFAULT_TARGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Hirota,
    OnePoint,
    Hierarchy,
}

/// Which fields of the jet (and the shift `a`) are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreeMask {
    #[serde(default)]
    pub u: bool,
    #[serde(default)]
    pub v: bool,
    #[serde(default)]
    pub w: bool,
    #[serde(default)]
    pub c: bool,
    #[serde(default)]
    pub d: bool,
    #[serde(default)]
    pub a: bool,
}

impl FreeMask {
    /// `(V, W, d)` with `U` fixed.
    pub fn hirota() -> Self {
        FreeMask { v: true, w: true, d: true, ..Default::default() }
    }

    /// `(V, a, c)` with `U` fixed.
    pub fn one_point() -> Self {
        FreeMask { v: true, c: true, a: true, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub restarts: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchProblem {
    pub tau: RiemannMatrix,
    pub target: Target,
    pub free_vars: FreeMask,
    /// Starting jet; supplies `U` and every fixed field.
    pub init: DirectionJet,
    /// Starting shift for one-point targets (random when absent and free).
    #[serde(default, with = "opt_cvec")]
    pub a_init: Option<Vec<C64>>,
    pub sample_count: usize,
    #[serde(default)]
    pub holdout_count: Option<usize>,
    pub seed: u64,
    pub budget: Budget,
    pub tolerance: f64,
    /// Hierarchy jet order `K` (number of `ζ_k`).
    #[serde(default)]
    pub jet_order: Option<usize>,
}

mod opt_cvec {
    use crate::json::{from_cx, to_cx, Cx};
    use num_complex::Complex64 as C64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<C64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|v| to_cx(v)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<C64>>, D::Error> {
        Ok(Option::<Vec<Cx>>::deserialize(d)?.map(|v| from_cx(&v)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub schema: String,
    pub target: Target,
    pub best_jet: DirectionJet,
    #[serde(default, with = "opt_cvec")]
    pub a: Option<Vec<C64>>,
    pub best_residual: f64,
    /// Best holdout residual after each restart (in restart order).
    pub history: Vec<f64>,
    pub converged: bool,
    pub gauge_restarts: usize,
    /// Fitted `ε`-scaling exponent (hierarchy only).
    #[serde(default)]
    pub eps_exponent: Option<f64>,
    pub caveats: Vec<String>,
}

/// Per-iteration objective trace, `(restart, iteration, objective)`.
pub type Trace = Vec<(usize, usize, f64)>;

/// Hierarchy `ε` grid: log-spaced over `[1e-3, 1e-1]`.
pub const HIERARCHY_EPS: [f64; 5] = [1e-3, 3.162_277_660_168_379_5e-3, 1e-2, 3.162_277_660_168_379_5e-2, 1e-1];

/// Simplex cost at which Levenberg–Marquardt takes over.
const NM_HANDOFF: f64 = 1e-8;

const HOLDOUT_SALT: u64 = 0x5DEE_CE66_D1CE_4E5B;

// ---------------------------------------------------------------------------
// Parameter layout

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    U(usize),
    V(usize),
    W(usize),
    C,
    D,
    A(usize),
    Zeta(usize, usize),
    Dcoef(usize),
}

#[derive(Debug, Clone)]
struct Layout {
    nonlinear: Vec<Slot>,
    linear: Vec<Slot>,
}

#[derive(Debug, Clone)]
struct State {
    jet: DirectionJet,
    a: Vec<C64>,
    tie_zeta2: bool,
}

impl State {
    fn get(&self, s: Slot) -> C64 {
        match s {
            Slot::U(i) => self.jet.u.as_ref().unwrap()[i],
            Slot::V(i) => self.jet.v.as_ref().unwrap()[i],
            Slot::W(i) => self.jet.w.as_ref().unwrap()[i],
            Slot::C => self.jet.c.unwrap(),
            Slot::D => self.jet.d.unwrap(),
            Slot::A(i) => self.a[i],
            Slot::Zeta(k, i) => self.jet.zeta.as_ref().unwrap()[k][i],
            Slot::Dcoef(k) => self.jet.dcoef.as_ref().unwrap()[k],
        }
    }

    fn set(&mut self, s: Slot, v: C64) {
        match s {
            Slot::U(i) => self.jet.u.as_mut().unwrap()[i] = v,
            Slot::V(i) => self.jet.v.as_mut().unwrap()[i] = v,
            Slot::W(i) => self.jet.w.as_mut().unwrap()[i] = v,
            Slot::C => self.jet.c = Some(v),
            Slot::D => self.jet.d = Some(v),
            Slot::A(i) => self.a[i] = v,
            Slot::Zeta(k, i) => self.jet.zeta.as_mut().unwrap()[k][i] = v,
            Slot::Dcoef(k) => self.jet.dcoef.as_mut().unwrap()[k] = v,
        }
    }

    fn pack(&self, slots: &[Slot]) -> Vec<f64> {
        slots.iter().flat_map(|&s| {
            let v = self.get(s);
            [v.re, v.im]
        }).collect()
    }

    fn unpack(&mut self, slots: &[Slot], x: &[f64]) {
        for (k, &s) in slots.iter().enumerate() {
            self.set(s, C64::new(x[2 * k], x[2 * k + 1]));
        }
        self.sync();
    }

    fn sync(&mut self) {
        if !self.tie_zeta2 {
            return;
        }
        if let (Some(v), Some(zeta)) = (self.jet.v.as_ref(), self.jet.zeta.as_mut()) {
            if zeta.len() >= 2 {
                zeta[1] = cvec::scale(v, C64::new(-1.0, 0.0));
            }
        }
    }
}

fn build_layout(p: &SearchProblem) -> Layout {
    let g = p.tau.genus();
    let f = p.free_vars;
    let mut nonlinear = Vec::new();
    let mut linear = Vec::new();
    if f.u {
        nonlinear.extend((0..g).map(Slot::U));
    }
    match p.target {
        Target::Hirota => {
            if f.v {
                nonlinear.extend((0..g).map(Slot::V));
            }
            if f.w {
                linear.extend((0..g).map(Slot::W));
            }
            if f.d {
                linear.push(Slot::D);
            }
        }
        Target::OnePoint => {
            if f.a {
                nonlinear.extend((0..g).map(Slot::A));
            }
            if f.v {
                linear.extend((0..g).map(Slot::V));
            }
            if f.c {
                linear.push(Slot::C);
            }
        }
        Target::Hierarchy => {
            let k = p.jet_order.unwrap_or(1);
            // ζ₂ is tied to the D₂ direction (ζ₂ = −V), so V carries it
            if k >= 2 {
                nonlinear.extend((0..g).map(Slot::V));
            }
            for order in 2..k {
                nonlinear.extend((0..g).map(|i| Slot::Zeta(order, i)));
            }
            for j in 0..k.saturating_sub(2) {
                linear.push(Slot::Dcoef(j));
            }
        }
    }
    Layout { nonlinear, linear }
}

// ---------------------------------------------------------------------------
// Per-sample jet data; bilinear values for any linear parameters are cheap.

#[derive(Clone)]
struct PJet {
    th: C64,
    d1: C64,
    d11: C64,
    /// Coordinate derivatives `∂_i θ`.
    di: Vec<C64>,
}

#[derive(Clone)]
enum SampleData {
    Hirota {
        th: C64,
        /// Dense coordinate partials of orders one to four, row-major over `g^k` indices.
        partials: [Vec<C64>; 4],
    },
    OnePoint {
        p: PJet,
        q: PJet,
    },
    Hierarchy {
        /// One `(p, q, ε)` triple per grid value.
        rows: Vec<(PJet, PJet, f64)>,
    },
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pjet(z: &[C64], tau: &RiemannMatrix, u: &[C64]) -> Result<PJet> {
    let g = tau.genus();
    let mut reqs = vec![DerivRequest(vec![u.to_vec()]), DerivRequest(vec![u.to_vec(), u.to_vec()])];
    reqs.extend((0..g).map(|i| DerivRequest(vec![cvec::unit(g, i)])));
    let j = theta_eval(&AbelianPoint::new(z.to_vec()), tau, &reqs, DEFAULT_TARGET)?;
    Ok(PJet { th: j.value, d1: j.derivs[0], d11: j.derivs[1], di: j.derivs[2..].to_vec() })
}

/// Non-decreasing index tuples of length `k` over `0..g`.
fn sorted_tuples(g: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for t in sorted_tuples(g, k - 1) {
        let lo = t.last().copied().unwrap_or(0);
        for i in lo..g {
            let mut n = t.clone();
            n.push(i);
            out.push(n);
        }
    }
    out
}

/// `θ` and its dense coordinate partials of orders one to four at `z`.
fn coordinate_partials(z: &AbelianPoint, tau: &RiemannMatrix) -> Result<(C64, [Vec<C64>; 4])> {
    let g = tau.genus();
    let units: Vec<Vec<C64>> = (0..g).map(|i| cvec::unit(g, i)).collect();
    let tuples: Vec<Vec<usize>> = (1..=4).flat_map(|k| sorted_tuples(g, k)).collect();
    let reqs: Vec<DerivRequest> = tuples.iter().map(|t| DerivRequest(t.iter().map(|&i| units[i].clone()).collect())).collect();
    let j = theta_eval(z, tau, &reqs, DEFAULT_TARGET)?;
    let lookup: std::collections::HashMap<&[usize], C64> = tuples.iter().map(|t| t.as_slice()).zip(j.derivs.iter().copied()).collect();
    let dense = |k: usize| -> Vec<C64> {
        (0..g.pow(k as u32))
            .map(|mut flat| {
                let mut idx = vec![0; k];
                for slot in idx.iter_mut().rev() {
                    *slot = flat % g;
                    flat /= g;
                }
                idx.sort_unstable();
                lookup[idx.as_slice()]
            })
            .collect()
    };
    Ok((j.value, [dense(1), dense(2), dense(3), dense(4)]))
}

/// Contract a dense symmetric tensor with one direction per index.
fn contract(t: &[C64], dirs: &[&[C64]]) -> C64 {
    let Some((first, rest)) = dirs.split_first() else {
        return t[0];
    };
    let mut cur: Vec<C64> = t.chunks(first.len()).map(|row| dot(row, first)).collect();
    for dir in rest {
        let n = cur.len() / dir.len();
        for i in 0..n {
            cur[i] = dot(&cur[i * dir.len()..(i + 1) * dir.len()], dir);
        }
        cur.truncate(n);
    }
    cur[0]
}

fn sample_data(target: Target, z: &AbelianPoint, tau: &RiemannMatrix, st: &State) -> Result<SampleData> {
    let u = st.jet.u()?;
    match target {
        Target::Hirota => {
            let (th, partials) = coordinate_partials(z, tau)?;
            Ok(SampleData::Hirota { th, partials })
        }
        Target::OnePoint => {
            let p = pjet(&z.z, tau, u)?;
            let q = pjet(&cvec::add(&z.z, &st.a), tau, u)?;
            Ok(SampleData::OnePoint { p, q })
        }
        Target::Hierarchy => {
            let p = pjet(&z.z, tau, u)?;
            let mut rows = Vec::with_capacity(HIERARCHY_EPS.len());
            for &e in &HIERARCHY_EPS {
                let a = cvec::scale(&st.jet.zeta_at(C64::new(e, 0.0))?, C64::new(2.0, 0.0));
                let q = pjet(&cvec::add(&z.z, &a), tau, u)?;
                let p_copy = PJet { th: p.th, d1: p.d1, d11: p.d11, di: p.di.clone() };
                rows.push((p_copy, q, e));
            }
            Ok(SampleData::Hierarchy { rows })
        }
    }
}

/// Bilinear values for the current linear parameters, plus their weights.
fn bilinears(data: &SampleData, st: &State, order: usize) -> Vec<(Bilinear, f64)> {
    match data {
        SampleData::Hirota { th, partials } => {
            let u = st.jet.u.as_deref().unwrap();
            let v = st.jet.v.as_deref().unwrap();
            let w = st.jet.w.as_deref().unwrap();
            let d = st.jet.d.unwrap();
            let d1 = contract(&partials[0], &[u]);
            let d11 = contract(&partials[1], &[u, u]);
            let d111 = contract(&partials[2], &[u, u, u]);
            let d1111 = contract(&partials[3], &[u, u, u, u]);
            let d2 = contract(&partials[0], &[v]);
            let d22 = contract(&partials[1], &[v, v]);
            let d3 = contract(&partials[0], &[w]);
            let d13 = contract(&partials[1], &[u, w]);
            vec![(
                Bilinear::from_terms(&[
                    d1111 * th,
                    -4.0 * d111 * d1,
                    3.0 * d11 * d11,
                    3.0 * d22 * th,
                    -3.0 * d2 * d2,
                    -3.0 * d13 * th,
                    3.0 * d3 * d1,
                    -d * th * th,
                ]),
                1.0,
            )]
        }
        SampleData::OnePoint { p, q } => {
            let v = st.jet.v.as_deref().unwrap();
            let c = st.jet.c.unwrap();
            let (pd2, qd2) = (dot(v, &p.di), dot(v, &q.di));
            vec![(
                Bilinear::from_terms(&[
                    p.d11 * q.th,
                    p.th * q.d11,
                    pd2 * q.th,
                    -p.th * qd2,
                    -2.0 * p.d1 * q.d1,
                    c * p.th * q.th,
                ]),
                1.0,
            )]
        }
        SampleData::Hierarchy { rows } => {
            let v = st.jet.v.as_deref().unwrap();
            rows.iter()
                .map(|(p, q, e)| {
                    let eps = C64::new(*e, 0.0);
                    let (pd2, qd2) = (dot(v, &p.di), dot(v, &q.di));
                    let d = st.jet.d_at(eps);
                    let b = Bilinear::from_terms(&[
                        eps * p.d11 * q.th,
                        eps * p.th * q.d11,
                        eps * pd2 * q.th,
                        -eps * p.th * qd2,
                        -2.0 * eps * p.d1 * q.d1,
                        -q.d1 * p.th,
                        q.th * p.d1,
                        d * p.th * q.th,
                    ]);
                    (b, e.powi(order as i32 + 1).recip())
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Objective

struct Objective<'a> {
    problem: &'a SearchProblem,
    layout: Layout,
    samples: Vec<AbelianPoint>,
    order: usize,
    /// Sample data that no parameter can change.
    fixed: Option<Vec<Option<SampleData>>>,
}

impl<'a> Objective<'a> {
    fn new(problem: &'a SearchProblem, layout: Layout, samples: Vec<AbelianPoint>, order: usize, st: &State) -> Self {
        let mut obj = Objective { problem, layout, samples, order, fixed: None };
        if problem.target == Target::Hirota {
            obj.fixed = Some(obj.compute(st));
        }
        obj
    }

    fn data(&self, st: &State) -> Cow<'_, [Option<SampleData>]> {
        match &self.fixed {
            Some(d) => Cow::Borrowed(d),
            None => Cow::Owned(self.compute(st)),
        }
    }

    fn compute(&self, st: &State) -> Vec<Option<SampleData>> {
        let tau = &self.problem.tau;
        let target = self.problem.target;
        self.samples.par_iter().map(|z| sample_data(target, z, tau, st).ok()).collect()
    }

    fn residuals_from(&self, data: &[Option<SampleData>], st: &State) -> Vec<f64> {
        let mut out = Vec::new();
        for d in data {
            match d {
                Some(d) => {
                    for (b, w) in bilinears(d, st, self.order) {
                        let r = b.ratio().unwrap_or_default() * w;
                        out.push(r.re);
                        out.push(r.im);
                    }
                }
                None => {
                    let rows = if self.problem.target == Target::Hierarchy { HIERARCHY_EPS.len() } else { 1 };
                    out.extend(std::iter::repeat(0.0).take(2 * rows));
                }
            }
        }
        out
    }

    fn residuals(&self, st: &State) -> Vec<f64> {
        let data = self.data(st);
        self.residuals_from(&data, st)
    }

    /// Reweighted least squares for the linear parameters at fixed sample data.
    fn solve_linear(&self, data: &[Option<SampleData>], st: &mut State) {
        let lin = &self.layout.linear;
        if lin.is_empty() {
            return;
        }
        for _pass in 0..3 {
            let base: Vec<C64> = lin.iter().map(|&s| st.get(s)).collect();
            let zero = C64::new(0.0, 0.0);
            for &s in lin {
                st.set(s, zero);
            }
            let mut rows: Vec<C64> = Vec::new();
            let mut rhs: Vec<C64> = Vec::new();
            let mut cols: Vec<Vec<C64>> = vec![Vec::new(); lin.len()];
            // weights from the previous linear parameters
            let mut tmp = st.clone();
            for (k, &s) in lin.iter().enumerate() {
                tmp.set(s, base[k]);
            }
            for d in data.iter().flatten() {
                let weights: Vec<f64> = bilinears(d, &tmp, self.order)
                    .iter()
                    .map(|(b, w)| if b.scale > 0.0 { w / b.scale } else { 0.0 })
                    .collect();
                let b0 = bilinears(d, st, self.order);
                for (r, (b, _)) in b0.iter().enumerate() {
                    rhs.push(-b.value * weights[r]);
                    rows.push(C64::new(weights[r], 0.0));
                }
                for (k, &s) in lin.iter().enumerate() {
                    st.set(s, C64::new(1.0, 0.0));
                    let bk = bilinears(d, st, self.order);
                    for (r, (b, _)) in bk.iter().enumerate() {
                        cols[k].push((b.value - b0[r].0.value) * weights[r]);
                    }
                    st.set(s, zero);
                }
            }
            let n = rhs.len();
            if n == 0 {
                for (k, &s) in lin.iter().enumerate() {
                    st.set(s, base[k]);
                }
                return;
            }
            let m = DMatrix::from_fn(n, lin.len(), |i, k| cols[k][i]);
            let b = DVector::from_vec(rhs);
            let svd = m.svd(true, true);
            let smax = svd.singular_values.max();
            match svd.solve(&b, smax * 1e-13) {
                Ok(x) if x.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => {
                    for (k, &s) in lin.iter().enumerate() {
                        st.set(s, x[k]);
                    }
                }
                _ => {
                    for (k, &s) in lin.iter().enumerate() {
                        st.set(s, base[k]);
                    }
                    return;
                }
            }
        }
    }

    fn cost(r: &[f64]) -> f64 {
        if r.is_empty() {
            return 0.0;
        }
        r.iter().map(|v| v * v).sum::<f64>() / (r.len() / 2) as f64
    }

    /// Cost with linear parameters eliminated; updates `st`'s linear parameters.
    fn projected_cost(&self, st: &mut State) -> f64 {
        let data = self.data(st);
        self.solve_linear(&data, st);
        let c = Self::cost(&self.residuals_from(&data, st));
        if c.is_finite() {
            c
        } else {
            f64::INFINITY
        }
    }
}

// ---------------------------------------------------------------------------
// Local optimizers

fn nelder_mead(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize, ftol: f64) -> (Vec<f64>, f64) {
    let n = x0.len();
    if n == 0 {
        let v = f(x0);
        return (x0.to_vec(), v);
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = f(&x);
        simplex.push((x, v));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if best <= ftol || (worst - best).abs() <= 1e-14 * best.abs().max(1e-300) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|s| s.0[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64, w: &[f64]| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (w[j] - centroid[j])).collect() };
        let xr = along(-1.0, &simplex[n].0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0, &simplex[n].0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let x = along(-0.5, &simplex[n].0);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5, &simplex[n].0);
                let v = f(&x);
                (x, v)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..n).map(|j| x0[j] + 0.5 * (s.0[j] - x0[j])).collect();
                    let v = f(&x);
                    *s = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

struct LmOutcome {
    gauge_degenerate: bool,
}

/// `slots` lists nonlinear parameters first; the trailing linear ones reuse the
/// sample jets when their Jacobian columns are formed.
fn levenberg_marquardt(obj: &Objective, st: &mut State, slots: &[Slot], iters: usize, target_cost: f64, trace: &mut Trace, restart: usize) -> LmOutcome {
    let n_jet = 2 * obj.layout.nonlinear.len();
    let mut x = st.pack(slots);
    let n = x.len();
    let mut r = obj.residuals(st);
    let mut cost = Objective::cost(&r);
    if n == 0 {
        return LmOutcome { gauge_degenerate: false };
    }
    let mut mu = -1.0;
    let mut stall = 0;
    let gauge_u = obj.problem.free_vars.u && obj.problem.target != Target::Hierarchy;
    for it in 0..iters {
        if cost <= target_cost {
            break;
        }
        let m = r.len();
        let mut jac = DMatrix::<f64>::zeros(m, n);
        let data = obj.data(st);
        for k in 0..n {
            let h = 1e-7 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            xp[k] += h;
            let mut sp = st.clone();
            sp.unpack(slots, &xp);
            let rp = if k < n_jet { obj.residuals(&sp) } else { obj.residuals_from(&data, &sp) };
            for i in 0..m {
                jac[(i, k)] = (rp[i] - r[i]) / h;
            }
        }
        let jt = jac.transpose();
        let a = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);
        if mu < 0.0 {
            mu = 1e-3 * (0..n).map(|k| a[(k, k)]).fold(0.0, f64::max).max(1e-300);
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut damped = a.clone();
            for k in 0..n {
                damped[(k, k)] += mu * a[(k, k)].max(1e-12);
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    mu *= 4.0;
                    continue;
                }
            };
            let xn: Vec<f64> = (0..n).map(|k| x[k] + step[k]).collect();
            let mut sn = st.clone();
            sn.unpack(slots, &xn);
            let rn = obj.residuals(&sn);
            let cn = Objective::cost(&rn);
            if cn.is_finite() && cn < cost {
                let rel = (cost - cn) / cost;
                stall = if rel < 1e-6 { stall + 1 } else { 0 };
                *st = sn;
                if gauge_u {
                    if let Ok(u) = st.jet.u() {
                        if cvec::norm(u) < 1e-6 {
                            return LmOutcome { gauge_degenerate: true };
                        }
                    }
                    if let Ok(j) = st.jet.gauge_normalized() {
                        st.jet = j;
                    }
                }
                x = st.pack(slots);
                r = obj.residuals(st);
                cost = Objective::cost(&r);
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                break;
            }
            mu *= 4.0;
        }
        trace.push((restart, it, cost));
        if !accepted || stall >= 8 {
            break;
        }
    }
    LmOutcome { gauge_degenerate: false }
}

// ---------------------------------------------------------------------------
// Holdout evaluation

fn holdout_residuals(problem: &SearchProblem, st: &State, points: &[AbelianPoint], order: usize) -> Vec<Vec<f64>> {
    points
        .par_iter()
        .map(|z| match sample_data(problem.target, z, &problem.tau, st) {
            Ok(d) => bilinears(&d, st, order).iter().map(|(b, _)| b.normalized_or_zero().unwrap_or(1.0)).collect(),
            Err(_) => vec![1.0],
        })
        .collect()
}

/// Log-log slope of the mean hierarchy residual between `ε = 1e-2` and `ε = 1e-3`.
pub fn eps_exponent(r_hi: f64, r_lo: f64) -> f64 {
    if r_lo <= 0.0 {
        return f64::INFINITY;
    }
    (r_hi / r_lo).log10() / (1e-2f64 / 1e-3).log10()
}

fn summarize(problem: &SearchProblem, st: &State, holdout: &[AbelianPoint], order: usize) -> (f64, Option<f64>) {
    let res = holdout_residuals(problem, st, holdout, order);
    match problem.target {
        Target::Hierarchy => {
            let idx_hi = 2; // ε = 1e-2
            let idx_lo = 0; // ε = 1e-3
            let mean = |i: usize| res.iter().map(|r| r.get(i).copied().unwrap_or(1.0)).sum::<f64>() / res.len() as f64;
            let max_hi = res.iter().map(|r| r.get(idx_hi).copied().unwrap_or(1.0)).fold(0.0, f64::max);
            (max_hi, Some(eps_exponent(mean(idx_hi), mean(idx_lo))))
        }
        _ => (res.iter().flatten().cloned().fold(0.0, f64::max), None),
    }
}

// ---------------------------------------------------------------------------
// Start generation

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (restart as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ 0x94D0_49BB_1331_11EB
}

fn initial_state(problem: &SearchProblem, restart: usize) -> Result<State> {
    let g = problem.tau.genus();
    let mut jet = problem.init.clone();
    let f = problem.free_vars;
    let mut r = sampling::rng(restart_seed(problem.seed, restart));
    let zero = C64::new(0.0, 0.0);
    let rc = |r: &mut rand_chacha::ChaCha8Rng| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    if f.u || jet.u.is_none() {
        jet.u = Some(sampling::random_unit_cvec(g, &mut r));
    }
    let u = jet.u.clone().unwrap();
    if cvec::norm(&u) == 0.0 {
        return Err(Error::InvalidInput("U must be nonzero".into()));
    }
    if jet.v.is_none() || (f.v && problem.target == Target::Hirota) {
        jet.v = Some(cvec::scale(&sampling::random_cvec(g, &mut r), C64::new(2.0, 0.0)));
    }
    if f.v && problem.target == Target::OnePoint {
        jet.v = Some(cvec::zeros(g));
    }
    if jet.w.is_none() || f.w {
        jet.w = Some(cvec::zeros(g));
    }
    if jet.c.is_none() || f.c {
        jet.c = Some(zero);
    }
    if jet.d.is_none() || f.d {
        jet.d = Some(zero);
    }
    let mut a = problem.a_init.clone().unwrap_or_else(|| cvec::zeros(g));
    if problem.target == Target::OnePoint && f.a && (restart > 0 || problem.a_init.is_none()) {
        a = sampling::random_point(&problem.tau, &mut r).z;
        let _ = rc(&mut r);
    }
    if problem.target == Target::Hierarchy {
        let k = problem.jet_order.unwrap_or(1).max(1);
        let mut zeta = jet.zeta.clone().unwrap_or_default();
        if zeta.is_empty() {
            zeta.push(u.clone());
        }
        zeta[0] = u.clone();
        zeta.truncate(k);
        while zeta.len() < k {
            // the Abel-map expansion suggests ζ₃ = W in the Hirota normalization
            let base = match (zeta.len(), jet.w.as_ref()) {
                (2, Some(w)) => w.clone(),
                _ => cvec::zeros(g),
            };
            let z = if restart == 0 { base } else { cvec::add(&base, &cvec::scale(&sampling::random_cvec(g, &mut r), C64::new(0.5, 0.0))) };
            zeta.push(z);
        }
        if restart > 0 && k >= 2 {
            jet.v = Some(cvec::add(jet.v()?, &cvec::scale(&sampling::random_cvec(g, &mut r), C64::new(0.5, 0.0))));
        }
        jet.zeta = Some(zeta);
        let nd = k.saturating_sub(2);
        let mut dcoef = jet.dcoef.clone().unwrap_or_default();
        dcoef.resize(nd, zero);
        jet.dcoef = Some(dcoef);
    }
    let mut st = State { jet, a, tie_zeta2: problem.target == Target::Hierarchy };
    st.sync();
    Ok(st)
}

fn validate(problem: &SearchProblem, layout: &Layout) -> Result<()> {
    let g = problem.tau.genus();
    let dims = 2 * (layout.nonlinear.len() + layout.linear.len());
    if problem.sample_count < 10 * dims.max(1) {
        return Err(Error::InvalidInput(format!(
            "sample_count {} below 10 x {} free real parameters",
            problem.sample_count, dims
        )));
    }
    if !(problem.tolerance > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    for v in [&problem.init.u, &problem.init.v, &problem.init.w].into_iter().flatten() {
        if v.len() != g {
            return Err(Error::DimensionMismatch { expected: g, got: v.len() });
        }
    }
    if problem.target == Target::Hierarchy {
        let k = problem.jet_order.unwrap_or(1);
        if !(1..=4).contains(&k) {
            return Err(Error::InvalidInput("jet order must be between 1 and 4".into()));
        }
        if problem.init.u.as_ref().map_or(true, |u| cvec::norm(u) == 0.0) {
            return Err(Error::InvalidInput("hierarchy fit needs a prior nonzero U (zeta_1 = U); a = 0 is degenerate".into()));
        }
        if problem.init.v.is_none() {
            return Err(Error::InvalidInput("hierarchy fit needs V from a prior fit".into()));
        }
    }
    Ok(())
}

/// Run the multi-start search.
pub fn fit(problem: &SearchProblem) -> Result<SearchResult> {
    fit_traced(problem).map(|(r, _)| r)
}

/// Hierarchy fit of `ζ₂…ζ_K` and `d₃…d_K` given `U, V` from a prior fit.
pub fn fit_hierarchy(problem: &SearchProblem, jet_order: usize) -> Result<SearchResult> {
    let mut p = problem.clone();
    p.target = Target::Hierarchy;
    p.jet_order = Some(jet_order);
    fit(&p)
}

/// [`fit`] that also returns the objective trace.
pub fn fit_traced(problem: &SearchProblem) -> Result<(SearchResult, Trace)> {
    let layout = build_layout(problem);
    validate(problem, &layout)?;
    let order = problem.jet_order.unwrap_or(1);
    let holdout_n = problem.holdout_count.unwrap_or(problem.sample_count);
    let train = sampling::sample_points(&problem.tau, problem.sample_count, problem.seed);
    let holdout = sampling::sample_points(&problem.tau, holdout_n, problem.seed ^ HOLDOUT_SALT);
    let obj = Objective::new(problem, layout.clone(), train, order, &initial_state(problem, 0)?);
    let all_slots: Vec<Slot> = layout.nonlinear.iter().chain(layout.linear.iter()).cloned().collect();
    let n_nl = 2 * layout.nonlinear.len();
    let nm_iters = problem.budget.iterations.min(20 * n_nl.max(1));
    let target_cost = (problem.tolerance * 1e-3).powi(2);

    let mut best: Option<(f64, Option<f64>, State)> = None;
    let mut history = Vec::new();
    let mut trace = Trace::new();
    let mut gauge_restarts = 0;
    for restart in 0..problem.budget.restarts.max(1) {
        let mut st = initial_state(problem, restart)?;
        // simplex stage over the nonlinear parameters
        if n_nl > 0 {
            let x0 = st.pack(&layout.nonlinear);
            let mut f = |x: &[f64]| {
                let mut s = st.clone();
                s.unpack(&layout.nonlinear, x);
                obj.projected_cost(&mut s)
            };
            let step = match problem.target {
                Target::OnePoint => 0.15,
                Target::Hierarchy => 0.05,
                Target::Hirota => 0.5,
            };
            let (xb, fb) = nelder_mead(&mut f, &x0, step, nm_iters, NM_HANDOFF);
            st.unpack(&layout.nonlinear, &xb);
            trace.push((restart, 0, fb));
        }
        let data = obj.data(&st);
        obj.solve_linear(&data, &mut st);
        let out = levenberg_marquardt(&obj, &mut st, &all_slots, problem.budget.iterations, target_cost, &mut trace, restart);
        if out.gauge_degenerate {
            gauge_restarts += 1;
            history.push(f64::INFINITY);
            continue;
        }
        let (res, expo) = summarize(problem, &st, &holdout, order);
        history.push(res);
        let better = match &best {
            None => true,
            Some((b, be, _)) => match problem.target {
                Target::Hierarchy => expo.unwrap_or(0.0) > be.unwrap_or(0.0),
                _ => res < *b,
            },
        };
        if better {
            best = Some((res, expo, st));
        }
        let done = match problem.target {
            Target::Hierarchy => expo.unwrap_or(0.0) >= order as f64 + 0.5,
            _ => res <= problem.tolerance,
        };
        if done {
            break;
        }
    }
    let (best_residual, eps_exponent, st) = best.ok_or_else(|| Error::InvalidInput("no restart completed".into()))?;
    let converged = match problem.target {
        Target::Hierarchy => eps_exponent.unwrap_or(0.0) >= order as f64 + 0.5,
        _ => best_residual <= problem.tolerance,
    };
    let mut caveats = vec!["a reported failure means no solution was found within budget; it does not certify that none exists".to_string()];
    if problem.target == Target::OnePoint {
        caveats.push("irreducibility of the closure of <a> is assumed, not tested".to_string());
    }
    let (jet, a) = if problem.target == Target::OnePoint {
        let (j, a) = canonical_shift(&st.jet, &st.a, &problem.tau)?;
        (j, Some(a))
    } else {
        (st.jet, None)
    };
    Ok((
        SearchResult {
            schema: schema_id("search-result"),
            target: problem.target,
            best_jet: jet,
            a,
            best_residual,
            history,
            converged,
            gauge_restarts,
            eps_exponent,
            caveats,
        },
        trace,
    ))
}

/// Move `a` to its reduced representative, transforming `(V, c)` so the
/// one-point equation is unchanged: for `a' = a + τm + n`, with `κ = −2πi mᵀU`,
/// `V' = V + 2κU` and `c' = c − κ² − 2πi mᵀV'`.
pub fn canonical_shift(jet: &DirectionJet, a: &[C64], tau: &RiemannMatrix) -> Result<(DirectionJet, Vec<C64>)> {
    let red = crate::theta::reduce_point(a, tau)?;
    // a = a₀ + τm + n, so a₀ = a − τm − n: shift by −m.
    let m: Vec<f64> = red.tau_shift.iter().map(|&v| -(v as f64)).collect();
    let u = jet.u()?;
    let two_pi_i = C64::new(0.0, 2.0 * PI);
    let kappa = -two_pi_i * m.iter().zip(u).map(|(m, u)| u * m).sum::<C64>();
    let mut out = jet.clone();
    if let (Some(v), Some(c)) = (jet.v.as_ref(), jet.c) {
        let v2 = cvec::axpy(v, 2.0 * kappa, u);
        let nu = -two_pi_i * m.iter().zip(&v2).map(|(m, v)| v * m).sum::<C64>();
        out.v = Some(v2);
        out.c = Some(c - kappa * kappa + nu);
    }
    Ok((out, red.point.z))
}

#[derive(Serialize)]
struct TraceRow {
    restart: usize,
    iteration: usize,
    objective: f64,
}

/// CSV rendering of a trace: `restart,iteration,objective`.
pub fn trace_csv(trace: &Trace) -> String {
    let mut s = String::from("restart,iteration,objective\n");
    for &(r, i, v) in trace {
        let row = TraceRow { restart: r, iteration: i, objective: v };
        s.push_str(&format!("{},{},{:e}\n", row.restart, row.iteration, row.objective));
    }
    s
}
