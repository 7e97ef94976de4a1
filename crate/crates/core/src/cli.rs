//! Command-line front end: argument parsing, input loading and report writing.
//!
//! Exit codes: 0 pass or converged, 1 completed without passing, 2 input error,
//! 3 numerical failure. Errors are printed to stderr as `{"error": CODE, "message": ..}`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bilinear::{self, DirectionJet, ResidualReport};
use crate::divisor::{self, SamplePlan, WeilKind};
use crate::error::{Error, Result};
use crate::fd::{self, Grid};
use crate::json::{from_cx, schema_id, Cx};
use crate::kummer::{self, FlexOrder};
use crate::sampling;
use crate::search::{self, Budget, FreeMask, SearchProblem, SearchResult, Target};
use crate::theta::{self, AbelianPoint, DerivRequest, RiemannMatrix, RiemannMatrixJson};

#[derive(Debug, Parser)]
#[command(name = "thetaflex", version, about = "Theta functions, KP bilinear residuals, Kummer flexes and direction search")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Period matrix: a JSON file, inline JSON, `identity:G` or `random:G:SEED`.
    #[arg(long, global = true)]
    pub tau: Option<String>,
    /// Direction jet: a JSON file or inline JSON; a search result is accepted too.
    #[arg(long, global = true)]
    pub jet: Option<String>,
    /// Shift `a` as a JSON list of `{"re","im"}` (overrides the one in `--jet`).
    #[arg(long, global = true)]
    pub shift: Option<String>,
    /// Sample count (default depends on the command).
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Pass threshold (default depends on the command).
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate theta and directional derivatives at listed points.
    ThetaEval(ThetaEvalArgs),
    /// Hirota KP residual on random samples.
    KpResidual,
    /// One-point bilinear residual on random samples.
    OnePointResidual(OnePointArgs),
    /// Exponent-form one-point residual on random samples.
    PabResidual,
    /// On-divisor identity at sampled points of the theta divisor.
    Longeq,
    /// Hierarchy residual on an ε grid, or a jet fit with `--order`.
    Hierarchy(HierarchyArgs),
    /// Fit `(U, V, W, d)` to the Hirota form.
    KpSearch(SearchArgs),
    /// Fit `(U, V, a, c)` to the one-point equation.
    OnePointSearch(SearchArgs),
    /// Kummer flex test at the halves of `a` (or at a given point).
    Flex(FlexArgs),
    /// Weil-type relations on sampled divisor points.
    Weil(WeilArgs),
    /// Decomposability indicator of a genus-2 period matrix.
    Decomp,
    /// Write `u(x, y, t)` on a grid as CSV.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct ThetaEvalArgs {
    /// Points: JSON list of complex vectors (file or inline).
    #[arg(long)]
    pub points: String,
    /// Derivative requests: JSON list, each a list of direction vectors.
    #[arg(long)]
    pub derivs: Option<String>,
    #[arg(long, default_value_t = theta::DEFAULT_TARGET)]
    pub target: f64,
}

#[derive(Debug, Args)]
pub struct OnePointArgs {
    /// Check the linear equation for the eigenfunction by finite differences instead.
    #[arg(long)]
    pub lequ: bool,
}

#[derive(Debug, Args)]
pub struct HierarchyArgs {
    /// Fit a jet of this order starting from the `U, V, W` of `--jet`.
    #[arg(long)]
    pub order: Option<usize>,
    /// Comma-separated ε values for evaluation.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-2, 1e-3])]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
    #[arg(long, default_value_t = 300)]
    pub iterations: usize,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    /// Free fields, comma-separated from u,v,w,c,d,a (default: the target's standard set).
    #[arg(long, value_delimiter = ',')]
    pub free: Option<Vec<String>>,
    /// Holdout sample count (default: same as training).
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Write the objective trace as CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlexArgs {
    #[arg(long, default_value_t = 2)]
    pub order: u32,
    /// Base point `b` (JSON complex vector); default: all halves of `a`.
    #[arg(long)]
    pub at: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeilWhich {
    Weil,
    Weil1,
    Weil2,
}

#[derive(Debug, Args)]
pub struct WeilArgs {
    #[arg(long, value_enum, default_value_t = WeilWhich::Weil)]
    pub which: WeilWhich,
    /// Newton starts for the divisor sampler.
    #[arg(long, default_value_t = 200)]
    pub starts: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Grid origin `x,y,t`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.0, 0.0])]
    pub origin: Vec<f64>,
    /// Node counts `nx,ny,nt`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![20usize, 20, 11])]
    pub shape: Vec<usize>,
    /// Step along unit-normalized directions.
    #[arg(long, default_value_t = fd::STEP)]
    pub step: f64,
    /// Base point `z` (JSON complex vector); default: a seeded random point.
    #[arg(long)]
    pub base: Option<String>,
    /// Use `W` as the time direction without converting it to the KP flow.
    #[arg(long)]
    pub raw_time: bool,
    /// Also write the stencil check of the KP equation as a JSON report here.
    #[arg(long)]
    pub check: Option<PathBuf>,
}

/// Outcome of a command: the text to write and whether it passed.
pub struct Outcome {
    pub body: String,
    pub pass: bool,
}

impl Outcome {
    fn json<T: Serialize>(v: &T, pass: bool) -> Result<Self> {
        let body = serde_json::to_string_pretty(v).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(Outcome { body, pass })
    }
}

/// Parse arguments, run, print errors, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("INVALID_ARGUMENTS", &e.to_string());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(o) => {
            if let Err(e) = emit(cli.global.out.as_deref(), &o.body) {
                report_error(e.code(), &e.to_string());
                return 2;
            }
            if o.pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            report_error(e.code(), &e.to_string());
            if e.is_input_error() {
                2
            } else {
                3
            }
        }
    }
}

fn report_error(code: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": code, "message": message.trim() }));
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, body).map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", p.display()))),
        None => {
            println!("{body}");
            Ok(())
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(Error::InvalidInput("--threads must be positive".into()));
        }
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    if let Some(t) = g.tol {
        if !(t > 0.0) {
            return Err(Error::InvalidInput("--tol must be positive".into()));
        }
    }
    match &cli.command {
        Command::ThetaEval(a) => cmd_theta_eval(g, a),
        Command::KpResidual => cmd_residual(g, Residual::Hirota),
        Command::OnePointResidual(a) => cmd_residual(g, if a.lequ { Residual::Lequ } else { Residual::OnePoint }),
        Command::PabResidual => cmd_residual(g, Residual::PAB),
        Command::Longeq => cmd_longeq(g),
        Command::Hierarchy(a) => cmd_hierarchy(g, a),
        Command::KpSearch(a) => cmd_search(g, a, Target::Hirota),
        Command::OnePointSearch(a) => cmd_search(g, a, Target::OnePoint),
        Command::Flex(a) => cmd_flex(g, a),
        Command::Weil(a) => cmd_weil(g, a),
        Command::Decomp => cmd_decomp(g),
        Command::Grid(a) => cmd_grid(g, a),
    }
}

// ---------------------------------------------------------------------------
// Input loading

fn read_source(s: &str) -> Result<String> {
    let t = s.trim_start();
    if t.starts_with('{') || t.starts_with('[') {
        return Ok(s.to_string());
    }
    std::fs::read_to_string(s).map_err(|e| Error::InvalidInput(format!("cannot read {s}: {e}")))
}

fn parse_json(s: &str) -> Result<Value> {
    serde_json::from_str(&read_source(s)?).map_err(|e| Error::InvalidInput(format!("malformed JSON: {e}")))
}

fn from_value<T: for<'de> Deserialize<'de>>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::InvalidInput(format!("malformed {what}: {e}")))
}

pub fn load_tau(spec: Option<&str>) -> Result<RiemannMatrix> {
    let spec = spec.ok_or_else(|| Error::InvalidInput("--tau is required".into()))?;
    let int = |s: &str| s.parse::<u64>().map_err(|_| Error::InvalidInput(format!("bad integer in --tau: {s}")));
    if let Some(rest) = spec.strip_prefix("identity:") {
        return genus_checked(int(rest)?).map(RiemannMatrix::identity_imaginary);
    }
    if let Some(rest) = spec.strip_prefix("random:") {
        let (g, seed) = rest.split_once(':').unwrap_or((rest, "0"));
        return Ok(sampling::random_tau(genus_checked(int(g)?)?, int(seed)?));
    }
    let j: RiemannMatrixJson = from_value(parse_json(spec)?, "period matrix")?;
    RiemannMatrix::try_from(j)
}

fn genus_checked(g: u64) -> Result<usize> {
    if g == 0 || g > 8 {
        return Err(Error::InvalidInput(format!("genus must be in 1..=8, got {g}")));
    }
    Ok(g as usize)
}

/// A jet plus the shift `a` when the source carries one.
pub fn load_jet(spec: Option<&str>, shift: Option<&str>, g: usize) -> Result<(DirectionJet, Option<Vec<C64>>)> {
    let (jet, mut a) = match spec {
        None => (DirectionJet::default(), None),
        Some(s) => {
            let v = parse_json(s)?;
            if v.get("best_jet").is_some() {
                let r: SearchResult = from_value(v, "search result")?;
                (r.best_jet, r.a)
            } else {
                let a = match v.get("a") {
                    Some(x) if !x.is_null() => Some(from_cx(&from_value::<Vec<Cx>>(x.clone(), "shift")?)),
                    _ => None,
                };
                (from_value::<DirectionJet>(v, "direction jet")?, a)
            }
        }
    };
    if let Some(s) = shift {
        a = Some(parse_cvec(s)?);
    }
    check_jet(&jet, g)?;
    if let Some(a) = &a {
        check_len(a.len(), g)?;
    }
    Ok((jet, a))
}

fn check_len(got: usize, g: usize) -> Result<()> {
    if got != g {
        return Err(Error::DimensionMismatch { expected: g, got });
    }
    Ok(())
}

fn check_jet(jet: &DirectionJet, g: usize) -> Result<()> {
    for v in [&jet.u, &jet.v, &jet.w].into_iter().flatten() {
        check_len(v.len(), g)?;
    }
    for v in jet.zeta.iter().flatten() {
        check_len(v.len(), g)?;
    }
    Ok(())
}

fn parse_cvec(s: &str) -> Result<Vec<C64>> {
    Ok(from_cx(&from_value::<Vec<Cx>>(parse_json(s)?, "complex vector")?))
}

fn need_shift(a: Option<Vec<C64>>) -> Result<Vec<C64>> {
    a.ok_or_else(|| Error::InvalidInput("this command needs the shift a (--shift or a jet carrying \"a\")".into()))
}

// ---------------------------------------------------------------------------
// theta-eval

#[derive(Serialize)]
struct ThetaEvalEntry {
    point: Vec<Cx>,
    value: Cx,
    derivs: Vec<Cx>,
    error_bound: f64,
    /// Exponent factored out during evaluation; value and derivatives include it.
    scale_exponent: f64,
}

#[derive(Serialize)]
struct ThetaEvalReport {
    schema: String,
    results: Vec<ThetaEvalEntry>,
}

fn cmd_theta_eval(g: &GlobalOpts, a: &ThetaEvalArgs) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let points: Vec<Vec<Cx>> = from_value(parse_json(&a.points)?, "point list")?;
    let reqs: Vec<DerivRequest> = match &a.derivs {
        None => Vec::new(),
        Some(s) => {
            let raw: Vec<Vec<Vec<Cx>>> = from_value(parse_json(s)?, "derivative requests")?;
            raw.iter().map(|r| DerivRequest(r.iter().map(|d| from_cx(d)).collect())).collect()
        }
    };
    if !(a.target > 0.0) {
        return Err(Error::InvalidInput("--target must be positive".into()));
    }
    let mut results = Vec::with_capacity(points.len());
    for p in &points {
        check_len(p.len(), tau.genus())?;
        let z = AbelianPoint::new(from_cx(p));
        let j = theta::theta_eval(&z, &tau, &reqs, a.target)?;
        results.push(ThetaEvalEntry {
            point: p.clone(),
            value: j.unscaled_value().into(),
            derivs: (0..j.derivs.len()).map(|i| j.unscaled_deriv(i).into()).collect(),
            error_bound: j.error_bound,
            scale_exponent: j.scale_exponent,
        });
    }
    Outcome::json(&ThetaEvalReport { schema: schema_id("theta-eval"), results }, true)
}

// ---------------------------------------------------------------------------
// residual commands

#[derive(Clone, Copy, PartialEq)]
enum Residual {
    Hirota,
    OnePoint,
    PAB,
    Lequ,
}

/// Degenerate or polar samples are redrawn at most this many times each.
const RESAMPLE_LIMIT: usize = 3;

fn is_degenerate(e: &Error) -> bool {
    matches!(e, Error::DegenerateSample(_) | Error::Pole(_))
}

/// Evaluate `f` at `count` seeded points, redrawing degenerate ones.
fn sweep(tau: &RiemannMatrix, count: usize, seed: u64, f: impl Fn(&AbelianPoint) -> Result<f64> + Sync) -> Result<(Vec<AbelianPoint>, Vec<f64>)> {
    use rayon::prelude::*;
    let pts = sampling::sample_points(tau, count, seed);
    let out: Vec<Result<(AbelianPoint, f64)>> = pts
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut p = p;
            let mut tries = 0;
            loop {
                match f(&p) {
                    Ok(r) => return Ok((p, r)),
                    Err(e) if is_degenerate(&e) && tries < RESAMPLE_LIMIT => {
                        tries += 1;
                        let mut rng = sampling::rng(seed ^ ((i as u64) << 20) ^ tries as u64 ^ 0xA5A5);
                        p = sampling::random_point(tau, &mut rng);
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect();
    let mut points = Vec::with_capacity(count);
    let mut res = Vec::with_capacity(count);
    for r in out {
        let (p, v) = r?;
        points.push(p);
        res.push(v);
    }
    Ok((points, res))
}

fn cmd_residual(g: &GlobalOpts, which: Residual) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let (jet, a) = load_jet(g.jet.as_deref(), g.shift.as_deref(), tau.genus())?;
    let count = g.samples.unwrap_or(50);
    // the finite-difference check carries stencil truncation error
    let tol = g.tol.unwrap_or(if which == Residual::Lequ { 1e-4 } else { 1e-6 });
    let mut notes = Vec::new();
    let (points, res) = match which {
        Residual::Hirota => sweep(&tau, count, g.seed, |z| bilinear::hirota_residual(z, &tau, &jet))?,
        Residual::OnePoint => {
            let a = need_shift(a)?;
            sweep(&tau, count, g.seed, |z| bilinear::p_residual(z, &tau, &jet, &a))?
        }
        Residual::PAB => {
            let a = need_shift(a)?;
            sweep(&tau, count, g.seed, |z| bilinear::p_ab_residual(z, &tau, &jet, &a))?
        }
        Residual::Lequ => {
            let a = need_shift(a)?;
            let refined = std::sync::atomic::AtomicUsize::new(0);
            let out = sweep(&tau, count, g.seed, |z| {
                let (r, h) = fd::one_point_lequ_residual_refined(z, &tau, &jet, &a, fd::STEP)?;
                if h < fd::STEP {
                    refined.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
                Ok(r)
            })?;
            notes.push(format!("finite-difference residual with step {} along unit-normalized directions", fd::STEP));
            notes.push(format!("{} samples reported at a halved step (halving cut the residual more than eightfold)", refined.into_inner()));
            out
        }
    };
    let mut rep = ResidualReport::new(&points, res, tol);
    rep.notes.extend(notes);
    let pass = rep.pass;
    Outcome::json(&rep, pass)
}

fn cmd_longeq(g: &GlobalOpts) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let (jet, _) = load_jet(g.jet.as_deref(), None, tau.genus())?;
    let plan = SamplePlan { count: g.samples.unwrap_or(50), seed: g.seed, ..Default::default() };
    let outcome = divisor::sample_theta_divisor(&tau, &plan)?;
    let points: Vec<AbelianPoint> = outcome.points.iter().map(|p| p.z.clone()).collect();
    let res = points.iter().map(|z| bilinear::longeq_residual(z, &tau, &jet)).collect::<Result<Vec<f64>>>()?;
    let mut rep = ResidualReport::new(&points, res, g.tol.unwrap_or(1e-6));
    rep.notes.extend(outcome.notes);
    if points.is_empty() {
        rep.notes.push("no divisor points located; the check is vacuous".into());
    }
    let pass = rep.pass;
    Outcome::json(&rep, pass)
}

#[derive(Serialize)]
struct HierarchyEval {
    schema: String,
    eps: Vec<f64>,
    mean_residual: Vec<f64>,
    max_residual: Vec<f64>,
    /// Log-log slope between the first two ε values.
    exponent: Option<f64>,
    jet_order: usize,
    threshold: f64,
    pass: bool,
}

fn cmd_hierarchy(g: &GlobalOpts, a: &HierarchyArgs) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let (jet, _) = load_jet(g.jet.as_deref(), None, tau.genus())?;
    if let Some(k) = a.order {
        let dims = 2 * tau.genus() * (k + 1);
        let problem = SearchProblem {
            tau: tau.clone(),
            target: Target::Hierarchy,
            free_vars: FreeMask::default(),
            init: jet,
            a_init: None,
            sample_count: g.samples.unwrap_or(20 * dims),
            holdout_count: None,
            seed: g.seed,
            budget: Budget { restarts: a.restarts, iterations: a.iterations },
            tolerance: g.tol.unwrap_or(1e-6),
            jet_order: Some(k),
        };
        let r = search::fit(&problem)?;
        let pass = r.converged;
        return Outcome::json(&r, pass);
    }
    let order = jet.zeta.as_ref().map(|z| z.len()).ok_or_else(|| Error::InvalidInput("jet has no zeta coefficients".into()))?;
    if a.eps.iter().any(|e| !(e.abs() > 0.0 && e.abs() < 1.0)) {
        return Err(Error::InvalidInput("every ε must satisfy 0 < |ε| < 1".into()));
    }
    let count = g.samples.unwrap_or(50);
    let mut means = Vec::new();
    let mut maxes = Vec::new();
    for &e in &a.eps {
        let (_, r) = sweep(&tau, count, g.seed, |z| bilinear::hierarchy_residual(z, &tau, &jet, C64::new(e, 0.0)))?;
        means.push(r.iter().sum::<f64>() / r.len().max(1) as f64);
        maxes.push(r.iter().cloned().fold(0.0, f64::max));
    }
    let exponent = (means.len() >= 2).then(|| (means[0] / means[1]).log10() / (a.eps[0] / a.eps[1]).abs().log10());
    let threshold = order as f64 + 0.5;
    let pass = exponent.is_some_and(|x| x >= threshold);
    Outcome::json(
        &HierarchyEval { schema: schema_id("hierarchy-eval"), eps: a.eps.clone(), mean_residual: means, max_residual: maxes, exponent, jet_order: order, threshold, pass },
        pass,
    )
}

// ---------------------------------------------------------------------------
// search

fn parse_free(list: &[String]) -> Result<FreeMask> {
    let mut m = FreeMask::default();
    for s in list {
        match s.trim().to_ascii_lowercase().as_str() {
            "u" => m.u = true,
            "v" => m.v = true,
            "w" => m.w = true,
            "c" => m.c = true,
            "d" => m.d = true,
            "a" => m.a = true,
            "" => {}
            other => return Err(Error::InvalidInput(format!("unknown free field {other:?}"))),
        }
    }
    Ok(m)
}

fn cmd_search(g: &GlobalOpts, a: &SearchArgs, target: Target) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let genus = tau.genus();
    let (mut jet, shift) = load_jet(g.jet.as_deref(), g.shift.as_deref(), genus)?;
    let free = match &a.free {
        Some(l) => parse_free(l)?,
        None if target == Target::Hirota => FreeMask::hirota(),
        None => FreeMask::one_point(),
    };
    if jet.u.is_none() && !free.u {
        jet.u = Some(crate::cvec::unit(genus, 0));
    }
    let n_real = 2 * genus * [free.u, free.v, free.w, free.a].iter().filter(|&&b| b).count() + 2 * [free.c, free.d].iter().filter(|&&b| b).count();
    let problem = SearchProblem {
        tau,
        target,
        free_vars: free,
        init: jet,
        a_init: shift,
        sample_count: g.samples.unwrap_or(40 * n_real.max(1)),
        holdout_count: a.holdout,
        seed: g.seed,
        budget: Budget { restarts: a.restarts, iterations: a.iterations },
        tolerance: g.tol.unwrap_or(1e-9),
        jet_order: None,
    };
    let (r, trace) = search::fit_traced(&problem)?;
    if let Some(p) = &a.history {
        std::fs::write(p, search::trace_csv(&trace)).map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", p.display())))?;
    }
    let pass = r.converged;
    Outcome::json(&r, pass)
}

// ---------------------------------------------------------------------------
// flex, weil, decomp

fn cmd_flex(g: &GlobalOpts, a: &FlexArgs) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let (jet, shift) = load_jet(g.jet.as_deref(), g.shift.as_deref(), tau.genus())?;
    let order = FlexOrder::from_int(a.order)?;
    let u = jet.u()?;
    // the one-point `V` enters the germ with the opposite sign
    let v = crate::cvec::scale(jet.v()?, C64::new(-1.0, 0.0));
    let w = match order {
        FlexOrder::Third => Some(jet.w()?),
        FlexOrder::Second => None,
    };
    let threshold = g.tol.unwrap_or(kummer::DEFAULT_RANK_TOL);
    let mut rep = match &a.at {
        Some(s) => {
            let b = parse_cvec(s)?;
            check_len(b.len(), tau.genus())?;
            kummer::flex_test(&AbelianPoint::new(b), u, &v, &tau, order, w, threshold)?
        }
        None => {
            let a = need_shift(shift)?;
            kummer::flex_test_halves(&AbelianPoint::new(a), u, &v, &tau, order, w, threshold)?
        }
    };
    rep.notes.push("germ directions are (2U, -2V) with V in the one-point convention".into());
    let pass = rep.pass;
    Outcome::json(&rep, pass)
}

fn cmd_weil(g: &GlobalOpts, a: &WeilArgs) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let (jet, shift) = load_jet(g.jet.as_deref(), g.shift.as_deref(), tau.genus())?;
    let plan = SamplePlan { count: g.samples.unwrap_or(50), starts: a.starts, seed: g.seed, ..Default::default() };
    let tol = g.tol.unwrap_or(1e-6);
    let (outcome, which, a_opt) = match a.which {
        WeilWhich::Weil => (divisor::sample_d1_theta(&tau, &jet, &plan)?, WeilKind::Weil, None),
        WeilWhich::Weil2 => {
            let s = need_shift(shift)?;
            (divisor::sample_d1_theta(&tau, &jet, &plan)?, WeilKind::Weil2, Some(s))
        }
        WeilWhich::Weil1 => {
            let s = need_shift(shift)?;
            (divisor::sample_theta_cap_theta_a(&tau, &s, &plan)?, WeilKind::Weil1, Some(s))
        }
    };
    let mut rep = divisor::weil_check(&outcome.points, &tau, &jet, a_opt.as_deref(), which, tol)?;
    rep.notes.push(format!("{} distinct points from {} converged Newton starts", outcome.points.len(), outcome.converged_starts));
    rep.notes.extend(outcome.notes);
    let pass = rep.pass;
    Outcome::json(&rep, pass)
}

#[derive(Serialize)]
struct DecompReport {
    schema: String,
    indicator: f64,
    threshold: f64,
    verdict: &'static str,
}

fn cmd_decomp(g: &GlobalOpts) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let indicator = kummer::decomposability_indicator(&tau)?;
    let threshold = g.tol.unwrap_or(1e-8);
    let decomposable = indicator <= threshold;
    let verdict = if decomposable { "DECOMPOSABLE" } else { "INDECOMPOSABLE" };
    Outcome::json(&DecompReport { schema: schema_id("decomposability"), indicator, threshold, verdict }, !decomposable)
}

// ---------------------------------------------------------------------------
// grid

pub const GRID_HEADER: &str = "x,y,t,re_u,im_u";
pub const POLE: &str = "pole";

fn triple<T: Copy>(v: &[T], what: &str) -> Result<[T; 3]> {
    v.try_into().map_err(|_| Error::InvalidInput(format!("--{what} needs three comma-separated values")))
}

/// Write a grid as CSV, marking poles with the sentinel in both value columns.
pub fn grid_csv(grid: &Grid) -> String {
    let mut s = String::from(GRID_HEADER);
    s.push('\n');
    for (idx, v) in grid.values.iter().enumerate() {
        let [x, y, t] = grid.coords(idx);
        match v {
            Some(u) => s.push_str(&format!("{x:e},{y:e},{t:e},{:e},{:e}\n", u.re, u.im)),
            None => s.push_str(&format!("{x:e},{y:e},{t:e},{POLE},{POLE}\n")),
        }
    }
    s
}

/// Read back a grid written by [`grid_csv`]; the layout (x fastest) is recovered
/// from the coordinate columns.
pub fn parse_grid_csv(text: &str) -> Result<Grid> {
    let bad = |m: &str| Error::InvalidInput(format!("grid CSV: {m}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(GRID_HEADER) {
        return Err(bad("missing header"));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected five columns"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("bad number"));
        let (x, y, t) = (num(f[0])?, num(f[1])?, num(f[2])?);
        let u = if f[3].trim() == POLE { None } else { Some(C64::new(num(f[3])?, num(f[4])?)) };
        rows.push(([x, y, t], u));
    }
    if rows.is_empty() {
        return Ok(Grid { origin: [0.0; 3], step: [0.0; 3], shape: [0, 0, 0], values: Vec::new() });
    }
    let origin = rows[0].0;
    let count = |axis: usize| {
        let mut vals: Vec<f64> = rows.iter().map(|r| r.0[axis]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        vals
    };
    let axes = [count(0), count(1), count(2)];
    let shape = [axes[0].len(), axes[1].len(), axes[2].len()];
    if shape.iter().product::<usize>() != rows.len() {
        return Err(bad("rows do not form a full grid"));
    }
    let step = [0, 1, 2].map(|a| if axes[a].len() > 1 { axes[a][1] - axes[a][0] } else { 0.0 });
    Ok(Grid { origin, step, shape, values: rows.into_iter().map(|r| r.1).collect() })
}

fn cmd_grid(g: &GlobalOpts, a: &GridArgs) -> Result<Outcome> {
    let tau = load_tau(g.tau.as_deref())?;
    let genus = tau.genus();
    let (jet, _) = load_jet(g.jet.as_deref(), None, genus)?;
    let origin = triple(&a.origin, "origin")?;
    let shape = triple(&a.shape, "shape")?;
    if !(a.step > 0.0) {
        return Err(Error::InvalidInput("--step must be positive".into()));
    }
    let u = jet.u()?;
    let flow = if crate::cvec::is_zero(u) || a.raw_time {
        jet.clone()
    } else {
        jet.kp_flow()?
    };
    let zero = crate::cvec::zeros(genus);
    let dirs: [&[C64]; 3] = [u, flow.v.as_deref().unwrap_or(&zero), flow.w.as_deref().unwrap_or(&zero)];
    let steps = fd::unit_steps(a.step, &dirs);
    let base = match &a.base {
        Some(s) => {
            let b = parse_cvec(s)?;
            check_len(b.len(), genus)?;
            AbelianPoint::new(b)
        }
        None => sampling::random_point(&tau, &mut sampling::rng(g.seed)),
    };
    // surface input errors before the sweep, which records failures as poles
    bilinear::kp_field_u(0.0, 0.0, 0.0, &base, &tau, &flow).or_else(|e| if is_degenerate(&e) { Ok(C64::new(0.0, 0.0)) } else { Err(e) })?;
    let grid = Grid::sample(origin, [steps[0], steps[1], steps[2]], shape, |x, y, t| bilinear::kp_field_u(x, y, t, &base, &tau, &flow));
    let mut pass = true;
    if let Some(p) = &a.check {
        let res = fd::kp_grid_residuals(&grid);
        let mut rep = ResidualReport::new(&[], res, g.tol.unwrap_or(1e-4));
        rep.notes.push(format!("KP stencil residual at {} interior nodes, steps {:?}", rep.residuals.len(), grid.step));
        pass = rep.pass;
        let body = serde_json::to_string_pretty(&rep).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(p, body).map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(Outcome { body: grid_csv(&grid).trim_end().to_string(), pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_specs_parse() {
        assert_eq!(load_tau(Some("identity:2")).unwrap().genus(), 2);
        assert_eq!(load_tau(Some("random:3:5")).unwrap().genus(), 3);
        let inline = r#"{"g":1,"tau_re":[[0.0]],"tau_im":[[1.0]]}"#;
        assert_eq!(load_tau(Some(inline)).unwrap().genus(), 1);
        let bad = r#"{"g":2,"tau_re":[[0,1],[0,0]],"tau_im":[[1,0],[0,1]]}"#;
        assert_eq!(load_tau(Some(bad)).unwrap_err().code(), "TAU_NOT_SYMMETRIC");
        assert!(load_tau(Some("random:0:1")).is_err());
    }

    #[test]
    fn search_result_is_accepted_as_jet() {
        let r = serde_json::json!({
            "schema": "x", "target": "one_point",
            "best_jet": {"U": [{"re": 1.0, "im": 0.0}]},
            "a": [{"re": 0.25, "im": 0.5}],
            "best_residual": 0.0, "history": [], "converged": true, "gauge_restarts": 0, "caveats": []
        });
        let (jet, a) = load_jet(Some(&r.to_string()), None, 1).unwrap();
        assert_eq!(jet.u.unwrap()[0], C64::new(1.0, 0.0));
        assert_eq!(a.unwrap()[0], C64::new(0.25, 0.5));
        assert!(matches!(load_jet(Some(&r.to_string()), None, 2), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn grid_csv_round_trips() {
        let grid = Grid::sample([0.0, 1.0, 2.0], [0.5, 0.25, 0.125], [3, 2, 2], |x, y, _| {
            if x == 0.5 && y == 1.0 {
                Err(Error::Pole(0.0))
            } else {
                Ok(C64::new(x + y, -x))
            }
        });
        let back = parse_grid_csv(&grid_csv(&grid)).unwrap();
        assert_eq!(back.shape, grid.shape);
        assert_eq!(back.values, grid.values);
        assert_eq!(back.step, grid.step);
        let empty = Grid::sample([0.0; 3], [1.0; 3], [0, 4, 4], |_, _, _| Ok(C64::new(0.0, 0.0)));
        assert_eq!(grid_csv(&empty).trim(), GRID_HEADER);
        assert!(parse_grid_csv(GRID_HEADER).unwrap().is_empty());
    }

    #[test]
    fn free_mask_parsing() {
        let m = parse_free(&["v".into(), "W".into(), "d".into()]).unwrap();
        assert_eq!(m, FreeMask::hirota());
        assert!(parse_free(&["q".into()]).is_err());
    }
}
