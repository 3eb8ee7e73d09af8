//! Regime prediction from the carrying-capacity limits, explicit limit profiles, weak
//! stationarity residuals, and scoring of simulations against a prediction.

use std::cell::RefCell;

use serde::Serialize;
use thiserror::Error;

use crate::carrying::{build_compartments, predict_r_limit, CarryingError, Compartment, End, LimitSource};
use crate::dynamics::{DensityEvaluator, DynamicsError, ParticleRun, RhoTrajectory};
use crate::model::{linear_fit, Funcs, Interval, ProblemSpec};
use crate::quad::{self, LogIntegral, QuadError, QuadOptions};
use crate::solve::sup_on;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AsymptoticsError {
    #[error("prediction is not a profile verdict")]
    NotProfile,
    #[error("exponent {exponent} at {location} is <= -1: the profile is not integrable")]
    FarExponent { location: f64, exponent: f64 },
    #[error("profile construction: {0}")]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Dirac { location: f64, mass: f64 },
    Profile { interval: Interval, anchor: f64, alpha: f64, rho_inf: f64, formula: String },
    Extinction,
    Degenerate { reason: String },
}

/// Mechanism that decided the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    StableRoot,
    UnstableRoot,
    PlateauInterior,
    PlateauJunction,
    AllLimitsVanish,
    Tie,
    Undetermined,
}

/// Limit of `R_i` for one compartment, or why it could not be predicted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateLimit {
    pub compartment: usize,
    pub interval: Interval,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub case_tag: String,
    pub formula: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimePrediction {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub rule: Rule,
    /// Compartments attaining the maximal limit.
    pub contributors: Vec<usize>,
    pub dominant: Option<usize>,
    pub candidates: Vec<CandidateLimit>,
}

impl RegimePrediction {
    /// Case tags of the contributing compartments, joined.
    pub fn provenance(&self) -> String {
        let tags: Vec<String> = self
            .contributors
            .iter()
            .filter_map(|&i| self.candidates.iter().find(|c| c.compartment == i))
            .map(|c| format!("compartment {} [{}]", c.compartment, c.case_tag))
            .collect();
        let rule = serde_json::to_value(self.rule).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        if tags.is_empty() {
            rule
        } else {
            format!("{rule}: {}", tags.join(", "))
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.verdict, Verdict::Degenerate { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Anchor {
    Stable(f64),
    Unstable(f64),
    Plateau(usize),
    Junction(f64),
    Escape,
}

struct Candidate {
    comp: usize,
    value: f64,
    anchor: Anchor,
    alpha: f64,
}

/// Predict the long-time regime of `spec`.
pub fn classify(spec: &ProblemSpec) -> RegimePrediction {
    let comps = build_compartments(spec);
    classify_compartments(spec, &comps)
}

pub fn classify_compartments(spec: &ProblemSpec, comps: &[Compartment]) -> RegimePrediction {
    let mut records = Vec::new();
    let mut cands = Vec::new();
    let mut failure: Option<String> = None;
    for comp in comps {
        let mut rec = CandidateLimit {
            compartment: comp.index,
            interval: comp.interval,
            value: None,
            case_tag: String::new(),
            formula: String::new(),
            error: None,
        };
        match predict_r_limit(spec, comp) {
            Ok(lim) => {
                let (anchor, alpha) = match lim.source {
                    LimitSource::StableEnd { location } => (Anchor::Stable(location), 0.0),
                    LimitSource::UnstableEnd { location, alpha, .. } => (Anchor::Unstable(location), alpha),
                    LimitSource::PlateauMax { .. } => (Anchor::Plateau(comp.index), 0.0),
                    LimitSource::Escape => (Anchor::Escape, 0.0),
                };
                if lim.case_tag == "ix:constant" && failure.is_none() {
                    failure = Some(format!(
                        "r is constant on the plateau of compartment {}; the limit keeps the shape of n0",
                        comp.index
                    ));
                }
                cands.push(Candidate { comp: comp.index, value: lim.value, anchor, alpha });
                rec.value = Some(lim.value);
                rec.case_tag = lim.case_tag;
                rec.formula = lim.formula;
            }
            Err(err) => match junction_max(spec, comp, &err) {
                Some(a) => {
                    let value = spec.funcs.r.eval(a);
                    cands.push(Candidate { comp: comp.index, value, anchor: Anchor::Junction(a), alpha: 0.0 });
                    rec.value = Some(value);
                    rec.case_tag = "ix:junction-max".into();
                    rec.formula = format!("r({a})");
                }
                None => {
                    if failure.is_none() {
                        failure = Some(format!("compartment {}: {err}", comp.index));
                    }
                    rec.error = Some(err.to_string());
                }
            },
        }
        records.push(rec);
    }
    let done = |verdict: Verdict, rule: Rule, contributors: Vec<usize>| RegimePrediction {
        verdict,
        rule,
        dominant: contributors.first().copied(),
        contributors,
        candidates: records.clone(),
    };
    if let Some(reason) = failure {
        return done(Verdict::Degenerate { reason }, Rule::Undetermined, Vec::new());
    }
    if cands.is_empty() {
        return done(Verdict::Degenerate { reason: "n0 has no mass in the domain".into() }, Rule::Undetermined, Vec::new());
    }

    let best = cands.iter().map(|c| c.value).fold(f64::NEG_INFINITY, f64::max);
    let tol = spec.numerics.tie_tol * (1.0 + best.abs());
    let top: Vec<&Candidate> = cands.iter().filter(|c| best - c.value <= tol).collect();
    let ids: Vec<usize> = top.iter().map(|c| c.comp).collect();
    if best <= tol {
        if best >= -tol && top.iter().any(|c| c.anchor != Anchor::Escape) {
            let reason = format!("maximal carrying limit {best} sits at the extinction threshold 0");
            return done(Verdict::Degenerate { reason }, Rule::Tie, ids);
        }
        return done(Verdict::Extinction, Rule::AllLimitsVanish, ids);
    }
    let first = top[0].anchor;
    if top.iter().any(|c| c.anchor != first) {
        let parts: Vec<String> = top.iter().map(|c| format!("compartment {} -> {}", c.comp, c.value)).collect();
        let reason = format!("tied maximal limits: {}", parts.join(", "));
        return done(Verdict::Degenerate { reason }, Rule::Tie, ids);
    }
    match first {
        Anchor::Stable(x) => done(Verdict::Dirac { location: x, mass: best }, Rule::StableRoot, ids),
        Anchor::Junction(a) => done(Verdict::Dirac { location: a, mass: best }, Rule::PlateauJunction, ids),
        Anchor::Plateau(i) => {
            let comp = &comps[i];
            let (xm, _) = sup_on(|x| spec.funcs.r.eval(x), comp.support.lo, comp.support.hi, 2049);
            done(Verdict::Dirac { location: xm, mass: best }, Rule::PlateauInterior, ids)
        }
        Anchor::Unstable(a) => {
            let lo = top.iter().map(|c| comps[c.comp].interval.lo).fold(f64::INFINITY, f64::min);
            let hi = top.iter().map(|c| comps[c.comp].interval.hi).fold(f64::NEG_INFINITY, f64::max);
            let alpha = top[0].alpha;
            let formula = format!("D*|x-{a}|^{alpha}*exp(int_{a}^x ((r-f')(s) - {best})/f(s) - {alpha}/(s-{a}) ds)");
            let verdict = Verdict::Profile { interval: Interval::new(lo, hi), anchor: a, alpha, rho_inf: best, formula };
            done(verdict, Rule::UnstableRoot, ids)
        }
        Anchor::Escape => unreachable!("escape limits are zero"),
    }
}

/// The junction root of a plateau compartment when `r` restricted to the plateau part of
/// the support peaks only at that junction.
fn junction_max(spec: &ProblemSpec, comp: &Compartment, err: &CarryingError) -> Option<f64> {
    if !comp.plateau || !matches!(err, CarryingError::Degenerate(_)) {
        return None;
    }
    let (lo, hi) = (comp.support.lo, comp.support.hi);
    let (xm, _) = sup_on(|x| spec.funcs.r.eval(x), lo, hi, 2049);
    let edge = 1e-6 * (hi - lo);
    let at = |end: &End, x: f64| matches!(end, End::Root { location, .. } if *location == x);
    if xm - lo <= edge && lo == comp.interval.lo && at(&comp.left, lo) {
        Some(lo)
    } else if hi - xm <= edge && hi == comp.interval.hi && at(&comp.right, hi) {
        Some(hi)
    } else {
        None
    }
}

/// One side of a limit profile: the part lying in a single compartment next to the anchor.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileSide {
    pub compartment: usize,
    pub anchor: f64,
    /// Other end of the side: a stable root or a domain end.
    pub far: f64,
    pub alpha: f64,
    /// Exponent of `|x - far|` when `far` is a root, else 0.
    pub far_exponent: f64,
    pub far_is_root: bool,
    /// `n0 ~ coefficient * |x - anchor|^alpha` near the anchor.
    pub coefficient: f64,
    /// `ln D` for this side.
    pub ln_d: f64,
    #[serde(skip)]
    h_mid: f64,
    #[serde(skip)]
    level: f64,
    #[serde(skip)]
    breaks: Vec<f64>,
}

impl ProfileSide {
    fn sign(&self) -> f64 {
        (self.far - self.anchor).signum()
    }

    fn mid(&self) -> f64 {
        0.5 * (self.anchor + self.far)
    }

    fn contains(&self, x: f64) -> bool {
        let (lo, hi) = if self.anchor < self.far { (self.anchor, self.far) } else { (self.far, self.anchor) };
        x >= lo && x <= hi
    }

    /// Bounded part of the log-derivative of the profile.
    fn h(&self, funcs: &Funcs, s: f64) -> f64 {
        let width = (self.far - self.anchor).abs();
        let delta = 1e-7 * width;
        let sg = self.sign();
        let mut s = s;
        if (s - self.anchor).abs() < delta {
            s = self.anchor + sg * delta;
        }
        if self.far_is_root && (self.far - s).abs() < delta {
            s = self.far - sg * delta;
        }
        let mut v = (funcs.r_tilde.eval(s) - self.level) / funcs.f.eval(s);
        if self.alpha != 0.0 {
            v -= self.alpha / (s - self.anchor);
        }
        if self.far_is_root && self.far_exponent != 0.0 {
            v -= self.far_exponent / (s - self.far);
        }
        v
    }

    fn signed_integral(&self, funcs: &Funcs, from: f64, to: f64) -> Result<f64, QuadError> {
        let (lo, hi, sg) = if from <= to { (from, to, 1.0) } else { (to, from, -1.0) };
        // The value enters an exponent, so the target is absolute: 1e-12 per unit length
        // of the side.
        let width = (self.far - self.anchor).abs();
        let reference = LogIntegral { log_scale: 0.0, values: [width], abs: [width], errors: [0.0] };
        let opts = QuadOptions { rel_tol: 1e-12, max_intervals: 2000 };
        let v = quad::integrate_log_against(|s| (0.0, [self.h(funcs, s)]), lo, hi, &self.breaks, opts, &reference)?;
        Ok(sg * v.value(0))
    }

    /// `∫_anchor^x h`.
    fn big_h(&self, funcs: &Funcs, x: f64) -> Result<f64, QuadError> {
        let m = self.mid();
        if (x - self.anchor).abs() <= (m - self.anchor).abs() {
            self.signed_integral(funcs, self.anchor, x)
        } else {
            Ok(self.h_mid + self.signed_integral(funcs, m, x)?)
        }
    }

    /// `ln` of the unnormalized shape, with the log-distances to both ends supplied so
    /// points rounding onto an end keep their exact offsets.
    fn ln_shape(&self, funcs: &Funcs, x: f64, ln_da: f64, ln_db: f64) -> Result<f64, QuadError> {
        let mut v = self.big_h(funcs, x)?;
        if self.alpha != 0.0 {
            v += self.alpha * ln_da;
        }
        if self.far_is_root && self.far_exponent != 0.0 {
            v += self.far_exponent * ln_db;
        }
        Ok(v)
    }

    fn ln_value(&self, funcs: &Funcs, x: f64) -> Result<f64, QuadError> {
        let da = (x - self.anchor).abs();
        let db = (x - self.far).abs();
        if da == 0.0 && self.alpha > 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if db == 0.0 && self.far_is_root && self.far_exponent != 0.0 {
            return Ok(if self.far_exponent > 0.0 { f64::NEG_INFINITY } else { f64::INFINITY });
        }
        Ok(self.ln_d + self.ln_shape(funcs, x, da.ln(), db.ln())?)
    }

    /// `∫ exp(ln_shape)` over the side, in log-distance coordinates near both ends.
    fn ln_mass(&self, funcs: &Funcs) -> Result<f64, QuadError> {
        let sg = self.sign();
        let half = 0.5 * (self.far - self.anchor).abs();
        let opts = QuadOptions { rel_tol: 1e-12, max_intervals: 4000 };
        let err = RefCell::new(None);
        let guard = |r: Result<f64, QuadError>| -> f64 {
            r.unwrap_or_else(|e| {
                err.borrow_mut().get_or_insert(e);
                f64::NEG_INFINITY
            })
        };
        let near_a = quad::integrate_log_tail(
            |u| {
                let x = self.anchor + sg * u.exp();
                let ln_db = (self.far - x).abs().ln();
                (u + guard(self.ln_shape(funcs, x, u, ln_db)), [1.0])
            },
            half.ln(),
            half.ln() - 20.0,
            2.0,
            opts,
        )?;
        let near_b = quad::integrate_log_tail(
            |u| {
                let x = self.far - sg * u.exp();
                let ln_da = (x - self.anchor).abs().ln();
                (u + guard(self.ln_shape(funcs, x, ln_da, u)), [1.0])
            },
            half.ln(),
            half.ln() - 20.0,
            2.0,
            opts,
        )?;
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        Ok(near_a.combine(&near_b).ln_value(0))
    }
}

/// Endpoint-exponent check: fitted log-log slope against the predicted exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EndpointSlope {
    pub location: f64,
    pub expected: f64,
    pub measured: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitProfile {
    pub interval: Interval,
    pub anchor: f64,
    pub alpha: f64,
    pub rho_inf: f64,
    pub sides: Vec<ProfileSide>,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(skip)]
    funcs: Funcs,
}

impl LimitProfile {
    fn side_of(&self, x: f64) -> Option<&ProfileSide> {
        self.sides.iter().find(|s| s.contains(x))
    }

    /// `ln n̄(x)`; `-inf` outside the interval.
    pub fn ln_eval(&self, x: f64) -> f64 {
        match self.side_of(x) {
            Some(side) => side.ln_value(&self.funcs, x).unwrap_or(f64::NAN),
            None => f64::NEG_INFINITY,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.ln_eval(x).exp()
    }

    /// Total mass by quadrature in log-distance coordinates.
    pub fn mass(&self) -> Result<f64, QuadError> {
        let mut total = 0.0;
        for side in &self.sides {
            total += (side.ln_d + side.ln_mass(&self.funcs)?).exp();
        }
        Ok(total)
    }

    /// Interior points where the integrand of any weak form may be non-smooth.
    pub fn breaks(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.sides.iter().flat_map(|s| s.breaks.iter().copied()).collect();
        out.push(self.anchor);
        out.retain(|&x| x > self.interval.lo && x < self.interval.hi);
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Log-log slopes of the profile at the anchor and at root ends.
    pub fn endpoint_slopes(&self) -> Vec<EndpointSlope> {
        let mut out = Vec::new();
        for side in &self.sides {
            let w = (side.far - side.anchor).abs();
            let sg = side.sign();
            let ds: Vec<f64> = (0..8).map(|k| w * 1e-4 * 2f64.powi(-k)).collect();
            let lds: Vec<f64> = ds.iter().map(|d| d.ln()).collect();
            let near_a: Vec<f64> = ds.iter().map(|&d| self.ln_eval(side.anchor + sg * d)).collect();
            out.push(EndpointSlope { location: side.anchor, expected: side.alpha, measured: linear_fit(&lds, &near_a).0 });
            if side.far_is_root {
                let near_b: Vec<f64> = ds.iter().map(|&d| self.ln_eval(side.far - sg * d)).collect();
                out.push(EndpointSlope {
                    location: side.far,
                    expected: side.far_exponent,
                    measured: linear_fit(&lds, &near_b).0,
                });
            }
        }
        out
    }
}

/// Build the limit profile of a Profile verdict, sampled on `grid` points per side.
pub fn build_limit_profile(
    spec: &ProblemSpec,
    pred: &RegimePrediction,
    grid: usize,
) -> Result<LimitProfile, AsymptoticsError> {
    let Verdict::Profile { interval, anchor, alpha, rho_inf, .. } = pred.verdict else {
        return Err(AsymptoticsError::NotProfile);
    };
    let comps = build_compartments(spec);
    let funcs = spec.funcs.clone();
    let mut all_breaks = spec.f.breakpoints();
    all_breaks.extend(spec.r.breakpoints());
    let mut sides = Vec::new();
    for &i in &pred.contributors {
        let comp = comps.get(i).ok_or(AsymptoticsError::NotProfile)?;
        let van = comp.source_vanishing.ok_or(AsymptoticsError::NotProfile)?;
        let far_end = *comp.sink();
        let far = far_end.location();
        let (far_is_root, far_exponent) = match far_end {
            End::Root { slope, .. } => {
                let q = (funcs.r_tilde.eval(far) - rho_inf) / slope;
                if q <= -1.0 {
                    return Err(AsymptoticsError::FarExponent { location: far, exponent: q });
                }
                (true, q)
            }
            End::Boundary { .. } => (false, 0.0),
        };
        let (lo, hi) = (comp.interval.lo, comp.interval.hi);
        let breaks: Vec<f64> = all_breaks.iter().copied().filter(|&x| x > lo && x < hi).collect();
        let mut side = ProfileSide {
            compartment: i,
            anchor,
            far,
            alpha: van.alpha,
            far_exponent,
            far_is_root,
            coefficient: van.coefficient,
            ln_d: 0.0,
            h_mid: 0.0,
            level: rho_inf,
            breaks,
        };
        side.h_mid = side.signed_integral(&funcs, anchor, side.mid())?;
        sides.push(side);
    }
    // The sides share one time-dependent factor, so their constants scale with the
    // coefficients of n0 at the anchor.
    let mut ln_masses = Vec::new();
    for side in &sides {
        ln_masses.push(side.coefficient.ln() + side.ln_mass(&funcs)?);
    }
    let top = ln_masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ln_total = top + ln_masses.iter().map(|m| (m - top).exp()).sum::<f64>().ln();
    let shift = rho_inf.ln() - ln_total;
    for side in &mut sides {
        side.ln_d = side.coefficient.ln() + shift;
    }
    sides.sort_by(|a, b| a.mid().total_cmp(&b.mid()));

    let n = grid.max(2);
    let mut xs = Vec::new();
    for side in &sides {
        let (lo, hi) = if side.anchor < side.far { (side.anchor, side.far) } else { (side.far, side.anchor) };
        for k in (0..n).rev() {
            let c = ((2 * k + 1) as f64 * std::f64::consts::PI / (2 * n) as f64).cos();
            xs.push(lo + 0.5 * (hi - lo) * (1.0 + c));
        }
    }
    let mut profile = LimitProfile { interval, anchor, alpha, rho_inf, sides, grid: Vec::new(), values: Vec::new(), funcs };
    let values: Vec<f64> = xs.iter().map(|&x| profile.eval(x)).collect();
    profile.grid = xs;
    profile.values = values;
    Ok(profile)
}

fn bump(x: f64, c: f64, d: f64) -> (f64, f64) {
    if x <= c || x >= d {
        return (0.0, 0.0);
    }
    let half = 0.5 * (d - c);
    let u = (x - 0.5 * (c + d)) / half;
    let w = 1.0 - u * u;
    (w * w * w, -6.0 * u * w * w / half)
}

/// Dyadic bump supports over `interval`: level `l` holds `2^l` adjacent pieces.
fn bump_supports(interval: Interval, count: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(count);
    let mut level = 0;
    while out.len() < count {
        let pieces = 1usize << level;
        let h = interval.width() / pieces as f64;
        for j in 0..pieces {
            if out.len() == count {
                break;
            }
            out.push((interval.lo + h * j as f64, interval.lo + h * (j + 1) as f64));
        }
        level += 1;
    }
    out
}

/// Largest weak-form residual `|∫ (f φ' + (r - ρ∞) φ) n dx| / (‖φ‖∞ ρ∞)` over `count`
/// bumps spanning `interval`.
pub fn weak_residual<F: Fn(f64) -> f64>(
    spec: &ProblemSpec,
    interval: Interval,
    rho_inf: f64,
    count: usize,
    breaks: &[f64],
    density: F,
) -> f64 {
    let fx = &spec.funcs;
    let mut worst: f64 = 0.0;
    for (c, d) in bump_supports(interval, count) {
        let integrand = |x: f64| {
            let (phi, dphi) = bump(x, c, d);
            if phi == 0.0 {
                return 0.0;
            }
            (fx.f.eval(x) * dphi + (fx.r.eval(x) - rho_inf) * phi) * density(x)
        };
        let v = quad::integrate(integrand, c, d, breaks, 1e-10).unwrap_or(f64::INFINITY);
        worst = worst.max(v.abs() / rho_inf);
    }
    worst
}

pub fn stationarity_residual(spec: &ProblemSpec, profile: &LimitProfile, count: usize) -> f64 {
    weak_residual(spec, profile.interval, profile.rho_inf, count, &profile.breaks(), |x| profile.eval(x))
}

/// Weak residual of the measure `mass * δ_location` against bumps over the domain.
pub fn dirac_residual(spec: &ProblemSpec, location: f64, mass: f64, count: usize) -> f64 {
    let fx = &spec.funcs;
    bump_supports(spec.domain, count)
        .into_iter()
        .map(|(c, d)| {
            let (phi, dphi) = bump(location, c, d);
            (fx.f.eval(location) * dphi + (fx.r.eval(location) - mass) * phi).abs()
        })
        .fold(0.0, f64::max)
}

/// Exponential fit of `ln |ρ(t) - ρ∞|` over the tail of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Fit over `[t_b/4, t_b]`, where `t_b` is the first time `|ρ - ρ∞|` reaches the integration
/// noise floor (or the end of the run). `None` when fewer than 8 points remain.
pub fn exponential_tail_fit(traj: &RhoTrajectory, rho_inf: f64) -> Option<TailFit> {
    let floor = 1e-6 * (1.0 + rho_inf.abs());
    let start = traj.start();
    let t_b = traj
        .times
        .iter()
        .zip(&traj.rho)
        .find(|(_, r)| (*r - rho_inf).abs() < floor)
        .map_or(traj.end(), |(t, _)| *t);
    let t_a = start + 0.25 * (t_b - start);
    let samples = 200;
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for k in 0..samples {
        let t = t_a + (t_b - t_a) * k as f64 / samples as f64;
        let gap = (traj.rho_at(t).ok()? - rho_inf).abs();
        if gap < floor {
            break;
        }
        ts.push(t);
        ys.push(gap.ln());
    }
    if ts.len() < 8 {
        return None;
    }
    let (slope, intercept, r_squared) = linear_fit(&ts, &ys);
    Some(TailFit { slope, intercept, r_squared, points: ts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Check { name: name.into(), value, tolerance, pass: value <= tolerance }
    }
    fn at_least(name: &str, value: f64, tolerance: f64) -> Self {
        Check { name: name.into(), value, tolerance, pass: value >= tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub outcome: Outcome,
    pub horizon: f64,
    pub rho_final: f64,
    /// Largest relative change of ρ over the last 10% of the run.
    pub drift: f64,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub const DRIFT_TOL: f64 = 1e-3;
pub const DIRAC_SHARE: f64 = 0.99;
pub const RHO_TOL: f64 = 0.02;
pub const PROFILE_L1: f64 = 0.05;
pub const EXTINCT_RHO: f64 = 0.01;

/// Relative drift of ρ over the final `fraction` of the run, with the denominator floored.
fn drift(traj: &RhoTrajectory, fraction: f64, floor: f64) -> f64 {
    let t_from = traj.end() - fraction * (traj.end() - traj.start());
    let end = traj.final_rho();
    let denom = end.abs().max(floor);
    traj.times
        .iter()
        .zip(&traj.rho)
        .filter(|(&t, _)| t >= t_from)
        .map(|(_, &r)| (r - end).abs() / denom)
        .fold(0.0, f64::max)
}

/// Score a particle run against `pred` at the end of the run.
pub fn score_against_prediction(
    spec: &ProblemSpec,
    pred: &RegimePrediction,
    run: &ParticleRun,
) -> Result<ScoreReport, AsymptoticsError> {
    let traj = &run.trajectory;
    let rho = traj.final_rho();
    let floor = if matches!(pred.verdict, Verdict::Extinction) { EXTINCT_RHO } else { 1e-300 };
    let drift = drift(traj, 0.1, floor);
    let mut note = None;
    let checks = match &pred.verdict {
        Verdict::Dirac { location, mass } => {
            let radius = spec.numerics.dirac_radius * spec.domain.width();
            let ens = &run.ensemble;
            let near: f64 = ens
                .positions
                .iter()
                .zip(&ens.masses)
                .filter(|(&x, _)| (x - location).abs() <= radius)
                .map(|(_, &m)| m)
                .sum();
            let share = near / ens.total_mass();
            vec![Check::at_least("share_within_radius", share, DIRAC_SHARE), Check::at_most("rho_error", (rho - mass).abs(), RHO_TOL)]
        }
        Verdict::Profile { rho_inf, .. } => {
            let profile = build_limit_profile(spec, pred, 65)?;
            let l1 = profile_l1(spec, traj, &profile)?;
            vec![
                Check::at_most("l1_distance", l1, PROFILE_L1 * rho_inf),
                Check::at_most("rho_error", (rho - rho_inf).abs(), RHO_TOL),
            ]
        }
        Verdict::Extinction => vec![Check::at_most("rho_final", rho, EXTINCT_RHO)],
        Verdict::Degenerate { reason } => {
            note = Some(format!("degenerate verdict: {reason}"));
            Vec::new()
        }
    };
    let outcome = if checks.is_empty() || drift > DRIFT_TOL {
        if drift > DRIFT_TOL {
            note.get_or_insert_with(|| format!("relative drift {drift:.3e} over the last 10% exceeds {DRIFT_TOL:e}"));
        }
        Outcome::Inconclusive
    } else if checks.iter().all(|c| c.pass) {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    Ok(ScoreReport { outcome, horizon: traj.end(), rho_final: rho, drift, checks, note })
}

/// `∫ |n(T, x) - n̄(x)| dx` over the domain, with the mass of `n(T)` outside the profile
/// interval counted in full.
pub fn profile_l1(spec: &ProblemSpec, traj: &RhoTrajectory, profile: &LimitProfile) -> Result<f64, AsymptoticsError> {
    let dens = DensityEvaluator::new(spec, traj);
    let t = traj.end();
    let err = RefCell::new(None);
    let (lo, hi) = (profile.interval.lo, profile.interval.hi);
    let g = |x: f64| -> [f64; 2] {
        // The ends are a null set; at a root end n(t) itself grows exponentially.
        if x <= lo || x >= hi {
            return [0.0, 0.0];
        }
        let n = dens.eval(t, x).unwrap_or_else(|e| {
            err.borrow_mut().get_or_insert(e);
            0.0
        });
        [(n - profile.eval(x)).abs(), n]
    };
    // Each half of each side in the log-distance to its outer end, so integrable
    // singularities of the profile at roots cost a bounded number of panels.
    // Errors are measured against the limit mass: the distance itself is mostly noise.
    let opts = QuadOptions { rel_tol: 1e-7, max_intervals: 4000 };
    let m = profile.rho_inf.abs();
    let reference = LogIntegral { log_scale: 0.0, values: [m, m], abs: [m, m], errors: [0.0; 2] };
    let mut total = LogIntegral::<2>::zero();
    for side in &profile.sides {
        let sg = side.sign();
        let half = 0.5 * (side.far - side.anchor).abs();
        for (end, dir) in [(side.anchor, sg), (side.far, -sg)] {
            let part = quad::integrate_log_tail_against(
                |u| (u, g(end + dir * u.exp())),
                half.ln(),
                half.ln() - 20.0,
                2.0,
                opts,
                &reference,
            )?;
            total = total.combine(&part);
        }
    }
    if let Some(e) = err.into_inner() {
        return Err(e.into());
    }
    let inside = total.value(1);
    Ok(total.value(0) + (traj.final_rho() - inside).max(0.0))
}
