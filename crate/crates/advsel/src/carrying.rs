//! Compartments, the integrals `S_i(t)`, carrying capacities `R_i = S_i'/S_i`, and their
//! predicted long-time limits.
//!
//! All integrals are accumulated in log space. Near a root that bounds a compartment the
//! outer quadrature runs in the logarithm of the distance to the root, since the weight
//! concentrates at distances like `e^{-f'(a) t}` there.

use std::cell::RefCell;

use serde::Serialize;
use thiserror::Error;

use crate::characteristics::{Characteristics, Direction, FlowError, FlowResult, PathField};
use crate::expr::Side;
use crate::model::{
    vanishing_order, FitError, Interval, Orientation, ProblemSpec, Stability, VanishingOrder, VanishingSource,
};
use crate::quad::{self, LogIntegral, QuadError, QuadOptions};
use crate::solve::sup_on;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CarryingError {
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("vanishing order of n0 at {root}: {source}")]
    Vanishing { root: f64, source: FitError },
    #[error("degenerate case: {0}")]
    Degenerate(String),
    #[error("formula does not apply to {0}")]
    NonApplicable(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum End {
    Root { location: f64, slope: f64, stability: Stability },
    Boundary { location: f64 },
}

impl End {
    pub fn location(&self) -> f64 {
        match *self {
            End::Root { location, .. } | End::Boundary { location } => location,
        }
    }
    pub fn root(&self) -> Option<f64> {
        match *self {
            End::Root { location, .. } => Some(location),
            End::Boundary { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Compartment {
    pub index: usize,
    pub interval: Interval,
    /// Closed hull of the support of `n0` inside the compartment.
    pub support: Interval,
    pub left: End,
    pub right: End,
    /// Sign of `f` inside; zero on a plateau.
    pub direction: f64,
    pub plateau: bool,
    pub initial_mass: f64,
    /// Vanishing data of `n0` at the end trajectories come from, when that end is a root.
    pub source_vanishing: Option<VanishingOrder>,
    #[serde(skip)]
    pub vanishing_error: Option<FitError>,
}

impl Compartment {
    /// The end trajectories leave from.
    pub fn source(&self) -> &End {
        if self.direction > 0.0 {
            &self.left
        } else {
            &self.right
        }
    }
    /// The end trajectories move towards.
    pub fn sink(&self) -> &End {
        if self.direction > 0.0 {
            &self.right
        } else {
            &self.left
        }
    }
    /// Side of the source root on which the compartment lies.
    pub fn source_side(&self) -> Orientation {
        if self.direction > 0.0 {
            Orientation::Right
        } else {
            Orientation::Left
        }
    }
}

/// Split the domain into compartments that meet the support of `n0`.
pub fn build_compartments(spec: &ProblemSpec) -> Vec<Compartment> {
    let d = spec.domain;
    let fx = &spec.funcs;
    let root_end = |x: f64, side: Side| -> End {
        let eq = spec.roots().find(|e| e.location == x);
        let slope = eq.map_or_else(|| fx.df.eval_side(x, side), |e| e.slope);
        let stability = eq.map_or(Stability::NonHyperbolic, |e| e.kind);
        End::Root { location: x, slope, stability }
    };
    let mut pieces: Vec<(Interval, End, End, bool)> = Vec::new();
    let mut prev: Option<f64> = None;
    let mut spans: Vec<(f64, f64, bool)> = Vec::new();
    for e in &spec.equilibria {
        let (lo, hi) = e.span();
        if e.is_plateau() {
            spans.retain(|s| !(s.0 == lo && !s.2) && !(s.0 == hi && !s.2));
            spans.push((lo, hi, true));
        } else if !spans.iter().any(|s| s.2 && (s.0 == lo || s.1 == lo)) {
            spans.push((lo, hi, false));
        }
    }
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &(lo, hi, plateau) in &spans {
        let start = prev.unwrap_or(d.lo);
        if lo > start {
            let left = if prev.is_some() { root_end(start, Side::Right) } else { End::Boundary { location: d.lo } };
            pieces.push((Interval::new(start, lo), left, root_end(lo, Side::Left), false));
        }
        if plateau {
            let left = if lo > d.lo { root_end(lo, Side::Left) } else { End::Boundary { location: lo } };
            let right = if hi < d.hi { root_end(hi, Side::Right) } else { End::Boundary { location: hi } };
            pieces.push((Interval::new(lo, hi), left, right, true));
        }
        prev = Some(hi);
    }
    let start = prev.unwrap_or(d.lo);
    if d.hi > start {
        let left = if prev.is_some() { root_end(start, Side::Right) } else { End::Boundary { location: d.lo } };
        pieces.push((Interval::new(start, d.hi), left, End::Boundary { location: d.hi }, false));
    }

    let breaks = spec.n0.breakpoints();
    let rel = spec.numerics.quad_rel_tol;
    let mut out = Vec::new();
    for (interval, left, right, plateau) in pieces {
        let lo = interval.lo.max(spec.support.lo);
        let hi = interval.hi.min(spec.support.hi);
        if !(hi > lo) {
            continue;
        }
        let mass = quad::integrate(|x| fx.n0.eval(x), lo, hi, &breaks, rel).unwrap_or(0.0);
        if !(mass > 0.0) {
            continue;
        }
        let direction = if plateau { 0.0 } else { fx.f.eval(0.5 * (interval.lo + interval.hi)).signum() };
        let mut comp = Compartment {
            index: out.len(),
            interval,
            support: Interval::new(lo, hi),
            left,
            right,
            direction,
            plateau,
            initial_mass: mass,
            source_vanishing: None,
            vanishing_error: None,
        };
        if !plateau {
            if let Some(a) = comp.source().root() {
                let side = comp.source_side();
                match spec.hint_for(a, side) {
                    Some(h) => {
                        comp.source_vanishing = Some(VanishingOrder {
                            alpha: h.alpha,
                            coefficient: h.coefficient,
                            source: VanishingSource::UserDeclared,
                        })
                    }
                    None => match vanishing_order(&fx.n0, a, side, fit_width(spec, &interval, a), spec.numerics.tol_fit) {
                        Ok(v) => comp.source_vanishing = Some(v),
                        Err(e) => comp.vanishing_error = Some(e),
                    },
                }
            }
        }
        out.push(comp);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Exponential,
    Unknown,
}

/// Which mechanism attains a carrying-capacity limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LimitSource {
    /// Mass concentrates at a stable root.
    StableEnd { location: f64 },
    /// Mass stays near an unstable root with a profile.
    UnstableEnd { location: f64, alpha: f64, coefficient: f64 },
    /// Mass escapes to where `r` vanishes.
    Escape,
    /// Mass concentrates at the maximizer of `r` on a plateau.
    PlateauMax { location: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarryingLimit {
    pub value: f64,
    pub speed: Speed,
    pub case_tag: String,
    pub formula: String,
    pub source: LimitSource,
}

/// Probe width for the vanishing fit at `root`: the compartment, cut at the nearest
/// breakpoint of n0 so the probes stay on one smooth piece.
fn fit_width(spec: &ProblemSpec, interval: &Interval, root: f64) -> f64 {
    let far = if interval.lo == root { interval.hi } else { interval.lo };
    let dir = (far - root).signum();
    let reach = (far - root).abs();
    spec.n0
        .breakpoints()
        .into_iter()
        .map(|b| dir * (b - root))
        .filter(|&d| d > 1e-12 * reach && d < reach)
        .fold(reach, f64::min)
}

/// Predicted `lim R(t)` for one compartment.
pub fn predict_r_limit(spec: &ProblemSpec, comp: &Compartment) -> Result<CarryingLimit, CarryingError> {
    let fx = &spec.funcs;
    if comp.plateau {
        return plateau_limit(spec, comp);
    }
    for end in [&comp.left, &comp.right] {
        if let End::Root { location, stability: Stability::NonHyperbolic, .. } = *end {
            return Err(CarryingError::Degenerate(format!("non-hyperbolic equilibrium at {location}")));
        }
    }
    let positive = comp.direction > 0.0;
    let tie = |a: f64, b: f64| (a - b).abs() <= spec.numerics.tie_tol * (1.0 + a.abs().max(b.abs()));

    // Contribution of the sink end.
    let sink = match *comp.sink() {
        End::Root { location, .. } => {
            let side = if positive { Side::Left } else { Side::Right };
            (fx.r.eval_side(location, side), format!("r({location})"), LimitSource::StableEnd { location })
        }
        End::Boundary { .. } => (0.0, "0".to_string(), LimitSource::Escape),
    };
    // Contribution of the source end, if mass sits there.
    let source = match *comp.source() {
        End::Root { location: a, slope, .. } => {
            let v = match comp.source_vanishing {
                Some(v) => v,
                None => {
                    let err = comp.vanishing_error.clone().unwrap_or(FitError::Irregular);
                    return Err(CarryingError::Vanishing { root: a, source: err });
                }
            };
            if v.is_zero_nearby() {
                None
            } else {
                let side = comp.source_side().side();
                let value = fx.r.eval_side(a, side) - (1.0 + v.alpha) * slope;
                let formula = format!("r({a}) - (1 + {})*f'({a})", v.alpha);
                Some((value, formula, LimitSource::UnstableEnd { location: a, alpha: v.alpha, coefficient: v.coefficient }))
            }
        }
        End::Boundary { .. } => None,
    };
    let sink_is_root = matches!(comp.sink(), End::Root { .. });
    let source_is_root = matches!(comp.source(), End::Root { .. });
    let roman = match (source_is_root, sink_is_root, positive) {
        (false, true, false) => "i",
        (false, true, true) => "ii",
        (true, false, true) => "iii",
        (true, false, false) => "iv",
        (true, true, true) => "v",
        (true, true, false) => "vi",
        (false, false, true) => "vii",
        (false, false, false) => "viii",
    };
    let (value, formula, src, branch) = match source {
        None => {
            let branch = if source_is_root { "no-mass-near-source" } else { "sink" };
            (sink.0, sink.1, sink.2, branch)
        }
        Some((sv, sf, ss)) => {
            if tie(sv, sink.0) {
                return Err(CarryingError::Degenerate(format!(
                    "tied limits {} = {} and {} = {}",
                    sink.1, sink.0, sf, sv
                )));
            }
            if sv > sink.0 {
                (sv, sf, ss, "source")
            } else {
                (sink.0, sink.1, sink.2, "sink")
            }
        }
    };
    let speed = if value > 0.0 && !matches!(src, LimitSource::Escape) { Speed::Exponential } else { Speed::Unknown };
    Ok(CarryingLimit { value, speed, case_tag: format!("{roman}:{branch}"), formula, source: src })
}

fn plateau_limit(spec: &ProblemSpec, comp: &Compartment) -> Result<CarryingLimit, CarryingError> {
    let fx = &spec.funcs;
    let (lo, hi) = (comp.support.lo, comp.support.hi);
    let (xm, rm) = sup_on(|x| fx.r.eval(x), lo, hi, 2049);
    let (_, neg_min) = sup_on(|x| -fx.r.eval(x), lo, hi, 2049);
    let tol = spec.numerics.tie_tol * (1.0 + rm.abs());
    if rm + neg_min <= tol {
        return Ok(CarryingLimit {
            value: rm,
            speed: Speed::Exponential,
            case_tag: "ix:constant".into(),
            formula: "r on the plateau".into(),
            source: LimitSource::PlateauMax { location: 0.5 * (lo + hi) },
        });
    }
    let edge = 1e-6 * (hi - lo);
    if xm - lo <= edge || hi - xm <= edge {
        return Err(CarryingError::Degenerate(format!(
            "maximum of r on the plateau sits at its edge {xm}"
        )));
    }
    let curvature = fx.d2r.eval(xm);
    if !(curvature < 0.0) {
        return Err(CarryingError::Degenerate(format!("r'' = {curvature} at the plateau maximizer {xm}")));
    }
    Ok(CarryingLimit {
        value: rm,
        speed: Speed::Unknown,
        case_tag: "ix:interior-max".into(),
        formula: format!("max r on the plateau, attained at {xm}"),
        source: LimitSource::PlateauMax { location: xm },
    })
}

/// `ln S(t)` and `R(t)` of one compartment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarryingSample {
    pub t: f64,
    pub ln_s: f64,
    pub r: f64,
}

/// Longest stretch of an open orbit that is recorded for reuse.
const ORBIT_HORIZON: f64 = 200.0;

/// Evaluator for the compartment integrals of one problem.
pub struct Carrying<'a> {
    spec: &'a ProblemSpec,
    ch: Characteristics<'a>,
    r: PathField,
    r_tilde: PathField,
    opts: QuadOptions,
    vanishing: Vec<(f64, Orientation, VanishingOrder)>,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    x: f64,
    root: Option<f64>,
    /// `ln |x - root|`, `-inf` when the edge is the root itself.
    log_off: f64,
    /// Lower cut-off for the log coordinate of a tail.
    floor: f64,
}

impl<'a> Carrying<'a> {
    pub fn new(spec: &'a ProblemSpec, comps: &[Compartment]) -> Self {
        let vanishing = comps
            .iter()
            .filter_map(|c| {
                let a = c.source().root()?;
                Some((a, c.source_side(), c.source_vanishing?))
            })
            .collect();
        let r = PathField::new(spec.funcs.r.clone());
        let r_tilde = PathField::new(spec.funcs.r_tilde.clone());
        let mut ch = Characteristics::new(spec);
        for c in comps.iter().filter(|c| !c.plateau && c.direction != 0.0) {
            let sigma = c.direction;
            let entry = |end: &End, fallback: f64, inward: f64| match end.root().and_then(|a| ch.zone_radius(a)) {
                Some(radius) => end.location() + inward * radius,
                None => fallback,
            };
            let (upstream, downstream) = if sigma > 0.0 {
                (entry(&c.left, c.support.lo, 1.0), entry(&c.right, c.interval.hi, -1.0))
            } else {
                (entry(&c.right, c.support.hi, -1.0), entry(&c.left, c.interval.lo, 1.0))
            };
            // A failed recording only means those flows are integrated one by one.
            let _ = ch.register_orbit(upstream, Direction::Forward, &[&r], ORBIT_HORIZON);
            let _ = ch.register_orbit(downstream, Direction::Backward, &[&r_tilde], ORBIT_HORIZON);
        }
        Carrying {
            spec,
            ch,
            r,
            r_tilde,
            opts: QuadOptions { rel_tol: spec.numerics.quad_rel_tol, max_intervals: 4000 },
            vanishing,
        }
    }

    pub fn characteristics(&self) -> &Characteristics<'a> {
        &self.ch
    }

    /// `ln n0` at `root + off`, using the local power law when the offset is below the
    /// resolution of absolute coordinates.
    pub(crate) fn ln_n0(&self, root: Option<f64>, off: f64, log_abs_off: f64) -> f64 {
        let fx = &self.spec.funcs;
        match root {
            Some(a) if a != 0.0 && off != 0.0 && off.abs() < 1e-8 * a.abs() => {
                let orient = if off > 0.0 { Orientation::Right } else { Orientation::Left };
                let v = self.vanishing.iter().find(|(x, o, _)| *x == a && *o == orient).map(|e| e.2);
                match v {
                    Some(v) if v.alpha > 0.0 && !v.is_zero_nearby() => v.coefficient.ln() + v.alpha * log_abs_off,
                    _ => {
                        let s = orient.side();
                        (fx.n0.eval_side(a, s) + fx.dn0.eval_side(a, s) * off).max(0.0).ln()
                    }
                }
            }
            Some(a) => fx.n0.eval(a + off).ln(),
            None => fx.n0.eval(off).ln(),
        }
    }

    pub(crate) fn ln_n0_at(&self, res: &FlowResult) -> f64 {
        self.ln_n0(Some(res.anchor), res.offset, res.log_abs_offset)
    }

    fn edge_floor(&self, root: f64, t: f64, alpha: f64) -> f64 {
        let radius = self.ch.zone_radius(root).unwrap_or(1e-6);
        let slope = self.spec.roots().find(|e| e.location == root).map_or(0.0, |e| e.slope.abs());
        radius.ln() - slope * t - 40.0 / (1.0 + alpha) - 5.0
    }

    fn alpha_at(&self, root: f64) -> f64 {
        self.vanishing.iter().find(|v| v.0 == root).map_or(0.0, |v| v.2.alpha)
    }

    /// `int g` over `[lo.x, hi.x]`, switching to log coordinates near flanking roots.
    /// `g(root, off)` receives a root and an offset, or `None` and an absolute position.
    fn integrate_span<G>(&self, lo: Edge, hi: Edge, breaks: &[f64], mut g: G) -> Result<LogIntegral<2>, QuadError>
    where
        G: FnMut(Option<f64>, f64) -> (f64, [f64; 2]),
    {
        let mid = 0.5 * (lo.x + hi.x);
        let mut total = LogIntegral::<2>::zero();
        for (edge, sign, inner) in [(lo, 1.0, mid), (hi, -1.0, mid)] {
            let near = edge.root.filter(|&rt| sign * (edge.x - rt) <= sign * (inner - edge.x));
            let part = match near {
                Some(rt) => {
                    let u_hi = (sign * (inner - rt)).ln();
                    let mut ub: Vec<f64> = breaks
                        .iter()
                        .filter(|&&b| sign * (b - edge.x) > 0.0 && sign * (inner - b) > 0.0)
                        .map(|&b| (sign * (b - rt)).ln())
                        .collect();
                    ub.sort_by(f64::total_cmp);
                    let mut h = |u: f64| {
                        let (lw, v) = g(Some(rt), sign * u.exp());
                        (lw + u, v)
                    };
                    if edge.log_off == f64::NEG_INFINITY {
                        let split = ub.first().copied().unwrap_or(u_hi);
                        let tail = quad::integrate_log_tail(&mut h, split, edge.floor, 4.0, self.opts)?;
                        let body = quad::integrate_log(&mut h, split, u_hi, &ub, self.opts)?;
                        tail.combine(&body)
                    } else {
                        quad::integrate_log(&mut h, edge.log_off, u_hi, &ub, self.opts)?
                    }
                }
                None => {
                    let (a, b) = if sign > 0.0 { (edge.x, inner) } else { (inner, edge.x) };
                    quad::integrate_log(|x| g(None, x), a, b, breaks, self.opts)?
                }
            };
            total = total.combine(&part);
        }
        Ok(total)
    }

    fn n0_breaks(&self, lo: f64, hi: f64) -> Vec<f64> {
        let mut b: Vec<f64> = self.spec.n0.breakpoints().into_iter().filter(|&x| x > lo && x < hi).collect();
        b.sort_by(f64::total_cmp);
        b
    }

    fn run<T>(&self, err: &RefCell<Option<FlowError>>, res: Result<T, QuadError>) -> Result<T, CarryingError> {
        if let Some(e) = err.borrow_mut().take() {
            return Err(e.into());
        }
        Ok(res?)
    }

    /// `ln S(t)` and `R(t)` from the pullback (initial-position) form.
    pub fn sample(&self, comp: &Compartment, t: f64) -> Result<CarryingSample, CarryingError> {
        let total = if comp.plateau { self.plateau_integral(comp, t)? } else { self.pullback(comp, t)? };
        if !(total.values[0] > 0.0) {
            return Err(CarryingError::Quad(QuadError::NonFinite(t)));
        }
        Ok(CarryingSample { t, ln_s: total.ln_value(0), r: total.values[1] / total.values[0] })
    }

    /// `ln S(t)`.
    pub fn ln_s(&self, comp: &Compartment, t: f64) -> Result<f64, CarryingError> {
        Ok(self.sample(comp, t)?.ln_s)
    }

    /// Carrying capacity `R(t) = S'(t)/S(t)`.
    pub fn r_value(&self, comp: &Compartment, t: f64) -> Result<f64, CarryingError> {
        Ok(self.sample(comp, t)?.r)
    }

    fn pullback(&self, comp: &Compartment, t: f64) -> Result<LogIntegral<2>, CarryingError> {
        let (c, d) = (comp.support.lo, comp.support.hi);
        let edge = |x: f64, end: &End| -> Edge {
            match end.root() {
                Some(rt) => Edge {
                    x,
                    root: Some(rt),
                    log_off: (x - rt).abs().ln(),
                    floor: self.edge_floor(rt, t, self.alpha_at(rt)),
                },
                None => Edge { x, root: None, log_off: 0.0, floor: 0.0 },
            }
        };
        let lo = edge(c, &comp.left);
        let hi = edge(d, &comp.right);
        let err = RefCell::new(None);
        let res = self.integrate_span(lo, hi, &self.n0_breaks(c, d), |root, off| {
            let ln_w = self.ln_n0(root, off, off.abs().ln());
            if ln_w == f64::NEG_INFINITY {
                return (ln_w, [0.0, 0.0]);
            }
            let flow = match root {
                Some(rt) => self.ch.flow_from_root(rt, off, t, Direction::Forward, &[&self.r]),
                None => self.ch.flow(off, t, Direction::Forward, &[&self.r]),
            };
            match flow {
                Ok(fr) => (ln_w + fr.path_integrals[0], [1.0, self.spec.funcs.r.eval(fr.endpoint)]),
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    (f64::NAN, [0.0, 0.0])
                }
            }
        });
        self.run(&err, res)
    }

    fn plateau_integral(&self, comp: &Compartment, t: f64) -> Result<LogIntegral<2>, CarryingError> {
        let fx = &self.spec.funcs;
        let (c, d) = (comp.support.lo, comp.support.hi);
        let mut breaks = self.n0_breaks(c, d);
        if t > 0.0 {
            breaks.push(sup_on(|x| fx.r.eval(x), c, d, 257).0);
        }
        let res = quad::integrate_log(
            |x| {
                let r = fx.r.eval(x);
                (fx.n0.eval(x).ln() + r * t, [1.0, r])
            },
            c,
            d,
            &breaks,
            self.opts,
        );
        Ok(res?)
    }

    /// `S(t) e^{-shift t}` in log form, from the pushforward (current-position) form.
    /// Not defined on plateaus.
    pub fn ln_s_pushforward(&self, comp: &Compartment, t: f64, shift: f64) -> Result<f64, CarryingError> {
        Ok(self.pushforward(comp, t, shift)?.ln_value(0))
    }

    /// `R(t)` from the pushforward form.
    pub fn r_pushforward(&self, comp: &Compartment, t: f64) -> Result<f64, CarryingError> {
        let v = self.pushforward(comp, t, 0.0)?;
        Ok(v.values[1] / v.values[0])
    }

    fn pushforward(&self, comp: &Compartment, t: f64, shift: f64) -> Result<LogIntegral<2>, CarryingError> {
        if comp.plateau {
            return Err(CarryingError::NonApplicable("a plateau compartment"));
        }
        let (c, d) = (comp.support.lo, comp.support.hi);
        let image = |y: f64, end: &End| -> Result<Edge, CarryingError> {
            let fr = self.ch.flow(y, t, Direction::Forward, &[])?;
            Ok(match end.root() {
                Some(rt) => {
                    let log_off =
                        if fr.anchor == rt { fr.log_abs_offset } else { (fr.endpoint - rt).abs().ln() };
                    let x = if y == rt { rt } else { fr.endpoint };
                    let log_off = if y == rt { f64::NEG_INFINITY } else { log_off };
                    Edge { x, root: Some(rt), log_off, floor: self.edge_floor(rt, t, self.alpha_at(rt)) }
                }
                None => Edge { x: fr.endpoint, root: None, log_off: 0.0, floor: 0.0 },
            })
        };
        let lo = image(c, &comp.left)?;
        let hi = image(d, &comp.right)?;
        let mut breaks = Vec::new();
        for b in self.n0_breaks(c, d) {
            breaks.push(self.ch.flow(b, t, Direction::Forward, &[])?.endpoint);
        }
        let err = RefCell::new(None);
        let res = self.integrate_span(lo, hi, &breaks, |root, off| {
            let flow = match root {
                Some(rt) => self.ch.flow_from_root(rt, off, t, Direction::Backward, &[&self.r_tilde]),
                None => self.ch.flow(off, t, Direction::Backward, &[&self.r_tilde]),
            };
            match flow {
                Ok(fr) => {
                    let ln_w = self.ln_n0_at(&fr);
                    if ln_w == f64::NEG_INFINITY {
                        return (ln_w, [0.0, 0.0]);
                    }
                    let x = root.map_or(off, |rt| rt + off);
                    (ln_w + fr.path_integrals[0] - shift * t, [1.0, self.spec.funcs.r.eval(x)])
                }
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    (f64::NAN, [0.0, 0.0])
                }
            }
        });
        self.run(&err, res)
    }
}

/// `ln S(t) - shift t` for one compartment (pushforward form; plateaus use the direct integral).
pub fn s_value(spec: &ProblemSpec, comp: &Compartment, t: f64, shift: f64) -> Result<f64, CarryingError> {
    let comps = std::slice::from_ref(comp);
    let c = Carrying::new(spec, comps);
    if comp.plateau {
        return Err(CarryingError::NonApplicable("a plateau compartment; use s_plateau"));
    }
    c.ln_s_pushforward(comp, t, shift)
}

/// `ln S(t)` on a plateau compartment.
pub fn s_plateau(spec: &ProblemSpec, comp: &Compartment, t: f64) -> Result<f64, CarryingError> {
    if !comp.plateau {
        return Err(CarryingError::NonApplicable("a compartment with non-zero velocity"));
    }
    Carrying::new(spec, std::slice::from_ref(comp)).ln_s(comp, t)
}

pub fn r_value(spec: &ProblemSpec, comp: &Compartment, t: f64) -> Result<f64, CarryingError> {
    Carrying::new(spec, std::slice::from_ref(comp)).r_value(comp, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate, AlphaHint, RawProblem};
    use approx::assert_relative_eq;

    fn problem(f: &str, r: &str, n0: &str, lo: f64, hi: f64) -> ProblemSpec {
        problem_with(f, r, n0, lo, hi, vec![])
    }

    fn problem_with(f: &str, r: &str, n0: &str, lo: f64, hi: f64, hints: Vec<AlphaHint>) -> ProblemSpec {
        let raw = RawProblem {
            f: f.into(),
            r: r.into(),
            n0: n0.into(),
            domain: [lo, hi],
            alpha_hint: hints,
            numerics: Default::default(),
        };
        validate(&raw).expect("valid problem")
    }

    fn red() -> ProblemSpec {
        problem("x*(1-x)", "6-0.5*x", "6*ind(0,1)", 0.0, 1.0)
    }

    #[test]
    fn compartments_of_logistic_flow() {
        let spec = red();
        let comps = build_compartments(&spec);
        assert_eq!(comps.len(), 1);
        let c = &comps[0];
        assert_eq!((c.interval.lo, c.interval.hi), (0.0, 1.0));
        assert!(matches!(c.left, End::Root { location: 0.0, stability: Stability::Unstable, .. }));
        assert!(matches!(c.right, End::Root { location: 1.0, stability: Stability::Stable, .. }));
        let v = c.source_vanishing.unwrap();
        assert_eq!(v.alpha, 0.0);
        assert_relative_eq!(v.coefficient, 6.0, max_relative = 1e-12);
        assert_relative_eq!(c.initial_mass, 6.0, max_relative = 1e-10);
    }

    #[test]
    fn compartments_around_stable_root_and_inner_support() {
        let spec = problem("-x", "1", "ind(-1,1)", -2.0, 2.0);
        let comps = build_compartments(&spec);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].interval.hi, 0.0);
        assert_eq!(comps[1].interval.lo, 0.0);
        let spec = problem("x*(1-x)", "1", "ind(0.2,0.8)", 0.0, 1.0);
        let comps = build_compartments(&spec);
        assert_eq!(comps.len(), 1);
        assert!(comps[0].source_vanishing.unwrap().is_zero_nearby());
    }

    #[test]
    fn limits_of_the_two_logistic_runs() {
        let spec = red();
        let comps = build_compartments(&spec);
        let lim = predict_r_limit(&spec, &comps[0]).unwrap();
        assert_relative_eq!(lim.value, 5.5, max_relative = 1e-12);
        assert_eq!(lim.case_tag, "v:sink");
        assert_eq!(lim.speed, Speed::Exponential);
        let blue = problem("x*(1-x)", "6-4*x", "6*ind(0,1)", 0.0, 1.0);
        let comps = build_compartments(&blue);
        let lim = predict_r_limit(&blue, &comps[0]).unwrap();
        assert_relative_eq!(lim.value, 5.0, max_relative = 1e-12);
        assert_eq!(lim.case_tag, "v:source");
        let tied = problem("x*(1-x)", "6-x", "6*ind(0,1)", 0.0, 1.0);
        let comps = build_compartments(&tied);
        assert!(matches!(predict_r_limit(&tied, &comps[0]), Err(CarryingError::Degenerate(_))));
    }

    #[test]
    fn half_line_out_of_unstable_root_with_small_rate() {
        let spec = problem("x/(1+x)", "0.5/(1+x^2)", "ind(0,1)", 0.0, 100.0);
        let comps = build_compartments(&spec);
        let lim = predict_r_limit(&spec, &comps[0]).unwrap();
        assert_eq!(lim.value, 0.0);
        assert_eq!(lim.speed, Speed::Unknown);
        assert_eq!(lim.case_tag, "iii:sink");
    }

    #[test]
    fn vanishing_fit_stays_on_the_support_piece() {
        let spec = problem("x/(1+x)", "4/(1+x^2)", "x*ind(0,1)", 0.0, 100.0);
        let comps = build_compartments(&spec);
        let v = comps[0].source_vanishing.unwrap();
        assert_eq!(v.alpha, 1.0);
        assert_relative_eq!(v.coefficient, 1.0, max_relative = 1e-6);
        let lim = predict_r_limit(&spec, &comps[0]).unwrap();
        assert_relative_eq!(lim.value, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn initial_values() {
        let spec = red();
        let comps = build_compartments(&spec);
        let c = Carrying::new(&spec, &comps);
        let s = c.sample(&comps[0], 0.0).unwrap();
        assert_relative_eq!(s.ln_s, 6f64.ln(), max_relative = 1e-10);
        // R(0) from the integrated-by-parts moment.
        let fx = &spec.funcs;
        let num = quad::integrate(|x| fx.n0.eval(x) * fx.r_tilde.eval(x) - fx.f.eval(x) * fx.dn0.eval(x), 0.0, 1.0, &[], 1e-12)
            .unwrap();
        assert_relative_eq!(s.r, num / 6.0, max_relative = 1e-9);
        assert_relative_eq!(c.ln_s_pushforward(&comps[0], 0.0, 0.0).unwrap(), 6f64.ln(), max_relative = 1e-10);
    }

    #[test]
    fn pullback_and_pushforward_agree() {
        for r in ["6-0.5*x", "6-4*x"] {
            let spec = problem("x*(1-x)", r, "6*ind(0,1)", 0.0, 1.0);
            let comps = build_compartments(&spec);
            let c = Carrying::new(&spec, &comps);
            for &t in &[0.5, 3.0, 12.0, 30.0] {
                let a = c.ln_s(&comps[0], t).unwrap();
                let b = c.ln_s_pushforward(&comps[0], t, 0.0).unwrap();
                assert!((a - b).abs() < 5e-10, "r={r} t={t}: {a} vs {b}");
                let ra = c.r_value(&comps[0], t).unwrap();
                let rb = c.r_pushforward(&comps[0], t).unwrap();
                assert!((ra - rb).abs() < 1e-7 * ra, "r={r} t={t}: {ra} vs {rb}");
            }
        }
    }

    #[test]
    fn r_is_the_log_derivative_of_s() {
        let spec = problem("x*(1-x)", "6-4*x", "6*x*ind(0,1)", 0.0, 1.0);
        let comps = build_compartments(&spec);
        let c = Carrying::new(&spec, &comps);
        let h = 1e-3;
        for &t in &[1.0, 6.0, 20.0] {
            let fd = (c.ln_s(&comps[0], t + h).unwrap() - c.ln_s(&comps[0], t - h).unwrap()) / (2.0 * h);
            let r = c.r_value(&comps[0], t).unwrap();
            assert!((fd - r).abs() < 1e-4, "t={t}: {fd} vs {r}");
        }
    }

    #[test]
    fn logistic_runs_converge_to_predicted_limits() {
        for (r, lim) in [("6-0.5*x", 5.5), ("6-4*x", 5.0)] {
            let spec = problem("x*(1-x)", r, "6*ind(0,1)", 0.0, 1.0);
            let comps = build_compartments(&spec);
            let c = Carrying::new(&spec, &comps);
            let v = c.r_value(&comps[0], 40.0).unwrap();
            assert!((v - lim).abs() < 1e-3, "r={r}: R(40) = {v}");
        }
    }

    #[test]
    fn vanishing_source_shifts_the_limit() {
        // n0 ~ 6x near 0 (alpha = 1): limit max(r(1), r(0) - 2 f'(0)) = max(2, 4) = 4.
        let spec = problem("x*(1-x)", "6-4*x", "6*x*ind(0,1)", 0.0, 1.0);
        let comps = build_compartments(&spec);
        let lim = predict_r_limit(&spec, &comps[0]).unwrap();
        assert_relative_eq!(lim.value, 4.0, max_relative = 1e-9);
        let c = Carrying::new(&spec, &comps);
        let v = c.r_value(&comps[0], 40.0).unwrap();
        assert!((v - 4.0).abs() < 1e-3, "R(40) = {v}");
    }

    #[test]
    fn plateau_integrals() {
        let spec = problem("0", "3", "ind(-1,1)", -2.0, 2.0);
        let comps = build_compartments(&spec);
        assert_eq!(comps.len(), 1);
        assert!(comps[0].plateau);
        let c = Carrying::new(&spec, &comps);
        assert_relative_eq!(c.ln_s(&comps[0], 2.0).unwrap(), 6.0 + 2f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(c.r_value(&comps[0], 7.0).unwrap(), 3.0, max_relative = 1e-12);
        // Laplace oracle: S(t) e^{-t} sqrt(t) -> sqrt(pi) for r = 1 - x^2.
        let spec = problem("0", "1.5-x^2", "ind(-1,1)", -1.2, 1.2);
        let comps = build_compartments(&spec);
        let c = Carrying::new(&spec, &comps);
        let t = 400.0;
        let v = (c.ln_s(&comps[0], t).unwrap() - 1.5 * t + 0.5 * t.ln()).exp();
        assert_relative_eq!(v, std::f64::consts::PI.sqrt(), max_relative = 1e-9);
        let lim = predict_r_limit(&spec, &comps[0]).unwrap();
        assert_eq!(lim.case_tag, "ix:interior-max");
        assert_relative_eq!(lim.value, 1.5, max_relative = 1e-9);
    }

    #[test]
    fn user_declared_vanishing_is_used() {
        let hint = AlphaHint { root: 0.0, side: Orientation::Right, alpha: 2.0, coefficient: 6.0 };
        let spec = problem_with("x*(1-x)", "6-4*x", "6*x^2*ind(0,1)", 0.0, 1.0, vec![hint]);
        let comps = build_compartments(&spec);
        let v = comps[0].source_vanishing.unwrap();
        assert_eq!(v.source, VanishingSource::UserDeclared);
        let lim = predict_r_limit(&spec, &comps[0]).unwrap();
        assert_relative_eq!(lim.value, 3.0, max_relative = 1e-12);
    }
}
