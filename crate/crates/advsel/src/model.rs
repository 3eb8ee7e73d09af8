//! Problem data: validated `(f, r, n0)` triples, equilibria of `x' = f(x)`, and
//! vanishing orders of `n0` at roots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_expression, Expr, ParseError, Program, Side};
use crate::solve::{bisect_edge, brent_root, sup_on};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericConfig {
    pub tol_root: f64,
    pub tol_hyperbolic: f64,
    pub tol_fit: f64,
    pub ode_rel_tol: f64,
    pub ode_abs_tol: f64,
    pub quad_rel_tol: f64,
    /// Default simulation horizon.
    pub t_horizon: f64,
    pub grid_n: usize,
    /// Default particle count.
    pub particles: usize,
    /// Dirac concentration radius as a fraction of the domain width.
    pub dirac_radius: f64,
    /// Relative tolerance under which two carrying-capacity limits count as tied.
    pub tie_tol: f64,
    pub test_functions: usize,
}

impl Default for NumericConfig {
    fn default() -> Self {
        NumericConfig {
            tol_root: 1e-10,
            tol_hyperbolic: 1e-6,
            tol_fit: 0.05,
            ode_rel_tol: 1e-9,
            ode_abs_tol: 1e-12,
            quad_rel_tol: 1e-10,
            t_horizon: 40.0,
            grid_n: 2048,
            particles: 512,
            dirac_radius: 0.05,
            tie_tol: 1e-6,
            test_functions: 16,
        }
    }
}

impl NumericConfig {
    pub fn check(&self) -> Result<(), String> {
        let positives = [
            ("tol_root", self.tol_root),
            ("tol_hyperbolic", self.tol_hyperbolic),
            ("tol_fit", self.tol_fit),
            ("ode_rel_tol", self.ode_rel_tol),
            ("ode_abs_tol", self.ode_abs_tol),
            ("quad_rel_tol", self.quad_rel_tol),
            ("t_horizon", self.t_horizon),
            ("dirac_radius", self.dirac_radius),
            ("tie_tol", self.tie_tol),
        ];
        for (name, v) in positives {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("numerics.{name} must be positive and finite, got {v}"));
            }
        }
        if self.grid_n < 2 {
            return Err("numerics.grid_n must be at least 2".into());
        }
        if self.particles < 16 {
            return Err("numerics.particles must be at least 16".into());
        }
        if self.test_functions == 0 {
            return Err("numerics.test_functions must be positive".into());
        }
        Ok(())
    }

    pub fn ode_tolerances(&self) -> crate::ode::Tolerances {
        crate::ode::Tolerances { rel: self.ode_rel_tol, abs: self.ode_abs_tol }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Left,
    Right,
}

impl Orientation {
    pub fn sign(self) -> f64 {
        match self {
            Orientation::Left => -1.0,
            Orientation::Right => 1.0,
        }
    }
    pub fn side(self) -> Side {
        match self {
            Orientation::Left => Side::Left,
            Orientation::Right => Side::Right,
        }
    }
}

/// User-declared vanishing data of `n0` at a root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaHint {
    pub root: f64,
    pub side: Orientation,
    pub alpha: f64,
    #[serde(rename = "C")]
    pub coefficient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    NonHyperbolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub location: f64,
    /// `f'` at the root; one-sided at plateau junctions.
    pub slope: f64,
    pub kind: Stability,
    /// Set when `f` vanishes on a whole segment.
    pub plateau: Option<Interval>,
}

impl Equilibrium {
    pub fn is_plateau(&self) -> bool {
        self.plateau.is_some()
    }
    /// Left and right extent (a point for ordinary roots).
    pub fn span(&self) -> (f64, f64) {
        match self.plateau {
            Some(p) => (p.lo, p.hi),
            None => (self.location, self.location),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VanishingSource {
    UserDeclared,
    Fitted,
    ExactlyZeroNearby,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanishingOrder {
    pub alpha: f64,
    #[serde(rename = "C")]
    pub coefficient: f64,
    pub source: VanishingSource,
}

impl VanishingOrder {
    pub fn is_zero_nearby(&self) -> bool {
        self.source == VanishingSource::ExactlyZeroNearby
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("log-log fit residual {residual:.3e} exceeds tol_fit {tol:.3e}")]
    Residual { residual: f64, tol: f64 },
    #[error("fitted vanishing order {0} is negative")]
    Negative(f64),
    #[error("n0 is neither locally zero nor of power-law type near the root")]
    Irregular,
}

/// A compiled expression together with its source tree.
#[derive(Debug, Clone)]
pub struct Field {
    pub expr: Expr,
    prog: Program,
}

impl Field {
    pub fn new(expr: Expr) -> Self {
        let prog = expr.compile();
        Field { expr, prog }
    }
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.prog.eval(x)
    }
    #[inline]
    pub fn eval_side(&self, x: f64, side: Side) -> f64 {
        self.prog.eval_side(x, side)
    }
    pub fn derivative(&self) -> Field {
        Field::new(self.expr.differentiate())
    }
}

/// Compiled model functions and the derivatives used downstream.
#[derive(Debug, Clone)]
pub struct Funcs {
    pub f: Field,
    pub df: Field,
    pub d2f: Field,
    pub r: Field,
    pub dr: Field,
    pub d2r: Field,
    pub n0: Field,
    pub dn0: Field,
    /// `r - f'`
    pub r_tilde: Field,
    pub dr_tilde: Field,
}

impl Funcs {
    pub fn new(f: &Expr, r: &Expr, n0: &Expr) -> Self {
        let f = Field::new(f.clone());
        let df = f.derivative();
        let d2f = df.derivative();
        let r = Field::new(r.clone());
        let dr = r.derivative();
        let d2r = dr.derivative();
        let n0 = Field::new(n0.clone());
        let dn0 = n0.derivative();
        let r_tilde = Field::new(crate::expr::sub(r.expr.clone(), df.expr.clone()));
        let dr_tilde = r_tilde.derivative();
        Funcs { f, df, d2f, r, dr, d2r, n0, dn0, r_tilde, dr_tilde }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// The flow leaves the domain through this boundary.
    NotPositivelyInvariant { boundary: f64, velocity: f64 },
    /// `f` is small at a boundary that is not a root.
    VanishingAtBoundary { boundary: f64, value: f64 },
    /// A root with tiny slope: two roots may have merged.
    PossibleMergedRoots { location: f64, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Parse { field: String, message: String, offset: usize },
    Evaluation { field: String, x: f64, message: String },
    BadDomain { lo: f64, hi: f64 },
    BadNumerics { message: String },
    NonNegativityViolation { field: String, x: f64, value: f64 },
    EmptySupport,
    SupportExceedsDomain { boundary: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Parse { field, message, .. } => write!(f, "{field}: {message}"),
            Violation::Evaluation { field, x, message } => {
                write!(f, "{field} cannot be evaluated at x = {x}: {message}")
            }
            Violation::BadDomain { lo, hi } => write!(f, "domain [{lo}, {hi}] is not a proper interval"),
            Violation::BadNumerics { message } => write!(f, "{message}"),
            Violation::NonNegativityViolation { field, x, value } => {
                let what = if field == "r" { "positive" } else { "non-negative" };
                write!(f, "{field} must be {what} on the domain; {field}({x}) = {value}")
            }
            Violation::EmptySupport => write!(f, "n0 vanishes identically on the domain"),
            Violation::SupportExceedsDomain { boundary } => {
                write!(f, "support of n0 extends past the domain boundary {boundary}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("{} validation violation(s): {}", violations.len(), violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

/// Unvalidated problem data as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProblem {
    pub f: String,
    pub r: String,
    pub n0: String,
    pub domain: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty", with = "one_or_many")]
    pub alpha_hint: Vec<AlphaHint>,
    #[serde(default)]
    pub numerics: NumericConfig,
}

mod one_or_many {
    use super::AlphaHint;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        One(AlphaHint),
        Many(Vec<AlphaHint>),
    }

    pub fn serialize<S: Serializer>(v: &[AlphaHint], s: S) -> Result<S::Ok, S::Error> {
        if v.len() == 1 {
            v[0].serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<AlphaHint>, D::Error> {
        Ok(match Either::deserialize(d)? {
            Either::One(h) => vec![h],
            Either::Many(v) => v,
        })
    }
}

/// A validated problem. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub f: Expr,
    pub r: Expr,
    pub n0: Expr,
    pub domain: Interval,
    pub support: Interval,
    pub numerics: NumericConfig,
    pub alpha_hints: Vec<AlphaHint>,
    pub warnings: Vec<Warning>,
    pub equilibria: Vec<Equilibrium>,
    /// Supremum of `r` on the domain.
    pub r_sup: f64,
    pub funcs: Funcs,
    raw: RawProblem,
}

impl ProblemSpec {
    /// The raw data this spec was validated from.
    pub fn raw(&self) -> &RawProblem {
        &self.raw
    }

    pub fn initial_mass(&self) -> f64 {
        crate::quad::integrate(
            |x| self.funcs.n0.eval(x),
            self.support.lo,
            self.support.hi,
            &self.n0.breakpoints(),
            self.numerics.quad_rel_tol,
        )
        .unwrap_or(f64::NAN)
    }

    /// Roots of `f` that are not plateaus, sorted.
    pub fn roots(&self) -> impl Iterator<Item = &Equilibrium> {
        self.equilibria.iter().filter(|e| !e.is_plateau())
    }

    pub fn hint_for(&self, root: f64, side: Orientation) -> Option<AlphaHint> {
        let tol = 1e-9 * (1.0 + self.domain.width());
        self.alpha_hints.iter().copied().find(|h| h.side == side && (h.root - root).abs() <= tol)
    }
}

/// Parse and check a raw problem.
pub fn validate(raw: &RawProblem) -> Result<ProblemSpec, ValidationError> {
    let mut violations = Vec::new();
    let mut parsed = |name: &str, text: &str| -> Option<Expr> {
        match parse_expression(text) {
            Ok(e) => Some(e),
            Err(err) => {
                let offset = err.offset();
                let message = match &err {
                    ParseError::Syntax { message, .. } => format!("syntax error at byte {offset}: {message}"),
                    ParseError::UnknownIdentifier { name, .. } => {
                        format!("unknown identifier `{name}` at byte {offset}")
                    }
                };
                violations.push(Violation::Parse { field: name.into(), message, offset });
                None
            }
        }
    };
    let f = parsed("f", &raw.f);
    let r = parsed("r", &raw.r);
    let n0 = parsed("n0", &raw.n0);
    let [lo, hi] = raw.domain;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        violations.push(Violation::BadDomain { lo, hi });
    }
    if let Err(message) = raw.numerics.check() {
        violations.push(Violation::BadNumerics { message });
    }
    let (Some(f), Some(r), Some(n0)) = (f, r, n0) else {
        return Err(ValidationError { violations });
    };
    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }
    let domain = Interval::new(lo, hi);
    let num = raw.numerics;
    let width = domain.width();

    // Sample grid plus both sides of every breakpoint.
    let mut xs: Vec<f64> =
        (0..num.grid_n).map(|i| lo + width * i as f64 / (num.grid_n - 1) as f64).collect();
    let eps = 1e-9 * width;
    for b in f.breakpoints().into_iter().chain(r.breakpoints()).chain(n0.breakpoints()) {
        for x in [b - eps, b, b + eps] {
            if domain.contains(x) {
                xs.push(x);
            }
        }
    }
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    for (name, e) in [("f", &f), ("r", &r), ("n0", &n0)] {
        if let Some((x, err)) = xs.iter().find_map(|&x| e.eval(x).err().map(|err| (x, err))) {
            violations.push(Violation::Evaluation { field: name.into(), x, message: err.to_string() });
        }
    }
    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }

    let funcs = Funcs::new(&f, &r, &n0);
    if let Some(&x) = xs.iter().find(|&&x| funcs.r.eval(x) <= 0.0) {
        violations.push(Violation::NonNegativityViolation { field: "r".into(), x, value: funcs.r.eval(x) });
    }
    if let Some(&x) = xs.iter().find(|&&x| funcs.n0.eval(x) < 0.0) {
        violations.push(Violation::NonNegativityViolation { field: "n0".into(), x, value: funcs.n0.eval(x) });
    }
    let positive: Vec<f64> = xs.iter().copied().filter(|&x| funcs.n0.eval(x) > 0.0).collect();
    if positive.is_empty() {
        violations.push(Violation::EmptySupport);
    }
    for boundary in [lo, hi] {
        let outside = boundary + (boundary - 0.5 * (lo + hi)).signum() * eps;
        if funcs.n0.eval(boundary) > 0.0 && funcs.n0.eval(outside) > 0.0 {
            violations.push(Violation::SupportExceedsDomain { boundary });
        }
    }
    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }

    // Support hull, with edges located by bisection on the positivity predicate.
    let first = positive[0];
    let last = *positive.last().expect("non-empty");
    // An edge that bisects to within underflow range of a sample where n0 vanishes is that sample:
    // power-law vanishing like x^2 underflows long before reaching the true edge.
    let refine = |zero: f64, pos: f64| -> f64 {
        let edge = bisect_edge(|x| funcs.n0.eval(x) <= 0.0, zero, pos);
        if (edge - zero).abs() <= 1e-12 * (hi - lo) {
            return zero;
        }
        n0.breakpoints().into_iter().find(|b| (edge - b).abs() <= 1e-12 * (hi - lo)).unwrap_or(edge)
    };
    let s_lo = match xs.iter().rev().find(|&&x| x < first) {
        Some(&z) => refine(z, first),
        None => first,
    };
    let s_hi = match xs.iter().find(|&&x| x > last) {
        Some(&z) => refine(z, last),
        None => last,
    };
    let support = Interval::new(s_lo, s_hi);

    let (equilibria, mut warnings) = find_equilibria_with(&funcs, domain, &num);
    let f_sup = xs.iter().map(|&x| funcs.f.eval(x).abs()).fold(0.0, f64::max);
    for boundary in [lo, hi] {
        let v = funcs.f.eval(boundary);
        let is_root = equilibria.iter().any(|e| {
            let (a, b) = e.span();
            (boundary - a).abs() <= num.tol_root.max(1e-12 * width) || (boundary - b).abs() <= num.tol_root
        });
        if is_root {
            continue;
        }
        let outward = if boundary == lo { v < 0.0 } else { v > 0.0 };
        if outward {
            warnings.push(Warning::NotPositivelyInvariant { boundary, velocity: v });
        }
        if v.abs() < 1e-3 * f_sup {
            warnings.push(Warning::VanishingAtBoundary { boundary, value: v });
        }
    }
    let r_sup = sup_on(|x| funcs.r.eval(x), lo, hi, num.grid_n).1;

    Ok(ProblemSpec {
        f,
        r,
        n0,
        domain,
        support,
        numerics: num,
        alpha_hints: raw.alpha_hint.clone(),
        warnings,
        equilibria,
        r_sup,
        funcs,
        raw: raw.clone(),
    })
}

/// Roots and plateaus of `f` on `domain`, sorted by location.
pub fn find_equilibria(f: &Expr, domain: Interval, num: &NumericConfig) -> (Vec<Equilibrium>, Vec<Warning>) {
    let funcs = Funcs::new(f, &Expr::Const(1.0), &Expr::Const(1.0));
    find_equilibria_with(&funcs, domain, num)
}

fn classify_slope(slope: f64, tol: f64) -> Stability {
    if slope.abs() <= tol || !slope.is_finite() {
        Stability::NonHyperbolic
    } else if slope < 0.0 {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

fn find_equilibria_with(funcs: &Funcs, domain: Interval, num: &NumericConfig) -> (Vec<Equilibrium>, Vec<Warning>) {
    let n = num.grid_n.max(2);
    let (lo, hi) = (domain.lo, domain.hi);
    let h = domain.width() / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| if i == n - 1 { hi } else { lo + h * i as f64 }).collect();
    let fv: Vec<f64> = xs.iter().map(|&x| funcs.f.eval(x)).collect();
    let tol = num.tol_root;
    let zero: Vec<bool> = fv.iter().map(|v| v.abs() <= tol).collect();
    let f = |x: f64| funcs.f.eval(x);
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let slope_at = |x: f64, side: Side| funcs.df.eval_side(x, side);

    // Locate the edge of a zero run between a zero node and a non-zero node.
    let edge = |inside: f64, outside: f64| -> f64 {
        let exact = f(inside) == 0.0;
        bisect_edge(|x| if exact { f(x) == 0.0 } else { f(x).abs() <= tol }, inside, outside)
    };

    let push_root = |out: &mut Vec<Equilibrium>, warnings: &mut Vec<Warning>, x: f64, side: Side| {
        let slope = slope_at(x, side);
        let kind = classify_slope(slope, num.tol_hyperbolic);
        if kind == Stability::NonHyperbolic {
            warnings.push(Warning::PossibleMergedRoots { location: x, slope });
        }
        out.push(Equilibrium { location: x, slope, kind, plateau: None });
    };

    let mut i = 0;
    while i < n {
        if zero[i] {
            let mut j = i;
            while j + 1 < n && zero[j + 1] {
                j += 1;
            }
            if j > i {
                let p_lo = if i > 0 { edge(xs[i], xs[i - 1]) } else { xs[i] };
                let p_hi = if j + 1 < n { edge(xs[j], xs[j + 1]) } else { xs[j] };
                out.push(Equilibrium {
                    location: p_lo,
                    slope: 0.0,
                    kind: Stability::NonHyperbolic,
                    plateau: Some(Interval::new(p_lo, p_hi)),
                });
                if j + 1 < n {
                    push_root(&mut out, &mut warnings, p_hi, Side::Right);
                }
                if i > 0 {
                    // Junction on the left of the plateau: insert before it.
                    let slope = slope_at(p_lo, Side::Left);
                    let kind = classify_slope(slope, num.tol_hyperbolic);
                    let pos = out.len() - if j + 1 < n { 2 } else { 1 };
                    out.insert(pos, Equilibrium { location: p_lo, slope, kind, plateau: None });
                }
            } else {
                let mut x = xs[i];
                if i > 0 && i + 1 < n && fv[i - 1].signum() != fv[i + 1].signum() {
                    x = brent_root(f, xs[i - 1], xs[i + 1]);
                }
                push_root(&mut out, &mut warnings, x, Side::Exact);
            }
            i = j + 1;
            continue;
        }
        if i + 1 < n && !zero[i + 1] && fv[i].signum() != fv[i + 1].signum() {
            let x = brent_root(f, xs[i], xs[i + 1]);
            push_root(&mut out, &mut warnings, x, Side::Exact);
        }
        i += 1;
    }
    out.sort_by(|a, b| a.location.total_cmp(&b.location).then(a.is_plateau().cmp(&b.is_plateau())));
    (out, warnings)
}

/// Vanishing order of `n0` at `root` from one side.
pub fn vanishing_order(
    n0: &Field,
    root: f64,
    side: Orientation,
    width: f64,
    tol_fit: f64,
) -> Result<VanishingOrder, FitError> {
    let s = side.sign();
    let at = n0.eval_side(root, side.side());
    let scale = (1..=64)
        .map(|k| n0.eval(root + s * width * k as f64 / 64.0).abs())
        .fold(at.abs(), f64::max)
        .max(f64::MIN_POSITIVE);
    if at > 1e-12 * scale {
        return Ok(VanishingOrder { alpha: 0.0, coefficient: at, source: VanishingSource::Fitted });
    }
    let hs: Vec<f64> = (6..=16).map(|k| width * 2f64.powi(-k)).collect();
    let vs: Vec<f64> = hs.iter().map(|&h| n0.eval(root + s * h)).collect();
    let floor = f64::MIN_POSITIVE;
    if vs[5..].iter().all(|&v| v <= floor) {
        return Ok(VanishingOrder { alpha: 0.0, coefficient: 0.0, source: VanishingSource::ExactlyZeroNearby });
    }
    if vs.iter().any(|&v| v <= floor) {
        return Err(FitError::Irregular);
    }
    // Least squares on ln v = ln C + alpha ln h + beta h; the linear term absorbs the
    // leading correction to the power law.
    let rows: Vec<[f64; 3]> = hs.iter().map(|&h| [1.0, h.ln(), h / width]).collect();
    let ys: Vec<f64> = vs.iter().map(|v| v.ln()).collect();
    let coef = least_squares3(&rows, &ys);
    let mut alpha = coef[1];
    // Snap to a nearby half-integer: polynomial and square-root vanishing are exact.
    let snapped = (2.0 * alpha).round() / 2.0;
    if (alpha - snapped).abs() < 2e-3 {
        alpha = snapped;
    }
    if alpha < -1e-9 {
        return Err(FitError::Negative(alpha));
    }
    let alpha = alpha.max(0.0);
    // Refit C and beta with alpha fixed.
    let ys2: Vec<f64> = hs.iter().zip(&ys).map(|(h, y)| y - alpha * h.ln()).collect();
    let rows2: Vec<[f64; 3]> = hs.iter().map(|&h| [1.0, h / width, (h / width).powi(2)]).collect();
    let c = least_squares3(&rows2, &ys2);
    let residual = (rows2
        .iter()
        .zip(&ys2)
        .map(|(row, y)| (y - c[0] - c[1] * row[1] - c[2] * row[2]).powi(2))
        .sum::<f64>()
        / hs.len() as f64)
        .sqrt();
    let c0 = c[0];
    if residual > tol_fit {
        return Err(FitError::Residual { residual, tol: tol_fit });
    }
    Ok(VanishingOrder { alpha, coefficient: c0.exp(), source: VanishingSource::Fitted })
}

fn least_squares2(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

fn least_squares3(rows: &[[f64; 3]], ys: &[f64]) -> [f64; 3] {
    let mut a = [[0.0f64; 4]; 3];
    for (row, &y) in rows.iter().zip(ys) {
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += row[i] * row[j];
            }
            a[i][3] += row[i] * y;
        }
    }
    // Gaussian elimination with partial pivoting.
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("rows");
        a.swap(c, p);
        for r in 0..3 {
            if r != c && a[c][c] != 0.0 {
                let m = a[r][c] / a[c][c];
                for k in c..4 {
                    a[r][k] -= m * a[c][k];
                }
            }
        }
    }
    [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]]
}

/// Simple linear regression returning `(slope, intercept, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let (c0, c1) = least_squares2(xs, ys);
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - c0 - c1 * x).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (c1, c0, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn raw(f: &str, r: &str, n0: &str, domain: [f64; 2]) -> RawProblem {
        RawProblem {
            f: f.into(),
            r: r.into(),
            n0: n0.into(),
            domain,
            alpha_hint: vec![],
            numerics: NumericConfig::default(),
        }
    }

    #[test]
    fn logistic_equilibria() {
        let f = parse_expression("x*(1-x)").unwrap();
        let (eq, _) = find_equilibria(&f, Interval::new(-0.5, 1.5), &NumericConfig::default());
        assert_eq!(eq.len(), 2);
        assert!(eq[0].location.abs() < 1e-12 && eq[0].kind == Stability::Unstable);
        assert!((eq[0].slope - 1.0).abs() < 1e-12);
        assert!((eq[1].location - 1.0).abs() < 1e-12 && eq[1].kind == Stability::Stable);
        assert!((eq[1].slope + 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_and_rootless() {
        let num = NumericConfig::default();
        let dom = Interval::new(-1.0, 1.0);
        let (eq, _) = find_equilibria(&parse_expression("-x").unwrap(), dom, &num);
        assert_eq!(eq.len(), 1);
        assert_eq!(eq[0].kind, Stability::Stable);
        assert_eq!(eq[0].location, 0.0);
        let (eq, _) = find_equilibria(&parse_expression("x^2+1").unwrap(), dom, &num);
        assert!(eq.is_empty());
    }

    #[test]
    fn plateau_with_junction() {
        let f = parse_expression("x*(1-x)*ind(0, 10)").unwrap();
        let (eq, _) = find_equilibria(&f, Interval::new(-1.0, 1.5), &NumericConfig::default());
        assert_eq!(eq.len(), 3, "{eq:?}");
        let p = eq[0].plateau.unwrap();
        assert_eq!(p.lo, -1.0);
        assert!(p.hi.abs() < 1e-9);
        assert!(eq[1].location.abs() < 1e-9 && eq[1].kind == Stability::Unstable, "{eq:?}");
        assert!((eq[2].location - 1.0).abs() < 1e-12 && eq[2].kind == Stability::Stable);
    }

    #[test]
    fn vanishing_order_examples() {
        let w = 1.0;
        let v = vanishing_order(&Field::new(parse_expression("6").unwrap()), 0.0, Orientation::Right, w, 0.05).unwrap();
        assert_eq!((v.alpha, v.coefficient), (0.0, 6.0));
        let v = vanishing_order(&Field::new(parse_expression("x^2").unwrap()), 0.0, Orientation::Right, w, 0.05).unwrap();
        assert_eq!(v.alpha, 2.0);
        assert!((v.coefficient - 1.0).abs() < 1e-9);
        let v = vanishing_order(&Field::new(parse_expression("ind(0.1, 1)").unwrap()), 0.0, Orientation::Right, w, 0.05)
            .unwrap();
        assert_eq!(v.source, VanishingSource::ExactlyZeroNearby);
        let v = vanishing_order(&Field::new(parse_expression("6*ind(0,1,0,1)").unwrap()), 0.0, Orientation::Right, w, 0.05)
            .unwrap();
        assert_eq!((v.alpha, v.coefficient), (0.0, 6.0));
        let v = vanishing_order(&Field::new(parse_expression("x*(1-x)").unwrap()), 0.0, Orientation::Right, w, 0.05)
            .unwrap();
        assert_eq!(v.alpha, 1.0);
        assert!((v.coefficient - 1.0).abs() < 1e-5);
        let v = vanishing_order(&Field::new(parse_expression("(1-x)^3").unwrap()), 1.0, Orientation::Left, w, 0.05)
            .unwrap();
        assert_eq!(v.alpha, 3.0);
    }

    #[test]
    fn validate_examples() {
        let spec = validate(&raw("x*(1-x)", "6-0.5*x", "6*ind(0,1)", [0.0, 1.0])).unwrap();
        assert_eq!(spec.support, Interval::new(0.0, 1.0));
        assert!(spec.warnings.is_empty(), "{:?}", spec.warnings);
        let err = validate(&raw("x", "-1", "ind(0,1)", [-1.0, 1.0])).unwrap_err();
        assert!(matches!(&err.violations[0], Violation::NonNegativityViolation { field, .. } if field == "r"));
        let err = validate(&raw("x*(1-x)", "1", "0", [0.0, 1.0])).unwrap_err();
        assert_eq!(err.violations, vec![Violation::EmptySupport]);
        let err = validate(&raw("x", "1", "exp(-x^2)", [-1.0, 1.0])).unwrap_err();
        assert!(matches!(err.violations[0], Violation::SupportExceedsDomain { .. }));
        let err = validate(&raw("x +", "1", "1", [0.0, 1.0])).unwrap_err();
        assert!(matches!(err.violations[0], Violation::Parse { offset: 3, .. }));
    }

    #[test]
    fn support_edges_are_sharp() {
        let spec = validate(&raw("-x", "1", "ind(0.2, 0.7)", [-1.0, 1.0])).unwrap();
        assert!((spec.support.lo - 0.2).abs() < 1e-12);
        assert!((spec.support.hi - 0.7).abs() < 1e-12);
        assert!(spec.warnings.is_empty());
        let spec = validate(&raw("x", "1", "ind(0.2, 0.7)", [-1.0, 1.0])).unwrap();
        assert_eq!(spec.warnings.len(), 2);
    }

    #[test]
    fn power_law_support_edge_snaps_to_the_root() {
        let spec = validate(&raw("x*(1-x)", "6-4*x", "6*x^2*ind(0,1)", [0.0, 1.0])).unwrap();
        assert_eq!(spec.support.lo, 0.0);
    }

    #[test]
    fn validate_is_idempotent() {
        let spec = validate(&raw("x*(1-x)", "6-4*x", "6*ind(0,1)", [0.0, 1.0])).unwrap();
        let again = validate(spec.raw()).unwrap();
        assert_eq!(spec.support, again.support);
        assert_eq!(spec.equilibria, again.equilibria);
        assert_eq!(spec.warnings, again.warnings);
        assert_eq!(spec.raw(), again.raw());
    }

    proptest! {
        #[test]
        fn vanishing_order_recovers_power_laws(ai in 0usize..4, ci in 0usize..3) {
            let alpha = [0.5, 1.0, 2.0, 3.0][ai];
            let c = [0.1, 1.0, 10.0][ci];
            let n0 = Field::new(parse_expression(&format!("{c}*x^{alpha}")).unwrap());
            let v = vanishing_order(&n0, 0.0, Orientation::Right, 1.0, 0.05).unwrap();
            prop_assert!((v.alpha - alpha).abs() <= 0.02 * alpha);
            prop_assert!((v.coefficient - c).abs() <= 0.02 * c);
        }

        #[test]
        fn roots_are_sorted_alternating_and_accurate(
            mut roots in proptest::collection::vec(-0.9f64..0.9, 1..5),
            sign in prop_oneof![Just(1.0f64), Just(-1.0f64)],
        ) {
            roots.sort_by(f64::total_cmp);
            prop_assume!(roots.windows(2).all(|w| w[1] - w[0] > 0.02));
            let text = roots.iter().map(|r| format!("(x - {r:?})")).collect::<Vec<_>>().join("*");
            let f = parse_expression(&format!("{sign}*{text}")).unwrap();
            let (eq, _) = find_equilibria(&f, Interval::new(-1.0, 1.0), &NumericConfig::default());
            prop_assert_eq!(eq.len(), roots.len());
            for (e, r) in eq.iter().zip(&roots) {
                prop_assert!((e.location - r).abs() < 1e-10);
                prop_assert!(f.eval(e.location).unwrap().abs() <= 1e-10);
            }
            for w in eq.windows(2) {
                prop_assert!(w[0].location < w[1].location);
                prop_assert!(w[0].kind != w[1].kind);
            }
        }
    }
}
