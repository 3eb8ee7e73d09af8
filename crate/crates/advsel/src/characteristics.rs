//! Characteristic flows of `x' = f(x)` with Jacobians and path integrals.
//!
//! Trajectories are integrated with the adaptive Runge–Kutta solver away from
//! equilibria. Inside a small zone around each hyperbolic root the state is kept as
//! an offset from the root and advanced with the closed-form flow of the local
//! quadratic model `z' = f'(a) z + f''(a) z^2 / 2`. Offsets of `1e-30` and below stay
//! exact this way, which the long-time integrals downstream depend on.

use crate::expr::Side;
use crate::model::{Field, Interval, ProblemSpec, Stability};
use crate::ode::{self, eval_dense, Control, OdeError, Options};
use crate::quad::{self, QuadError, QuadOptions};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("trajectory leaves the domain at t = {time} (x = {position})")]
    ExitsDomain { time: f64, position: f64 },
    #[error("start point {0} lies outside the domain")]
    StartOutsideDomain(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpatialError {
    #[error("interval crosses the equilibrium at {0}")]
    Straddles(f64),
    #[error("integrand is not integrable at the equilibrium {0}")]
    NonIntegrable(f64),
    #[error(transparent)]
    Quad(#[from] QuadError),
}

/// A function integrated along trajectories, with its derivative for the root zones.
#[derive(Debug, Clone)]
pub struct PathField {
    pub value: Field,
    pub slope: Field,
}

impl PathField {
    pub fn new(value: Field) -> Self {
        let slope = value.derivative();
        PathField { value, slope }
    }
}

/// End state of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub endpoint: f64,
    /// Nearest equilibrium to the endpoint.
    pub anchor: f64,
    /// `endpoint - anchor`, kept exactly inside root zones.
    pub offset: f64,
    /// `ln |offset|`; finite even when `offset` underflows.
    pub log_abs_offset: f64,
    /// `ln` of the derivative of the endpoint with respect to the start.
    pub log_jacobian: f64,
    pub jacobian: f64,
    /// Time integrals of each requested field along the path.
    pub path_integrals: Vec<f64>,
    /// Time at which the path entered the zone of the equilibrium it approaches.
    pub settled_at: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Anchor {
    x: f64,
    lambda: f64,
    /// Half the second derivative.
    mu: f64,
    radius: f64,
    /// 0 for both sides, otherwise the only side on which `f` is non-zero.
    side_only: i8,
}

#[derive(Debug, Clone, Copy)]
enum TargetKind {
    Anchor(usize),
    Stop,
}

#[derive(Debug, Clone, Copy)]
struct Target {
    x: f64,
    kind: TargetKind,
}

#[derive(Debug, Clone, Copy)]
enum Pos {
    Absolute(f64),
    Zone { anchor: usize, z: f64 },
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    Numeric { t0: f64, h: f64, t1: f64, base: f64, x: [f64; 5], lj: [f64; 5], lj_base: f64 },
    Zone { t0: f64, t1: f64, anchor: f64, lam: f64, mu: f64, z0: f64, lj0: f64 },
    Fixed { t0: f64, t1: f64, x: f64, lj0: f64, rate: f64 },
}

impl Segment {
    fn t_end(&self) -> f64 {
        match *self {
            Segment::Numeric { t1, .. } | Segment::Zone { t1, .. } | Segment::Fixed { t1, .. } => t1,
        }
    }
    fn t_start(&self) -> f64 {
        match *self {
            Segment::Numeric { t0, .. } | Segment::Zone { t0, .. } | Segment::Fixed { t0, .. } => t0,
        }
    }
    fn eval(&self, t: f64) -> (f64, f64) {
        match *self {
            Segment::Numeric { t0, h, base, x, lj, lj_base, .. } => {
                let th = if h == 0.0 { 0.0 } else { (t - t0) / h };
                (base + eval_dense(&x, th), lj_base + eval_dense(&lj, th))
            }
            Segment::Zone { t0, anchor, lam, mu, z0, lj0, .. } => {
                let (z, _, iz) = zone_advance(lam, mu, z0, t - t0);
                (anchor + z, lj0 + lam * (t - t0) + 2.0 * mu * iz)
            }
            Segment::Fixed { t0, x, lj0, rate, .. } => (x, lj0 + rate * (t - t0)),
        }
    }
}

/// Time for the quadratic model `z' = lam z + mu z^2` to move from `z0` to `z1`.
fn zone_time(lam: f64, mu: f64, z0: f64, z1: f64) -> f64 {
    if mu == 0.0 {
        (z1 / z0).ln() / lam
    } else {
        ((lam / z0 + mu) / (lam / z1 + mu)).ln() / lam
    }
}

/// Closed-form flow of the quadratic model: `(z(t), ln|z(t)|, int_0^t z)`.
fn zone_advance(lam: f64, mu: f64, z0: f64, t: f64) -> (f64, f64, f64) {
    if t == 0.0 || z0 == 0.0 {
        return (z0, z0.abs().ln(), 0.0);
    }
    // w = 1/z solves w' = -lam w - mu, so w(t) = (w0 + c) e^{-lam t} - c with c = mu/lam.
    let c = mu / lam;
    let cz = c * z0;
    let ln_a = -z0.abs().ln() + cz.ln_1p();
    let e = cz / (1.0 + cz) * (lam * t).exp();
    let ln_w = ln_a - lam * t + (-e).ln_1p();
    let ln_z = -ln_w;
    let z1 = z0.signum() * ln_z.exp();
    let iz = if mu == 0.0 { (z1 - z0) / lam } else { (mu * (z1 - z0) / (lam + mu * z0)).ln_1p() / mu };
    (z1, ln_z, iz)
}

#[derive(Clone, Copy)]
enum Event {
    Entered(Target),
    Exit(f64),
    Rebase(f64),
}

struct Leg {
    elapsed: f64,
    y: Vec<f64>,
    base: f64,
    event: Option<Event>,
}

/// One accepted step of a recorded orbit; values are relative to the start of its leg.
#[derive(Debug, Clone)]
struct OrbitSeg {
    t0: f64,
    h: f64,
    t1: f64,
    base: f64,
    x: [f64; 5],
    lj: [f64; 5],
    ints: Vec<[f64; 5]>,
    lj0: f64,
    ints0: Vec<f64>,
}

impl OrbitSeg {
    fn theta(&self, t: f64) -> f64 {
        if self.h == 0.0 {
            0.0
        } else {
            (t - self.t0) / self.h
        }
    }
    fn position(&self, th: f64) -> f64 {
        self.base + eval_dense(&self.x, th)
    }
    fn log_jacobian(&self, th: f64) -> f64 {
        self.lj0 + eval_dense(&self.lj, th)
    }
    fn integral(&self, i: usize, th: f64) -> f64 {
        self.ints0[i] + eval_dense(&self.ints[i], th)
    }
}

#[derive(Debug, Clone, Copy)]
enum OrbitEnd {
    Zone { anchor: usize, z: f64 },
    Clamp(f64),
    Exit(f64),
    Open,
}

#[derive(Debug)]
struct Orbit {
    origin: f64,
    /// Direction of motion in `x`.
    sigma: f64,
    dir: Direction,
    fields: Vec<crate::expr::Expr>,
    segs: Vec<OrbitSeg>,
    duration: f64,
    end: OrbitEnd,
    /// Position at the end of the record.
    far: f64,
}

impl Orbit {
    /// Segment and step fraction at which the orbit passes `x`.
    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let sg = self.sigma;
        let i = self.segs.partition_point(|s| sg * (s.position(s.theta(s.t1)) - x) < 0.0);
        let seg = self.segs.get(i)?;
        let (mut a, mut b) = (0.0, seg.theta(seg.t1));
        let target = x - seg.base;
        let ahead = |th: f64| sg * (eval_dense(&seg.x, th) - target) >= 0.0;
        if ahead(a) {
            return Some((i, a));
        }
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if ahead(m) {
                b = m;
            } else {
                a = m;
            }
        }
        Some((i, 0.5 * (a + b)))
    }
}

struct OrbitHit {
    x: f64,
    ints: Vec<f64>,
    lj: f64,
    elapsed: f64,
    /// Set when the flow runs past the end of the record.
    end: Option<OrbitEnd>,
}

/// Flow engine bound to one validated problem.
#[derive(Debug, Clone)]
pub struct Characteristics<'a> {
    spec: &'a ProblemSpec,
    anchors: Vec<Anchor>,
    targets: Vec<Target>,
    confine: Option<Interval>,
    opts: Options,
    orbits: Vec<Arc<Orbit>>,
}

impl<'a> Characteristics<'a> {
    pub fn new(spec: &'a ProblemSpec) -> Self {
        let fx = &spec.funcs;
        let points: Vec<f64> = spec
            .equilibria
            .iter()
            .flat_map(|e| {
                let (l, h) = e.span();
                [l, h]
            })
            .collect();
        let plateaus: Vec<Interval> = spec.equilibria.iter().filter_map(|e| e.plateau).collect();
        let mut anchors = Vec::new();
        let mut targets = Vec::new();
        for e in spec.roots() {
            let x = e.location;
            let side_only = if plateaus.iter().any(|p| p.lo == x) {
                -1
            } else if plateaus.iter().any(|p| p.hi == x) {
                1
            } else {
                0
            };
            if e.kind == Stability::NonHyperbolic {
                targets.push(Target { x, kind: TargetKind::Stop });
                continue;
            }
            let side = match side_only {
                -1 => Side::Left,
                1 => Side::Right,
                _ => Side::Exact,
            };
            let lambda = e.slope;
            let mu = 0.5 * fx.d2f.eval_side(x, side);
            let mu = if mu.is_finite() { mu } else { 0.0 };
            let mut radius = 1e-6 * x.abs().max(1.0);
            if mu != 0.0 {
                radius = radius.min(0.1 * (lambda / mu).abs());
            }
            let gap = points.iter().filter(|&&p| p != x).map(|p| (p - x).abs()).fold(f64::INFINITY, f64::min);
            if gap.is_finite() {
                radius = radius.min(1e-3 * gap);
            }
            targets.push(Target { x, kind: TargetKind::Anchor(anchors.len()) });
            anchors.push(Anchor { x, lambda, mu, radius, side_only });
        }
        targets.sort_by(|a, b| a.x.total_cmp(&b.x));
        let mut tol = spec.numerics.ode_tolerances();
        tol.rel = tol.rel.min(1e-11);
        // Positions are offsets from the approached root, so relative accuracy is kept
        // all the way into its zone.
        tol.abs = tol.abs.min(1e-18);
        Characteristics { spec, anchors, targets, confine: None, opts: Options::new(tol), orbits: Vec::new() }
    }

    /// Report trajectories that leave the domain as errors. Drops recorded orbits.
    pub fn confined(mut self) -> Self {
        self.confine = Some(self.spec.domain);
        self.orbits.clear();
        self
    }

    pub fn spec(&self) -> &'a ProblemSpec {
        self.spec
    }

    /// Zone radius around the hyperbolic root at `x`, if there is one.
    pub fn zone_radius(&self, x: f64) -> Option<f64> {
        self.anchors.iter().find(|a| a.x == x).map(|a| a.radius)
    }

    fn locate(&self, x: f64) -> Pos {
        for (i, a) in self.anchors.iter().enumerate() {
            let z = x - a.x;
            let side_ok = a.side_only == 0 || z == 0.0 || (z > 0.0) == (a.side_only > 0);
            if z.abs() < a.radius && side_ok {
                return Pos::Zone { anchor: i, z };
            }
        }
        Pos::Absolute(x)
    }

    /// Flow the point `start` for time `t >= 0`.
    pub fn flow(&self, start: f64, t: f64, dir: Direction, fields: &[&PathField]) -> Result<FlowResult, FlowError> {
        if let Some(d) = self.confine {
            if !(start >= d.lo && start <= d.hi) {
                return Err(FlowError::StartOutsideDomain(start));
            }
        }
        self.run(self.locate(start), t, dir, fields, None)
    }

    /// Flow a point given as an offset from an equilibrium. Offsets outside the root zone
    /// are resolved to absolute positions.
    pub fn flow_from_root(
        &self,
        root: f64,
        offset: f64,
        t: f64,
        dir: Direction,
        fields: &[&PathField],
    ) -> Result<FlowResult, FlowError> {
        let pos = match self.anchors.iter().position(|a| a.x == root) {
            Some(i) if offset.abs() < self.anchors[i].radius => Pos::Zone { anchor: i, z: offset },
            _ => self.locate(root + offset),
        };
        self.run(pos, t, dir, fields, None)
    }

    /// Full trajectory with continuous output.
    pub fn trajectory(&self, start: f64, t: f64, dir: Direction) -> Result<FlowCache, FlowError> {
        let mut segs = Vec::new();
        let end = self.run(self.locate(start), t, dir, &[], Some(&mut segs))?;
        Ok(FlowCache { start, direction: dir, t_end: t, segments: segs, end })
    }

    fn nearest_equilibrium(&self, x: f64) -> f64 {
        self.spec
            .equilibria
            .iter()
            .flat_map(|e| {
                let (l, h) = e.span();
                [l, h]
            })
            .min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
            .unwrap_or(x)
    }

    fn target_ahead(&self, x: f64, sigma: f64) -> Option<Target> {
        if sigma > 0.0 {
            self.targets.iter().copied().find(|t| t.x > x)
        } else {
            self.targets.iter().rev().copied().find(|t| t.x < x)
        }
    }

    fn run(
        &self,
        start: Pos,
        t_total: f64,
        dir: Direction,
        fields: &[&PathField],
        mut rec: Option<&mut Vec<Segment>>,
    ) -> Result<FlowResult, FlowError> {
        let s = dir.sign();
        let fx = &self.spec.funcs;
        let k = fields.len();
        let mut ints = vec![0.0; k];
        let mut lj = 0.0;
        let mut tau = 0.0;
        let mut settled = None;
        let mut pos = start;

        let finish_abs = |x: f64, ints: Vec<f64>, lj: f64, settled| {
            let anchor = self.nearest_equilibrium(x);
            let offset = x - anchor;
            FlowResult {
                endpoint: x,
                anchor,
                offset,
                log_abs_offset: offset.abs().ln(),
                log_jacobian: lj,
                jacobian: lj.exp(),
                path_integrals: ints,
                settled_at: settled,
            }
        };

        loop {
            let rem = (t_total - tau).max(0.0);
            match pos {
                Pos::Zone { anchor, z } => {
                    let an = self.anchors[anchor];
                    let side = if z < 0.0 { Side::Left } else { Side::Right };
                    let side = if an.side_only == 0 { Side::Exact } else { side };
                    let (lam, mu) = (s * an.lambda, s * an.mu);
                    let escaping = lam > 0.0 && z != 0.0;
                    let dt = if escaping { zone_time(lam, mu, z, z.signum() * an.radius).min(rem) } else { rem };
                    let (z1, ln_z1, iz) = zone_advance(lam, mu, z, dt);
                    for (acc, pf) in ints.iter_mut().zip(fields) {
                        *acc += pf.value.eval_side(an.x, side) * dt + pf.slope.eval_side(an.x, side) * iz;
                    }
                    if let Some(r) = rec.as_deref_mut() {
                        r.push(Segment::Zone { t0: tau, t1: tau + dt, anchor: an.x, lam, mu, z0: z, lj0: lj });
                    }
                    lj += lam * dt + 2.0 * mu * iz;
                    if !escaping && settled.is_none() && z != 0.0 {
                        settled = Some(tau);
                    }
                    tau += dt;
                    if !escaping || dt >= rem {
                        return Ok(FlowResult {
                            endpoint: an.x + z1,
                            anchor: an.x,
                            offset: z1,
                            log_abs_offset: ln_z1,
                            log_jacobian: lj,
                            jacobian: lj.exp(),
                            path_integrals: ints,
                            settled_at: settled,
                        });
                    }
                    pos = Pos::Absolute(an.x + z.signum() * an.radius);
                }
                Pos::Absolute(x) => {
                    let v0 = s * fx.f.eval(x);
                    let target = if v0 != 0.0 { self.target_ahead(x, v0.signum()) } else { None };
                    let sigma = v0.signum();
                    let already = target.is_some_and(|tg| sigma * (tg.x - x) <= self.threshold(&tg));
                    if v0 == 0.0 || rem == 0.0 || already {
                        // Rest point, or a clamp onto a non-hyperbolic root.
                        let xr = if already { target.map_or(x, |t| t.x) } else { x };
                        for (acc, pf) in ints.iter_mut().zip(fields) {
                            *acc += pf.value.eval(xr) * rem;
                        }
                        let rate = s * fx.df.eval(xr);
                        let rate = if rate.is_finite() { rate } else { 0.0 };
                        if let Some(r) = rec.as_deref_mut() {
                            r.push(Segment::Fixed { t0: tau, t1: tau + rem, x: xr, lj0: lj, rate });
                        }
                        lj += rate * rem;
                        if already && settled.is_none() {
                            settled = Some(tau);
                        }
                        return Ok(finish_abs(xr, ints, lj, settled));
                    }

                    if rec.is_none() {
                        if let Some(hit) = self.orbit_hit(x, dir, fields, rem) {
                            for (acc, d) in ints.iter_mut().zip(&hit.ints) {
                                *acc += d;
                            }
                            lj += hit.lj;
                            tau += hit.elapsed;
                            match hit.end {
                                None => return Ok(finish_abs(hit.x, ints, lj, settled)),
                                Some(OrbitEnd::Zone { anchor, z }) => pos = Pos::Zone { anchor, z },
                                Some(OrbitEnd::Clamp(xc)) => pos = Pos::Absolute(xc),
                                Some(OrbitEnd::Exit(p)) => return Err(FlowError::ExitsDomain { time: tau, position: p }),
                                Some(OrbitEnd::Open) => unreachable!("open orbits are never passed through"),
                            }
                            continue;
                        }
                    }

                    let tau0 = tau;
                    let lj_base = lj;
                    let leg = self.numeric_leg(x, rem, s, target, fields, |st, t_stop, base| {
                        if let Some(r) = rec.as_deref_mut() {
                            r.push(Segment::Numeric {
                                t0: tau0 + st.t0,
                                h: st.h(),
                                t1: tau0 + t_stop,
                                base,
                                x: st.dense_coefficients(0),
                                lj: st.dense_coefficients(1 + k),
                                lj_base,
                            });
                        }
                    })?;
                    for i in 0..k {
                        ints[i] += leg.y[1 + i];
                    }
                    lj += leg.y[1 + k];
                    tau += leg.elapsed;
                    match leg.event {
                        None => return Ok(finish_abs(leg.base + leg.y[0], ints, lj, settled)),
                        Some(Event::Exit(p)) => return Err(FlowError::ExitsDomain { time: tau, position: p }),
                        Some(Event::Rebase(p)) => pos = Pos::Absolute(p),
                        Some(Event::Entered(tg)) => match tg.kind {
                            TargetKind::Anchor(i) => {
                                pos = Pos::Zone { anchor: i, z: -sigma * self.anchors[i].radius };
                            }
                            TargetKind::Stop => pos = Pos::Absolute(tg.x),
                        },
                    }
                }
            }
        }
    }

    fn threshold(&self, tg: &Target) -> f64 {
        match tg.kind {
            TargetKind::Anchor(i) => self.anchors[i].radius,
            TargetKind::Stop => self.spec.numerics.tol_root,
        }
    }

    /// One adaptive integration from `x` for at most `rem`, ending at the first event.
    /// The state is `[x - base, integrals.., ln jacobian]`; `on_step(step, t_stop, base)`
    /// sees every accepted step.
    fn numeric_leg<S>(
        &self,
        x: f64,
        rem: f64,
        s: f64,
        target: Option<Target>,
        fields: &[&PathField],
        mut on_step: S,
    ) -> Result<Leg, FlowError>
    where
        S: FnMut(&ode::Step, f64, f64),
    {
        let fx = &self.spec.funcs;
        let k = fields.len();
        let sigma = (s * fx.f.eval(x)).signum();
        let mut event: Option<Event> = None;
        let mut y0 = vec![0.0; k + 2];
        // Integrate the offset from the nearer of the roots behind and ahead, so that the
        // distance to either keeps full relative accuracy. Switch frames halfway between.
        let behind = self.target_ahead(x, -sigma);
        let (base, switch) = match (behind, target) {
            (Some(b), Some(a)) if (x - b.x).abs() < (x - a.x).abs() => (b.x, Some(0.5 * (a.x + b.x))),
            (Some(b), None) => (b.x, None),
            (_, Some(a)) => (a.x, None),
            (None, None) => (0.0, None),
        };
        y0[0] = x - base;
        let confine = self.confine;
        let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let xv = base + y[0];
            dy[0] = s * fx.f.eval(xv);
            for (i, pf) in fields.iter().enumerate() {
                dy[1 + i] = pf.value.eval(xv);
            }
            dy[1 + k] = s * fx.df.eval(xv);
        };
        let observer = |st: &ode::Step| -> Control {
            let x1 = base + st.y1[0];
            let mut stop = None;
            if let Some(tg) = target {
                let thr = self.threshold(&tg);
                let reached = |xv: f64| sigma * (tg.x - xv) <= thr;
                if reached(x1) {
                    let te = bisect_time(st, |v| reached(base + v));
                    stop = Some((te, Event::Entered(tg)));
                }
            }
            if let (None, Some(m)) = (stop, switch) {
                let past = |xv: f64| sigma * (xv - m) >= 0.0;
                if past(x1) {
                    let te = bisect_time(st, |v| past(base + v));
                    stop = Some((te, Event::Rebase(base + st.interpolate_component(te, 0))));
                }
            }
            if stop.is_none() {
                if let Some(d) = confine {
                    let out = |xv: f64| xv < d.lo || xv > d.hi;
                    if out(x1) {
                        let te = bisect_time(st, |v| out(base + v));
                        stop = Some((te, Event::Exit(base + st.interpolate_component(te, 0))));
                    }
                }
            }
            on_step(st, stop.map_or(st.t1, |s| s.0), base);
            match stop {
                Some((te, ev)) => {
                    event = Some(ev);
                    Control::StopAt(te)
                }
                None => Control::Continue,
            }
        };
        let sol = ode::integrate(rhs, 0.0, &y0, rem, self.opts, observer)?;
        Ok(Leg { elapsed: sol.t, y: sol.y, base, event })
    }

    /// Record the trajectory from `origin` until it enters a root zone, leaves the domain or
    /// `horizon` passes. Later flows with the same direction and fields that start on the
    /// recorded stretch are read off it instead of being integrated again. Returns whether
    /// an orbit was stored.
    pub fn register_orbit(
        &mut self,
        origin: f64,
        dir: Direction,
        fields: &[&PathField],
        horizon: f64,
    ) -> Result<bool, FlowError> {
        let s = dir.sign();
        let fx = &self.spec.funcs;
        let k = fields.len();
        let v0 = s * fx.f.eval(origin);
        if v0 == 0.0 || !v0.is_finite() || !(horizon > 0.0) {
            return Ok(false);
        }
        let sigma = v0.signum();
        if let Pos::Zone { .. } = self.locate(origin) {
            if let Some(tg) = self.target_ahead(origin, sigma) {
                if sigma * (tg.x - origin) <= self.threshold(&tg) {
                    return Ok(false);
                }
            }
        }
        let mut segs: Vec<OrbitSeg> = Vec::new();
        let (mut x, mut tau, mut lj) = (origin, 0.0, 0.0);
        let mut ints = vec![0.0; k];
        let end = loop {
            let rem = horizon - tau;
            if rem <= 0.0 {
                break OrbitEnd::Open;
            }
            let target = self.target_ahead(x, sigma);
            if let Some(tg) = target {
                if sigma * (tg.x - x) <= self.threshold(&tg) {
                    break match tg.kind {
                        TargetKind::Anchor(i) => OrbitEnd::Zone { anchor: i, z: -sigma * self.anchors[i].radius },
                        TargetKind::Stop => OrbitEnd::Clamp(tg.x),
                    };
                }
            }
            let (tau0, lj0, ints0) = (tau, lj, ints.clone());
            let leg = self.numeric_leg(x, rem, s, target, fields, |st, t_stop, base| {
                segs.push(OrbitSeg {
                    t0: tau0 + st.t0,
                    h: st.h(),
                    t1: tau0 + t_stop,
                    base,
                    x: st.dense_coefficients(0),
                    lj: st.dense_coefficients(1 + k),
                    ints: (0..k).map(|i| st.dense_coefficients(1 + i)).collect(),
                    lj0,
                    ints0: ints0.clone(),
                })
            })?;
            for i in 0..k {
                ints[i] += leg.y[1 + i];
            }
            lj += leg.y[1 + k];
            tau += leg.elapsed;
            match leg.event {
                None => break OrbitEnd::Open,
                Some(Event::Exit(p)) => break OrbitEnd::Exit(p),
                Some(Event::Rebase(p)) => x = p,
                Some(Event::Entered(tg)) => {
                    break match tg.kind {
                        TargetKind::Anchor(i) => OrbitEnd::Zone { anchor: i, z: -sigma * self.anchors[i].radius },
                        TargetKind::Stop => OrbitEnd::Clamp(tg.x),
                    }
                }
            }
        };
        let Some(last) = segs.last() else {
            return Ok(false);
        };
        let far = last.position(last.theta(last.t1));
        self.orbits.push(Arc::new(Orbit {
            origin,
            sigma,
            dir,
            fields: fields.iter().map(|f| f.value.expr.clone()).collect(),
            segs,
            duration: tau,
            end,
            far,
        }));
        Ok(true)
    }

    fn orbit_hit(&self, x: f64, dir: Direction, fields: &[&PathField], rem: f64) -> Option<OrbitHit> {
        let orbit = self.orbits.iter().find(|o| {
            o.dir == dir
                && o.fields.len() == fields.len()
                && o.fields.iter().zip(fields).all(|(e, f)| *e == f.value.expr)
                && o.sigma * (x - o.origin) >= 0.0
                && o.sigma * (o.far - x) >= 0.0
        })?;
        let (i0, th0) = orbit.locate(x)?;
        let seg0 = &orbit.segs[i0];
        let tau0 = seg0.t0 + th0 * seg0.h;
        let tau1 = tau0 + rem;
        let k = fields.len();
        if tau1 <= orbit.duration {
            let i1 = orbit.segs.partition_point(|sg| sg.t1 < tau1).min(orbit.segs.len() - 1);
            let seg1 = &orbit.segs[i1];
            let th1 = seg1.theta(tau1);
            return Some(OrbitHit {
                x: seg1.position(th1),
                ints: (0..k).map(|i| seg1.integral(i, th1) - seg0.integral(i, th0)).collect(),
                lj: seg1.log_jacobian(th1) - seg0.log_jacobian(th0),
                elapsed: rem,
                end: None,
            });
        }
        if let OrbitEnd::Open = orbit.end {
            return None;
        }
        let last = orbit.segs.last()?;
        let th1 = last.theta(last.t1);
        Some(OrbitHit {
            x: orbit.far,
            ints: (0..k).map(|i| last.integral(i, th1) - seg0.integral(i, th0)).collect(),
            lj: last.log_jacobian(th1) - seg0.log_jacobian(th0),
            elapsed: orbit.duration - tau0,
            end: Some(orbit.end),
        })
    }

    /// `int_from^to numer(s) / f(s) ds` between consecutive equilibria. Endpoints may be
    /// hyperbolic roots when `numer` vanishes there.
    pub fn spatial_integral(&self, from: f64, to: f64, numer: &PathField) -> Result<f64, SpatialError> {
        if from == to {
            return Ok(0.0);
        }
        let (lo, hi, sign) = if from < to { (from, to, 1.0) } else { (to, from, -1.0) };
        let mut points: Vec<f64> = self
            .spec
            .equilibria
            .iter()
            .flat_map(|e| {
                let (l, h) = e.span();
                [l, h]
            })
            .collect();
        points.sort_by(f64::total_cmp);
        if let Some(&p) = points.iter().find(|&&p| p > lo && p < hi) {
            return Err(SpatialError::Straddles(p));
        }
        let left_root = points.iter().rev().copied().find(|&p| p <= lo);
        let right_root = points.iter().copied().find(|&p| p >= hi);
        let mid = 0.5 * (lo + hi);
        let rel = self.spec.numerics.quad_rel_tol.max(1e-12);
        let plain = |a: f64, b: f64| -> Result<f64, SpatialError> {
            let fx = &self.spec.funcs;
            let mut br = fx.f.expr.breakpoints();
            br.extend(numer.value.expr.breakpoints());
            Ok(quad::integrate(|s| numer.value.eval(s) / fx.f.eval(s), a, b, &br, rel)?)
        };
        let mut total = 0.0;
        match left_root {
            Some(rl) if lo - rl <= mid - lo => total += self.near_root(rl, 1.0, lo - rl, mid - rl, numer)?,
            _ => total += plain(lo, mid)?,
        }
        match right_root {
            Some(rr) if rr - hi <= hi - mid => total += self.near_root(rr, -1.0, rr - hi, rr - mid, numer)?,
            _ => total += plain(mid, hi)?,
        }
        Ok(sign * total)
    }

    /// `int` of `numer/f` over `{root + side * z : z in [z_lo, z_hi]}` in the variable `ln z`,
    /// oriented in increasing `x`.
    fn near_root(&self, root: f64, side: f64, z_lo: f64, z_hi: f64, numer: &PathField) -> Result<f64, SpatialError> {
        let fx = &self.spec.funcs;
        let Some(an) = self.anchors.iter().find(|a| a.x == root).copied() else {
            if z_lo == 0.0 {
                return Err(SpatialError::NonIntegrable(root));
            }
            let (a, b) = if side > 0.0 { (root + z_lo, root + z_hi) } else { (root - z_hi, root - z_lo) };
            let rel = self.spec.numerics.quad_rel_tol.max(1e-12);
            return Ok(quad::integrate(|s| numer.value.eval(s) / fx.f.eval(s), a, b, &[], rel)?);
        };
        let sd = if side > 0.0 { Side::Right } else { Side::Left };
        let mut n_at = numer.value.eval_side(root, sd);
        let n_slope = numer.slope.eval_side(root, sd);
        let scale = numer.value.eval(root + side * z_hi).abs().max(n_slope.abs() * z_hi).max(1e-300);
        if n_at.abs() <= 1e-12 * scale {
            n_at = 0.0;
        } else if z_lo == 0.0 {
            return Err(SpatialError::NonIntegrable(root));
        }
        let integrand = |u: f64| -> (f64, [f64; 1]) {
            let z = u.exp();
            let d = side * z;
            let v = if z < an.radius {
                (n_at + n_slope * d) / (an.lambda * d + an.mu * d * d)
            } else {
                let s = root + d;
                numer.value.eval(s) / fx.f.eval(s)
            };
            (0.0, [v * z])
        };
        let opts = QuadOptions { rel_tol: self.spec.numerics.quad_rel_tol.max(1e-12), ..Default::default() };
        let r = if z_lo == 0.0 {
            let u_floor = an.radius.ln() - 5.0;
            quad::integrate_log_tail(integrand, z_hi.ln(), u_floor, 4.0, opts)?
        } else {
            let mut br = Vec::new();
            if an.radius > z_lo && an.radius < z_hi {
                br.push(an.radius.ln());
            }
            quad::integrate_log(integrand, z_lo.ln(), z_hi.ln(), &br, opts)?
        };
        Ok(r.value(0))
    }
}

/// First time inside the step at which `reached` holds; it must hold at `t1` but not at `t0`.
fn bisect_time<P: Fn(f64) -> bool>(st: &ode::Step, reached: P) -> f64 {
    let (mut a, mut b) = (st.t0, st.t1);
    for _ in 0..80 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if reached(st.interpolate_component(m, 0)) {
            b = m;
        } else {
            a = m;
        }
    }
    b
}

/// Continuous output of one trajectory.
#[derive(Debug, Clone)]
pub struct FlowCache {
    pub start: f64,
    pub direction: Direction,
    pub t_end: f64,
    segments: Vec<Segment>,
    end: FlowResult,
}

impl FlowCache {
    /// Position and Jacobian at time `t` in `[0, t_end]`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let t = t.clamp(0.0, self.t_end);
        let i = self.segments.partition_point(|s| s.t_end() < t);
        match self.segments.get(i).or(self.segments.last()) {
            Some(seg) => {
                let (x, lj) = seg.eval(t);
                (x, lj.exp())
            }
            None => (self.start, 1.0),
        }
    }

    /// Segment boundaries, starting at 0 and ending at `t_end`.
    pub fn knots(&self) -> Vec<f64> {
        let mut k: Vec<f64> = self.segments.iter().map(|s| s.t_start()).collect();
        k.push(self.t_end);
        k.dedup();
        k
    }

    pub fn end(&self) -> &FlowResult {
        &self.end
    }
}

/// Forward flow `X(t, y)`, reporting exits from the domain.
pub fn flow_forward(spec: &ProblemSpec, y: f64, t: f64) -> Result<FlowResult, FlowError> {
    Characteristics::new(spec).confined().flow(y, t, Direction::Forward, &[])
}

/// Backward flow `Y(t, x)`, reporting exits from the domain.
pub fn flow_backward(spec: &ProblemSpec, x: f64, t: f64) -> Result<FlowResult, FlowError> {
    Characteristics::new(spec).confined().flow(x, t, Direction::Backward, &[])
}

/// `|X(t, X(s, x)) - X(t + s, x)|`.
pub fn check_flow_identity(spec: &ProblemSpec, x: f64, t: f64, s: f64) -> Result<f64, FlowError> {
    let ch = Characteristics::new(spec);
    let a = ch.flow(x, s, Direction::Forward, &[])?;
    let b = ch.flow_from_root(a.anchor, a.offset, t, Direction::Forward, &[])?;
    let c = ch.flow(x, t + s, Direction::Forward, &[])?;
    Ok((b.endpoint - c.endpoint).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate, RawProblem};
    use approx::assert_relative_eq;

    fn problem(f: &str, r: &str, n0: &str, lo: f64, hi: f64) -> ProblemSpec {
        let raw = RawProblem {
            f: f.into(),
            r: r.into(),
            n0: n0.into(),
            domain: [lo, hi],
            alpha_hint: vec![],
            numerics: Default::default(),
        };
        validate(&raw).expect("valid problem")
    }

    fn logistic_x(t: f64, y: f64) -> f64 {
        y * t.exp() / (1.0 - y + y * t.exp())
    }

    #[test]
    fn logistic_flow_matches_closed_form() {
        let spec = problem("x*(1-x)", "6-0.5*x", "x*(1-x)", 0.0, 1.0);
        let ch = Characteristics::new(&spec);
        let r = PathField::new(spec.funcs.r.clone());
        let mut worst = 0.0f64;
        for i in 1..=20 {
            for j in 1..=20 {
                let y = i as f64 / 21.0;
                let t = 2.0 * j as f64;
                let fw = ch.flow(y, t, Direction::Forward, &[&r]).unwrap();
                worst = worst.max((fw.endpoint - logistic_x(t, y)).abs());
                let integral = 6.0 * t - 0.5 * (1.0 - y + y * t.exp()).ln();
                assert!((fw.path_integrals[0] - integral).abs() < 1e-8 * (1.0 + integral.abs()));
                let bw = ch.flow(y, t, Direction::Backward, &[]).unwrap();
                worst = worst.max((bw.endpoint - logistic_x(-t, y)).abs());
                // The backward offset from 0 is resolved far below double spacing of 1.
                let exact_ln = if bw.anchor == 0.0 {
                    (y / (y + (1.0 - y) * t.exp())).ln()
                } else {
                    ((1.0 - y) / (1.0 - y + y * (-t).exp())).ln()
                };
                assert!((bw.log_abs_offset - exact_ln).abs() < 1e-8, "t={t} y={y}");
            }
        }
        assert!(worst < 1e-8, "worst {worst}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let spec = problem("x*(1-x)", "1", "x*(1-x)", 0.0, 1.0);
        let ch = Characteristics::new(&spec);
        for &(y, t) in &[(0.3, 1.0), (0.01, 5.0), (0.9, 3.0), (0.5, 12.0)] {
            let h = 1e-6;
            let jac = ch.flow(y, t, Direction::Forward, &[]).unwrap().jacobian;
            // Differences of offsets from the shared anchor avoid cancellation near 1.
            let p = ch.flow(y + h, t, Direction::Forward, &[]).unwrap().offset;
            let m = ch.flow(y - h, t, Direction::Forward, &[]).unwrap().offset;
            let fd = (p - m) / (2.0 * h);
            assert_relative_eq!(jac, fd, max_relative = 1e-6);
            let exact = t.exp() / (1.0 - y + y * t.exp()).powi(2);
            assert_relative_eq!(jac, exact, max_relative = 1e-8);
        }
    }

    #[test]
    fn flow_identity_holds() {
        let spec = problem("sin(3*x)", "1", "ind(-1,1)", -2.0, 2.0);
        for &x in &[-1.9, -0.7, 0.2, 1.3] {
            let res = check_flow_identity(&spec, x, 1.7, 2.4).unwrap();
            assert!(res < 1e-8, "x={x} residual {res}");
        }
    }

    #[test]
    fn exits_are_reported() {
        let spec = problem("1", "1", "x*(1-x)", 0.0, 1.0);
        match flow_forward(&spec, 0.5, 2.0) {
            Err(FlowError::ExitsDomain { time, .. }) => assert!((time - 0.5).abs() < 1e-8),
            other => panic!("{other:?}"),
        }
        let fw = flow_forward(&spec, 0.25, 0.5).unwrap();
        assert_relative_eq!(fw.endpoint, 0.75, max_relative = 1e-12);
    }

    #[test]
    fn trajectory_cache_interpolates() {
        let spec = problem("x*(1-x)", "1", "x*(1-x)", 0.0, 1.0);
        let ch = Characteristics::new(&spec);
        let cache = ch.trajectory(0.2, 30.0, Direction::Forward).unwrap();
        for i in 0..=300 {
            let t = 0.1 * i as f64;
            let (x, jac) = cache.eval(t);
            assert!((x - logistic_x(t, 0.2)).abs() < 1e-8, "t={t}");
            let exact = t.exp() / (0.8 + 0.2 * t.exp()).powi(2);
            assert!((jac - exact).abs() < 1e-7 * (1.0 + exact));
        }
        assert_eq!(cache.knots()[0], 0.0);
    }

    #[test]
    fn spatial_integral_from_root() {
        // r~ - r~(0) = -2x for r = 6 - 4x, giving 2 ln(1 - x).
        let spec = problem("x*(1-x)", "6-4*x", "x*(1-x)", 0.0, 1.0);
        let ch = Characteristics::new(&spec);
        let numer = PathField::new(Field::new(crate::expr::parse_expression("-2*x").unwrap()));
        for &x in &[1e-9, 0.1, 0.5, 0.9, 0.999] {
            let v = ch.spatial_integral(0.0, x, &numer).unwrap();
            assert!((v - 2.0 * (1.0 - x).ln()).abs() < 1e-9, "x={x}: {v}");
        }
        let back = ch.spatial_integral(0.7, 0.2, &numer).unwrap();
        assert!((back - 2.0 * (0.8f64.ln() - 0.3f64.ln())).abs() < 1e-9);
        let one = PathField::new(Field::new(crate::expr::Expr::Const(1.0)));
        assert!(matches!(ch.spatial_integral(0.0, 0.5, &one), Err(SpatialError::NonIntegrable(_))));
        let wide = problem("x*(1-x)", "1", "ind(0,1)", -1.0, 2.0);
        let ch = Characteristics::new(&wide);
        assert!(matches!(ch.spatial_integral(-0.5, 0.5, &one), Err(SpatialError::Straddles(_))));
    }

    #[test]
    fn recorded_orbit_reproduces_direct_flows() {
        let spec = problem("x*(1-x)", "6-4*x", "x*(1-x)", 0.0, 1.0);
        let r = PathField::new(spec.funcs.r.clone());
        let plain = Characteristics::new(&spec);
        let mut cached = Characteristics::new(&spec);
        let edge = cached.zone_radius(0.0).unwrap();
        assert!(cached.register_orbit(edge, Direction::Forward, &[&r], 200.0).unwrap());
        assert!(cached.register_orbit(1.0 - edge, Direction::Backward, &[&r], 200.0).unwrap());
        for &y in &[1e-12, 3e-6, 0.01, 0.4, 0.9, 0.999] {
            for &t in &[0.05, 1.0, 7.0, 40.0] {
                for dir in [Direction::Forward, Direction::Backward] {
                    let a = plain.flow(y, t, dir, &[&r]).unwrap();
                    let b = cached.flow(y, t, dir, &[&r]).unwrap();
                    assert!((a.anchor - b.anchor).abs() == 0.0);
                    assert!((a.log_abs_offset - b.log_abs_offset).abs() < 1e-8, "{y} {t} {dir:?}");
                    assert!((a.path_integrals[0] - b.path_integrals[0]).abs() < 1e-8 * (1.0 + a.path_integrals[0].abs()));
                    assert!((a.log_jacobian - b.log_jacobian).abs() < 1e-8 * (1.0 + a.log_jacobian.abs()));
                }
            }
        }
    }
}
