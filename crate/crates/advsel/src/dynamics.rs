//! Time integration of the full problem by two independent routes.
//!
//! The particle route moves Lagrangian nodes along `x' = f(x)` and evolves their masses
//! with `w' = (r(x) - rho) w`. Nodes are laid out on a midpoint grid in a logistic
//! coordinate over each smooth piece of the support, so they reach exponentially close to
//! an unstable source root: at time `T` the mass near such a root comes from initial
//! positions at distance about `e^{-f'(a) T}`. Positions near a root are stored as the
//! logarithm of the offset from it and masses as logarithms.
//!
//! The compartment route integrates `rho_i' = (R_i(t) - rho) rho_i` with `R_i` tabulated
//! on an adaptively refined time grid.

use serde::Serialize;
use thiserror::Error;

use crate::carrying::{build_compartments, Carrying, CarryingError, CarryingSample, Compartment};
use crate::characteristics::{Direction, FlowError, PathField};
use crate::expr::Side;
use crate::model::{Equilibrium, ProblemSpec};
use crate::ode::{self, Control, OdeError, Options};
use crate::par;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("mass bound violated at t = {time}: rho = {rho} exceeds {bound}")]
    MassBound { time: f64, rho: f64, bound: f64 },
    #[error("compartment {index}: {source}")]
    Carrying { index: usize, source: CarryingError },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("time {0} lies outside the recorded trajectory")]
    OutsideTrajectory(f64),
}

/// Total mass over time, with per-compartment masses and the running integral of `rho`.
#[derive(Debug, Clone, Serialize)]
pub struct RhoTrajectory {
    pub times: Vec<f64>,
    pub rho: Vec<f64>,
    /// `d rho / dt` at each recorded time.
    pub rate: Vec<f64>,
    /// `parts[k][i]` is the mass of compartment `i` at `times[k]`.
    pub parts: Vec<Vec<f64>>,
    /// `int_0^t rho`.
    pub cumulative: Vec<f64>,
}

fn hermite(t0: f64, t1: f64, y0: f64, y1: f64, d0: f64, d1: f64, t: f64) -> (f64, f64) {
    let h = t1 - t0;
    if h <= 0.0 {
        return (y0, d0);
    }
    let s = (t - t0) / h;
    let (s2, s3) = (s * s, s * s * s);
    let value = (2.0 * s3 - 3.0 * s2 + 1.0) * y0
        + (s3 - 2.0 * s2 + s) * h * d0
        + (-2.0 * s3 + 3.0 * s2) * y1
        + (s3 - s2) * h * d1;
    let slope = ((6.0 * s2 - 6.0 * s) * y0 + (-6.0 * s2 + 6.0 * s) * y1) / h
        + (3.0 * s2 - 4.0 * s + 1.0) * d0
        + (3.0 * s2 - 2.0 * s) * d1;
    (value, slope)
}

impl RhoTrajectory {
    fn new(compartments: usize) -> Self {
        let _ = compartments;
        RhoTrajectory { times: vec![], rho: vec![], rate: vec![], parts: vec![], cumulative: vec![] }
    }

    fn push(&mut self, t: f64, rho: f64, rate: f64, parts: Vec<f64>, cumulative: f64) {
        self.times.push(t);
        self.rho.push(rho);
        self.rate.push(rate);
        self.parts.push(parts);
        self.cumulative.push(cumulative);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn compartments(&self) -> usize {
        self.parts.first().map_or(0, Vec::len)
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("empty trajectory")
    }

    pub fn final_rho(&self) -> f64 {
        *self.rho.last().expect("empty trajectory")
    }

    fn bracket(&self, t: f64) -> Result<usize, DynamicsError> {
        let n = self.times.len();
        if n == 0 || !(t >= self.times[0] - 1e-12) || !(t <= self.times[n - 1] + 1e-12) {
            return Err(DynamicsError::OutsideTrajectory(t));
        }
        Ok(self.times.partition_point(|&s| s <= t).clamp(1, n.max(2) - 1) - 1)
    }

    /// `rho(t)` by cubic Hermite interpolation.
    pub fn rho_at(&self, t: f64) -> Result<f64, DynamicsError> {
        if self.times.len() == 1 {
            self.bracket(t)?;
            return Ok(self.rho[0]);
        }
        let k = self.bracket(t)?;
        let (a, b) = (k, k + 1);
        let t = t.clamp(self.times[a], self.times[b]);
        Ok(hermite(self.times[a], self.times[b], self.rho[a], self.rho[b], self.rate[a], self.rate[b], t).0)
    }

    /// `int_0^t rho` by cubic Hermite interpolation of the running integral.
    pub fn cumulative_at(&self, t: f64) -> Result<f64, DynamicsError> {
        if self.times.len() == 1 {
            self.bracket(t)?;
            return Ok(self.cumulative[0]);
        }
        let k = self.bracket(t)?;
        let (a, b) = (k, k + 1);
        let t = t.clamp(self.times[a], self.times[b]);
        let c = &self.cumulative;
        Ok(hermite(self.times[a], self.times[b], c[a], c[b], self.rho[a], self.rho[b], t).0)
    }

    /// Largest relative change of `rho` over the final `fraction` of the run.
    pub fn tail_drift(&self, fraction: f64) -> f64 {
        let t_end = self.end();
        let t_from = t_end - fraction * (t_end - self.start());
        let end = self.final_rho();
        self.times
            .iter()
            .zip(&self.rho)
            .filter(|(&t, _)| t >= t_from)
            .map(|(_, &r)| (r - end).abs() / end.abs().max(1e-300))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    /// State is `ln |x - anchor|`; `sign` is the side of the anchor.
    Offset { anchor: f64, sign: f64, lam: f64, mu: f64, zone: f64 },
    /// State is `x`.
    Absolute,
    /// State is `x` and `f` vanishes there.
    Fixed,
}

impl Coord {
    fn position(&self, v: f64) -> f64 {
        match *self {
            Coord::Offset { anchor, sign, .. } => anchor + sign * v.exp(),
            _ => v,
        }
    }

    fn velocity(&self, spec: &ProblemSpec, v: f64) -> f64 {
        match *self {
            Coord::Offset { anchor, sign, lam, mu, zone } => {
                let z = sign * v.exp();
                if z.abs() < zone {
                    lam + mu * z
                } else {
                    spec.funcs.f.eval(anchor + z) / z
                }
            }
            Coord::Absolute => spec.funcs.f.eval(v),
            Coord::Fixed => 0.0,
        }
    }
}

/// Moving quadrature nodes carrying cell-integrated masses.
#[derive(Debug, Clone, Serialize)]
pub struct ParticleEnsemble {
    pub time: f64,
    pub positions: Vec<f64>,
    pub masses: Vec<f64>,
    pub initial_nodes: Vec<f64>,
    /// Compartment index of each node.
    pub compartment: Vec<usize>,
}

impl ParticleEnsemble {
    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn is_sorted(&self) -> bool {
        self.positions.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Debug, Clone)]
pub struct ParticleRun {
    pub ensemble: ParticleEnsemble,
    pub trajectory: RhoTrajectory,
    pub compartments: Vec<Compartment>,
}

struct Node {
    coord: Coord,
    comp: usize,
    v0: f64,
    ln_w0: f64,
    y: f64,
}

fn ln_sigmoid(u: f64) -> f64 {
    // ln(1 / (1 + e^{-u}))
    if u > 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

/// Logistic-coordinate range for a support piece `[p, q]` of `comp`.
fn piece_range(comp: &Compartment, p: f64, q: f64, horizon: f64) -> (f64, f64) {
    const EDGE: f64 = 16.0;
    let (mut lo, mut hi) = (-EDGE, EDGE);
    if !comp.plateau {
        if let crate::carrying::End::Root { location, slope, .. } = *comp.source() {
            let reach = (slope.abs() * horizon + EDGE).min(700.0);
            if comp.direction > 0.0 && p == location {
                lo = -reach;
            }
            if comp.direction < 0.0 && q == location {
                hi = reach;
            }
        }
    }
    (lo, hi)
}

fn node_coord(spec: &ProblemSpec, comp: &Compartment) -> Coord {
    if comp.plateau {
        return Coord::Fixed;
    }
    let end = if comp.source().root().is_some() { comp.source() } else { comp.sink() };
    match *end {
        crate::carrying::End::Root { location, slope, .. } => {
            let sign = if comp.interval.lo == location { 1.0 } else { -1.0 };
            let side = if sign > 0.0 { Side::Right } else { Side::Left };
            Coord::Offset {
                anchor: location,
                sign,
                lam: slope,
                mu: 0.5 * spec.funcs.d2f.eval_side(location, side),
                zone: 1e-6 * location.abs().max(1.0),
            }
        }
        crate::carrying::End::Boundary { .. } => Coord::Absolute,
    }
}

/// Distribute `total` nodes over pieces proportionally to their widths, at least `min` each.
fn allocate(widths: &[f64], total: usize, min: usize) -> Vec<usize> {
    let sum: f64 = widths.iter().sum();
    let mut counts: Vec<usize> = widths.iter().map(|w| ((w / sum) * total as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..widths.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = widths[a] / sum * total as f64 - counts[a] as f64;
        let fb = widths[b] / sum * total as f64 - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle().take(widths.len() * 2) {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for c in counts.iter_mut() {
        *c = (*c).max(min);
    }
    counts
}

fn initial_nodes(
    spec: &ProblemSpec,
    comps: &[Compartment],
    carrying: &Carrying,
    count: usize,
    horizon: f64,
) -> Vec<Node> {
    let breaks = spec.n0.breakpoints();
    let mut pieces: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    for comp in comps {
        let (c, d) = (comp.support.lo, comp.support.hi);
        let slack = 1e-9 * (d - c);
        let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&b| b > c + slack && b < d - slack).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut edges = vec![c];
        edges.extend(cuts);
        edges.push(d);
        for w in edges.windows(2) {
            let (lo, hi) = piece_range(comp, w[0], w[1], horizon);
            pieces.push((comp.index, w[0], w[1], lo, hi));
        }
    }
    let widths: Vec<f64> = pieces.iter().map(|p| p.4 - p.3).collect();
    let counts = allocate(&widths, count, 8);

    let root_of = |x: f64| spec.roots().any(|e| e.location == x);
    let mut nodes = Vec::with_capacity(count);
    for (&(ci, p, q, u_lo, u_hi), &n) in pieces.iter().zip(&counts) {
        let comp = &comps[ci];
        let coord = node_coord(spec, comp);
        let du = (u_hi - u_lo) / n as f64;
        let ln_width = (q - p).ln();
        if comp.plateau {
            // Plateau particles never move. A rescaled sigmoid of moderate range covers the
            // whole piece exactly, resolving both interior maxima of r and maxima at an edge.
            const RANGE: f64 = 8.0;
            let sig = |u: f64| 1.0 / (1.0 + (-u).exp());
            let (s_lo, s_hi) = (sig(-RANGE), sig(RANGE));
            let z = s_hi - s_lo;
            let h = 2.0 * RANGE / n as f64;
            for k in 0..n {
                let u = -RANGE + (k as f64 + 0.5) * h;
                let y = p + (q - p) * (sig(u) - s_lo) / z;
                // Exact cell widths keep the total mass of a constant n0 exact.
                let cell = sig(u + 0.5 * h) - sig(u - 0.5 * h);
                let ln_w0 = carrying.ln_n0(None, y, 0.0) + ln_width + (cell / z).ln();
                if ln_w0.is_finite() {
                    nodes.push(Node { coord, comp: ci, v0: y, ln_w0, y });
                }
            }
            continue;
        }
        for k in 0..n {
            let u = u_lo + (k as f64 + 0.5) * du;
            // Offsets from both piece edges, exact for large |u|.
            let ln_from_p = ln_width + ln_sigmoid(u);
            let ln_from_q = ln_width + ln_sigmoid(-u);
            let y = if u <= 0.0 { p + ln_from_p.exp() } else { q - ln_from_q.exp() };
            let ln_n0 = if u <= 0.0 {
                let root = root_of(p).then_some(p);
                carrying.ln_n0(root, if root.is_some() { ln_from_p.exp() } else { y }, ln_from_p)
            } else {
                let root = root_of(q).then_some(q);
                carrying.ln_n0(root, if root.is_some() { -ln_from_q.exp() } else { y }, ln_from_q)
            };
            let ln_w0 = ln_n0 + ln_width + ln_sigmoid(u) + ln_sigmoid(-u) + du.ln();
            if !ln_w0.is_finite() {
                continue;
            }
            let v0 = match coord {
                Coord::Offset { anchor, .. } if anchor == p => ln_from_p,
                Coord::Offset { anchor, .. } if anchor == q => ln_from_q,
                Coord::Offset { anchor, .. } => (y - anchor).abs().ln(),
                _ => y,
            };
            nodes.push(Node { coord, comp: ci, v0, ln_w0, y });
        }
    }
    nodes
}

fn mass_bound(spec: &ProblemSpec, rho0: f64) -> f64 {
    spec.r_sup.max(rho0) + 1e-9
}

/// Particle simulation up to `horizon` with about `count` nodes.
pub fn simulate_particles(spec: &ProblemSpec, horizon: f64, count: usize) -> Result<ParticleRun, DynamicsError> {
    if count < 16 {
        return Err(DynamicsError::InvalidArgument(format!("particle count {count} is below 16")));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!("horizon {horizon} must be finite and non-negative")));
    }
    let comps = build_compartments(spec);
    let carrying = Carrying::new(spec, &comps);
    let nodes = initial_nodes(spec, &comps, &carrying, count, horizon);
    let n = nodes.len();
    let m = comps.len();
    let coords: Vec<Coord> = nodes.iter().map(|nd| nd.coord).collect();
    let tags: Vec<usize> = nodes.iter().map(|nd| nd.comp).collect();

    let mut y0 = Vec::with_capacity(2 * n + 1);
    y0.extend(nodes.iter().map(|nd| nd.v0));
    y0.extend(nodes.iter().map(|nd| nd.ln_w0));
    y0.push(0.0);

    let eval_nodes = |y: &[f64], out: &mut [(f64, f64)]| {
        par::fill(out, |j| {
            let c = &coords[j];
            (c.velocity(spec, y[j]), spec.funcs.r.eval(c.position(y[j])))
        });
    };
    let summarize = |y: &[f64], scratch: &mut [(f64, f64)]| -> (f64, f64, Vec<f64>) {
        eval_nodes(y, scratch);
        let mut parts = vec![0.0; m];
        let mut rho = 0.0;
        for j in 0..n {
            let w = y[n + j].exp();
            parts[tags[j]] += w;
            rho += w;
        }
        let rate = (0..n).map(|j| (scratch[j].1 - rho) * y[n + j].exp()).sum();
        (rho, rate, parts)
    };

    let mut scratch = vec![(0.0, 0.0); n];
    let mut traj = RhoTrajectory::new(m);
    let (rho0, rate0, parts0) = summarize(&y0, &mut scratch);
    traj.push(0.0, rho0, rate0, parts0, 0.0);
    let bound = mass_bound(spec, rho0);

    let mut rhs_scratch = vec![(0.0, 0.0); n];
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        eval_nodes(y, &mut rhs_scratch);
        let rho: f64 = y[n..2 * n].iter().map(|l| l.exp()).sum();
        for j in 0..n {
            dy[j] = rhs_scratch[j].0;
            dy[n + j] = rhs_scratch[j].1 - rho;
        }
        dy[2 * n] = rho;
    };
    let mut violation = None;
    let observer = |step: &ode::Step| {
        let (rho, rate, parts) = summarize(step.y1, &mut scratch);
        traj.push(step.t1, rho, rate, parts, step.y1[2 * n]);
        if rho > bound {
            violation = Some(DynamicsError::MassBound { time: step.t1, rho, bound });
            return Control::StopAt(step.t1);
        }
        Control::Continue
    };
    let sol = ode::integrate(rhs, 0.0, &y0, horizon, Options::new(spec.numerics.ode_tolerances()), observer)?;
    if let Some(e) = violation {
        return Err(e);
    }

    let ensemble = ParticleEnsemble {
        time: sol.t,
        positions: (0..n).map(|j| coords[j].position(sol.y[j])).collect(),
        masses: (0..n).map(|j| sol.y[n + j].exp()).collect(),
        initial_nodes: nodes.iter().map(|nd| nd.y).collect(),
        compartment: tags,
    };
    Ok(ParticleRun { ensemble, trajectory: traj, compartments: comps })
}

/// Carrying-capacity samples of one compartment on an increasing time grid.
#[derive(Debug, Clone)]
pub struct CarryingTable {
    pub samples: Vec<CarryingSample>,
}

impl CarryingTable {
    /// `(ln S, R)` at `t` from the cubic Hermite interpolant of `ln S`.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let s = &self.samples;
        if s.len() == 1 {
            return (s[0].ln_s, s[0].r);
        }
        let k = s.partition_point(|p| p.t <= t).clamp(1, s.len() - 1) - 1;
        let (a, b) = (&s[k], &s[k + 1]);
        hermite(a.t, b.t, a.ln_s, b.ln_s, a.r, b.r, t.clamp(a.t, b.t))
    }
}

const TABLE_SPACING: f64 = 0.5;
const TABLE_TOL: f64 = 1e-8;
const TABLE_ROUNDS: usize = 12;

/// Tabulate `ln S_i` and `R_i` on `[0, horizon]`, bisecting every interval whose midpoint
/// the interpolant misses by more than a fixed tolerance.
pub fn carrying_tables(
    spec: &ProblemSpec,
    comps: &[Compartment],
    horizon: f64,
) -> Result<Vec<CarryingTable>, DynamicsError> {
    let carrying = Carrying::new(spec, comps);
    let sample = |&(i, t): &(usize, f64)| {
        carrying.sample(&comps[i], t).map_err(|source| DynamicsError::Carrying { index: i, source })
    };
    let cells = if horizon > 0.0 { (horizon / TABLE_SPACING).ceil().max(1.0) as usize } else { 0 };
    let mut jobs = Vec::new();
    for i in 0..comps.len() {
        for k in 0..=cells {
            let t = if cells == 0 { 0.0 } else { horizon * k as f64 / cells as f64 };
            jobs.push((i, t));
        }
    }
    let first: Vec<CarryingSample> = par::map(&jobs, sample).into_iter().collect::<Result<_, _>>()?;
    let mut tables: Vec<CarryingTable> = (0..comps.len())
        .map(|i| CarryingTable {
            samples: jobs.iter().zip(&first).filter(|(j, _)| j.0 == i).map(|(_, s)| *s).collect(),
        })
        .collect();
    // Intervals still to check, as (compartment, left sample time, right sample time).
    let mut pending: Vec<(usize, f64, f64)> = Vec::new();
    for (i, tab) in tables.iter().enumerate() {
        pending.extend(tab.samples.windows(2).map(|w| (i, w[0].t, w[1].t)));
    }
    for _ in 0..TABLE_ROUNDS {
        if pending.is_empty() {
            break;
        }
        let mids: Vec<(usize, f64)> = pending.iter().map(|&(i, a, b)| (i, 0.5 * (a + b))).collect();
        let got: Vec<CarryingSample> = par::map(&mids, sample).into_iter().collect::<Result<_, _>>()?;
        let mut next = Vec::new();
        for (&(i, a, b), s) in pending.iter().zip(&got) {
            let (ln_s, r) = tables[i].at(s.t);
            let miss = (ln_s - s.ln_s).abs() + (b - a) * (r - s.r).abs();
            if miss > TABLE_TOL * (1.0 + s.ln_s.abs()) {
                next.push((i, a, s.t));
                next.push((i, s.t, b));
            }
        }
        for (&(i, _), s) in mids.iter().zip(got) {
            let tab = &mut tables[i].samples;
            let at = tab.partition_point(|p| p.t < s.t);
            tab.insert(at, s);
        }
        pending = next;
    }
    Ok(tables)
}

/// Integrate the compartment system up to `horizon`.
pub fn simulate_compartments(
    spec: &ProblemSpec,
    comps: &[Compartment],
    horizon: f64,
) -> Result<RhoTrajectory, DynamicsError> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!("horizon {horizon} must be finite and non-negative")));
    }
    if comps.is_empty() {
        return Err(DynamicsError::InvalidArgument("no compartments".into()));
    }
    let tables = carrying_tables(spec, comps, horizon)?;
    integrate_compartments(spec, &tables, horizon)
}

/// Integrate the compartment system on precomputed carrying tables covering `[0, horizon]`.
pub fn integrate_compartments(
    spec: &ProblemSpec,
    tables: &[CarryingTable],
    horizon: f64,
) -> Result<RhoTrajectory, DynamicsError> {
    let m = tables.len();
    let mut y0: Vec<f64> = tables.iter().map(|tab| tab.samples[0].ln_s).collect();
    y0.push(0.0);

    let rates = |t: f64| -> Vec<f64> { tables.iter().map(|tab| tab.at(t).1).collect() };
    let summarize = |t: f64, y: &[f64]| -> (f64, f64, Vec<f64>) {
        let parts: Vec<f64> = y[..m].iter().map(|q| q.exp()).collect();
        let rho: f64 = parts.iter().sum();
        let rate = rates(t).iter().zip(&parts).map(|(r, p)| (r - rho) * p).sum();
        (rho, rate, parts)
    };
    let mut traj = RhoTrajectory::new(m);
    let (rho0, rate0, parts0) = summarize(0.0, &y0);
    traj.push(0.0, rho0, rate0, parts0, 0.0);
    let bound = mass_bound(spec, rho0);

    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let rho: f64 = y[..m].iter().map(|q| q.exp()).sum();
        for (i, tab) in tables.iter().enumerate() {
            dy[i] = tab.at(t).1 - rho;
        }
        dy[m] = rho;
    };
    let mut violation = None;
    let observer = |step: &ode::Step| {
        let (rho, rate, parts) = summarize(step.t1, step.y1);
        traj.push(step.t1, rho, rate, parts, step.y1[m]);
        if rho > bound {
            violation = Some(DynamicsError::MassBound { time: step.t1, rho, bound });
            return Control::StopAt(step.t1);
        }
        Control::Continue
    };
    ode::integrate(rhs, 0.0, &y0, horizon, Options::new(spec.numerics.ode_tolerances()), observer)?;
    match violation {
        Some(e) => Err(e),
        None => Ok(traj),
    }
}

/// Pointwise density from the semi-explicit formula along backward characteristics.
pub struct DensityEvaluator<'a> {
    spec: &'a ProblemSpec,
    carrying: Carrying<'a>,
    r_tilde: PathField,
    rho: &'a RhoTrajectory,
}

impl<'a> DensityEvaluator<'a> {
    pub fn new(spec: &'a ProblemSpec, rho: &'a RhoTrajectory) -> Self {
        let comps = build_compartments(spec);
        DensityEvaluator {
            spec,
            carrying: Carrying::new(spec, &comps),
            r_tilde: PathField::new(spec.funcs.r_tilde.clone()),
            rho,
        }
    }

    /// `n(t, x)`.
    pub fn eval(&self, t: f64, x: f64) -> Result<f64, DynamicsError> {
        let ln_mass = self.rho.cumulative_at(t)?;
        if t == 0.0 {
            return Ok(self.spec.funcs.n0.eval(x));
        }
        let back = self.carrying.characteristics().flow(x, t, Direction::Backward, &[&self.r_tilde])?;
        if !self.spec.support.contains(back.endpoint) {
            return Ok(0.0);
        }
        let ln_n = self.carrying.ln_n0_at(&back) + back.path_integrals[0] - ln_mass;
        Ok(ln_n.exp())
    }

    /// `n(t, x)` at every point of `xs`.
    pub fn snapshot(&self, t: f64, xs: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        par::map(xs, |&x| self.eval(t, x)).into_iter().collect()
    }
}

pub fn evaluate_density(spec: &ProblemSpec, rho: &RhoTrajectory, t: f64, x: f64) -> Result<f64, DynamicsError> {
    DensityEvaluator::new(spec, rho).eval(t, x)
}

/// Mass fractions near each equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub radius: f64,
    /// `(location, share)` per equilibrium; plateaus report their left end.
    pub shares: Vec<(f64, f64)>,
    /// Fraction of mass farther than `radius` from every equilibrium.
    pub remainder: f64,
}

impl ConcentrationReport {
    pub fn share_at(&self, location: f64) -> Option<f64> {
        self.shares.iter().find(|s| s.0 == location).map(|s| s.1)
    }
}

/// Mass shares within `radius` of each equilibrium; a node near several counts for the nearest.
pub fn concentration_report(ensemble: &ParticleEnsemble, equilibria: &[Equilibrium], radius: f64) -> ConcentrationReport {
    let total = ensemble.total_mass();
    let mut shares = vec![0.0; equilibria.len()];
    let mut remainder = 0.0;
    for (&x, &w) in ensemble.positions.iter().zip(&ensemble.masses) {
        let nearest = equilibria
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let (lo, hi) = e.span();
                (i, if x < lo { lo - x } else if x > hi { x - hi } else { 0.0 })
            })
            .filter(|&(_, d)| d <= radius)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((i, _)) => shares[i] += w,
            None => remainder += w,
        }
    }
    let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
    ConcentrationReport {
        radius,
        shares: equilibria.iter().zip(shares).map(|(e, s)| (e.span().0, s * scale)).collect(),
        remainder: if total > 0.0 { remainder * scale } else { 1.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate, NumericConfig, RawProblem};
    use crate::quad;

    pub(crate) fn spec(f: &str, r: &str, n0: &str, domain: [f64; 2]) -> ProblemSpec {
        let raw = RawProblem {
            f: f.into(),
            r: r.into(),
            n0: n0.into(),
            domain,
            alpha_hint: vec![],
            numerics: NumericConfig::default(),
        };
        validate(&raw).expect("valid spec")
    }

    fn logistic(c: f64, m0: f64, t: f64) -> f64 {
        let e = (c * t).exp();
        c * m0 * e / (c + m0 * (e - 1.0))
    }

    #[test]
    fn logistic_oracle_both_routes() {
        let s = spec("0", "2", "0.5*ind(-1,1)", [-2.0, 2.0]);
        let run = simulate_particles(&s, 6.0, 64).unwrap();
        let tr = &run.trajectory;
        let m0 = tr.rho[0];
        assert!((m0 - 1.0).abs() < 1e-6, "{m0}");
        for (t, r) in tr.times.iter().zip(&tr.rho) {
            assert!((r - logistic(2.0, m0, *t)).abs() < 1e-8, "t={t} {r}");
        }
        let comp = simulate_compartments(&s, &run.compartments, 6.0).unwrap();
        for (t, r) in comp.times.iter().zip(&comp.rho) {
            assert!((r - logistic(2.0, 1.0, *t)).abs() < 1e-8, "t={t} {r}");
        }
    }

    #[test]
    fn red_run_concentrates_at_stable_root() {
        let s = spec("x*(1-x)", "6-0.5*x", "6*ind(0,1)", [0.0, 1.0]);
        let run = simulate_particles(&s, 40.0, 512).unwrap();
        let rho = run.trajectory.final_rho();
        assert!((rho - 5.5).abs() < 0.02, "{rho}");
        assert!(run.ensemble.is_sorted());
        let rep = concentration_report(&run.ensemble, &s.equilibria, 0.05);
        assert!(rep.share_at(1.0).unwrap() >= 0.99, "{rep:?}");
        let sum: f64 = rep.shares.iter().map(|s| s.1).sum::<f64>() + rep.remainder;
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blue_run_routes_agree_and_density_matches_profile() {
        let s = spec("x*(1-x)", "6-4*x", "6*ind(0,1)", [0.0, 1.0]);
        let run = simulate_particles(&s, 40.0, 512).unwrap();
        let tr = &run.trajectory;
        assert!((tr.final_rho() - 5.0).abs() < 0.02, "{}", tr.final_rho());
        let rep = concentration_report(&run.ensemble, &s.equilibria, 0.05);
        assert!(rep.share_at(1.0).unwrap() <= 0.05, "{rep:?}");

        let comp = simulate_compartments(&s, &run.compartments, 40.0).unwrap();
        for (t, r) in comp.times.iter().zip(&comp.rho) {
            let p = tr.rho_at(*t).unwrap();
            assert!((p - r).abs() <= 5e-3 * (1.0 + r), "t={t}: {p} vs {r}");
        }

        let dens = DensityEvaluator::new(&s, tr);
        let mid = dens.eval(40.0, 0.5).unwrap();
        assert!((mid - 3.75).abs() < 1e-2, "{mid}");
        for &t in &[0.7, 3.0, 15.0] {
            let mass = quad::integrate(|x| dens.eval(t, x).unwrap(), 0.0, 1.0, &[], 1e-8).unwrap();
            let rho = tr.rho_at(t).unwrap();
            assert!((mass - rho).abs() < 1e-2 * rho, "t={t}: {mass} vs {rho}");
        }
    }

    #[test]
    fn density_at_time_zero_and_outside_orbit() {
        let s = spec("x*(1-x)", "6-4*x", "6*ind(0.2,0.4)", [0.0, 1.0]);
        let run = simulate_particles(&s, 2.0, 64).unwrap();
        let dens = DensityEvaluator::new(&s, &run.trajectory);
        assert_eq!(dens.eval(0.0, 0.3).unwrap(), 6.0);
        assert_eq!(dens.eval(0.0, 0.5).unwrap(), 0.0);
        // By t = 2 the support has moved to about [0.649, 0.831].
        assert_eq!(dens.eval(2.0, 0.6).unwrap(), 0.0);
        assert!(dens.eval(2.0, 0.7).unwrap() > 0.0);
        assert!(dens.eval(2.5, 0.6).is_err());
    }

    #[test]
    fn two_compartments_losing_one_vanishes() {
        // Both halves flow away from 0; the left sink has the larger r.
        let s = spec("x*(1-x)*(x+1)", "6-0.5*x", "6*ind(-1,1)", [-1.0, 1.0]);
        let run = simulate_particles(&s, 30.0, 256).unwrap();
        let last = run.trajectory.parts.last().unwrap();
        assert_eq!(last.len(), 2);
        assert!(last.iter().all(|&p| p > 0.0));
        let tr = simulate_compartments(&s, &run.compartments, 30.0).unwrap();
        let parts = tr.parts.last().unwrap();
        let (small, big) = if parts[0] < parts[1] { (parts[0], parts[1]) } else { (parts[1], parts[0]) };
        assert!(small < 1e-3 * big, "{parts:?}");
    }

    #[test]
    fn hermite_reproduces_cubics() {
        let p = |t: f64| 1.0 + t - 2.0 * t * t + 0.5 * t * t * t;
        let dp = |t: f64| 1.0 - 4.0 * t + 1.5 * t * t;
        let (v, d) = hermite(0.3, 1.1, p(0.3), p(1.1), dp(0.3), dp(1.1), 0.77);
        assert!((v - p(0.77)).abs() < 1e-14 && (d - dp(0.77)).abs() < 1e-13);
    }
}
