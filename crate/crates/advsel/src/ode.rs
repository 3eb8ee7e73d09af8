//! Adaptive Dormand–Prince 5(4) integrator with continuous (dense) output.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { rel: 1e-9, abs: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step budget of {0} exhausted")]
    MaxSteps(usize),
}

/// Observer verdict after an accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Control {
    Continue,
    /// Stop at the given time inside the last step; the final state is interpolated.
    StopAt(f64),
}

/// An accepted step with its interpolant.
pub struct Step<'a> {
    pub t0: f64,
    pub t1: f64,
    pub y0: &'a [f64],
    pub y1: &'a [f64],
    dense: &'a [Vec<f64>; 4],
}

impl Step<'_> {
    pub fn h(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Fourth-order continuous extension at `t` in `[t0, t1]`.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let h = self.t1 - self.t0;
        let th = if h == 0.0 { 1.0 } else { (t - self.t0) / h };
        let th1 = 1.0 - th;
        let [r2, r3, r4, r5] = self.dense;
        for i in 0..out.len() {
            out[i] = self.y0[i] + th * (r2[i] + th1 * (r3[i] + th * (r4[i] + th1 * r5[i])));
        }
    }

    /// Interpolation coefficients of component `i`, for use with [`eval_dense`].
    pub fn dense_coefficients(&self, i: usize) -> [f64; 5] {
        let [r2, r3, r4, r5] = self.dense;
        [self.y0[i], r2[i], r3[i], r4[i], r5[i]]
    }

    pub fn interpolate_component(&self, t: f64, i: usize) -> f64 {
        let h = self.t1 - self.t0;
        let th = if h == 0.0 { 1.0 } else { (t - self.t0) / h };
        let th1 = 1.0 - th;
        let [r2, r3, r4, r5] = self.dense;
        self.y0[i] + th * (r2[i] + th1 * (r3[i] + th * (r4[i] + th1 * r5[i])))
    }
}

/// Evaluate stored coefficients at fraction `theta` of a step.
pub fn eval_dense(c: &[f64; 5], theta: f64) -> f64 {
    let th1 = 1.0 - theta;
    c[0] + theta * (c[1] + th1 * (c[2] + theta * (c[3] + th1 * c[4])))
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub t: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub tol: Tolerances,
    pub h_init: Option<f64>,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Options {
    pub fn new(tol: Tolerances) -> Self {
        Options { tol, h_init: None, h_max: f64::INFINITY, max_steps: 1_000_000 }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn weighted_rms(err: &[f64], y0: &[f64], y1: &[f64], tol: Tolerances) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..err.len() {
        let sc = tol.abs + tol.rel * y0[i].abs().max(y1[i].abs());
        let q = err[i] / sc;
        acc += q * q;
    }
    (acc / err.len() as f64).sqrt()
}

/// Integrate `y' = rhs(t, y)` from `t0` to `t_end > t0`, calling `observer` after each accepted step.
pub fn integrate<F, O>(
    mut rhs: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: Options,
    mut observer: O,
) -> Result<Solution, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(&Step) -> Control,
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut sol = Solution { t, y: y.clone(), accepted: 0, rejected: 0, evaluations: 0 };
    if t_end <= t0 {
        return Ok(sol);
    }
    let span = t_end - t0;
    let tol = opts.tol;

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ys = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut dense: [Vec<f64>; 4] = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];

    rhs(t, &y, &mut k1);
    sol.evaluations += 1;
    if k1.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFinite { t });
    }

    let mut h = match opts.h_init {
        Some(h) => h,
        None => {
            // Initial step from the scaled norms of y and y'.
            let mut d0 = 0.0;
            let mut d1 = 0.0;
            for i in 0..n {
                let sc = tol.abs + tol.rel * y[i].abs();
                d0 += (y[i] / sc).powi(2);
                d1 += (k1[i] / sc).powi(2);
            }
            let (d0, d1) = if n > 0 {
                ((d0 / n as f64).sqrt(), (d1 / n as f64).sqrt())
            } else {
                (0.0, 0.0)
            };
            let h0 = (if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }).min(span);
            // Second estimate from the change of y' over an Euler step; guards against tiny h0
            // when y sits near zero relative to the absolute tolerance.
            for i in 0..n {
                ys[i] = y[i] + h0 * k1[i];
            }
            rhs(t + h0, &ys, &mut k2);
            sol.evaluations += 1;
            let mut d2 = 0.0;
            for i in 0..n {
                let sc = tol.abs + tol.rel * y[i].abs();
                d2 += ((k2[i] - k1[i]) / sc).powi(2);
            }
            let d2 = if n > 0 { (d2 / n as f64).sqrt() / h0 } else { 0.0 };
            let dm = d1.max(d2);
            let h1 = if dm <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / dm).powf(0.2) };
            (100.0 * h0).min(h1).min(span)
        }
    }
    .min(opts.h_max)
    .min(span);

    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;
    loop {
        if sol.accepted + sol.rejected >= opts.max_steps {
            return Err(OdeError::MaxSteps(opts.max_steps));
        }
        let remaining = t_end - t;
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if t + h == t || h < f64::MIN_POSITIVE {
            return Err(OdeError::StepUnderflow { t, h });
        }

        for i in 0..n {
            ys[i] = y[i] + h * A21 * k1[i];
        }
        rhs(t + C2 * h, &ys, &mut k2);
        for i in 0..n {
            ys[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs(t + C3 * h, &ys, &mut k3);
        for i in 0..n {
            ys[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs(t + C4 * h, &ys, &mut k4);
        for i in 0..n {
            ys[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs(t + C5 * h, &ys, &mut k5);
        for i in 0..n {
            ys[i] =
                y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t_end } else { t + h };
        rhs(t_new, &ys, &mut k6);
        for i in 0..n {
            y1[i] =
                y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        rhs(t_new, &y1, &mut k7);
        sol.evaluations += 6;

        for i in 0..n {
            err[i] = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let finite = y1.iter().all(|v| v.is_finite()) && k7.iter().all(|v| v.is_finite());
        let e = if finite { weighted_rms(&err, &y, &y1, tol) } else { f64::INFINITY };

        if e <= 1.0 {
            // PI step-size control.
            let fac = if e == 0.0 { 10.0 } else { 0.9 * e.powf(-0.17) * fac_old.powf(0.04) };
            let fac = if last_rejected { fac.min(1.0) } else { fac }.clamp(0.2, 10.0);
            fac_old = e.max(1e-4);
            for i in 0..n {
                let d2 = y1[i] - y[i];
                let d3 = h * k1[i] - d2;
                dense[0][i] = d2;
                dense[1][i] = d3;
                dense[2][i] = d2 - h * k7[i] - d3;
                dense[3][i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]);
            }
            sol.accepted += 1;
            let step = Step { t0: t, t1: t_new, y0: &y, y1: &y1, dense: &dense };
            match observer(&step) {
                Control::Continue => {}
                Control::StopAt(ts) => {
                    let ts = ts.clamp(t, t_new);
                    let mut out = vec![0.0; n];
                    step.interpolate(ts, &mut out);
                    sol.t = ts;
                    sol.y = out;
                    return Ok(sol);
                }
            }
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut k1, &mut k7);
            t = t_new;
            if last {
                sol.t = t;
                sol.y = y;
                return Ok(sol);
            }
            h = (h * fac).min(opts.h_max);
            last_rejected = false;
        } else {
            sol.rejected += 1;
            if !finite {
                h *= 0.1;
                if t + h == t || h < f64::MIN_POSITIVE {
                    return Err(OdeError::NonFinite { t });
                }
            } else {
                h *= (0.9 * e.powf(-0.2)).clamp(0.1, 1.0);
            }
            last_rejected = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(rel: f64, abs: f64) -> Options {
        Options::new(Tolerances { rel, abs })
    }

    #[test]
    fn exponential_decay_is_accurate() {
        let sol = integrate(|_, y, d| d[0] = -y[0], 0.0, &[1.0], 10.0, opts(1e-10, 1e-14), |_| {
            Control::Continue
        })
        .unwrap();
        assert!((sol.y[0] - (-10f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn harmonic_oscillator_dense_output() {
        let mut worst: f64 = 0.0;
        integrate(
            |_, y, d| {
                d[0] = y[1];
                d[1] = -y[0];
            },
            0.0,
            &[0.0, 1.0],
            20.0,
            opts(1e-10, 1e-12),
            |s| {
                let mut out = [0.0; 2];
                for k in 0..=8 {
                    let t = s.t0 + s.h() * k as f64 / 8.0;
                    s.interpolate(t, &mut out);
                    worst = worst.max((out[0] - t.sin()).abs()).max((out[1] - t.cos()).abs());
                }
                Control::Continue
            },
        )
        .unwrap();
        assert!(worst < 1e-8, "dense output error {worst}");
    }

    #[test]
    fn stop_at_interpolates() {
        let sol = integrate(|_, _, d| d[0] = 1.0, 0.0, &[0.0], 5.0, opts(1e-9, 1e-12), |s| {
            if s.t1 >= 2.0 {
                Control::StopAt(2.0)
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert_eq!(sol.t, 2.0);
        assert!((sol.y[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_matches_closed_form() {
        let sol = integrate(
            |_, y, d| d[0] = y[0] * (1.0 - y[0]),
            0.0,
            &[0.5],
            3f64.ln(),
            opts(1e-9, 1e-12),
            |_| Control::Continue,
        )
        .unwrap();
        assert!((sol.y[0] - 0.75).abs() < 1e-10);
    }
}
