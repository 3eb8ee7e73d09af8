//! Scalar root bracketing and one-dimensional maximization.

/// Brent's method on a sign-changing bracket `[a, b]`, refined to near machine precision.
pub fn brent_root<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 {
        return b;
    }
    debug_assert!(fa.signum() != fb.signum(), "root not bracketed");
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 1e-300;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return b;
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = d;
            }
        } else {
            d = m;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
    }
    b
}

fn ordered_key(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    if b < 0 {
        i64::MIN - b
    } else {
        b
    }
}

fn from_key(k: i64) -> f64 {
    let b = if k < 0 { i64::MIN - k } else { k };
    f64::from_bits(b as u64)
}

/// Given `pred(inside)` true and `pred(outside)` false, bisect down to adjacent doubles
/// and return the last point on the `inside` side where `pred` holds.
pub fn bisect_edge<P: FnMut(f64) -> bool>(mut pred: P, inside: f64, outside: f64) -> f64 {
    let (mut a, mut b) = (ordered_key(inside), ordered_key(outside));
    while (a - b).abs() > 1 {
        let m = a + (b - a) / 2;
        if pred(from_key(m)) {
            a = m;
        } else {
            b = m;
        }
    }
    from_key(a)
}

/// Golden-section search for a maximum of a unimodal function on `[a, b]`.
pub fn golden_max<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..200 {
        if (b - a).abs() <= 1e-14 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Global maximum of `f` on `[a, b]`: dense sampling followed by local refinement.
pub fn sup_on<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, samples: usize) -> (f64, f64) {
    let n = samples.max(2);
    let h = (b - a) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| f(a + h * i as f64)).collect();
    let (mut best_i, mut best) = (0usize, f64::NEG_INFINITY);
    for (i, &v) in vals.iter().enumerate() {
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let lo = a + h * best_i.saturating_sub(1) as f64;
    let hi = (a + h * (best_i + 1) as f64).min(b);
    let (x, v) = golden_max(&mut f, lo, hi);
    if v > best {
        (x, v)
    } else {
        (a + h * best_i as f64, best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_roots() {
        let r = brent_root(|x| x * x - 2.0, 0.0, 2.0);
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
        let r = brent_root(|x| x.cos() - x, 0.0, 1.0);
        assert!((r.cos() - r).abs() < 1e-15);
    }

    #[test]
    fn bisect_edge_reaches_adjacent_doubles() {
        let e = bisect_edge(|x| x <= 0.0, -1.0, 1.0);
        assert_eq!(e, 0.0);
        let e = bisect_edge(|x| x < 0.3, 0.0, 1.0);
        assert!(e < 0.3 && f64::from_bits(e.to_bits() + 1) >= 0.3);
        let e = bisect_edge(|x| x > 0.5, 1.0, 0.0);
        assert!(e > 0.5 && f64::from_bits(e.to_bits() - 1) <= 0.5);
    }

    #[test]
    fn sup_refines_interior_max() {
        let (x, v) = sup_on(|x| 1.0 - (x - 0.3141).powi(2), -1.0, 1.0, 33);
        assert!((x - 0.3141).abs() < 1e-7);
        assert!((v - 1.0).abs() < 1e-14);
        let (x, _) = sup_on(|x| x, 0.0, 2.0, 10);
        assert_eq!(x, 2.0);
    }
}
