//! Derivative-free minimization (Powell's direction set method).

const GOLD: f64 = 1.618_033_988_749_895;
const CGOLD: f64 = 0.381_966_011_250_105;
const MAX_BRACKET_STEPS: usize = 60;
const MAX_BRENT_ITERS: usize = 100;

#[derive(Debug, Clone)]
pub(crate) struct PowellOptions {
    /// Typical step per parameter; the search runs in `x / scale` units.
    pub scales: Vec<f64>,
    /// Stop once no parameter moved more than this in one sweep.
    pub xtol: Vec<f64>,
    pub max_iter: usize,
    /// Largest first step along a direction, in scaled units.
    pub max_step: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
}

/// Minimizes `f` from `x0`. Non-finite function values are treated as +inf.
pub(crate) fn powell<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &PowellOptions) -> Minimum {
    let n = x0.len();
    let scales = &opts.scales;
    let to_x = |y: &[f64]| -> Vec<f64> { y.iter().zip(scales).map(|(a, s)| a * s).collect() };
    let mut eval = |y: &[f64]| {
        let v = f(&to_x(y));
        if v.is_finite() { v } else { f64::INFINITY }
    };
    // line tolerance in scaled units: a fraction of the tightest stopping tolerance
    let line_tol = opts
        .xtol
        .iter()
        .zip(scales)
        .map(|(t, s)| t / s)
        .fold(f64::INFINITY, f64::min)
        .max(1e-12)
        * 0.25;

    let mut y: Vec<f64> = x0.iter().zip(scales).map(|(a, s)| a / s).collect();
    let mut fy = eval(&y);
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut d = vec![0.0; n];
            d[i] = 1.0;
            d
        })
        .collect();

    for _ in 0..opts.max_iter {
        let start = y.clone();
        let f_start = fy;
        let mut biggest_drop = 0.0;
        let mut biggest_idx = 0;
        for (i, d) in dirs.iter().enumerate() {
            let before = fy;
            let (alpha, fa) = line_min(&mut eval, &y, d, fy, opts.max_step, line_tol);
            if fa < fy {
                for (yk, dk) in y.iter_mut().zip(d) {
                    *yk += alpha * dk;
                }
                fy = fa;
            }
            if before - fy > biggest_drop {
                biggest_drop = before - fy;
                biggest_idx = i;
            }
        }

        let moved_small = y
            .iter()
            .zip(&start)
            .zip(scales.iter().zip(&opts.xtol))
            .all(|((a, b), (s, t))| ((a - b) * s).abs() <= *t);
        if moved_small {
            return Minimum { x: to_x(&y), value: fy, converged: true };
        }

        // try replacing the direction of largest decrease with the net displacement
        let net: Vec<f64> = y.iter().zip(&start).map(|(a, b)| a - b).collect();
        let extrap: Vec<f64> = y.iter().zip(&net).map(|(a, d)| a + d).collect();
        let fe = eval(&extrap);
        if fe < f_start {
            let t = 2.0 * (f_start - 2.0 * fy + fe) * (f_start - fy - biggest_drop).powi(2)
                - biggest_drop * (f_start - fe).powi(2);
            if t < 0.0 {
                let (alpha, fa) = line_min(&mut eval, &y, &net, fy, opts.max_step, line_tol);
                if fa < fy {
                    for (yk, dk) in y.iter_mut().zip(&net) {
                        *yk += alpha * dk;
                    }
                    fy = fa;
                }
                dirs[biggest_idx] = dirs[n - 1].clone();
                dirs[n - 1] = net;
            }
        }
    }
    Minimum { x: to_x(&y), value: fy, converged: false }
}

/// Minimizes `g(a) = f(y + a d)` by bracketing then Brent's method.
fn line_min<F: FnMut(&[f64]) -> f64>(f: &mut F, y: &[f64], d: &[f64], f0: f64, max_step: f64, tol: f64) -> (f64, f64) {
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (0.0, f0);
    }
    let mut g = |a: f64| {
        let p: Vec<f64> = y.iter().zip(d).map(|(yk, dk)| yk + a * dk).collect();
        f(&p)
    };
    let step = (max_step / norm).max(tol);
    let tol = tol / norm;

    // bracket a minimum: g(a) >= g(b) <= g(c)
    let mut a = 0.0;
    let (mut b, mut fb) = (step, g(step));
    if fb > f0 {
        let fm = g(-step);
        if fm >= f0 {
            return brent(&mut g, -step, 0.0, step, f0, tol);
        }
        b = -step;
        fb = fm;
    }
    let mut c = b + GOLD * (b - a);
    let mut fc = g(c);
    let mut steps = 0;
    while fb > fc && steps < MAX_BRACKET_STEPS {
        a = b;
        b = c;
        fb = fc;
        c = b + GOLD * (b - a);
        fc = g(c);
        steps += 1;
    }
    if fb > fc {
        return (c, fc);
    }
    let (lo, hi) = if a < c { (a, c) } else { (c, a) };
    brent(&mut g, lo, b, hi, fb, tol)
}

/// Brent's parabolic/golden minimizer on `[lo, hi]` with interior best `x`.
fn brent<G: FnMut(f64) -> f64>(g: &mut G, mut lo: f64, x0: f64, mut hi: f64, fx0: f64, tol: f64) -> (f64, f64) {
    let (mut x, mut w, mut v) = (x0, x0, x0);
    let (mut fx, mut fw, mut fv) = (fx0, fx0, fx0);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..MAX_BRENT_ITERS {
        let xm = 0.5 * (lo + hi);
        let tol1 = tol + 1e-10 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (lo - x) && p < q * (hi - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - lo < tol2 || hi - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { lo - x } else { hi - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = g(u);
        if fu <= fx {
            if u >= x { lo = x } else { hi = x }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x { lo = u } else { hi = u }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(n: usize) -> PowellOptions {
        PowellOptions {
            scales: vec![1.0; n],
            xtol: vec![1e-6; n],
            max_iter: 200,
            max_step: 1.0,
        }
    }

    #[test]
    fn quadratic_bowl() {
        let m = powell(|x| (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2), &[0.0, 0.0], &opts(2));
        assert!(m.converged);
        assert!((m.x[0] - 3.0).abs() < 1e-5 && (m.x[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn rosenbrock() {
        let m = powell(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &opts(2),
        );
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3, "{:?}", m.x);
    }

    #[test]
    fn scaled_coupled_problem() {
        let o = PowellOptions {
            scales: vec![0.01, 10.0, 1.0],
            xtol: vec![1e-6, 1e-3, 1e-5],
            max_iter: 200,
            max_step: 2.0,
        };
        let f = |x: &[f64]| {
            let a = x[0] * 100.0 - 1.0;
            let b = x[1] / 10.0 + 2.0;
            let c = x[2] - 0.5;
            a * a + b * b + c * c + 0.5 * a * b
        };
        let m = powell(f, &[0.0, 0.0, 0.0], &o);
        assert!((m.x[0] - 0.01).abs() < 1e-5, "{:?}", m.x);
        assert!((m.x[1] + 20.0).abs() < 1e-2);
        assert!((m.x[2] - 0.5).abs() < 1e-4);
    }
}
