//! Small dense BFGS minimizer with a strong-Wolfe line search.

use serde::{Deserialize, Serialize};

pub type Objective<'a> = dyn FnMut(&[f64; 3]) -> Option<(f64, [f64; 3])> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Convergence when `max |grad| < grad_tol`.
    pub grad_tol: f64,
    /// Stop when a step changes no coordinate by more than this.
    pub step_tol: f64,
    pub max_iter: usize,
    /// Largest allowed change of any coordinate in one step.
    pub max_step: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-6, step_tol: 1e-8, max_iter: 500, max_step: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub x: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimOutcome {
    pub x: [f64; 3],
    pub value: f64,
    pub grad: [f64; 3],
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
}

impl OptimOutcome {
    pub fn grad_norm(&self) -> f64 {
        inf_norm(&self.grad)
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn inf_norm(a: &[f64; 3]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn axpy(x: &[f64; 3], t: f64, d: &[f64; 3]) -> [f64; 3] {
    [x[0] + t * d[0], x[1] + t * d[1], x[2] + t * d[2]]
}

struct Counted<'a, 'b> {
    f: &'a mut Objective<'b>,
    count: usize,
}

impl Counted<'_, '_> {
    fn eval(&mut self, x: &[f64; 3]) -> Option<(f64, [f64; 3])> {
        self.count += 1;
        match (self.f)(x) {
            Some((v, g)) if v.is_finite() && g.iter().all(|c| c.is_finite()) => Some((v, g)),
            _ => None,
        }
    }
}

struct Point {
    t: f64,
    value: f64,
    grad: [f64; 3],
    slope: f64,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong-Wolfe search along `d`; non-finite trial points shrink the step.
fn line_search(
    f: &mut Counted<'_, '_>,
    x: &[f64; 3],
    f0: f64,
    slope0: f64,
    d: &[f64; 3],
    t_max: f64,
) -> Option<Point> {
    let mut t = 1.0f64.min(t_max);
    let mut prev = Point { t: 0.0, value: f0, grad: [0.0; 3], slope: slope0 };
    for i in 0..40 {
        let xt = axpy(x, t, d);
        let Some((v, g)) = f.eval(&xt) else {
            t = prev.t + 0.5 * (t - prev.t);
            continue;
        };
        let cur = Point { t, value: v, grad: g, slope: dot(&g, d) };
        if v > f0 + C1 * t * slope0 || (i > 0 && v >= prev.value) {
            return zoom(f, x, f0, slope0, d, prev, cur);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(f, x, f0, slope0, d, cur, prev);
        }
        if t >= t_max {
            return Some(cur);
        }
        let next = (2.0 * t).min(t_max);
        prev = cur;
        t = next;
    }
    None
}

fn zoom(
    f: &mut Counted<'_, '_>,
    x: &[f64; 3],
    f0: f64,
    slope0: f64,
    d: &[f64; 3],
    mut lo: Point,
    mut hi: Point,
) -> Option<Point> {
    for _ in 0..40 {
        // Cubic interpolation when both slopes are known, else bisection.
        let mut t = 0.5 * (lo.t + hi.t);
        if lo.t != 0.0 || lo.slope.is_finite() {
            let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (lo.t - hi.t);
            let disc = d1 * d1 - lo.slope * hi.slope;
            if disc >= 0.0 {
                let d2 = disc.sqrt().copysign(hi.t - lo.t);
                let tc = hi.t - (hi.t - lo.t) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
                let (a, b) = if lo.t < hi.t { (lo.t, hi.t) } else { (hi.t, lo.t) };
                let margin = 0.1 * (b - a);
                if tc.is_finite() && tc > a + margin && tc < b - margin {
                    t = tc;
                }
            }
        }
        let xt = axpy(x, t, d);
        let Some((v, g)) = f.eval(&xt) else {
            hi = Point { t, value: f64::INFINITY, grad: [0.0; 3], slope: f64::NAN };
            continue;
        };
        let cur = Point { t, value: v, grad: g, slope: dot(&g, d) };
        if v > f0 + C1 * t * slope0 || v >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.t - lo.t) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.t - lo.t).abs() < 1e-16 * lo.t.abs().max(1.0) {
            break;
        }
    }
    // Accept any sufficient decrease found.
    (lo.t > 0.0 && lo.value < f0).then_some(lo)
}

/// Minimizes `f` from `x0`; `f` returns `None` where it is undefined.
pub fn bfgs(f: &mut Objective<'_>, x0: [f64; 3], cfg: &OptimConfig) -> Option<OptimOutcome> {
    let mut f = Counted { f, count: 0 };
    let (mut value, mut grad) = f.eval(&x0)?;
    let mut x = x0;
    let mut h = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut fresh = true;
    let mut trace = vec![TraceEntry { iteration: 0, value, grad_norm: inf_norm(&grad), x }];
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) < cfg.grad_tol;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = -(0..3).map(|j| h[i][j] * grad[j]).sum::<f64>();
        }
        let mut slope = dot(&grad, &d);
        if !(slope < 0.0) {
            h = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            fresh = true;
            d = grad.map(|g| -g);
            slope = dot(&grad, &d);
        }
        let t_max = cfg.max_step / inf_norm(&d).max(f64::MIN_POSITIVE);
        let point = match line_search(&mut f, &x, value, slope, &d, t_max.max(1e-12)) {
            Some(p) => p,
            None if !fresh => {
                h = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
                fresh = true;
                continue;
            }
            None => break,
        };
        let s = d.map(|v| v * point.t);
        let y = [point.grad[0] - grad[0], point.grad[1] - grad[1], point.grad[2] - grad[2]];
        x = axpy(&x, 1.0, &s);
        value = point.value;
        grad = point.grad;
        trace.push(TraceEntry { iteration: iterations, value, grad_norm: inf_norm(&grad), x });
        if inf_norm(&grad) < cfg.grad_tol {
            converged = true;
            break;
        }
        if inf_norm(&s) < cfg.step_tol {
            break;
        }
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h = [[scale, 0.0, 0.0], [0.0, scale, 0.0], [0.0, 0.0, scale]];
                fresh = false;
            }
            let rho = 1.0 / sy;
            let mut hy = [0.0; 3];
            for i in 0..3 {
                hy[i] = (0..3).map(|j| h[i][j] * y[j]).sum();
            }
            let yhy = dot(&y, &hy);
            for i in 0..3 {
                for j in 0..3 {
                    h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
    }
    Some(OptimOutcome { x, value, grad, iterations, evaluations: f.count, converged, trace })
}

/// Central-difference gradient wrapper around a value-only function.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&[f64; 3]) -> Option<f64>,
    x: &[f64; 3],
    step: f64,
) -> Option<[f64; 3]> {
    let mut g = [0.0; 3];
    for i in 0..3 {
        let h = step * x[i].abs().max(1.0);
        let mut up = *x;
        let mut dn = *x;
        up[i] += h;
        dn[i] -= h;
        g[i] = (f(&up)? - f(&dn)?) / (2.0 * h);
    }
    Some(g)
}
