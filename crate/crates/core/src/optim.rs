//! Limited-memory BFGS with a strong-Wolfe bracketing line search.
//!
//! Non-finite trial values are treated as overshooting, so the search can
//! back away from numerically inadmissible regions.

use std::collections::VecDeque;

use crate::error::Result;

pub trait Objective {
    /// Value and gradient; a non-finite value marks an inadmissible point.
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iter: u64,
    /// Stop when `|Δf| ≤ tol_obj · max(|f|, 1)`.
    pub tol_obj: f64,
    /// Stop when `max |g_k| ≤ tol_grad`.
    pub tol_grad: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_evals: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        LbfgsSettings {
            memory: 12,
            max_iter: 5000,
            tol_obj: 1e-12,
            tol_grad: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientTolerance,
    ObjectiveTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub iterations: u64,
    pub status: LbfgsStatus,
    /// `(iteration, objective, gradient max-norm)` after each step.
    pub history: Vec<(u64, f64, f64)>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Trial {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

fn trial(obj: &dyn Objective, x: &[f64], d: &[f64], alpha: f64) -> Result<Trial> {
    let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
    let (f, g) = obj.eval(&xt)?;
    let (f, slope) = if f.is_finite() { (f, dot(&g, d)) } else { (f64::INFINITY, f64::NAN) };
    Ok(Trial { alpha, f, slope, x: xt, g })
}

/// Minimizer of the quadratic through `(a, fa)` with slope `da` and
/// `(b, fb)`, kept away from the ends of the interval.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let w = b - a;
    let mut t = 0.5 * (a + b);
    if hi.f.is_finite() && lo.slope.is_finite() {
        let denom = 2.0 * (hi.f - lo.f - lo.slope * w);
        if denom > 0.0 {
            t = a - lo.slope * w * w / denom;
        }
    }
    let (l, u) = if a < b { (a + 0.1 * w, b - 0.1 * w) } else { (b - 0.1 * w, a + 0.1 * w) };
    t.clamp(l, u)
}

fn line_search(
    obj: &dyn Objective,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
    s: &LbfgsSettings,
) -> Result<Option<Trial>> {
    let slope0 = dot(g0, d);
    let armijo = |t: &Trial| t.f.is_finite() && t.f <= f0 + s.c1 * t.alpha * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -s.c2 * slope0;
    let mut prev = Trial { alpha: 0.0, f: f0, slope: slope0, x: x.to_vec(), g: g0.to_vec() };
    let mut alpha = alpha0;
    let mut evals = 0;
    let (mut lo, mut hi);
    loop {
        let t = trial(obj, x, d, alpha)?;
        evals += 1;
        if !armijo(&t) || (prev.alpha > 0.0 && t.f >= prev.f) {
            lo = prev;
            hi = t;
            break;
        }
        if curvature(&t) {
            return Ok(Some(t));
        }
        if t.slope >= 0.0 {
            lo = t;
            hi = prev;
            break;
        }
        if evals >= s.max_line_evals {
            return Ok(Some(t));
        }
        alpha *= 2.0;
        prev = t;
    }
    // zoom
    while evals < s.max_line_evals {
        let alpha = interpolate(&lo, &hi);
        if (alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1e-300) {
            break;
        }
        let t = trial(obj, x, d, alpha)?;
        evals += 1;
        if !armijo(&t) || t.f >= lo.f {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok(Some(t));
            }
            if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = std::mem::replace(&mut lo, t);
            } else {
                lo = t;
            }
        }
    }
    // accept sufficient decrease without curvature as a last resort
    Ok(if lo.alpha > 0.0 && lo.f < f0 { Some(lo) } else { None })
}

pub fn minimize(obj: &dyn Objective, x0: &[f64], s: &LbfgsSettings) -> Result<LbfgsResult> {
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.eval(&x)?;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(s.memory);
    let mut history = Vec::new();
    let mut status = LbfgsStatus::MaxIterations;
    let mut iter = 0;
    while iter < s.max_iter {
        if max_abs(&g) <= s.tol_grad {
            status = LbfgsStatus::GradientTolerance;
            break;
        }
        // two-loop recursion
        let mut q: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (sv, yv, rho) in mem.iter().rev() {
            let a = rho * dot(sv, &q);
            q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let scale = mem.back().map_or(1.0, |(sv, yv, _)| dot(sv, yv) / dot(yv, yv));
        q.iter_mut().for_each(|v| *v *= scale);
        for ((sv, yv, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &q);
            q.iter_mut().zip(sv).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        if !(dot(&d, &g) < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let alpha0 = if mem.is_empty() { (1.0 / max_abs(&g)).min(1.0) } else { 1.0 };
        let Some(t) = line_search(obj, &x, f, &g, &d, alpha0, s)? else {
            if mem.is_empty() {
                status = LbfgsStatus::LineSearchFailed;
                break;
            }
            // retry along steepest descent with fresh memory
            mem.clear();
            continue;
        };
        iter += 1;
        let sv: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&sv, &yv);
        if sy > 1e-12 * dot(&sv, &sv).sqrt() * dot(&yv, &yv).sqrt() {
            if mem.len() == s.memory {
                mem.pop_front();
            }
            mem.push_back((sv, yv, 1.0 / sy));
        }
        let df = (f - t.f).abs();
        x = t.x;
        f = t.f;
        g = t.g;
        history.push((iter, f, max_abs(&g)));
        if max_abs(&g) <= s.tol_grad {
            status = LbfgsStatus::GradientTolerance;
            break;
        }
        if df <= s.tol_obj * f.abs().max(1.0) {
            status = LbfgsStatus::ObjectiveTolerance;
            break;
        }
    }
    Ok(LbfgsResult { x, f, g, iterations: iter, status, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;
    impl Objective for Rosenbrock {
        fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let mut f = 0.0;
            let mut g = vec![0.0; x.len()];
            for i in 0..x.len() - 1 {
                let a = x[i + 1] - x[i] * x[i];
                let b = 1.0 - x[i];
                f += 100.0 * a * a + b * b;
                g[i] += -400.0 * x[i] * a - 2.0 * b;
                g[i + 1] += 200.0 * a;
            }
            Ok((f, g))
        }
    }

    /// Quadratic that is undefined beyond `x_0 > 2`.
    struct Walled;
    impl Objective for Walled {
        fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            if x[0] > 2.0 {
                return Ok((f64::NAN, vec![0.0; 2]));
            }
            Ok(((x[0] - 1.9).powi(2) + 10.0 * x[1] * x[1], vec![2.0 * (x[0] - 1.9), 20.0 * x[1]]))
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(&Rosenbrock, &[-1.2, 1.0, -0.5, 0.8], &LbfgsSettings { tol_obj: 0.0, ..Default::default() })
            .unwrap();
        assert_eq!(r.status, LbfgsStatus::GradientTolerance);
        for v in &r.x {
            assert!((v - 1.0).abs() < 1e-5, "{:?}", r.x);
        }
    }

    #[test]
    fn backs_away_from_inadmissible_region() {
        let r = minimize(&Walled, &[-50.0, 3.0], &LbfgsSettings { tol_obj: 0.0, ..Default::default() }).unwrap();
        assert_eq!(r.status, LbfgsStatus::GradientTolerance);
        assert!((r.x[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let s = LbfgsSettings { max_iter: 3, tol_obj: 0.0, ..Default::default() };
        let r = minimize(&Rosenbrock, &[-1.2, 1.0], &s).unwrap();
        assert_eq!(r.status, LbfgsStatus::MaxIterations);
        assert_eq!(r.iterations, 3);
    }
}
