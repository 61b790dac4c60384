//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative band around `f(0)` inside which values count as equal.
pub const APPROX_WOLFE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    /// History length `m`.
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop once `max |grad| <= grad_tol`.
    pub grad_tol: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iter: 1000,
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-10,
            max_line_search: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradTol,
    MaxIter,
    /// Neither the Wolfe search nor backtracking found a decrease.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub value: f64,
    pub grad_inf: f64,
    pub step: f64,
    pub evaluations: usize,
    /// Step came from the steepest-descent fallback.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    /// Accepted steps.
    pub iterations: usize,
    pub evaluations: usize,
    /// Initial point followed by every accepted step.
    pub trajectory: Vec<StepRecord>,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

struct Trial {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, kept
/// inside the interval away from its ends.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let guard = 0.1 * (hi - lo);
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let bisect = 0.5 * (a + b);
    if !disc.is_finite() || disc < 0.0 {
        return bisect;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() && t >= lo + guard && t <= hi - guard {
        t
    } else {
        bisect
    }
}

/// Minimizes `objective` from `x0`. The objective returns the value and
/// gradient; a non-finite value at a trial point counts as a failed trial.
pub fn lbfgs_minimize<F>(objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    lbfgs_minimize_observed(objective, x0, cfg, |_, _| {})
}

/// As [`lbfgs_minimize`], calling `observer(iteration, x)` after every
/// accepted step.
pub fn lbfgs_minimize_observed<F, O>(
    mut objective: F,
    x0: &[f64],
    cfg: &LbfgsConfig,
    mut observer: O,
) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    O: FnMut(usize, &[f64]),
{
    if cfg.history == 0 || !(0.0 < cfg.c1 && cfg.c1 < cfg.c2 && cfg.c2 < 1.0) {
        return Err(Error::Config(
            "L-BFGS needs history >= 1 and 0 < c1 < c2 < 1".into(),
        ));
    }
    let evaluations = std::cell::Cell::new(0usize);
    let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        evaluations.set(evaluations.get() + 1);
        let (f, g) = objective(x)?;
        if g.len() != x.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries for {} variables",
                g.len(),
                x.len()
            )));
        }
        Ok((f, g))
    };
    let mut x = x0.to_vec();
    let (mut f, mut g) = eval(&x)?;
    if !f.is_finite() {
        return Err(Error::NonFinite(format!("objective at the initial point is {f}")));
    }
    let mut trajectory = vec![StepRecord {
        iter: 0,
        value: f,
        grad_inf: inf_norm(&g),
        step: 0.0,
        evaluations: 1,
        fallback: false,
    }];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut termination = Termination::MaxIter;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        if inf_norm(&g) <= cfg.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        // two-loop recursion
        let mut q: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = memory
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or(1.0);
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) {
            memory.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &d);
        }
        let alpha0 = if memory.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let before = evaluations.get();
        let mut accepted = wolfe_search(&mut eval, &x, f, dphi0, &d, alpha0, cfg)?;
        let mut fallback = false;
        if accepted.is_none() {
            memory.clear();
            fallback = true;
            let sd: Vec<f64> = g.iter().map(|v| -v).collect();
            accepted = backtrack(&mut eval, &x, f, &g, &sd, cfg)?;
        }
        let Some(trial) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if memory.len() == cfg.history {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        x = trial.x;
        f = trial.f;
        g = trial.g;
        iterations += 1;
        observer(iterations, &x);
        trajectory.push(StepRecord {
            iter: iterations,
            value: f,
            grad_inf: inf_norm(&g),
            step: trial.alpha,
            evaluations: evaluations.get() - before,
            fallback,
        });
    }
    if iterations == cfg.max_iter && inf_norm(&g) <= cfg.grad_tol {
        termination = Termination::GradTol;
    }
    Ok(LbfgsResult {
        x,
        value: f,
        grad: g,
        iterations,
        evaluations: evaluations.get(),
        trajectory,
        termination,
    })
}

fn trial<E>(eval: &mut E, x: &[f64], d: &[f64], alpha: f64) -> Result<Trial>
where
    E: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let xa = axpy(x, alpha, d);
    let (f, g) = eval(&xa)?;
    let (f, dphi) = if f.is_finite() {
        (f, dot(&g, d))
    } else {
        (f64::INFINITY, f64::NAN)
    };
    Ok(Trial {
        alpha,
        x: xa,
        f,
        g,
        dphi,
    })
}

/// Armijo condition, or near convergence where function differences drop
/// below rounding, the derivative form `phi'(a) <= (2 c1 - 1) phi'(0)` of the
/// approximate Wolfe conditions with the value within rounding of `f0`.
fn sufficient_decrease(t: &Trial, f0: f64, dphi0: f64, cfg: &LbfgsConfig) -> bool {
    if t.f <= f0 + cfg.c1 * t.alpha * dphi0 {
        return true;
    }
    let rounding = APPROX_WOLFE_EPS * f0.abs().max(1e-300);
    (t.f - f0).abs() <= rounding && t.dphi <= (2.0 * cfg.c1 - 1.0) * dphi0
}

fn wolfe_search<E>(
    eval: &mut E,
    x: &[f64],
    f0: f64,
    dphi0: f64,
    d: &[f64],
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<Trial>>
where
    E: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let armijo = |t: &Trial| sufficient_decrease(t, f0, dphi0, cfg);
    let curvature = |t: &Trial| t.dphi.abs() <= -cfg.c2 * dphi0;
    let mut prev = (0.0, f0, dphi0);
    let mut alpha = alpha0;
    let mut budget = cfg.max_line_search;
    let mut first = true;
    while budget > 0 {
        budget -= 1;
        let t = trial(eval, x, d, alpha)?;
        if !t.f.is_finite() {
            // overshoot into an invalid region: shrink toward the last good point
            alpha = prev.0 + 0.5 * (alpha - prev.0);
            continue;
        }
        if !armijo(&t) || (!first && t.f >= prev.1) {
            return zoom(eval, x, f0, dphi0, d, prev, (t.alpha, t.f, t.dphi), budget, cfg);
        }
        if curvature(&t) {
            return Ok(Some(t));
        }
        if t.dphi >= 0.0 {
            return zoom(eval, x, f0, dphi0, d, (t.alpha, t.f, t.dphi), prev, budget, cfg);
        }
        prev = (t.alpha, t.f, t.dphi);
        alpha *= 2.0;
        first = false;
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    eval: &mut E,
    x: &[f64],
    f0: f64,
    dphi0: f64,
    d: &[f64],
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    mut budget: usize,
    cfg: &LbfgsConfig,
) -> Result<Option<Trial>>
where
    E: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut best: Option<Trial> = None;
    while budget > 0 {
        budget -= 1;
        let alpha = if hi.1.is_finite() && hi.2.is_finite() {
            cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2)
        } else {
            0.5 * (lo.0 + hi.0)
        };
        if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-300) {
            break;
        }
        let t = trial(eval, x, d, alpha)?;
        if !t.f.is_finite() || !sufficient_decrease(&t, f0, dphi0, cfg) || t.f > lo.1 {
            hi = (t.alpha, t.f, t.dphi);
            continue;
        }
        if t.dphi.abs() <= -cfg.c2 * dphi0 {
            return Ok(Some(t));
        }
        if t.dphi * (hi.0 - lo.0) >= 0.0 {
            hi = lo;
        }
        lo = (t.alpha, t.f, t.dphi);
        best = Some(t);
    }
    // a sufficient-decrease point without the curvature condition is still a
    // valid descent step; only report failure when none was found
    Ok(best.filter(|t| t.f < f0))
}

fn backtrack<E>(
    eval: &mut E,
    x: &[f64],
    f0: f64,
    g: &[f64],
    d: &[f64],
    cfg: &LbfgsConfig,
) -> Result<Option<Trial>>
where
    E: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dphi0 = dot(g, d);
    let mut alpha = (1.0 / inf_norm(g)).min(1.0);
    for _ in 0..60 {
        let t = trial(eval, x, d, alpha)?;
        if t.f.is_finite() && t.f <= f0 + cfg.c1 * alpha * dphi0 && t.f < f0 {
            return Ok(Some(t));
        }
        alpha *= 0.5;
    }
    Ok(None)
}
