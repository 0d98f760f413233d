//! Limited-memory BFGS with a backtracking Armijo line search, plus the
//! box-to-unconstrained transforms used by the M-step.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iters: usize,
    /// Stop once the gradient's infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop once an iteration improves the objective by less than this.
    pub f_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            max_iters: 100,
            grad_tol: 1e-6,
            f_tol: 1e-10,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientConverged,
    ObjectiveConverged,
    MaxIters,
    /// No step along the search direction decreased the objective.
    LineSearchFailure,
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iters: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizes `f`. `grad` returns the gradient at a point; non-finite
/// objective values are treated as `+inf` by the line search.
pub fn minimize<F, G>(x0: &[f64], mut f: F, mut grad: G, cfg: &LbfgsConfig) -> LbfgsOutcome
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut g = grad(&x);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut iters = 0;
    if n == 0 || inf_norm(&g) < cfg.grad_tol {
        return LbfgsOutcome {
            x,
            f: fx,
            iters,
            status: LbfgsStatus::GradientConverged,
        };
    }
    loop {
        if iters >= cfg.max_iters {
            return LbfgsOutcome {
                x,
                f: fx,
                iters,
                status: LbfgsStatus::MaxIters,
            };
        }
        iters += 1;

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / inf_norm(&g).max(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + cfg.armijo * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            return LbfgsOutcome {
                x,
                f: fx,
                iters,
                status: LbfgsStatus::LineSearchFailure,
            };
        };
        let g_new = grad(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if mem.len() == cfg.history {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        if inf_norm(&g) < cfg.grad_tol {
            return LbfgsOutcome {
                x,
                f: fx,
                iters,
                status: LbfgsStatus::GradientConverged,
            };
        }
        if improvement < cfg.f_tol {
            return LbfgsOutcome {
                x,
                f: fx,
                iters,
                status: LbfgsStatus::ObjectiveConverged,
            };
        }
    }
}

/// Central finite-difference gradient.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Maps an open interval `(lo, hi)` to the real line and back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo < hi, "empty interval ({lo}, {hi})");
        Interval { lo, hi }
    }

    /// Scaled logit. Values on or outside the boundary are pulled inside by
    /// a relative margin of 1e-9.
    pub fn to_free(&self, v: f64) -> f64 {
        let p = ((v - self.lo) / (self.hi - self.lo)).clamp(1e-9, 1.0 - 1e-9);
        (p / (1.0 - p)).ln()
    }

    pub fn from_free(&self, u: f64) -> f64 {
        let p = if u >= 0.0 {
            1.0 / (1.0 + (-u).exp())
        } else {
            let e = u.exp();
            e / (1.0 + e)
        };
        self.lo + (self.hi - self.lo) * p
    }
}
