//! Worker attention as a function of completion rank, and the link from
//! attention to per-answer label quality.
//!
//! Attention `t(r)` at rank `r` follows one of three shapes:
//!
//! * Poisson with rate `m = N_w / lambda`, evaluated with Stirling's
//!   approximation of `r!` so that it stays finite for large ranks:
//!   `t(r) = (2 pi r)^(-1/2) e^(-m) (m e / r)^r`.
//! * Gaussian density with mean `m = N_w / mu` and standard deviation `sigma`.
//! * Uniform: `t(r) = 1`.
//!
//! Quality is proportional to attention around the worker's global quality
//! (the amplitude). With `t~(r) = t(r) / max_r t(r)` the curve is
//!
//! ```text
//! q(r) = clamp(amplitude + sensitivity * (t~(r) - mean_r t~), eps, 1 - eps)
//! ```
//!
//! so the unclamped mean over ranks `1..=N_w` is exactly the amplitude, and
//! `sensitivity = 0` (or a uniform shape) gives a flat curve.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

pub const DEFAULT_QUALITY_EPS: f64 = 0.01;

/// Which attention family a fit or simulation uses. `None` ignores ranks
/// entirely (the no-attention variant).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Poisson,
    Gaussian,
    Uniform,
    None,
}

impl AttentionKind {
    pub fn is_rank_dependent(self) -> bool {
        matches!(self, AttentionKind::Poisson | AttentionKind::Gaussian)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Poisson => "poisson",
            AttentionKind::Gaussian => "gaussian",
            AttentionKind::Uniform => "uniform",
            AttentionKind::None => "none",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "poisson" => Ok(AttentionKind::Poisson),
            "gaussian" => Ok(AttentionKind::Gaussian),
            "uniform" => Ok(AttentionKind::Uniform),
            "none" => Ok(AttentionKind::None),
            other => Err(format!("unknown attention kind `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttentionModel {
    Poisson { lambda: f64, n_tasks: usize },
    Gaussian { mu: f64, sigma: f64, n_tasks: usize },
    Uniform { n_tasks: usize },
}

impl AttentionModel {
    pub fn n_tasks(&self) -> usize {
        match *self {
            AttentionModel::Poisson { n_tasks, .. }
            | AttentionModel::Gaussian { n_tasks, .. }
            | AttentionModel::Uniform { n_tasks } => n_tasks,
        }
    }

    /// Rank at which attention is centred (`N_w / lambda` or `N_w / mu`).
    pub fn center(&self) -> Option<f64> {
        match *self {
            AttentionModel::Poisson { lambda, n_tasks } => Some(n_tasks as f64 / lambda),
            AttentionModel::Gaussian { mu, n_tasks, .. } => Some(n_tasks as f64 / mu),
            AttentionModel::Uniform { .. } => None,
        }
    }

    pub fn log_attention_at(&self, rank: usize) -> f64 {
        assert!(rank >= 1, "ranks are 1-based");
        let r = rank as f64;
        match *self {
            AttentionModel::Poisson { lambda, n_tasks } => {
                let m = n_tasks as f64 / lambda;
                stirling_log_pmf(m, r)
            }
            AttentionModel::Gaussian { mu, sigma, n_tasks } => {
                let m = n_tasks as f64 / mu;
                let z = (r - m) / sigma;
                -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
            }
            AttentionModel::Uniform { .. } => 0.0,
        }
    }

    pub fn attention_at(&self, rank: usize) -> f64 {
        self.log_attention_at(rank).exp()
    }

    /// Attention over ranks `1..=N_w` divided by its maximum.
    pub fn relative_attention(&self) -> Vec<f64> {
        let n = self.n_tasks();
        if let AttentionModel::Uniform { .. } = self {
            return vec![1.0; n];
        }
        let logs: Vec<f64> = (1..=n).map(|r| self.log_attention_at(r)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logs.iter().map(|l| (l - max).exp()).collect()
    }

    /// The rank in `1..=N_w` with the largest attention (smallest on ties).
    pub fn mode(&self) -> usize {
        let n = self.n_tasks().max(1);
        let mut best = 1;
        let mut best_val = self.log_attention_at(1);
        for r in 2..=n {
            let v = self.log_attention_at(r);
            if v > best_val {
                best = r;
                best_val = v;
            }
        }
        best
    }
}

/// Stirling-approximated log Poisson pmf at a real-valued rank.
fn stirling_log_pmf(m: f64, r: f64) -> f64 {
    -0.5 * (2.0 * PI * r).ln() - m + r * (1.0 + m.ln() - r.ln())
}

pub fn attention_at(model: &AttentionModel, rank: usize) -> f64 {
    model.attention_at(rank)
}

/// Relative error of the Stirling-approximated Poisson pmf against the exact
/// pmf `m^r e^(-m) / r!`, computed in log space.
pub fn stirling_error(m: f64, rank: usize) -> f64 {
    let r = rank as f64;
    let approx = stirling_log_pmf(m, r);
    let exact = r * m.ln() - m - ln_gamma(r + 1.0);
    (approx - exact).exp_m1().abs()
}

/// Unclamped quality for ranks `1..=N_w`; averages exactly to `amplitude`.
pub fn unclamped_quality_curve(model: &AttentionModel, amplitude: f64, sensitivity: f64) -> Vec<f64> {
    let rel = model.relative_attention();
    if rel.is_empty() {
        return rel;
    }
    let mean = rel.iter().sum::<f64>() / rel.len() as f64;
    rel.iter()
        .map(|t| amplitude + sensitivity * (t - mean))
        .collect()
}

/// Quality at a single rank.
pub fn quality_from_attention(
    model: &AttentionModel,
    amplitude: f64,
    sensitivity: f64,
    rank: usize,
    eps: f64,
) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    let curve = unclamped_quality_curve(model, amplitude, sensitivity);
    let q = curve.get(rank - 1).copied().unwrap_or(amplitude);
    q.clamp(eps, 1.0 - eps)
}

/// Clamped quality over ranks `1..=N_w`.
pub fn quality_curve(
    model: &AttentionModel,
    amplitude: f64,
    sensitivity: f64,
    eps: f64,
) -> QualityCurve {
    QualityCurve {
        points: unclamped_quality_curve(model, amplitude, sensitivity)
            .into_iter()
            .enumerate()
            .map(|(k, q)| (k + 1, q.clamp(eps, 1.0 - eps)))
            .collect(),
    }
}

/// Clamped curve whose mean over ranks `1..=N_w` equals `target`: the shift
/// is found by bisection, so clamping at the peak does not pull the average
/// below the requested global quality. Used to generate answers.
pub fn calibrated_quality_curve(
    model: &AttentionModel,
    target: f64,
    sensitivity: f64,
    eps: f64,
) -> QualityCurve {
    let rel = model.relative_attention();
    if rel.is_empty() {
        return QualityCurve::default();
    }
    let mean_t = rel.iter().sum::<f64>() / rel.len() as f64;
    let target = target.clamp(eps, 1.0 - eps);
    let curve_at = |shift: f64| -> Vec<f64> {
        rel.iter()
            .map(|t| (shift + sensitivity * (t - mean_t)).clamp(eps, 1.0 - eps))
            .collect()
    };
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mut lo, mut hi) = (-1.0 - sensitivity, 2.0 + sensitivity);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_of(&curve_at(mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    QualityCurve {
        points: curve_at(0.5 * (lo + hi))
            .into_iter()
            .enumerate()
            .map(|(k, q)| (k + 1, q))
            .collect(),
    }
}

/// `(rank, quality)` pairs in rank order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityCurve {
    pub points: Vec<(usize, f64)>,
}

impl QualityCurve {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|&(_, q)| q).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }

    /// `max - min`, zero for an empty curve.
    pub fn range(&self) -> f64 {
        if self.points.is_empty() {
            0.0
        } else {
            self.max() - self.min()
        }
    }

    pub fn mean(&self) -> f64 {
        if self.points.is_empty() {
            return f64::NAN;
        }
        self.points.iter().map(|p| p.1).sum::<f64>() / self.points.len() as f64
    }

    /// Nondecreasing up to some interior peak and nonincreasing after it,
    /// with a rise and a fall of at least `min_change` on either side.
    pub fn is_rise_then_fall(&self, min_change: f64) -> bool {
        is_rise_then_fall(&self.values(), min_change)
    }
}

/// See [`QualityCurve::is_rise_then_fall`].
pub fn is_rise_then_fall(values: &[f64], min_change: f64) -> bool {
    if values.len() < 3 {
        return false;
    }
    const TOL: f64 = 1e-12;
    let peak = values
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > values[best] { k } else { best });
    let rises = values[..=peak].windows(2).all(|w| w[1] >= w[0] - TOL);
    let falls = values[peak..].windows(2).all(|w| w[1] <= w[0] + TOL);
    rises
        && falls
        && values[peak] - values[0] >= min_change
        && values[peak] - values[values.len() - 1] >= min_change
}
