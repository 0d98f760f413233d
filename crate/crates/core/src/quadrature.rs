//! Gauss–Hermite rules and the probit-product integral
//! `P_y = ∫ N(u | m_y, v_y) Π_{c≠y} Φ((u - m_c) / sqrt(v_c)) du`
//! shared by moment matching, the predictive distribution and the GEM bound.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::{Arc, Mutex, OnceLock};

use statrs::function::erf::erfc;

pub const DEFAULT_POINTS: usize = 32;

/// Standard normal CDF through `erfc` for accurate tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Nodes and weights for `∫ e^{-x²} f(x) dx`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "need at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let pim4 = PI.powf(-0.25);
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        // ascending order
        nodes.reverse();
        weights.reverse();
        GaussHermite { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(z_k, w_k)` such that `E_{z~N(0,1)}[f(z)] ≈ Σ w_k f(z_k)`.
    pub fn standard_normal(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let s = std::f64::consts::SQRT_2;
        let norm = 1.0 / PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (s * x, w * norm))
    }

    /// `E[f(u)]` for `u ~ N(mean, var)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, var: f64, mut f: F) -> f64 {
        let sd = var.sqrt();
        self.standard_normal().map(|(z, w)| w * f(mean + sd * z)).sum()
    }
}

/// Process-wide cache of rules keyed by node count.
pub fn rule(n: usize) -> Arc<GaussHermite> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(GaussHermite::new(n)))
        .clone()
}

/// Gauss–Legendre 8-point rule on [-1, 1].
const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_27),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_361_96),
    (0.183_434_642_495_649_8, 0.362_683_783_378_361_96),
    (0.525_532_409_916_329, 0.313_706_645_877_887_27),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// Half-width (in standard deviations) of the composite fallback rule.
const COMPOSITE_SPAN: f64 = 10.0;

/// Integrates probit products. Gauss–Hermite is used while the integration
/// variable is no wider than twice the sharpest competitor's variance;
/// otherwise the competitor's probit acts like a step relative to the
/// Hermite node spacing and a composite Gauss–Legendre rule with panels
/// clustered around each sharp step takes over.
#[derive(Clone, Debug)]
pub struct ProbitIntegrator {
    base: usize,
}

impl ProbitIntegrator {
    pub fn new(points: usize) -> Self {
        ProbitIntegrator { base: points.max(2) }
    }

    pub fn points(&self) -> usize {
        self.base
    }

    /// `(z, w)` pairs with `E_{z~N(0,1)}[f] ≈ Σ w f(z)` for integrating over
    /// class `y`.
    pub fn nodes_for(&self, y: usize, means: &[f64], vars: &[f64]) -> Vec<(f64, f64)> {
        let vy = vars[y];
        let sharp = vars
            .iter()
            .enumerate()
            .any(|(c, &v)| c != y && 2.0 * v < vy);
        if !sharp {
            return rule(self.base).standard_normal().collect();
        }
        let sy = vy.sqrt();
        let mut cuts = vec![-COMPOSITE_SPAN, COMPOSITE_SPAN];
        for (c, &v) in vars.iter().enumerate() {
            if c == y || 2.0 * v >= vy {
                continue;
            }
            let center = (means[c] - means[y]) / sy;
            let width = v.sqrt() / sy;
            for t in [-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0] {
                let z = center + t * width;
                if z > -COMPOSITE_SPAN && z < COMPOSITE_SPAN {
                    cuts.push(z);
                }
            }
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut out = Vec::with_capacity(cuts.len() * 16);
        for pair in cuts.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let pieces = ((hi - lo) / 0.5).ceil().max(1.0) as usize;
            let h = (hi - lo) / pieces as f64;
            for p in 0..pieces {
                let a = lo + p as f64 * h;
                let mid = a + 0.5 * h;
                for &(x, w) in &GL8 {
                    let z = mid + 0.5 * h * x;
                    out.push((z, 0.5 * h * w * norm_pdf(z)));
                }
            }
        }
        out
    }

    /// `P_y` for every class `y`.
    pub fn class_probabilities(&self, means: &[f64], vars: &[f64]) -> Vec<f64> {
        let c = means.len();
        let sds: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
        (0..c)
            .map(|y| {
                self.nodes_for(y, means, vars)
                    .into_iter()
                    .map(|(z, w)| {
                        let u = means[y] + sds[y] * z;
                        let mut prod = 1.0;
                        for k in 0..c {
                            if k != y {
                                prod *= norm_cdf((u - means[k]) / sds[k]);
                            }
                        }
                        w * prod
                    })
                    .sum()
            })
            .collect()
    }

    /// `P_y` together with its partial derivatives with respect to every
    /// class mean and variance.
    pub fn class_probabilities_with_grad(&self, means: &[f64], vars: &[f64]) -> Vec<ProbitTerm> {
        let c = means.len();
        let sds: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
        let mut out = Vec::with_capacity(c);
        let mut a = vec![0.0; c];
        let mut cdf = vec![0.0; c];
        let mut pdf = vec![0.0; c];
        for y in 0..c {
            let nodes = self.nodes_for(y, means, vars);
            let mut term = ProbitTerm {
                value: 0.0,
                d_mean: vec![0.0; c],
                d_var: vec![0.0; c],
            };
            for (z, w) in nodes {
                let u = means[y] + sds[y] * z;
                for k in 0..c {
                    if k != y {
                        a[k] = (u - means[k]) / sds[k];
                        cdf[k] = norm_cdf(a[k]);
                        pdf[k] = norm_pdf(a[k]);
                    }
                }
                let mut full = 1.0;
                for k in 0..c {
                    if k != y {
                        full *= cdf[k];
                    }
                }
                term.value += w * full;
                for k in 0..c {
                    if k == y {
                        continue;
                    }
                    // product over classes other than y and k
                    let mut rest = 1.0;
                    for j in 0..c {
                        if j != y && j != k {
                            rest *= cdf[j];
                        }
                    }
                    let g = w * pdf[k] * rest;
                    term.d_mean[k] -= g / sds[k];
                    term.d_var[k] -= g * a[k] / (2.0 * vars[k]);
                    term.d_mean[y] += g / sds[k];
                    term.d_var[y] += g * z / (2.0 * sds[y] * sds[k]);
                }
            }
            out.push(term);
        }
        out
    }
}

impl Default for ProbitIntegrator {
    fn default() -> Self {
        ProbitIntegrator::new(DEFAULT_POINTS)
    }
}

/// `P_y` and its gradient.
#[derive(Clone, Debug)]
pub struct ProbitTerm {
    pub value: f64,
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
}
