//! Reference aggregators: majority vote, Dawid–Skene, GLAD, AWMV and GTIC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AggregationResult, Dataset, Diagnostics, Label};
use crate::error::{Error, Result};
use crate::optim::{minimize, LbfgsConfig};

/// Hard cap on EM iterations for every iterative baseline.
pub const EM_MAX_ITERS: usize = 50;
pub const DS_SMOOTHING: f64 = 0.01;

fn one_shot(iterations: usize) -> Diagnostics {
    Diagnostics {
        iterations,
        objective: None,
        converged: true,
    }
}

/// Vote counts per class; ties go to the smallest class.
pub fn majority_vote(dataset: &Dataset) -> AggregationResult {
    let c = dataset.n_classes();
    let weights = (0..dataset.n_tasks())
        .map(|i| {
            let mut counts = vec![0.0; c];
            for (_, a) in dataset.task_answers(i) {
                counts[a as usize - 1] += 1.0;
            }
            counts
        })
        .collect();
    AggregationResult::from_weights(weights, one_shot(0))
}

/// Per-worker `C x C` confusion matrix; row = true class, column = answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub Vec<Vec<f64>>);

impl ConfusionMatrix {
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.0
    }
}

pub fn dawid_skene(dataset: &Dataset, max_iters: usize, tol: f64) -> (AggregationResult, Vec<ConfusionMatrix>) {
    dawid_skene_with(dataset, max_iters, tol, DS_SMOOTHING)
}

/// Dawid–Skene EM from a majority-vote start, with additive smoothing on the
/// confusion counts and class prior. `max_iters` is capped at 50.
pub fn dawid_skene_with(
    dataset: &Dataset,
    max_iters: usize,
    tol: f64,
    smoothing: f64,
) -> (AggregationResult, Vec<ConfusionMatrix>) {
    let (w_count, c) = (dataset.n_workers(), dataset.n_classes());
    let max_iters = max_iters.min(EM_MAX_ITERS);
    let mut post = majority_vote(dataset).label_probs;
    let mut confusion = vec![vec![vec![1.0 / c as f64; c]; c]; w_count];
    let mut prior = vec![1.0 / c as f64; c];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        // M-step
        let mut counts = vec![vec![vec![smoothing; c]; c]; w_count];
        let mut class_mass = vec![smoothing; c];
        for (i, p) in post.iter().enumerate() {
            for (k, &pk) in p.iter().enumerate() {
                class_mass[k] += pk;
            }
            for (w, a) in dataset.task_answers(i) {
                for (k, &pk) in p.iter().enumerate() {
                    counts[w][k][a as usize - 1] += pk;
                }
            }
        }
        let total: f64 = class_mass.iter().sum();
        prior = class_mass.iter().map(|m| m / total).collect();
        for (w, rows) in counts.iter().enumerate() {
            for (k, row) in rows.iter().enumerate() {
                let s: f64 = row.iter().sum();
                confusion[w][k] = if s > 0.0 {
                    row.iter().map(|v| v / s).collect()
                } else {
                    vec![1.0 / c as f64; c]
                };
            }
        }
        // E-step
        let mut change = 0.0f64;
        for (i, p) in post.iter_mut().enumerate() {
            let mut logp: Vec<f64> = prior.iter().map(|v| v.ln()).collect();
            for (w, a) in dataset.task_answers(i) {
                for (k, lp) in logp.iter_mut().enumerate() {
                    *lp += confusion[w][k][a as usize - 1].ln();
                }
            }
            let next = softmax(&logp);
            for (old, new) in p.iter().zip(&next) {
                change = change.max((old - new).abs());
            }
            *p = next;
        }
        if change < tol {
            converged = true;
            break;
        }
    }
    let diag = Diagnostics {
        iterations,
        objective: None,
        converged,
    };
    (
        AggregationResult::from_weights(post, diag),
        confusion.into_iter().map(ConfusionMatrix).collect(),
    )
}

/// Normalized `exp(logp)`. Rows that are all `-inf` become uniform.
fn softmax(logp: &[f64]) -> Vec<f64> {
    let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / logp.len() as f64; logp.len()];
    }
    let e: Vec<f64> = logp.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GladParams {
    /// Averaged over the one-vs-rest problems when `C > 2`.
    pub ability: Vec<f64>,
    /// `1 / beta_i`, averaged the same way.
    pub difficulty: Vec<f64>,
    pub label_posterior: Vec<Vec<f64>>,
}

struct BinaryGlad {
    alpha: Vec<f64>,
    log_beta: Vec<f64>,
    /// Posterior probability that each task is positive.
    p: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GLAD on binary labels: `votes[i]` lists `(worker, positive)` pairs.
/// Priors `alpha ~ N(1, 1)` and `log beta ~ N(0, 1)` keep the M-step bounded.
fn binary_glad(votes: &[Vec<(usize, bool)>], n_workers: usize, init: &[f64], max_iters: usize) -> BinaryGlad {
    let n = votes.len();
    let mut alpha = vec![1.0; n_workers];
    let mut log_beta = vec![0.0; n];
    let mut p = init.to_vec();
    let mut prior = (p.iter().sum::<f64>() / n.max(1) as f64).clamp(1e-3, 1.0 - 1e-3);
    let mut iterations = 0;
    let mut converged = false;
    let cfg = LbfgsConfig {
        max_iters: 25,
        ..LbfgsConfig::default()
    };
    while iterations < max_iters {
        iterations += 1;
        // M-step over (alpha, log beta) given p
        let objective = |x: &[f64]| -> (f64, Vec<f64>) {
            let (a, lb) = x.split_at(n_workers);
            let mut f = 0.0;
            let mut g = vec![0.0; x.len()];
            for (w, av) in a.iter().enumerate() {
                f -= 0.5 * (av - 1.0).powi(2);
                g[w] -= av - 1.0;
            }
            for (i, task) in votes.iter().enumerate() {
                f -= 0.5 * lb[i].powi(2);
                g[n_workers + i] -= lb[i];
                let beta = lb[i].exp();
                for &(w, pos) in task {
                    let m = if pos { p[i] } else { 1.0 - p[i] };
                    let z = a[w] * beta;
                    f += m * ln_sig(z) + (1.0 - m) * ln_sig(-z);
                    let r = m - sigmoid(z);
                    g[w] += r * beta;
                    g[n_workers + i] += r * z;
                }
            }
            (-f, g.into_iter().map(|v| -v).collect())
        };
        let x0: Vec<f64> = alpha.iter().chain(&log_beta).copied().collect();
        let out = minimize(&x0, |x| objective(x).0, |x| objective(x).1, &cfg);
        alpha.copy_from_slice(&out.x[..n_workers]);
        log_beta.copy_from_slice(&out.x[n_workers..]);
        // E-step
        let mut change = 0.0f64;
        for (i, task) in votes.iter().enumerate() {
            let beta = log_beta[i].exp();
            let (mut l1, mut l0) = (prior.ln(), (1.0 - prior).ln());
            for &(w, pos) in task {
                let z = alpha[w] * beta;
                if pos {
                    l1 += ln_sig(z);
                    l0 += ln_sig(-z);
                } else {
                    l1 += ln_sig(-z);
                    l0 += ln_sig(z);
                }
            }
            let next = sigmoid(l1 - l0);
            change = change.max((next - p[i]).abs());
            p[i] = next;
        }
        prior = (p.iter().sum::<f64>() / n.max(1) as f64).clamp(1e-3, 1.0 - 1e-3);
        if change < 1e-6 {
            converged = true;
            break;
        }
    }
    BinaryGlad {
        alpha,
        log_beta,
        p,
        iterations,
        converged,
    }
}

/// `ln sigmoid(x)`, stable for large `|x|`.
fn ln_sig(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// GLAD with one-vs-rest lifting for `C > 2`: one binary problem per class,
/// the positive posteriors renormalized across classes.
pub fn glad(dataset: &Dataset, max_iters: usize) -> (AggregationResult, GladParams) {
    let (n, w_count, c) = (dataset.n_tasks(), dataset.n_workers(), dataset.n_classes());
    let max_iters = max_iters.min(EM_MAX_ITERS);
    let mv = majority_vote(dataset).label_probs;
    let positives: Vec<Label> = if c == 2 { vec![1] } else { (1..=c as Label).collect() };
    let mut runs = Vec::new();
    for &k in &positives {
        let votes: Vec<Vec<(usize, bool)>> = (0..n)
            .map(|i| dataset.task_answers(i).map(|(w, a)| (w, a == k)).collect())
            .collect();
        let init: Vec<f64> = mv.iter().map(|row| row[k as usize - 1].clamp(0.01, 0.99)).collect();
        runs.push(binary_glad(&votes, w_count, &init, max_iters));
    }
    let weights: Vec<Vec<f64>> = if c == 2 {
        runs[0].p.iter().map(|&p| vec![p, 1.0 - p]).collect()
    } else {
        (0..n).map(|i| runs.iter().map(|r| r.p[i]).collect()).collect()
    };
    let k = runs.len() as f64;
    let ability = (0..w_count).map(|w| runs.iter().map(|r| r.alpha[w]).sum::<f64>() / k).collect();
    let difficulty = (0..n)
        .map(|i| runs.iter().map(|r| (-r.log_beta[i]).exp()).sum::<f64>() / k)
        .collect();
    let diag = Diagnostics {
        iterations: runs.iter().map(|r| r.iterations).max().unwrap_or(0),
        objective: None,
        converged: runs.iter().all(|r| r.converged),
    };
    let result = AggregationResult::from_weights(weights, diag);
    let params = GladParams {
        ability,
        difficulty,
        label_posterior: result.label_probs.clone(),
    };
    (result, params)
}

/// Bias-compensating weighted majority vote for binary tasks. Class 2 is
/// the positive class. With positive-label frequency `b` over all answers,
/// positive votes weigh `1 - b` and negative votes weigh `b`, so a crowd that
/// over-reports positives needs a larger margin to win a task.
pub fn awmv(dataset: &Dataset) -> Result<AggregationResult> {
    if dataset.n_classes() != 2 {
        return Err(Error::NotApplicable(format!(
            "AWMV needs binary labels, got {} classes",
            dataset.n_classes()
        )));
    }
    let (mut pos, mut all) = (0usize, 0usize);
    for i in 0..dataset.n_tasks() {
        for (_, a) in dataset.task_answers(i) {
            all += 1;
            pos += usize::from(a == 2);
        }
    }
    let bias = if all == 0 { 0.5 } else { pos as f64 / all as f64 };
    let weights = (0..dataset.n_tasks())
        .map(|i| {
            let mut v = [0.0; 2];
            for (_, a) in dataset.task_answers(i) {
                if a == 2 {
                    v[1] += 1.0 - bias;
                } else {
                    v[0] += bias;
                }
            }
            v.to_vec()
        })
        .collect();
    Ok(AggregationResult::from_weights(weights, one_shot(0)))
}

pub const KMEANS_ITERS: usize = 100;
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeans {
    // k-means++ seeding
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (j, dj) in d.iter().enumerate() {
                if u < *dj {
                    pick = j;
                    break;
                }
                u -= dj;
            }
            pick
        };
        centers.push(points[next].clone());
    }
    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_ITERS {
        let mut moved = false;
        for (p, slot) in points.iter().zip(assignment.iter_mut()) {
            let j = nearest(p, &centers).0;
            if *slot != j {
                *slot = j;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let inertia = points.iter().zip(&assignment).map(|(p, &j)| sq_dist(p, &centers[j])).sum();
    KMeans {
        centers,
        assignment,
        inertia,
    }
}

/// k-means++ with restarts; keeps the lowest inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> KMeans {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = k.clamp(1, points.len().max(1));
    if points.is_empty() {
        return KMeans {
            centers: Vec::new(),
            assignment: Vec::new(),
            inertia: 0.0,
        };
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

/// Clusters tasks by their vote-fraction vectors (`K = C`) and labels each
/// cluster with the most common majority-vote label among its members.
pub fn gtic(dataset: &Dataset, seed: u64) -> AggregationResult {
    let c = dataset.n_classes();
    let mv = majority_vote(dataset);
    let points: Vec<Vec<f64>> = mv.label_probs.clone();
    let km = kmeans(&points, c, KMEANS_RESTARTS, seed);
    let mut votes = vec![vec![0usize; c]; km.centers.len()];
    for (i, &j) in km.assignment.iter().enumerate() {
        votes[j][mv.labels[i] as usize - 1] += 1;
    }
    let cluster_label: Vec<usize> = votes
        .iter()
        .map(|v| {
            let mut best = 0;
            for (k, &n) in v.iter().enumerate() {
                if n > v[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let weights = km
        .assignment
        .iter()
        .map(|&j| {
            let mut row = vec![0.0; c];
            row[cluster_label[j]] = 1.0;
            row
        })
        .collect();
    AggregationResult::from_weights(weights, one_shot(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn dataset(rows: &[&[Label]], c: usize) -> Dataset {
        let n = rows.len();
        let w = rows[0].len();
        let answers = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Dataset::new(DMatrix::zeros(n, 1), answers, w, c, vec![None; w], None).unwrap()
    }

    #[test]
    fn majority_vote_examples() {
        let d = dataset(&[&[1, 1, 2], &[1, 2, 0]], 2);
        let r = majority_vote(&d);
        assert_eq!(r.labels, vec![1, 1]);
        assert!((r.label_probs[0][0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.label_probs[1], vec![0.5, 0.5]);
    }

    #[test]
    fn ds_task_without_answers_gets_the_class_prior() {
        let d = dataset(&[&[1, 1], &[1, 1], &[2, 2], &[0, 0]], 2);
        let (r, conf) = dawid_skene(&d, 50, 1e-8);
        let p = &r.label_probs[3];
        assert!(p[0] > p[1] && (p[0] - 2.0 / 3.0).abs() < 0.05);
        for m in conf {
            for row in m.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn glad_symmetric_workers_get_equal_abilities() {
        let d = dataset(&[&[1, 1, 1], &[2, 2, 2], &[1, 1, 1], &[2, 2, 2]], 2);
        let (r, p) = glad(&d, 50);
        assert_eq!(r.labels, vec![1, 2, 1, 2]);
        assert!(p.ability.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-6));
        assert!(p.difficulty.iter().all(|&b| b > 0.0));
    }

    #[test]
    fn glad_single_vote_wins() {
        let d = dataset(&[&[2]], 3);
        let (r, _) = glad(&d, 50);
        assert_eq!(r.labels, vec![2]);
    }

    #[test]
    fn awmv_rejects_multiclass_and_matches_mv_without_bias() {
        assert!(matches!(awmv(&dataset(&[&[1, 2]], 4)), Err(Error::NotApplicable(_))));
        let d = dataset(&[&[1, 1, 2], &[2, 2, 1], &[1, 2, 0], &[2, 1, 0]], 2);
        assert_eq!(awmv(&d).unwrap().labels, majority_vote(&d).labels);
    }

    #[test]
    fn gtic_separates_one_hot_votes() {
        let d = dataset(&[&[1, 1], &[2, 2], &[3, 3], &[1, 1], &[3, 3]], 3);
        assert_eq!(gtic(&d, 7).labels, vec![1, 2, 3, 1, 3]);
        let same = dataset(&[&[1, 2], &[1, 2], &[1, 2]], 2);
        let r = gtic(&same, 7);
        assert!(r.labels.iter().all(|&l| l == r.labels[0]));
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, (i % 3) as f64]).collect();
        assert_eq!(kmeans(&pts, 3, 5, 11), kmeans(&pts, 3, 5, 11));
    }
}
