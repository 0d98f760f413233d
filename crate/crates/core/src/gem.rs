//! Generalized EM around EP.
//!
//! The E-step runs EP under the current per-answer qualities. The M-step
//! improves the expected log-likelihood
//!
//! ```text
//! sum_i sum_y P_iy log[(1 - theta) w_i(y) + theta / C * sum_y' w_i(y')]
//! ```
//!
//! where `P_iy` is the posterior probability that class `y` has the largest
//! score for task `i`. Per-answer qualities are tied to a handful of
//! per-worker parameters through the attention curve, and each worker is
//! either flat (one amplitude) or attentive (amplitude, sensitivity and
//! attention shape). Switching a worker to attentive costs a fixed number of
//! nats, which keeps noise from being fitted as an attention bump.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::attention::{quality_curve, AttentionKind, AttentionModel, QualityCurve, DEFAULT_QUALITY_EPS};
use crate::baselines::majority_vote;
use crate::data::{infer_order, AggregationResult, Dataset, Diagnostics, Label, WorkerOrder};
use crate::ep::{ep_run, EpConfig, PosteriorApprox};
use crate::error::{Error, Result};
use crate::kernels::{build_gram_escalating, ClassGrams, Kernel};
use crate::optim::{central_difference, minimize, Interval, LbfgsConfig};

/// Nats an attentive worker must gain over its best flat fit.
pub const DEFAULT_ATTENTION_PENALTY: f64 = 5.0;
/// Workers with fewer answers are always flat.
pub const MIN_TASKS_FOR_ATTENTION: usize = 5;
const MAX_SENSITIVITY: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemConfig {
    pub attention: AttentionKind,
    pub max_iters: usize,
    pub tol: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Also fit the Beta prior over the outlier rate.
    pub optimize_prior: bool,
    pub eps: f64,
    pub attention_penalty: f64,
    pub fd_step: f64,
    pub ep: EpConfig,
    pub lbfgs: LbfgsConfig,
}

impl GemConfig {
    pub fn new(attention: AttentionKind) -> Self {
        GemConfig {
            attention,
            max_iters: 50,
            tol: 1e-4,
            alpha: 2.0,
            beta: 9.0,
            optimize_prior: false,
            eps: DEFAULT_QUALITY_EPS,
            attention_penalty: DEFAULT_ATTENTION_PENALTY,
            fd_step: 1e-5,
            ep: EpConfig::default(),
            lbfgs: LbfgsConfig {
                max_iters: 50,
                ..LbfgsConfig::default()
            },
        }
    }
}

impl Default for GemConfig {
    fn default() -> Self {
        GemConfig::new(AttentionKind::Poisson)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerParams {
    /// Mean of the unclamped quality curve.
    pub amplitude: f64,
    /// Quality follows attention; the curve is flat otherwise.
    pub attentive: bool,
    pub sensitivity: f64,
    /// `lambda` for Poisson attention, `mu` for Gaussian.
    pub location: f64,
    pub sigma: f64,
    pub n_tasks: usize,
    /// Improvement of the best attentive fit over the best flat fit in the
    /// last M-step, before the switching penalty.
    #[serde(default)]
    pub attention_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: AttentionKind,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub workers: Vec<WorkerParams>,
}

impl ModelParams {
    /// Amplitudes from agreement with majority vote; every worker starts flat
    /// with `lambda = mu = 2` and `sigma = N_w / 6`.
    pub fn init(dataset: &Dataset, orders: &[WorkerOrder], config: &GemConfig) -> Self {
        let mv = majority_vote(dataset).labels;
        let workers = orders
            .iter()
            .enumerate()
            .map(|(w, order)| {
                let n = order.len();
                let agree = order.order.iter().filter(|&&i| dataset.answer(i, w) == mv[i]).count();
                let amplitude = if n == 0 { 0.5 } else { (agree as f64 / n as f64).clamp(0.02, 0.98) };
                WorkerParams {
                    amplitude,
                    attentive: false,
                    sensitivity: 0.1,
                    location: 2.0f64.min(n.max(2) as f64 * 0.5),
                    sigma: (n as f64 / 6.0).max(1.0),
                    n_tasks: n,
                    attention_gain: None,
                }
            })
            .collect();
        ModelParams {
            kind: config.attention,
            alpha: config.alpha,
            beta: config.beta,
            eps: config.eps,
            workers,
        }
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn attention_model(&self, worker: usize) -> AttentionModel {
        attention_model(self.kind, &self.workers[worker])
    }

    pub fn quality_curve(&self, worker: usize) -> QualityCurve {
        curve_of(self.kind, &self.workers[worker], self.eps)
    }

    /// `N x W` matrix of per-answer qualities; unanswered cells hold the
    /// worker's amplitude.
    pub fn qualities(&self, dataset: &Dataset, orders: &[WorkerOrder]) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(dataset.n_tasks(), dataset.n_workers());
        for (w, order) in orders.iter().enumerate() {
            q.column_mut(w).fill(self.workers[w].amplitude.clamp(self.eps, 1.0 - self.eps));
            let curve = self.quality_curve(w);
            for (task, rank) in order.ranked() {
                q[(task, w)] = curve.points[rank - 1].1;
            }
        }
        q
    }

    pub fn n_attentive(&self) -> usize {
        self.workers.iter().filter(|w| w.attentive).count()
    }
}

fn attention_model(kind: AttentionKind, wp: &WorkerParams) -> AttentionModel {
    match kind {
        AttentionKind::Poisson => AttentionModel::Poisson {
            lambda: wp.location,
            n_tasks: wp.n_tasks,
        },
        AttentionKind::Gaussian => AttentionModel::Gaussian {
            mu: wp.location,
            sigma: wp.sigma,
            n_tasks: wp.n_tasks,
        },
        AttentionKind::Uniform | AttentionKind::None => AttentionModel::Uniform { n_tasks: wp.n_tasks },
    }
}

fn curve_of(kind: AttentionKind, wp: &WorkerParams, eps: f64) -> QualityCurve {
    let sensitivity = if kind.is_rank_dependent() && wp.attentive {
        wp.sensitivity
    } else {
        0.0
    };
    quality_curve(&attention_model(kind, wp), wp.amplitude, sensitivity, eps)
}

/// `sum_y p_y log[(1 - theta) w_y + theta / C * sum w]` from log weights.
fn expected_log_mixture(p: &[f64], log_w: &[f64], theta: f64) -> f64 {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let c = log_w.len() as f64;
    let mut sum = 0.0;
    let mut buf = [0.0f64; 16];
    let w: &mut [f64] = if log_w.len() <= 16 {
        &mut buf[..log_w.len()]
    } else {
        return expected_log_mixture_slow(p, log_w, theta, max);
    };
    for (slot, &lw) in w.iter_mut().zip(log_w) {
        *slot = (lw - max).exp();
        sum += *slot;
    }
    let floor = theta / c * sum;
    p.iter()
        .zip(w.iter())
        .filter(|(&py, _)| py > 0.0)
        .map(|(&py, &wy)| py * (((1.0 - theta) * wy + floor).ln() + max))
        .sum()
}

fn expected_log_mixture_slow(p: &[f64], log_w: &[f64], theta: f64, max: f64) -> f64 {
    let w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let floor = theta / w.len() as f64 * w.iter().sum::<f64>();
    p.iter()
        .zip(&w)
        .filter(|(&py, _)| py > 0.0)
        .map(|(&py, &wy)| py * (((1.0 - theta) * wy + floor).ln() + max))
        .sum()
}

/// `E_{Beta(a', b')}[log Beta(theta | alpha, beta)]`.
pub fn theta_prior_term(alpha: f64, beta: f64, a_post: f64, b_post: f64) -> f64 {
    let e_ln = digamma(a_post) - digamma(a_post + b_post);
    let e_ln1m = digamma(b_post) - digamma(a_post + b_post);
    (alpha - 1.0) * e_ln + (beta - 1.0) * e_ln1m - (ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta))
}

/// The quantities of the E-step that the M-step holds fixed.
#[derive(Clone, Debug)]
pub struct EStepSummary {
    /// `P_iy`, the posterior probability that class `y` scores highest.
    pub probs: Vec<Vec<f64>>,
    pub theta_bar: f64,
    pub alpha_post: f64,
    pub beta_post: f64,
    pub kl_to_prior: f64,
}

impl EStepSummary {
    pub fn from_posterior(posterior: &PosteriorApprox) -> Self {
        EStepSummary {
            probs: (0..posterior.n_tasks()).map(|i| posterior.label_integrals(i)).collect(),
            theta_bar: posterior.theta_bar(),
            alpha_post: posterior.alpha,
            beta_post: posterior.beta,
            kl_to_prior: posterior.kl_to_prior,
        }
    }
}

fn contribution(answer: Label, q: f64, out: &mut [f64], sign: f64) {
    let split = ((out.len().max(2) - 1) as f64).ln();
    let (hit, miss) = (q.ln(), (1.0 - q).ln() - split);
    for (y, v) in out.iter_mut().enumerate() {
        *v += sign * if y + 1 == answer as usize { hit } else { miss };
    }
}

/// Per-task log weights under `params`.
fn all_log_weights(params: &ModelParams, dataset: &Dataset, orders: &[WorkerOrder]) -> Vec<Vec<f64>> {
    let c = dataset.n_classes();
    let mut lw = vec![vec![0.0; c]; dataset.n_tasks()];
    for (w, order) in orders.iter().enumerate() {
        let curve = params.quality_curve(w);
        for (task, rank) in order.ranked() {
            contribution(dataset.answer(task, w), curve.points[rank - 1].1, &mut lw[task], 1.0);
        }
    }
    lw
}

fn expected_log_likelihood(lw: &[Vec<f64>], e: &EStepSummary) -> f64 {
    lw.iter()
        .zip(&e.probs)
        .map(|(l, p)| expected_log_mixture(p, l, e.theta_bar))
        .sum()
}

fn bound_from(params: &ModelParams, lw: &[Vec<f64>], e: &EStepSummary) -> f64 {
    expected_log_likelihood(lw, e) + theta_prior_term(params.alpha, params.beta, e.alpha_post, e.beta_post)
        - e.kl_to_prior
}

/// Expected complete-data log-likelihood under the E-step posterior, plus the
/// outlier-rate prior term, minus the KL from the prior over scores.
pub fn lower_bound(params: &ModelParams, posterior: &PosteriorApprox, dataset: &Dataset) -> f64 {
    let orders = infer_order(dataset);
    let e = EStepSummary::from_posterior(posterior);
    bound_from(params, &all_log_weights(params, dataset, &orders), &e)
}

/// The quantity GEM ascends: [`lower_bound`] minus the attention penalty for
/// every attentive worker.
pub fn gem_objective(params: &ModelParams, posterior: &PosteriorApprox, dataset: &Dataset, penalty: f64) -> f64 {
    lower_bound(params, posterior, dataset) - penalty * params.n_attentive() as f64
}

/// One worker's slice of the bound, everything else held fixed.
struct WorkerBlock<'a> {
    kind: AttentionKind,
    eps: f64,
    /// `(task, rank, answer)`.
    tasks: Vec<(usize, usize, Label)>,
    /// Log weights of those tasks without this worker.
    rest: Vec<Vec<f64>>,
    e: &'a EStepSummary,
    penalty: f64,
}

impl WorkerBlock<'_> {
    fn value(&self, wp: &WorkerParams) -> f64 {
        let curve = curve_of(self.kind, wp, self.eps);
        let mut lw = vec![0.0; self.rest.first().map_or(0, Vec::len)];
        let mut total = 0.0;
        for (j, &(task, rank, a)) in self.tasks.iter().enumerate() {
            lw.copy_from_slice(&self.rest[j]);
            contribution(a, curve.points[rank - 1].1, &mut lw, 1.0);
            total += expected_log_mixture(&self.e.probs[task], &lw, self.e.theta_bar);
        }
        total - if wp.attentive { self.penalty } else { 0.0 }
    }
}

/// Free-parameter encoding of a worker for the optimizer.
struct Encoding {
    amp: Interval,
    kappa: Interval,
    loc: Interval,
    sigma: Interval,
    attentive: bool,
    gaussian: bool,
}

impl Encoding {
    fn new(kind: AttentionKind, eps: f64, n_tasks: usize, attentive: bool) -> Self {
        let n = n_tasks.max(2) as f64;
        Encoding {
            amp: Interval::new(eps, 1.0 - eps),
            kappa: Interval::new(1e-3, MAX_SENSITIVITY),
            loc: Interval::new(0.5, n),
            sigma: Interval::new(0.5, n),
            attentive,
            gaussian: kind == AttentionKind::Gaussian,
        }
    }

    fn encode(&self, wp: &WorkerParams) -> Vec<f64> {
        let mut x = vec![self.amp.to_free(wp.amplitude)];
        if self.attentive {
            x.push(self.kappa.to_free(wp.sensitivity));
            x.push(self.loc.to_free(wp.location));
            if self.gaussian {
                x.push(self.sigma.to_free(wp.sigma));
            }
        }
        x
    }

    fn decode(&self, x: &[f64], template: &WorkerParams) -> WorkerParams {
        let mut wp = template.clone();
        wp.amplitude = self.amp.from_free(x[0]);
        wp.attentive = self.attentive;
        if self.attentive {
            wp.sensitivity = self.kappa.from_free(x[1]);
            wp.location = self.loc.from_free(x[2]);
            if self.gaussian {
                wp.sigma = self.sigma.from_free(x[3]);
            }
        }
        wp
    }
}

fn polish(block: &WorkerBlock, start: &WorkerParams, attentive: bool, cfg: &LbfgsConfig, h: f64) -> (WorkerParams, f64) {
    let enc = Encoding::new(block.kind, block.eps, start.n_tasks, attentive);
    let f = |x: &[f64]| -block.value(&enc.decode(x, start));
    let x0 = enc.encode(start);
    let out = minimize(&x0, f, |x| central_difference(x, h, f), cfg);
    let wp = enc.decode(&out.x, start);
    let v = block.value(&wp);
    (wp, v)
}

/// Best amplitude for a fixed curve shape `d` (quality = amplitude +
/// sensitivity * d, clamped) under the surrogate log-likelihood
/// `sum p log q + (1 - p) log(1 - q)`, found by bisection on its derivative.
fn surrogate_fit(p: &[f64], d: &[f64], kappa: f64, eps: f64) -> (f64, f64) {
    let q_at = |a: f64, dr: f64| (a + kappa * dr).clamp(eps, 1.0 - eps);
    let slope = |a: f64| -> f64 {
        p.iter()
            .zip(d)
            .map(|(&pr, &dr)| {
                let raw = a + kappa * dr;
                if raw <= eps || raw >= 1.0 - eps {
                    0.0
                } else {
                    (pr - raw) / (raw * (1.0 - raw))
                }
            })
            .sum()
    };
    let (mut lo, mut hi) = (eps, 1.0 - eps);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    let val = p
        .iter()
        .zip(d)
        .map(|(&pr, &dr)| {
            let q = q_at(a, dr);
            pr * q.ln() + (1.0 - pr) * (1.0 - q).ln()
        })
        .sum();
    (a, val)
}

/// Coarse scan over attention shapes and sensitivities on the surrogate, to
/// seed the attentive candidate away from poor local optima.
fn grid_start(block: &WorkerBlock, current: &WorkerParams) -> WorkerParams {
    let n = current.n_tasks;
    let nf = n as f64;
    // surrogate correctness probability of each answer, indexed by rank
    let mut p = vec![0.0; n];
    for &(task, rank, a) in &block.tasks {
        p[rank - 1] = block.e.probs[task][a as usize - 1];
    }
    let mut locs = Vec::new();
    let mut l = 0.6;
    while l < nf {
        locs.push(l);
        l *= 1.18;
    }
    let sigmas: Vec<f64> = if block.kind == AttentionKind::Gaussian {
        [0.05, 0.1, 0.17, 0.25].iter().map(|f| (f * nf).max(0.6)).collect()
    } else {
        vec![current.sigma]
    };
    let kappas = [0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5];
    let mut best = (f64::NEG_INFINITY, current.clone());
    for &loc in &locs {
        for &sigma in &sigmas {
            let mut wp = current.clone();
            wp.attentive = true;
            wp.location = loc;
            wp.sigma = sigma;
            let rel = attention_model(block.kind, &wp).relative_attention();
            let mean = rel.iter().sum::<f64>() / rel.len() as f64;
            let d: Vec<f64> = rel.iter().map(|t| t - mean).collect();
            for &kappa in &kappas {
                let (a, v) = surrogate_fit(&p, &d, kappa, block.eps);
                if v > best.0 {
                    wp.sensitivity = kappa;
                    wp.amplitude = a;
                    best = (v, wp.clone());
                }
            }
        }
    }
    best.1
}

/// One generalized M-step: each worker in turn moves to the best of its
/// current parameters, a re-optimized flat fit and (for rank-dependent
/// attention) a re-optimized attentive fit. Optionally refits the Beta prior.
pub fn m_step(params: &ModelParams, posterior: &PosteriorApprox, dataset: &Dataset, config: &GemConfig) -> ModelParams {
    let orders = infer_order(dataset);
    let e = EStepSummary::from_posterior(posterior);
    m_step_with(params, &e, dataset, &orders, config)
}

fn m_step_with(
    params: &ModelParams,
    e: &EStepSummary,
    dataset: &Dataset,
    orders: &[WorkerOrder],
    config: &GemConfig,
) -> ModelParams {
    let mut out = params.clone();
    let mut lw = all_log_weights(params, dataset, orders);
    for (w, order) in orders.iter().enumerate() {
        if order.is_empty() {
            continue;
        }
        let current = out.workers[w].clone();
        let curve = out.quality_curve(w);
        let tasks: Vec<(usize, usize, Label)> = order.ranked().map(|(i, r)| (i, r, dataset.answer(i, w))).collect();
        let rest: Vec<Vec<f64>> = tasks
            .iter()
            .map(|&(i, r, a)| {
                let mut l = lw[i].clone();
                contribution(a, curve.points[r - 1].1, &mut l, -1.0);
                l
            })
            .collect();
        let block = WorkerBlock {
            kind: out.kind,
            eps: out.eps,
            tasks,
            rest,
            e,
            penalty: config.attention_penalty,
        };
        let mut best = (block.value(&current), current.clone());
        let mut consider = |cand: &(WorkerParams, f64)| {
            if cand.1 > best.0 {
                best = (cand.1, cand.0.clone());
            }
        };
        // start from the clamped mean: an attentive amplitude can sit on the
        // box edge, where the logit transform has no gradient
        let flat_start = WorkerParams {
            attentive: false,
            amplitude: curve.mean().clamp(0.02, 0.98),
            ..current.clone()
        };
        let flat = polish(&block, &flat_start, false, &config.lbfgs, config.fd_step);
        consider(&flat);
        let mut gain = None;
        if out.kind.is_rank_dependent() && current.n_tasks >= MIN_TASKS_FOR_ATTENTION {
            let seeded = grid_start(&block, &current);
            let start = if current.attentive && block.value(&current) >= block.value(&seeded) {
                current.clone()
            } else {
                seeded
            };
            let on = polish(&block, &start, true, &config.lbfgs, config.fd_step);
            consider(&on);
            let flat_best = if current.attentive { flat.1 } else { flat.1.max(block.value(&current)) };
            gain = Some(on.1 + config.attention_penalty - flat_best);
        }
        let mut chosen = best.1;
        chosen.attention_gain = gain;
        let new_curve = curve_of(out.kind, &chosen, out.eps);
        for (j, &(i, r, a)) in block.tasks.iter().enumerate() {
            let mut l = block.rest[j].clone();
            contribution(a, new_curve.points[r - 1].1, &mut l, 1.0);
            lw[i] = l;
        }
        out.workers[w] = chosen;
    }
    if config.optimize_prior {
        let range = Interval::new((0.05f64).ln(), (1e4f64).ln());
        let f = |x: &[f64]| {
            let (a, b) = (range.from_free(x[0]).exp(), range.from_free(x[1]).exp());
            -theta_prior_term(a, b, e.alpha_post, e.beta_post)
        };
        let x0 = [range.to_free(out.alpha.ln()), range.to_free(out.beta.ln())];
        let res = minimize(&x0, f, |x| central_difference(x, config.fd_step, f), &config.lbfgs);
        if res.f < f(&x0) {
            out.alpha = range.from_free(res.x[0]).exp();
            out.beta = range.from_free(res.x[1]).exp();
        }
    }
    out
}

/// Everything a completed fit reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub result: AggregationResult,
    pub params: ModelParams,
    pub quality_curves: Vec<QualityCurve>,
    /// `lambda_w` or `mu_w` for attentive workers under rank-dependent
    /// attention.
    pub suitable_counts: Vec<Option<f64>>,
    /// Mean fitted quality over each worker's answers.
    pub global_quality: Vec<f64>,
    /// GEM objective after each E-step.
    pub bound_trace: Vec<f64>,
    pub evidence_trace: Vec<f64>,
    pub theta_bar: f64,
    /// Workers whose completion order was reconstructed.
    pub synthetic_orders: Vec<bool>,
}

impl FitResult {
    pub fn labels(&self) -> &[Label] {
        &self.result.labels
    }

    pub fn converged(&self) -> bool {
        self.result.diagnostics.converged
    }
}

/// Fits with a Gram matrix built from the dataset's features.
pub fn fit_with_kernel(dataset: &Dataset, kernel: &Kernel, config: &GemConfig) -> Result<FitResult> {
    let gram = build_gram_escalating(dataset.features(), kernel)?;
    fit(dataset, &ClassGrams::Shared(gram), config)
}

/// Alternates EP and the generalized M-step until the objective changes by
/// less than `tol` or `max_iters` E-steps have run.
pub fn fit(dataset: &Dataset, grams: &ClassGrams, config: &GemConfig) -> Result<FitResult> {
    if config.max_iters == 0 {
        return Err(Error::Validation("GEM needs at least one iteration".into()));
    }
    let orders = infer_order(dataset);
    let mut params = ModelParams::init(dataset, &orders, config);
    let penalized = |p: &ModelParams, e: &EStepSummary| {
        bound_from(p, &all_log_weights(p, dataset, &orders), e) - config.attention_penalty * p.n_attentive() as f64
    };
    let q = params.qualities(dataset, &orders);
    let mut posterior = ep_run(dataset, grams, &q, params.alpha, params.beta, &config.ep, None)?;
    let mut e = EStepSummary::from_posterior(&posterior);
    let mut sites = posterior.sites.clone();
    let mut trace = vec![penalized(&params, &e)];
    let mut evidence = vec![posterior.log_evidence];
    let mut converged = false;
    while trace.len() < config.max_iters {
        params = m_step_with(&params, &e, dataset, &orders, config);
        let after_m = penalized(&params, &e);
        // E-step: EP under the new qualities, kept only if it does not lower
        // the bound
        let q = params.qualities(dataset, &orders);
        let candidate = ep_run(dataset, grams, &q, params.alpha, params.beta, &config.ep, Some(&sites))?;
        let e_new = EStepSummary::from_posterior(&candidate);
        let after_e = penalized(&params, &e_new);
        sites = candidate.sites.clone();
        let obj = if after_e >= after_m {
            posterior = candidate;
            e = e_new;
            after_e
        } else {
            after_m
        };
        evidence.push(posterior.log_evidence);
        let prev = trace[trace.len() - 1];
        trace.push(obj);
        if (obj - prev).abs() < config.tol {
            converged = true;
            break;
        }
    }
    let diagnostics = Diagnostics {
        iterations: trace.len(),
        objective: trace.last().copied(),
        converged: converged && posterior.converged,
    };
    let result = AggregationResult::from_weights(posterior.predictive_all(), diagnostics);
    let quality_curves: Vec<QualityCurve> = (0..params.n_workers()).map(|w| params.quality_curve(w)).collect();
    let suitable_counts = params
        .workers
        .iter()
        .map(|wp| (params.kind.is_rank_dependent() && wp.attentive).then_some(wp.location))
        .collect();
    let global_quality = quality_curves
        .iter()
        .zip(&params.workers)
        .map(|(c, wp)| if c.is_empty() { wp.amplitude } else { c.mean() })
        .collect();
    Ok(FitResult {
        result,
        quality_curves,
        suitable_counts,
        global_quality,
        bound_trace: trace,
        evidence_trace: evidence,
        theta_bar: posterior.theta_bar(),
        synthetic_orders: orders.iter().map(|o| o.synthetic).collect(),
        params,
    })
}

/// The suitable task count of one worker: `lambda_w` (Poisson) or `mu_w`
/// (Gaussian).
pub fn suitable_task_count(fit: &FitResult, worker: usize) -> Result<f64> {
    let kind = fit.params.kind;
    if !kind.is_rank_dependent() {
        return Err(Error::NotApplicable(format!("{} attention has no task-count parameter", kind.as_str())));
    }
    let wp = fit
        .params
        .workers
        .get(worker)
        .ok_or_else(|| Error::Validation(format!("no worker {worker}")))?;
    if !wp.attentive {
        return Err(Error::NotApplicable(format!("worker {worker} shows no attention effect")));
    }
    Ok(wp.location)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityHistogram {
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub prop_at_least_0_6: f64,
    pub prop_below_0_4: f64,
}

/// Histogram of global worker quality.
pub fn worker_quality_histogram(fit: &FitResult, bins: usize) -> QualityHistogram {
    quality_histogram(&fit.global_quality, bins)
}

pub fn quality_histogram(values: &[f64], bins: usize) -> QualityHistogram {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    for &q in values {
        let k = ((q * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = values.len().max(1) as f64;
    QualityHistogram {
        edges: (0..=bins).map(|k| k as f64 / bins as f64).collect(),
        counts,
        prop_at_least_0_6: values.iter().filter(|&&q| q >= 0.6).count() as f64 / n,
        prop_below_0_4: values.iter().filter(|&&q| q < 0.4).count() as f64 / n,
    }
}
