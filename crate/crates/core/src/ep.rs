//! Expectation propagation for the per-class GP posterior over task scores.
//!
//! Each task `i` carries an exact likelihood factor
//!
//! ```text
//! L_i(s) = sum_y w_i(y) [ (1 - theta) prod_{c != y} I(s_y > s_c) + theta / C ]
//! ```
//!
//! which EP replaces by one diagonal Gaussian site per class plus a Beta
//! pseudo-count pair for the outlier rate `theta`. Classes are independent
//! a priori, so the posterior keeps one `N x N` covariance per class.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::kernels::ClassGrams;
use crate::quadrature::{ProbitIntegrator, DEFAULT_POINTS};

/// Order in which tasks are visited within a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Sequential,
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpConfig {
    pub tol: f64,
    pub max_sweeps: usize,
    pub damping: f64,
    pub min_damping: f64,
    pub quad_points: usize,
    pub schedule: Schedule,
}

impl Default for EpConfig {
    fn default() -> Self {
        EpConfig {
            tol: 1e-5,
            max_sweeps: 200,
            damping: 0.5,
            min_damping: 0.05,
            quad_points: DEFAULT_POINTS,
            schedule: Schedule::Sequential,
        }
    }
}

/// `log w_i(y) = sum_{w answered} log p(a_iw | y)` with `p(a | y) = q` when
/// `a = y` and `(1 - q) / (C - 1)` otherwise, so each answer's distribution
/// over labels is normalized and `q = 1/C` carries no information.
pub fn task_log_weights(answers_row: &[Label], qualities_row: &[f64], n_classes: usize) -> Vec<f64> {
    let mut lw = vec![0.0; n_classes];
    let split = ((n_classes.max(2) - 1) as f64).ln();
    for (&a, &q) in answers_row.iter().zip(qualities_row) {
        if a == 0 {
            continue;
        }
        let (hit, miss) = (q.ln(), (1.0 - q).ln() - split);
        for (y, v) in lw.iter_mut().enumerate() {
            *v += if y + 1 == a as usize { hit } else { miss };
        }
    }
    lw
}

/// Linear-scale version of [`task_log_weights`].
pub fn task_likelihood_weights(answers_row: &[Label], qualities_row: &[f64], n_classes: usize) -> Vec<f64> {
    task_log_weights(answers_row, qualities_row, n_classes)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Per-task answer weights, kept in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLikelihood {
    pub log_weights: Vec<f64>,
}

impl TaskLikelihood {
    pub fn new(log_weights: Vec<f64>) -> Self {
        TaskLikelihood { log_weights }
    }

    pub fn n_classes(&self) -> usize {
        self.log_weights.len()
    }

    /// True when every class has the same weight, so the factor does not
    /// depend on the scores at all.
    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.log_weights.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        hi - lo <= 1e-12
    }

    /// Weights divided by their maximum, and the log of that maximum.
    pub fn shifted(&self) -> (Vec<f64>, f64) {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (self.log_weights.iter().map(|v| (v - max).exp()).collect(), max)
    }

    /// `log[(1 - theta) w(y) + theta / C * sum w]` for every `y`.
    pub fn log_mixture(&self, theta: f64) -> Vec<f64> {
        let (w, max) = self.shifted();
        let floor = theta / w.len() as f64 * w.iter().sum::<f64>();
        w.iter().map(|&v| ((1.0 - theta) * v + floor).ln() + max).collect()
    }
}

/// Likelihood rows for every task given an `N x W` quality matrix.
pub fn task_likelihoods(dataset: &Dataset, qualities: &DMatrix<f64>) -> Result<Vec<TaskLikelihood>> {
    if qualities.nrows() != dataset.n_tasks() || qualities.ncols() != dataset.n_workers() {
        return Err(Error::DimensionMismatch {
            left: qualities.nrows() * qualities.ncols(),
            right: dataset.n_tasks() * dataset.n_workers(),
        });
    }
    let c = dataset.n_classes();
    Ok((0..dataset.n_tasks())
        .map(|i| {
            let q: Vec<f64> = qualities.row(i).iter().copied().collect();
            TaskLikelihood::new(task_log_weights(dataset.answers_row(i), &q, c))
        })
        .collect())
}

/// Independent Gaussians, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// A task's site: Gaussian natural parameters per class and Beta
/// pseudo-counts `[outlier, inlier]` contributed to `theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteFactor {
    pub tau: Vec<f64>,
    pub nu: Vec<f64>,
    pub beta_incr: [f64; 2],
}

impl SiteFactor {
    pub fn zero(n_classes: usize) -> Self {
        SiteFactor {
            tau: vec![0.0; n_classes],
            nu: vec![0.0; n_classes],
            beta_incr: [0.0, 0.0],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tau.iter().chain(&self.nu).all(|&v| v == 0.0) && self.beta_incr == [0.0, 0.0]
    }
}

/// Divides the site out of the marginal.
pub fn cavity(marginal: &DiagGaussian, site: &SiteFactor, task: usize) -> Result<DiagGaussian> {
    let c = marginal.len();
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for k in 0..c {
        let tau = 1.0 / marginal.var[k] - site.tau[k];
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::NegativeCavityVariance { task, class: k + 1 });
        }
        let nu = marginal.mean[k] / marginal.var[k] - site.nu[k];
        mean.push(nu / tau);
        var.push(1.0 / tau);
    }
    Ok(DiagGaussian { mean, var })
}

/// Multiplies a site back onto a cavity, giving the marginal.
pub fn combine(cav: &DiagGaussian, site: &SiteFactor) -> DiagGaussian {
    let (mut mean, mut var) = (Vec::new(), Vec::new());
    for k in 0..cav.len() {
        let tau = 1.0 / cav.var[k] + site.tau[k];
        let nu = cav.mean[k] / cav.var[k] + site.nu[k];
        mean.push(nu / tau);
        var.push(1.0 / tau);
    }
    DiagGaussian { mean, var }
}

/// Output of moment matching for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentMatch {
    /// `log Z`, the log normalizer of cavity times exact factor.
    pub log_z: f64,
    /// Matched Gaussian marginal.
    pub marginal: DiagGaussian,
    /// Posterior probability that the task is an outlier.
    pub outlier_resp: f64,
}

/// Moments of `cavity(s) * L(s)` from the derivatives of `log Z` with respect
/// to the cavity mean and variance.
pub fn moment_match(
    lik: &TaskLikelihood,
    cav: &DiagGaussian,
    theta_bar: f64,
    integrator: &ProbitIntegrator,
) -> Result<MomentMatch> {
    let c = cav.len();
    let (w, shift) = lik.shifted();
    let floor = theta_bar / c as f64 * w.iter().sum::<f64>();
    let terms = integrator.class_probabilities_with_grad(&cav.mean, &cav.var);
    let mut z = floor;
    let mut dm = vec![0.0; c];
    let mut dv = vec![0.0; c];
    for (y, term) in terms.iter().enumerate() {
        let scale = (1.0 - theta_bar) * w[y];
        z += scale * term.value;
        for k in 0..c {
            dm[k] += scale * term.d_mean[k];
            dv[k] += scale * term.d_var[k];
        }
    }
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::QuadratureUnderflow);
    }
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for k in 0..c {
        let (gm, gv) = (dm[k] / z, dv[k] / z);
        let v = cav.var[k];
        let nv = v - v * v * (gm * gm - 2.0 * gv);
        if !(nv > 0.0) || !nv.is_finite() {
            return Err(Error::QuadratureUnderflow);
        }
        mean.push(cav.mean[k] + v * gm);
        var.push(nv);
    }
    Ok(MomentMatch {
        log_z: z.ln() + shift,
        marginal: DiagGaussian { mean, var },
        outlier_resp: floor / z,
    })
}

/// The site that turns `cav` into the matched marginal.
pub fn site_from_match(cav: &DiagGaussian, matched: &MomentMatch) -> SiteFactor {
    let c = cav.len();
    let m = &matched.marginal;
    let r = matched.outlier_resp;
    SiteFactor {
        tau: (0..c).map(|k| 1.0 / m.var[k] - 1.0 / cav.var[k]).collect(),
        nu: (0..c).map(|k| m.mean[k] / m.var[k] - cav.mean[k] / cav.var[k]).collect(),
        beta_incr: [r, 1.0 - r],
    }
}

/// `new^eps * old^(1-eps)`: a convex combination of natural parameters.
pub fn damped_update(old: &SiteFactor, new: &SiteFactor, eps: f64) -> SiteFactor {
    let mix = |a: f64, b: f64| (1.0 - eps) * a + eps * b;
    SiteFactor {
        tau: old.tau.iter().zip(&new.tau).map(|(&a, &b)| mix(a, b)).collect(),
        nu: old.nu.iter().zip(&new.nu).map(|(&a, &b)| mix(a, b)).collect(),
        beta_incr: [
            mix(old.beta_incr[0], new.beta_incr[0]),
            mix(old.beta_incr[1], new.beta_incr[1]),
        ],
    }
}

/// Damped update that keeps every site precision nonnegative: a class whose
/// damped precision would go negative retries with halved damping down to
/// `min_eps`, and is clamped at zero after that.
fn safe_damped_update(old: &SiteFactor, new: &SiteFactor, eps: f64, min_eps: f64) -> SiteFactor {
    let mut out = damped_update(old, new, eps);
    for k in 0..out.tau.len() {
        let mut e = eps;
        while out.tau[k] < 0.0 && e > min_eps {
            e = (e * 0.5).max(min_eps);
            out.tau[k] = (1.0 - e) * old.tau[k] + e * new.tau[k];
            out.nu[k] = (1.0 - e) * old.nu[k] + e * new.nu[k];
        }
        if out.tau[k] < 0.0 {
            out.tau[k] = 0.0;
        }
    }
    out
}

/// Gaussian posterior for one class plus the pieces needed for the evidence
/// and the KL to the prior.
struct ClassPosterior {
    sigma: DMatrix<f64>,
    mu: DVector<f64>,
    log_det_b: f64,
    kl: f64,
}

/// `Sigma = (K^-1 + T)^-1` through `B = I + S K S`, `S = T^(1/2)`.
fn class_posterior(k: &DMatrix<f64>, tau: &[f64], nu: &[f64]) -> Result<ClassPosterior> {
    let n = k.nrows();
    let s = DVector::from_iterator(n, tau.iter().map(|t| t.max(0.0).sqrt()));
    let nu = DVector::from_column_slice(nu);
    let mut sk = k.clone();
    for i in 0..n {
        sk.row_mut(i).scale_mut(s[i]);
    }
    let mut b = sk.clone();
    for j in 0..n {
        b.column_mut(j).scale_mut(s[j]);
        b[(j, j)] += 1.0;
    }
    let chol = b.cholesky().ok_or(Error::CholeskyFailure { jitter: 0.0 })?;
    let l = chol.l();
    let log_det_b = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::CholeskyFailure { jitter: 0.0 })?;
    let v = &l_inv * &sk;
    let sigma = k - v.tr_mul(&v);
    let mu = &sigma * &nu;
    // mu' K^-1 mu = mu' (nu - S B^-1 S K nu)
    let skn = &sk * &nu;
    let binv_skn = l_inv.tr_mul(&(&l_inv * &skn));
    let kinv_mu = &nu - s.component_mul(&binv_skn);
    let tr_b_inv = l_inv.norm_squared();
    let kl = 0.5 * (tr_b_inv + mu.dot(&kinv_mu) - n as f64 + log_det_b);
    Ok(ClassPosterior {
        sigma,
        mu,
        log_det_b,
        kl,
    })
}

/// `nu^2 / (2 tau) - log(tau) / 2`, the Gaussian log normalizer without the
/// `2 pi` constant.
fn log_normalizer(tau: f64, nu: f64) -> f64 {
    nu * nu / (2.0 * tau) - 0.5 * tau.ln()
}

/// The EP approximation after fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorApprox {
    /// `N x C` posterior means.
    pub means: Vec<Vec<f64>>,
    /// `N x C` posterior variances.
    pub vars: Vec<Vec<f64>>,
    /// Beta posterior over the outlier rate.
    pub alpha: f64,
    pub beta: f64,
    pub log_evidence: f64,
    /// `sum_c KL(Q_c || N(0, K_c))`.
    pub kl_to_prior: f64,
    pub sites: Vec<SiteFactor>,
    pub sweeps: usize,
    pub converged: bool,
    pub quad_points: usize,
    /// Per-task answer log weights the sites were fitted to.
    #[serde(default)]
    pub log_weights: Vec<Vec<f64>>,
}

impl PosteriorApprox {
    pub fn n_tasks(&self) -> usize {
        self.means.len()
    }

    pub fn n_classes(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn theta_bar(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn marginal(&self, task: usize) -> DiagGaussian {
        DiagGaussian {
            mean: self.means[task].clone(),
            var: self.vars[task].clone(),
        }
    }

    /// Probability under the posterior that each class has the largest score.
    pub fn label_integrals(&self, task: usize) -> Vec<f64> {
        ProbitIntegrator::new(self.quad_points).class_probabilities(&self.means[task], &self.vars[task])
    }

    pub fn predictive(&self, task: usize) -> Vec<f64> {
        predictive(self, task)
    }

    pub fn predictive_all(&self) -> Vec<Vec<f64>> {
        (0..self.n_tasks()).map(|i| predictive(self, i)).collect()
    }
}

/// Label probabilities of a task. Answered tasks use the tilted
/// distribution, cavity times the exact answer factor, which keeps the
/// step-shaped likelihood that the Gaussian marginal smooths over. Tasks
/// without answers (or without a usable cavity) use the marginal:
/// `theta/C + (1 - theta) P_y`, renormalized.
pub fn predictive(posterior: &PosteriorApprox, task: usize) -> Vec<f64> {
    let integrator = ProbitIntegrator::new(posterior.quad_points);
    let marginal = posterior.marginal(task);
    if let (Some(lw), Some(site)) = (posterior.log_weights.get(task), posterior.sites.get(task)) {
        let lik = TaskLikelihood::new(lw.clone());
        if !lik.is_constant() {
            if let Ok(cav) = cavity(&marginal, site, task) {
                return tilted_predictive(&lik, &cav, posterior.theta_bar(), &integrator);
            }
        }
    }
    predictive_from(&marginal.mean, &marginal.var, posterior.theta_bar(), &integrator)
}

/// `E[(1 - theta) I(argmax s = y) + theta / C]` under `cav(s) * L(s)`, with
/// `L(s) = sum_y w(y) [(1 - theta) I(argmax s = y) + theta / C]`.
pub fn tilted_predictive(lik: &TaskLikelihood, cav: &DiagGaussian, theta_bar: f64, integrator: &ProbitIntegrator) -> Vec<f64> {
    let c = cav.len();
    let (w, _) = lik.shifted();
    let p: Vec<f64> = integrator
        .class_probabilities(&cav.mean, &cav.var)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let (a, b) = (1.0 - theta_bar, theta_bar / c as f64);
    let total_w: f64 = w.iter().sum();
    let wp: f64 = w.iter().zip(&p).map(|(x, y)| x * y).sum();
    let out: Vec<f64> = (0..c)
        .map(|y| a * a * w[y] * p[y] + a * b * (p[y] * total_w + wp) + b * b * total_w)
        .collect();
    let total: f64 = out.iter().sum();
    if total > 0.0 && total.is_finite() {
        out.into_iter().map(|v| v / total).collect()
    } else {
        predictive_from(&cav.mean, &cav.var, theta_bar, integrator)
    }
}

/// [`predictive`] for an explicit marginal.
pub fn predictive_from(mean: &[f64], var: &[f64], theta_bar: f64, integrator: &ProbitIntegrator) -> Vec<f64> {
    let c = mean.len() as f64;
    let p: Vec<f64> = integrator
        .class_probabilities(mean, var)
        .into_iter()
        .map(|v| theta_bar / c + (1.0 - theta_bar) * v.max(0.0))
        .collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.into_iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / c; mean.len()]
    }
}

pub fn evidence(posterior: &PosteriorApprox) -> f64 {
    posterior.log_evidence
}

/// Runs EP on a dataset with per-answer qualities (`N x W`).
pub fn ep_run(
    dataset: &Dataset,
    grams: &ClassGrams,
    qualities: &DMatrix<f64>,
    alpha: f64,
    beta: f64,
    config: &EpConfig,
    warm_start: Option<&[SiteFactor]>,
) -> Result<PosteriorApprox> {
    let liks = task_likelihoods(dataset, qualities)?;
    ep_run_likelihoods(&liks, grams, alpha, beta, config, warm_start)
}

/// Runs EP on precomputed likelihood rows.
pub fn ep_run_likelihoods(
    liks: &[TaskLikelihood],
    grams: &ClassGrams,
    alpha: f64,
    beta: f64,
    config: &EpConfig,
    warm_start: Option<&[SiteFactor]>,
) -> Result<PosteriorApprox> {
    let n = liks.len();
    if n == 0 {
        return Err(Error::Validation("no tasks".into()));
    }
    if grams.size() != n {
        return Err(Error::DimensionMismatch {
            left: grams.size(),
            right: n,
        });
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Validation(format!("Beta prior needs positive parameters, got ({alpha}, {beta})")));
    }
    let c = liks[0].n_classes();
    let integrator = ProbitIntegrator::new(config.quad_points);
    let active: Vec<bool> = liks.iter().map(|l| !l.is_constant()).collect();

    let mut sites: Vec<SiteFactor> = match warm_start {
        Some(s) if s.len() == n && s.iter().all(|f| f.tau.len() == c) => s.to_vec(),
        _ => vec![SiteFactor::zero(c); n],
    };
    for (site, &on) in sites.iter_mut().zip(&active) {
        if !on {
            *site = SiteFactor::zero(c);
        }
    }

    let recompute = |sites: &[SiteFactor]| -> Result<Vec<ClassPosterior>> {
        (0..c)
            .map(|k| {
                let tau: Vec<f64> = sites.iter().map(|s| s.tau[k]).collect();
                let nu: Vec<f64> = sites.iter().map(|s| s.nu[k]).collect();
                class_posterior(grams.for_class(k).values(), &tau, &nu)
            })
            .collect()
    };
    let beta_post = |sites: &[SiteFactor]| -> (f64, f64) {
        sites.iter().fold((alpha, beta), |(a, b), s| (a + s.beta_incr[0], b + s.beta_incr[1]))
    };

    let mut post = recompute(&sites)?;
    let (mut a_post, mut b_post) = beta_post(&sites);
    let mut task_eps = vec![config.damping; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut sweeps = 0;
    let mut converged = !active.iter().any(|&a| a);

    while !converged && sweeps < config.max_sweeps {
        sweeps += 1;
        if let Schedule::Random { seed } = config.schedule {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(sweeps as u64);
            order.shuffle(&mut rng);
        }
        let theta_before = a_post / (a_post + b_post);
        let mut max_change = 0.0f64;
        for &i in &order {
            if !active[i] {
                continue;
            }
            let marginal = DiagGaussian {
                mean: post.iter().map(|p| p.mu[i]).collect(),
                var: post.iter().map(|p| p.sigma[(i, i)]).collect(),
            };
            let old = &sites[i];
            let cav = match cavity(&marginal, old, i) {
                Ok(cav) => cav,
                Err(Error::NegativeCavityVariance { .. }) => {
                    task_eps[i] = (task_eps[i] * 0.5).max(config.min_damping);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let a_cav = a_post - old.beta_incr[0];
            let b_cav = b_post - old.beta_incr[1];
            let theta_cav = a_cav / (a_cav + b_cav);
            let matched = match moment_match(&liks[i], &cav, theta_cav, &integrator) {
                Ok(m) => m,
                Err(Error::QuadratureUnderflow) => continue,
                Err(e) => return Err(e),
            };
            let proposal = site_from_match(&cav, &matched);
            let new = safe_damped_update(old, &proposal, task_eps[i], config.min_damping);
            for k in 0..c {
                let d_tau = new.tau[k] - old.tau[k];
                let d_nu = new.nu[k] - old.nu[k];
                max_change = max_change.max(d_tau.abs()).max(d_nu.abs());
                if d_tau == 0.0 && d_nu == 0.0 {
                    continue;
                }
                let p = &mut post[k];
                let col = p.sigma.column(i).clone_owned();
                let kappa = d_tau / (1.0 + d_tau * col[i]);
                let mu_i = p.mu[i];
                p.mu.axpy(d_nu - kappa * (mu_i + d_nu * col[i]), &col, 1.0);
                p.sigma.ger(-kappa, &col, &col, 1.0);
            }
            a_post += new.beta_incr[0] - old.beta_incr[0];
            b_post += new.beta_incr[1] - old.beta_incr[1];
            sites[i] = new;
        }
        post = recompute(&sites)?;
        let (a, b) = beta_post(&sites);
        a_post = a;
        b_post = b;
        let theta_change = (a_post / (a_post + b_post) - theta_before).abs();
        converged = max_change < config.tol && theta_change < config.tol;
    }

    let means: Vec<Vec<f64>> = (0..n).map(|i| post.iter().map(|p| p.mu[i]).collect()).collect();
    let vars: Vec<Vec<f64>> = (0..n).map(|i| post.iter().map(|p| p.sigma[(i, i)]).collect()).collect();

    // evidence: Gaussian part from the site product, then per-task corrections
    let mut log_m = 0.0;
    for (k, p) in post.iter().enumerate() {
        let nu = DVector::from_iterator(n, sites.iter().map(|s| s.nu[k]));
        log_m += 0.5 * nu.dot(&p.mu) - 0.5 * p.log_det_b;
    }
    for i in 0..n {
        if !active[i] {
            // constant factor: contributes its (shared) weight
            log_m += liks[i].log_weights[0];
            continue;
        }
        let marginal = DiagGaussian {
            mean: means[i].clone(),
            var: vars[i].clone(),
        };
        let Ok(cav) = cavity(&marginal, &sites[i], i) else {
            continue;
        };
        let a_cav = a_post - sites[i].beta_incr[0];
        let b_cav = b_post - sites[i].beta_incr[1];
        let Ok(matched) = moment_match(&liks[i], &cav, a_cav / (a_cav + b_cav), &integrator) else {
            continue;
        };
        log_m += matched.log_z;
        for k in 0..c {
            log_m += log_normalizer(1.0 / cav.var[k], cav.mean[k] / cav.var[k])
                - log_normalizer(1.0 / vars[i][k], means[i][k] / vars[i][k]);
        }
    }

    Ok(PosteriorApprox {
        means,
        vars,
        alpha: a_post,
        beta: b_post,
        log_evidence: log_m,
        kl_to_prior: post.iter().map(|p| p.kl).sum(),
        sites,
        sweeps,
        converged,
        quad_points: config.quad_points,
        log_weights: liks.iter().map(|l| l.log_weights.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_gram, Kernel, KernelMatrix};

    fn integ() -> ProbitIntegrator {
        ProbitIntegrator::default()
    }

    fn normalized(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    fn shared(values: DMatrix<f64>) -> ClassGrams {
        ClassGrams::Shared(KernelMatrix::from_values(values, 0.0).unwrap())
    }

    #[test]
    fn likelihood_weight_examples() {
        let w = normalized(task_likelihood_weights(&[1], &[0.8], 2));
        assert!((w[0] - 0.8).abs() < 1e-12 && (w[1] - 0.2).abs() < 1e-12);

        let w = task_likelihood_weights(&[2, 2], &[0.9, 0.9], 3);
        for (got, want) in w.iter().zip([0.0025, 0.81, 0.0025]) {
            assert!((got - want).abs() < 1e-12);
        }

        let w = task_likelihood_weights(&[0, 0, 0], &[0.7, 0.7, 0.7], 4);
        assert_eq!(w, vec![1.0; 4]);

        let w = task_likelihood_weights(&[3, 1], &[0.25, 0.25], 4);
        assert!(w.iter().all(|v| (v - 0.0625).abs() < 1e-15));
    }

    #[test]
    fn cavity_examples() {
        let marg = DiagGaussian {
            mean: vec![0.3, -0.2],
            var: vec![0.8, 1.5],
        };
        let cav = cavity(&marg, &SiteFactor::zero(2), 0).unwrap();
        for k in 0..2 {
            assert!((cav.mean[k] - marg.mean[k]).abs() < 1e-15);
            assert!((cav.var[k] - marg.var[k]).abs() < 1e-15);
        }

        let same = SiteFactor {
            tau: vec![1.0 / 0.8, 1.0 / 1.5],
            nu: vec![0.3 / 0.8, -0.2 / 1.5],
            beta_incr: [0.0, 0.0],
        };
        assert!(matches!(
            cavity(&marg, &same, 3),
            Err(Error::NegativeCavityVariance { task: 3, .. })
        ));

        let site = SiteFactor {
            tau: vec![0.4, 0.1],
            nu: vec![-0.2, 0.05],
            beta_incr: [0.0, 0.0],
        };
        let cav = cavity(&marg, &site, 0).unwrap();
        let back = combine(&cav, &site);
        for k in 0..2 {
            assert!((back.mean[k] - marg.mean[k]).abs() < 1e-10);
            assert!((back.var[k] - marg.var[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_cavity_keeps_means_equal() {
        let lik = TaskLikelihood::new(vec![0.0, 0.0]);
        let cav = DiagGaussian {
            mean: vec![0.1, 0.1],
            var: vec![1.3, 1.3],
        };
        for theta in [0.0, 0.2, 0.9] {
            let m = moment_match(&lik, &cav, theta, &integ()).unwrap();
            assert!((m.marginal.mean[0] - m.marginal.mean[1]).abs() < 1e-12);
            let p = predictive_from(&m.marginal.mean, &m.marginal.var, theta, &integ());
            assert!((p[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_outlier_branch_gives_zero_site() {
        let lik = TaskLikelihood::new(vec![0.9f64.ln(), 0.1f64.ln()]);
        let cav = DiagGaussian {
            mean: vec![0.4, -0.1],
            var: vec![0.7, 2.0],
        };
        let m = moment_match(&lik, &cav, 1.0, &integ()).unwrap();
        let site = site_from_match(&cav, &m);
        for k in 0..2 {
            assert!(site.tau[k].abs() < 1e-12);
            assert!(site.nu[k].abs() < 1e-12);
        }
        assert!((m.outlier_resp - 1.0).abs() < 1e-12);
    }

    /// Dense trapezoid grid in rotated coordinates `d = s1 - s2`,
    /// `e = s1 + s2`, split at `d = 0` so the likelihood step sits on a panel
    /// boundary.
    fn grid_moments(w: [f64; 2], theta: f64, cav: &DiagGaussian) -> (f64, [f64; 2], [f64; 2]) {
        let (m1, m2) = (cav.mean[0], cav.mean[1]);
        let (v1, v2) = (cav.var[0], cav.var[1]);
        let sd = (v1 + v2).sqrt();
        let n = 1600;
        let (dlo, dhi) = (m1 - m2 - 9.0 * sd, m1 - m2 + 9.0 * sd);
        let (elo, ehi) = (m1 + m2 - 9.0 * sd, m1 + m2 + 9.0 * sd);
        let floor = theta / 2.0 * (w[0] + w[1]);
        let panels = [
            (dlo.min(0.0), dhi.min(0.0), (1.0 - theta) * w[1] + floor),
            (dlo.max(0.0), dhi.max(0.0), (1.0 - theta) * w[0] + floor),
        ];
        let dens = |x: f64, m: f64, v: f64| {
            (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
        };
        let he = (ehi - elo) / n as f64;
        let mut z = 0.0;
        let mut s = [0.0; 2];
        let mut s2 = [0.0; 2];
        for (lo, hi, lik) in panels {
            if hi <= lo {
                continue;
            }
            let hd = (hi - lo) / n as f64;
            for a in 0..=n {
                let d = lo + a as f64 * hd;
                let wd = if a == 0 || a == n { hd / 2.0 } else { hd };
                for b in 0..=n {
                    let e = elo + b as f64 * he;
                    let we = if b == 0 || b == n { he / 2.0 } else { he };
                    let x1 = 0.5 * (e + d);
                    let x2 = 0.5 * (e - d);
                    // the map (d, e) -> (s1, s2) has Jacobian 1/2
                    let p = 0.5 * dens(x1, m1, v1) * dens(x2, m2, v2) * lik * wd * we;
                    z += p;
                    s[0] += p * x1;
                    s[1] += p * x2;
                    s2[0] += p * x1 * x1;
                    s2[1] += p * x2 * x2;
                }
            }
        }
        let mean = [s[0] / z, s[1] / z];
        let var = [s2[0] / z - mean[0] * mean[0], s2[1] / z - mean[1] * mean[1]];
        (z, mean, var)
    }

    #[test]
    fn moment_match_agrees_with_grid_oracle() {
        let cases = [
            ([0.8, 0.2], 0.0, vec![0.0, 0.0], vec![1.0, 1.0]),
            ([0.9, 0.1], 2.0 / 11.0, vec![0.3, -0.4], vec![0.6, 1.7]),
            ([0.3, 0.7], 0.3, vec![1.0, 0.5], vec![2.0, 0.4]),
        ];
        for (w, theta, mean, var) in cases {
            let cav = DiagGaussian { mean, var };
            let lik = TaskLikelihood::new(w.iter().map(|v: &f64| v.ln()).collect());
            let m = moment_match(&lik, &cav, theta, &integ()).unwrap();
            let (z, gm, gv) = grid_moments(w, theta, &cav);
            assert!((m.log_z.exp() - z).abs() < 1e-4, "Z {} vs {z}", m.log_z.exp());
            for k in 0..2 {
                assert!((m.marginal.mean[k] - gm[k]).abs() < 1e-4, "mean {k}");
                assert!((m.marginal.var[k] - gv[k]).abs() < 1e-4, "var {k}");
            }
        }
    }

    #[test]
    fn damping_examples() {
        let old = SiteFactor {
            tau: vec![1.0, 2.0],
            nu: vec![0.5, -1.0],
            beta_incr: [0.2, 0.8],
        };
        let new = SiteFactor {
            tau: vec![3.0, 0.0],
            nu: vec![1.5, 1.0],
            beta_incr: [0.6, 0.4],
        };
        assert_eq!(damped_update(&old, &new, 0.0), old);
        assert_eq!(damped_update(&old, &new, 1.0), new);
        let half = damped_update(&old, &new, 0.5);
        assert_eq!(half.tau, vec![2.0, 1.0]);
        assert_eq!(half.nu, vec![1.0, 0.0]);
        assert!((half.beta_incr[0] - 0.4).abs() < 1e-15 && (half.beta_incr[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn negative_precision_is_damped_then_clamped() {
        let old = SiteFactor {
            tau: vec![1.0],
            nu: vec![0.0],
            beta_incr: [0.0, 0.0],
        };
        let new = SiteFactor {
            tau: vec![-2.0],
            nu: vec![1.0],
            beta_incr: [0.0, 0.0],
        };
        let out = safe_damped_update(&old, &new, 0.5, 0.05);
        assert!(out.tau[0] >= 0.0);
        assert!((out.tau[0] - 0.25).abs() < 1e-12);
        let huge = SiteFactor {
            tau: vec![-1e3],
            nu: vec![0.0],
            beta_incr: [0.0, 0.0],
        };
        assert_eq!(safe_damped_update(&old, &huge, 0.5, 0.05).tau[0], 0.0);
    }

    #[test]
    fn no_answers_returns_prior() {
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
        let grams = ClassGrams::Shared(build_gram(&f, &Kernel::Dot, 1e-6).unwrap());
        let liks = vec![TaskLikelihood::new(vec![0.0; 3]); 3];
        let post = ep_run_likelihoods(&liks, &grams, 2.0, 9.0, &EpConfig::default(), None).unwrap();
        assert!(post.converged);
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(post.means[i][k], 0.0);
                assert!((post.vars[i][k] - grams.for_class(0).values()[(i, i)]).abs() < 1e-12);
            }
        }
        assert_eq!((post.alpha, post.beta), (2.0, 9.0));
        assert!(post.log_evidence.abs() < 1e-12);
        assert!(post.kl_to_prior.abs() < 1e-9);
        assert!((post.theta_bar() - 2.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn predictive_examples() {
        let p = predictive_from(&[0.2, 0.2], &[0.5, 0.5], 0.3, &integ());
        assert!((p[0] - 0.5).abs() < 1e-12);
        let p = predictive_from(&[10.0, 0.0], &[1.0, 1e-12], 0.0, &integ());
        assert!(p[0] > 1.0 - 1e-6);
        // outlier floor theta/C with theta = 2/11 and a GP term that is all on class 2
        let p = predictive_from(&[-40.0, 40.0], &[1.0, 1.0], 2.0 / 11.0, &integ());
        assert!((p[0] - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn single_task_evidence_matches_grid_oracle() {
        let k = DMatrix::from_row_slice(1, 1, &[1.3]);
        let grams = shared(k);
        let w = [0.85, 0.15];
        let liks = vec![TaskLikelihood::new(w.iter().map(|v: &f64| v.ln()).collect())];
        let post = ep_run_likelihoods(&liks, &grams, 2.0, 9.0, &EpConfig::default(), None).unwrap();
        assert!(post.converged);
        let prior = DiagGaussian {
            mean: vec![0.0, 0.0],
            var: vec![1.3, 1.3],
        };
        // one site: its cavity is the prior and theta's cavity is the prior mean
        let (z, mean, var) = grid_moments(w, 2.0 / 11.0, &prior);
        assert!((post.log_evidence - z.ln()).abs() < 1e-3, "{} vs {}", post.log_evidence, z.ln());
        for k in 0..2 {
            assert!((post.means[0][k] - mean[k]).abs() < 1e-3);
            assert!((post.vars[0][k] - var[k]).abs() < 1e-3);
        }
    }

    #[test]
    fn duplicated_tasks_get_identical_predictives() {
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 1.0, 0.2, -0.3, 0.9]);
        let grams = ClassGrams::Shared(build_gram(&f, &Kernel::Dot, 1e-6).unwrap());
        let row = TaskLikelihood::new(vec![0.8f64.ln(), 0.2f64.ln()]);
        let liks = vec![row.clone(), row, TaskLikelihood::new(vec![0.3f64.ln(), 0.7f64.ln()])];
        let post = ep_run_likelihoods(&liks, &grams, 2.0, 9.0, &EpConfig::default(), None).unwrap();
        assert!(post.converged);
        let (p0, p1) = (post.predictive(0), post.predictive(1));
        for k in 0..2 {
            assert!((p0[k] - p1[k]).abs() < 1e-6);
        }
        assert!(post.log_evidence.is_finite());
    }

    #[test]
    fn zero_damping_is_a_fixed_point() {
        let f = DMatrix::from_row_slice(3, 1, &[1.0, 0.5, -0.4]);
        let grams = ClassGrams::Shared(build_gram(&f, &Kernel::Dot, 1e-6).unwrap());
        let liks = vec![
            TaskLikelihood::new(vec![0.8f64.ln(), 0.2f64.ln()]),
            TaskLikelihood::new(vec![0.6f64.ln(), 0.4f64.ln()]),
            TaskLikelihood::new(vec![0.1f64.ln(), 0.9f64.ln()]),
        ];
        let fitted = ep_run_likelihoods(&liks, &grams, 2.0, 9.0, &EpConfig::default(), None).unwrap();
        let cfg = EpConfig {
            damping: 0.0,
            min_damping: 0.0,
            max_sweeps: 1,
            ..EpConfig::default()
        };
        let again = ep_run_likelihoods(&liks, &grams, 2.0, 9.0, &cfg, Some(&fitted.sites)).unwrap();
        assert_eq!(again.sites, fitted.sites);
        assert!(again.converged);
    }

    #[test]
    fn random_schedule_reaches_the_same_fixed_point() {
        let f = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.8, 0.3, 0.0, 1.0, -0.5, 0.5]);
        let grams = ClassGrams::Shared(build_gram(&f, &Kernel::Dot, 1e-6).unwrap());
        let liks: Vec<TaskLikelihood> = [[0.8f64, 0.2], [0.7, 0.3], [0.25, 0.75], [0.5, 0.5 + 1e-3]]
            .iter()
            .map(|w| TaskLikelihood::new(w.iter().map(|v| v.ln()).collect()))
            .collect();
        let tight = EpConfig {
            tol: 1e-10,
            max_sweeps: 2000,
            ..EpConfig::default()
        };
        let a = ep_run_likelihoods(&liks, &grams, 2.0, 9.0, &tight, None).unwrap();
        let b = ep_run_likelihoods(
            &liks,
            &grams,
            2.0,
            9.0,
            &EpConfig {
                schedule: Schedule::Random { seed: 3 },
                ..tight
            },
            None,
        )
        .unwrap();
        for i in 0..4 {
            let (pa, pb) = (a.predictive(i), b.predictive(i));
            for k in 0..2 {
                assert!((pa[k] - pb[k]).abs() < 1e-6);
            }
        }
    }
}
