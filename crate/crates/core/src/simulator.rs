//! Semi-synthetic crowd data with attention-driven answer quality.
//!
//! Every worker answers its tasks in a random order. At rank `r` the answer
//! is correct with probability `q(r)` taken from a calibrated quality curve
//! (its clamped mean is the worker's global quality), otherwise it is drawn
//! uniformly from the wrong classes.
//!
//! Each worker draws from its own ChaCha8 stream derived from the run seed,
//! so results do not depend on generation order.

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{calibrated_quality_curve, AttentionKind, AttentionModel, DEFAULT_QUALITY_EPS};
use crate::data::{Dataset, GoldLabels, Label};
use crate::error::{Error, Result};
use crate::gem::FitResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerKind {
    /// Global quality at least 0.9.
    Expert,
    /// Global quality in `[0.6, 0.9)`.
    Normal,
    /// Global quality in `[0.5, 0.6)`, between the other bands.
    Weak,
    /// Global quality below 0.5.
    Spammer,
    /// Answers uniformly at random.
    RandomSpammer,
    /// Gives the same answer to every task.
    UniformSpammer,
}

impl WorkerKind {
    /// Taxonomy band of a global quality.
    pub fn from_quality(q: f64) -> Self {
        if q >= 0.9 {
            WorkerKind::Expert
        } else if q >= 0.6 {
            WorkerKind::Normal
        } else if q >= 0.5 {
            WorkerKind::Weak
        } else {
            WorkerKind::Spammer
        }
    }
}

/// Fractions of each worker type in a generated crowd.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileMix {
    pub expert: f64,
    pub normal: f64,
    /// Low-quality workers whose answers still follow the quality model.
    pub spammer: f64,
    /// Workers who give one fixed answer to every task.
    pub uniform_spammer: f64,
}

impl ProfileMix {
    fn fractions(&self) -> [f64; 4] {
        [self.expert, self.normal, self.spammer, self.uniform_spammer]
    }
}

impl Default for ProfileMix {
    fn default() -> Self {
        ProfileMix {
            expert: 0.1,
            normal: 0.4,
            spammer: 0.3,
            uniform_spammer: 0.2,
        }
    }
}

/// One explicitly specified worker. Unset fields follow the defaults of the
/// worker's band.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkerSpec {
    pub amplitude: f64,
    pub kind: Option<WorkerKind>,
    /// `lambda` or `mu`.
    pub location: Option<f64>,
    pub sigma: Option<f64>,
    pub sensitivity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub n_tasks: usize,
    pub n_workers: usize,
    pub n_classes: usize,
    pub dim: usize,
    /// Distance of each class mean from the origin, along its own axis.
    pub separation: f64,
    pub feature_noise: f64,
    /// Fraction of tasks each worker answers.
    pub coverage: f64,
    pub mix: ProfileMix,
    pub attention: AttentionKind,
    /// Attention sensitivity of normal workers.
    pub sensitivity: f64,
    /// Draw global qualities to match a fixed band split: 60% at least 0.6,
    /// 9% below 0.4, the rest in between.
    pub news_protocol: bool,
    /// Overrides `n_workers` and `mix` when present.
    pub workers: Option<Vec<WorkerSpec>>,
    /// Also produce a copy with this fraction of answers flipped.
    pub noise_ratio: Option<f64>,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            n_tasks: 200,
            n_workers: 20,
            n_classes: 4,
            dim: 256,
            separation: 2.0,
            feature_noise: 1.0,
            coverage: 1.0,
            mix: ProfileMix::default(),
            attention: AttentionKind::Poisson,
            sensitivity: 1.0,
            news_protocol: false,
            workers: None,
            noise_ratio: None,
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_tasks == 0 || self.n_classes < 2 || self.dim == 0 {
            return bad("simulation needs tasks, at least two classes and a feature dimension".into());
        }
        if self.workers.as_ref().map_or(self.n_workers == 0, Vec::is_empty) {
            return bad("simulation needs at least one worker".into());
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return bad(format!("coverage must lie in (0, 1], got {}", self.coverage));
        }
        let m = &self.mix;
        if m.fractions().iter().any(|f| !(*f >= 0.0)) || (m.fractions().iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad("profile fractions must be non-negative and sum to 1".into());
        }
        if !(self.separation >= 0.0) || !(self.feature_noise > 0.0) || !(self.sensitivity >= 0.0) {
            return bad("separation, feature noise and sensitivity must be non-negative (noise positive)".into());
        }
        if let Some(r) = self.noise_ratio {
            check_ratio(r)?;
        }
        for w in self.workers.iter().flatten() {
            if !(0.0..=1.0).contains(&w.amplitude) {
                return bad(format!("worker amplitude {} outside [0, 1]", w.amplitude));
            }
        }
        Ok(())
    }
}

/// The generating parameters of one worker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub kind: WorkerKind,
    pub amplitude: f64,
    pub attention: AttentionModel,
    pub sensitivity: f64,
    pub n_tasks: usize,
    /// Seed of this worker's random stream.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    /// Carries the gold labels.
    pub dataset: Dataset,
    pub gold: GoldLabels,
    pub profiles: Vec<WorkerProfile>,
}

/// Seed for stream `k` of a run.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, k))
}

/// Default attention location for a normal worker: 2 at quality 0.6 rising
/// to 4 at 0.9, so better workers peak earlier.
pub fn default_location(amplitude: f64) -> f64 {
    (2.0 + 2.0 * (amplitude - 0.6) / 0.3).clamp(1.5, 5.0)
}

fn attention_for(kind: AttentionKind, location: f64, sigma: Option<f64>, n: usize) -> AttentionModel {
    match kind {
        AttentionKind::Poisson => AttentionModel::Poisson {
            lambda: location,
            n_tasks: n,
        },
        AttentionKind::Gaussian => AttentionModel::Gaussian {
            mu: location,
            sigma: sigma.unwrap_or((n as f64 / 8.0).max(1.0)),
            n_tasks: n,
        },
        AttentionKind::Uniform | AttentionKind::None => AttentionModel::Uniform { n_tasks: n },
    }
}

/// Splits `total` by `fractions` with largest-remainder rounding.
fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for k in order {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Global qualities and kinds for a generated crowd.
fn draw_amplitudes(spec: &SimSpec, rng: &mut ChaCha8Rng) -> Vec<(f64, WorkerKind)> {
    let c = spec.n_classes as f64;
    let spam_q = (1.0 / c).min(0.45);
    let mut out = Vec::with_capacity(spec.n_workers);
    if spec.news_protocol {
        let counts = apportion(spec.n_workers, &[0.6, 0.31, 0.09]);
        let mut qs = Vec::with_capacity(spec.n_workers);
        for _ in 0..counts[0] {
            qs.push(rng.random_range(0.6..0.95));
        }
        for _ in 0..counts[1] {
            qs.push(rng.random_range(0.4..0.6));
        }
        for _ in 0..counts[2] {
            qs.push(rng.random_range((1.0 / c).min(0.3)..0.4));
        }
        qs.shuffle(rng);
        return qs.into_iter().map(|q| (q, WorkerKind::from_quality(q))).collect();
    }
    let m = &spec.mix;
    let counts = apportion(spec.n_workers, &m.fractions());
    for _ in 0..counts[0] {
        out.push((rng.random_range(0.9..0.98), WorkerKind::Expert));
    }
    for _ in 0..counts[1] {
        out.push((rng.random_range(0.6..0.9), WorkerKind::Normal));
    }
    for _ in 0..counts[2] {
        out.push((spam_q, WorkerKind::Spammer));
    }
    for _ in 0..counts[3] {
        out.push((1.0 / c, WorkerKind::UniformSpammer));
    }
    out.shuffle(rng);
    out
}

fn wrong_label(gold: Label, c: usize, rng: &mut ChaCha8Rng) -> Label {
    let k = rng.random_range(1..c as Label);
    if k >= gold {
        k + 1
    } else {
        k
    }
}

/// Draws answers along `order` from a calibrated curve.
fn answer_along(
    profile: &WorkerProfile,
    order: &[usize],
    gold: &[Label],
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Label)> {
    let curve = calibrated_quality_curve(&profile.attention, profile.amplitude, profile.sensitivity, DEFAULT_QUALITY_EPS);
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let q = curve.points[k].1;
            let a = if rng.random::<f64>() < q {
                gold[i]
            } else {
                wrong_label(gold[i], c, rng)
            };
            (i, a)
        })
        .collect()
}

pub fn simulate(spec: &SimSpec) -> Result<Simulation> {
    spec.validate()?;
    let (n, c, d) = (spec.n_tasks, spec.n_classes, spec.dim);
    let mut rng = rng_for(spec.seed, 0);
    let gold: Vec<Label> = (0..n).map(|_| rng.random_range(1..=c as Label)).collect();
    // class means: separation along axis (y - 1) mod d, plus a random offset
    // for classes beyond the dimension
    let means: Vec<Vec<f64>> = (0..c)
        .map(|y| {
            let mut m = vec![0.0; d];
            if y < d {
                m[y] = spec.separation;
            } else {
                for v in m.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = spec.separation * z / (d as f64).sqrt();
                }
            }
            m
        })
        .collect();
    // per-coordinate noise so the squared noise norm is about feature_noise^2
    let noise_scale = spec.feature_noise;
    let mut features = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[(i, j)] = means[gold[i] as usize - 1][j] + noise_scale * z;
        }
    }

    let drawn: Vec<(f64, WorkerKind, Option<&WorkerSpec>)> = match &spec.workers {
        Some(list) => list
            .iter()
            .map(|w| (w.amplitude, w.kind.unwrap_or(WorkerKind::from_quality(w.amplitude)), Some(w)))
            .collect(),
        None => draw_amplitudes(spec, &mut rng).into_iter().map(|(q, k)| (q, k, None)).collect(),
    };
    let n_workers = drawn.len();
    let per_worker = ((spec.coverage * n as f64).round() as usize).clamp(1, n);
    let mut answers = vec![0 as Label; n * n_workers];
    let mut orders = Vec::with_capacity(n_workers);
    let mut profiles = Vec::with_capacity(n_workers);
    for (w, (amplitude, kind, explicit)) in drawn.into_iter().enumerate() {
        let wseed = derive_seed(spec.seed, w as u64 + 1);
        let mut wrng = ChaCha8Rng::seed_from_u64(wseed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut wrng);
        order.truncate(per_worker);
        let attentive = kind == WorkerKind::Normal || explicit.is_some_and(|e| e.sensitivity.is_some());
        let location = explicit.and_then(|e| e.location).unwrap_or_else(|| default_location(amplitude));
        let sensitivity = match explicit.and_then(|e| e.sensitivity) {
            Some(s) => s,
            None if attentive => spec.sensitivity,
            None => 0.0,
        };
        let profile = WorkerProfile {
            kind,
            amplitude,
            attention: attention_for(spec.attention, location, explicit.and_then(|e| e.sigma), order.len()),
            sensitivity: if spec.attention.is_rank_dependent() { sensitivity } else { 0.0 },
            n_tasks: order.len(),
            seed: wseed,
        };
        let drawn_answers = match kind {
            WorkerKind::RandomSpammer => order.iter().map(|&i| (i, wrng.random_range(1..=c as Label))).collect(),
            WorkerKind::UniformSpammer => {
                let fixed = wrng.random_range(1..=c as Label);
                order.iter().map(|&i| (i, fixed)).collect()
            }
            _ => answer_along(&profile, &order, &gold, c, &mut wrng),
        };
        for (i, a) in drawn_answers {
            answers[i * n_workers + w] = a;
        }
        orders.push(Some(order));
        profiles.push(profile);
    }
    let gold = GoldLabels::new(gold);
    let dataset = Dataset::new(features, answers, n_workers, c, orders, Some(gold.clone()))?;
    Ok(Simulation {
        dataset,
        gold,
        profiles,
    })
}

/// Redraws every answer of every worker from a quality curve whose mean is
/// the worker's fitted global quality. Workers in the normal band get
/// attention of the given kind; the others stay flat. Answered cells and
/// completion orders are preserved.
pub fn reannotate(dataset: &Dataset, fit: &FitResult, kind: AttentionKind, seed: u64) -> Result<Dataset> {
    if fit.global_quality.len() != dataset.n_workers() {
        return Err(Error::MissingFit(format!(
            "fit covers {} workers, dataset has {}",
            fit.global_quality.len(),
            dataset.n_workers()
        )));
    }
    reannotate_with_qualities(dataset, &fit.global_quality, kind, 1.0, seed).map(|(d, _)| d)
}

pub fn reannotate_with_qualities(
    dataset: &Dataset,
    qualities: &[f64],
    kind: AttentionKind,
    sensitivity: f64,
    seed: u64,
) -> Result<(Dataset, Vec<WorkerProfile>)> {
    let gold = dataset
        .gold()
        .ok_or_else(|| Error::Validation("re-annotation needs gold labels".into()))?
        .labels()
        .to_vec();
    if qualities.len() != dataset.n_workers() {
        return Err(Error::LengthMismatch {
            left: qualities.len(),
            right: dataset.n_workers(),
        });
    }
    let orders = crate::data::infer_order(dataset);
    let w_count = dataset.n_workers();
    let mut answers = vec![0 as Label; dataset.n_tasks() * w_count];
    let mut profiles = Vec::with_capacity(w_count);
    for (w, order) in orders.iter().enumerate() {
        let q = qualities[w].clamp(0.0, 1.0);
        let wkind = WorkerKind::from_quality(q);
        let wseed = derive_seed(seed, w as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(wseed);
        let profile = WorkerProfile {
            kind: wkind,
            amplitude: q,
            attention: attention_for(kind, default_location(q), None, order.len()),
            sensitivity: if wkind == WorkerKind::Normal && kind.is_rank_dependent() {
                sensitivity
            } else {
                0.0
            },
            n_tasks: order.len(),
            seed: wseed,
        };
        for (i, a) in answer_along(&profile, &order.order, &gold, dataset.n_classes(), &mut rng) {
            answers[i * w_count + w] = a;
        }
        profiles.push(profile);
    }
    let ds = dataset.with_answers(answers, w_count, dataset.completion_orders().to_vec())?;
    Ok((ds, profiles))
}

/// Appends random spammers (uniform random answers) and uniform spammers
/// (one fixed answer), each answering the average number of tasks per
/// existing worker in a random order.
pub fn inject_spammers(dataset: &Dataset, n_random: usize, n_uniform: usize, seed: u64) -> Result<Dataset> {
    if n_random + n_uniform == 0 {
        return Ok(dataset.clone());
    }
    let (n, w0, c) = (dataset.n_tasks(), dataset.n_workers(), dataset.n_classes());
    let w1 = w0 + n_random + n_uniform;
    let per = ((dataset.n_answers() as f64 / w0 as f64).round() as usize).clamp(1, n);
    let mut answers = vec![0 as Label; n * w1];
    for i in 0..n {
        answers[i * w1..i * w1 + w0].copy_from_slice(dataset.answers_row(i));
    }
    let mut orders = dataset.completion_orders().to_vec();
    for s in 0..n_random + n_uniform {
        let w = w0 + s;
        let mut rng = rng_for(seed, w as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.truncate(per);
        let fixed = rng.random_range(1..=c as Label);
        for &i in &order {
            answers[i * w1 + w] = if s < n_random {
                rng.random_range(1..=c as Label)
            } else {
                fixed
            };
        }
        orders.push(Some(order));
    }
    dataset.with_answers(answers, w1, orders)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(Error::Validation(format!("noise ratio must lie in [0, 0.5], got {ratio}")));
    }
    Ok(())
}

/// For each worker, replaces `ceil(ratio * answers)` randomly chosen answers
/// with a different, uniformly chosen label.
pub fn inject_noise(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    check_ratio(ratio)?;
    let (w_count, c) = (dataset.n_workers(), dataset.n_classes());
    let mut answers = dataset.answers().to_vec();
    for w in 0..w_count {
        let tasks = dataset.worker_tasks(w);
        let k = ((ratio * tasks.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        let mut rng = rng_for(seed, w as u64 + 1);
        for &i in tasks.choose_multiple(&mut rng, k) {
            let old = answers[i * w_count + w];
            answers[i * w_count + w] = wrong_label(old, c, &mut rng);
        }
    }
    dataset.with_answers(answers, w_count, dataset.completion_orders().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SimSpec {
        SimSpec {
            n_tasks: 60,
            n_workers: 6,
            seed,
            ..SimSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate(&small(3)).unwrap();
        let b = simulate(&small(3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.profiles, b.profiles);
        assert_ne!(a.dataset, simulate(&small(4)).unwrap().dataset);
    }

    #[test]
    fn perfect_workers_mostly_copy_gold() {
        let spec = SimSpec {
            attention: AttentionKind::Uniform,
            workers: Some(vec![
                WorkerSpec {
                    amplitude: 1.0,
                    ..WorkerSpec::default()
                };
                3
            ]),
            n_tasks: 200,
            ..small(1)
        };
        let sim = simulate(&spec).unwrap();
        let (mut hit, mut all) = (0, 0);
        for i in 0..sim.dataset.n_tasks() {
            for (_, a) in sim.dataset.task_answers(i) {
                all += 1;
                hit += usize::from(a == sim.gold.labels()[i]);
            }
        }
        assert!(hit as f64 / all as f64 > 0.98);
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(20, &[0.2, 0.6, 0.2]), vec![4, 12, 4]);
        assert_eq!(apportion(7, &[0.6, 0.31, 0.09]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn spammer_injection_examples() {
        let sim = simulate(&small(2)).unwrap();
        assert_eq!(inject_spammers(&sim.dataset, 0, 0, 1).unwrap(), sim.dataset);
        let more = inject_spammers(&sim.dataset, 5, 5, 1).unwrap();
        assert_eq!(more.n_workers(), sim.dataset.n_workers() + 10);
        for w in sim.dataset.n_workers() + 5..more.n_workers() {
            let mut labels: Vec<Label> = more.worker_tasks(w).iter().map(|&i| more.answer(i, w)).collect();
            labels.dedup();
            assert_eq!(labels.len(), 1);
        }
    }

    #[test]
    fn noise_flips_exactly_the_requested_share() {
        let spec = SimSpec {
            attention: AttentionKind::Uniform,
            workers: Some(vec![
                WorkerSpec {
                    amplitude: 1.0,
                    sensitivity: Some(0.0),
                    ..WorkerSpec::default()
                };
                2
            ]),
            ..small(5)
        };
        let sim = simulate(&spec).unwrap();
        assert_eq!(inject_noise(&sim.dataset, 0.0, 9).unwrap(), sim.dataset);
        let noisy = inject_noise(&sim.dataset, 0.3, 9).unwrap();
        for w in 0..2 {
            let changed = (0..60).filter(|&i| noisy.answer(i, w) != sim.dataset.answer(i, w)).count();
            assert_eq!(changed, 18);
        }
        assert!(inject_noise(&sim.dataset, 0.6, 9).is_err());
    }
}
