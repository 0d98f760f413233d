use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowd_attn::attention::AttentionKind;
use crowd_attn::baselines::{awmv, dawid_skene, dawid_skene_with, glad, gtic, majority_vote, EM_MAX_ITERS};
use crowd_attn::data::{
    accuracy, infer_order, load_dataset, save_dataset, AggregationResult, Dataset, Diagnostics, Format, GoldLabels,
    Label,
};
use crowd_attn::ep::{cavity, combine, ep_run, predictive_from, tilted_predictive, DiagGaussian, EpConfig, SiteFactor, TaskLikelihood};
use crowd_attn::gem::{fit_with_kernel, lower_bound, GemConfig, ModelParams};
use crowd_attn::kernels::{build_gram, ClassGrams, Kernel};
use crowd_attn::optim::central_difference;
use crowd_attn::quadrature::ProbitIntegrator;

/// A random dataset: every worker answers a random subset in a random order.
fn random_dataset(seed: u64, n: usize, w: usize, c: usize, d: usize, with_gold: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
    let mut answers = vec![0 as Label; n * w];
    let mut orders = Vec::new();
    for k in 0..w {
        let mut tasks: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.7)).collect();
        tasks.shuffle(&mut rng);
        for &i in &tasks {
            answers[i * w + k] = rng.random_range(1..=c as Label);
        }
        orders.push(if rng.random_bool(0.5) { Some(tasks) } else { None });
    }
    let gold = with_gold.then(|| GoldLabels::new((0..n).map(|_| rng.random_range(1..=c as Label)).collect()));
    Dataset::new(features, answers, w, c, orders, gold).unwrap()
}

fn shared_gram(ds: &Dataset) -> ClassGrams {
    ClassGrams::Shared(build_gram(ds.features(), &Kernel::Dot, 1e-6).unwrap())
}

fn diag(mean: Vec<f64>, var: Vec<f64>) -> DiagGaussian {
    DiagGaussian { mean, var }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_files_round_trip(seed in any::<u64>(), n in 1usize..12, w in 1usize..6, c in 2usize..5, gold in any::<bool>()) {
        let ds = random_dataset(seed, n, w, c, 3, gold);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, &dir.path().join("csv"), Format::Csv).unwrap();
        prop_assert_eq!(&load_dataset(&dir.path().join("csv"), Format::Csv).unwrap(), &ds);
        let json = dir.path().join("ds.json");
        save_dataset(&ds, &json, Format::Json).unwrap();
        prop_assert_eq!(&load_dataset(&json, Format::Json).unwrap(), &ds);
    }

    #[test]
    fn accuracy_is_permutation_equivariant(labels in prop::collection::vec((1u32..4, 1u32..4), 1..40), seed in any::<u64>()) {
        let (pred, gold): (Vec<Label>, Vec<Label>) = labels.iter().map(|&(a, b)| (a as Label, b as Label)).unzip();
        let acc = accuracy(&pred, &GoldLabels::new(gold.clone())).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!(acc == 1.0, pred == gold);
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<Label> = idx.iter().map(|&i| pred[i]).collect();
        let g2: Vec<Label> = idx.iter().map(|&i| gold[i]).collect();
        prop_assert!((accuracy(&p2, &GoldLabels::new(g2)).unwrap() - acc).abs() < 1e-15);
    }

    #[test]
    fn dot_gram_is_outer_product_plus_jitter(seed in any::<u64>(), n in 1usize..10, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let k = build_gram(&f, &Kernel::Dot, 1e-6).unwrap();
        let expected = &f * f.transpose() + DMatrix::<f64>::identity(n, n) * 1e-6;
        prop_assert!((k.values() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn predictives_are_distributions(
        means in prop::collection::vec(-4.0f64..4.0, 2..6),
        log_w in prop::collection::vec(-6.0f64..0.0, 6),
        theta in 0.0f64..0.9,
    ) {
        let c = means.len();
        let vars: Vec<f64> = means.iter().map(|m| 0.05 + m.abs()).collect();
        let integrator = ProbitIntegrator::new(32);
        let p = predictive_from(&means, &vars, theta, &integrator);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let lik = TaskLikelihood::new(log_w[..c].to_vec());
        let t = tilted_predictive(&lik, &diag(means, vars), theta, &integrator);
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(t.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cavity_then_combine_restores_marginal(
        means in prop::collection::vec(-3.0f64..3.0, 3),
        vars in prop::collection::vec(0.1f64..2.0, 3),
        frac in prop::collection::vec(0.0f64..0.9, 3),
        nu in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        // site precision strictly below the marginal precision keeps the cavity proper
        let tau: Vec<f64> = frac.iter().zip(&vars).map(|(f, v)| f / v).collect();
        let site = SiteFactor { tau, nu, beta_incr: [0.1, 0.2] };
        let m = diag(means.clone(), vars.clone());
        let back = combine(&cavity(&m, &site, 0).unwrap(), &site);
        for k in 0..3 {
            assert_relative_eq!(back.mean[k], means[k], epsilon = 1e-10, max_relative = 1e-10);
            assert_relative_eq!(back.var[k], vars[k], max_relative = 1e-10);
        }
    }

    #[test]
    fn quadrature_converges(means in prop::collection::vec(-2.0f64..2.0, 2..5), scale in 0.1f64..1.5) {
        let vars: Vec<f64> = means.iter().map(|_| scale).collect();
        let a = ProbitIntegrator::new(32).class_probabilities(&means, &vars);
        let b = ProbitIntegrator::new(64).class_probabilities(&means, &vars);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn argmax_ignores_positive_scaling(rows in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 1..10), s in 0.01f64..100.0) {
        let diagnostics = Diagnostics { iterations: 0, objective: None, converged: true };
        let a = AggregationResult::from_weights(rows.clone(), diagnostics.clone());
        let scaled = rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let b = AggregationResult::from_weights(scaled, diagnostics);
        prop_assert_eq!(a.labels, b.labels);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn baselines_are_row_stochastic_and_deterministic(seed in any::<u64>(), c in 2usize..5) {
        let ds = random_dataset(seed, 15, 5, c, 3, false);
        let runs = |ds: &Dataset| {
            vec![majority_vote(ds), dawid_skene(ds, 50, 1e-6).0, glad(ds, 50).0, gtic(ds, 7)]
        };
        let first = runs(&ds);
        for r in &first {
            prop_assert_eq!(r.labels.len(), 15);
            for (row, &l) in r.label_probs.iter().zip(&r.labels) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!(l >= 1 && l as usize <= c);
            }
            prop_assert!(r.diagnostics.iterations <= EM_MAX_ITERS);
        }
        prop_assert_eq!(first, runs(&ds));
    }

    #[test]
    fn majority_vote_is_invariant_to_worker_order(seed in any::<u64>()) {
        let ds = random_dataset(seed, 12, 5, 3, 2, false);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let answers: Vec<Label> = (0..12).flat_map(|i| perm.iter().map(move |&w| (i, w))).map(|(i, w)| ds.answer(i, w)).collect();
        let orders = perm.iter().map(|&w| ds.completion_order(w).map(<[usize]>::to_vec)).collect();
        let shuffled = Dataset::new(ds.features().clone(), answers, 5, 3, orders, None).unwrap();
        prop_assert_eq!(majority_vote(&ds).label_probs, majority_vote(&shuffled).label_probs);
    }

    #[test]
    fn raising_voter_quality_never_lowers_their_class(seed in any::<u64>(), task in 0usize..6, boost in 0.1f64..0.9) {
        let ds = random_dataset(seed, 6, 4, 3, 2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let q = DMatrix::from_fn(6, 4, |_, _| rng.random_range(0.4..0.9));
        let grams = shared_gram(&ds);
        let config = EpConfig { tol: 1e-9, max_sweeps: 500, ..EpConfig::default() };
        let before = ep_run(&ds, &grams, &q, 2.0, 9.0, &config, None).unwrap();
        let voted: Vec<Label> = ds.task_answers(task).map(|(_, a)| a).collect();
        prop_assume!(!voted.is_empty());
        let k = voted[0];
        let mut q2 = q.clone();
        for (w, a) in ds.task_answers(task) {
            if a == k {
                q2[(task, w)] += boost * (1.0 - q2[(task, w)]);
            }
        }
        let after = ep_run(&ds, &grams, &q2, 2.0, 9.0, &config, None).unwrap();
        let (p0, p1) = (before.predictive(task)[k as usize - 1], after.predictive(task)[k as usize - 1]);
        prop_assert!(p1 >= p0 - 1e-6, "{p0} -> {p1}");
    }
}

#[test]
fn attention_free_fit_ignores_completion_order() {
    let ds = random_dataset(3, 25, 5, 3, 4, false);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let orders = ds
        .completion_orders()
        .iter()
        .enumerate()
        .map(|(w, _)| {
            let mut o = ds.worker_tasks(w);
            o.shuffle(&mut rng);
            Some(o)
        })
        .collect();
    let permuted = ds.with_answers(ds.answers().to_vec(), 5, orders).unwrap();
    let config = GemConfig { max_iters: 5, ..GemConfig::new(AttentionKind::None) };
    let a = fit_with_kernel(&ds, &Kernel::Dot, &config).unwrap();
    let b = fit_with_kernel(&permuted, &Kernel::Dot, &config).unwrap();
    assert_eq!(a.result.labels, b.result.labels);
    for (x, y) in a.result.label_probs.iter().flatten().zip(b.result.label_probs.iter().flatten()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn bound_gradient_matches_five_point_stencil() {
    let ds = random_dataset(5, 20, 4, 3, 3, false);
    let config = GemConfig::new(AttentionKind::None);
    let orders = infer_order(&ds);
    let params = ModelParams::init(&ds, &orders, &config);
    let grams = shared_gram(&ds);
    let posterior = ep_run(&ds, &grams, &params.qualities(&ds, &orders), 2.0, 9.0, &config.ep, None).unwrap();
    let bound = |x: &[f64]| {
        let mut p = params.clone();
        for (w, &a) in p.workers.iter_mut().zip(x) {
            w.amplitude = a;
        }
        lower_bound(&p, &posterior, &ds)
    };
    let x: Vec<f64> = params.workers.iter().map(|w| w.amplitude).collect();
    let g = central_difference(&x, 1e-5, bound);
    let h = 1e-3;
    for j in 0..x.len() {
        let at = |d: f64| {
            let mut y = x.clone();
            y[j] += d;
            bound(&y)
        };
        let five = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
        assert!((g[j] - five).abs() <= 1e-3 * five.abs().max(1.0), "worker {j}: {} vs {five}", g[j]);
    }
}

#[test]
fn dawid_skene_without_smoothing_trusts_a_perfect_worker() {
    // noiseless crowd: one perfect worker, a sparse correct one and one that
    // always answers the next class
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 30;
    let gold: Vec<Label> = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let mut answers = Vec::new();
    for &g in &gold {
        answers.push(g);
        answers.push(if rng.random_bool(0.5) { g } else { 0 });
        answers.push(g % 3 + 1);
    }
    let features = DMatrix::from_element(n, 1, 1.0);
    let ds = Dataset::new(features, answers, 3, 3, vec![None; 3], None).unwrap();
    let (r, cms) = dawid_skene_with(&ds, 50, 1e-9, 0.0);
    assert_eq!(r.labels, gold);
    for k in 0..3 {
        assert!(cms[0].rows()[k][k] > 0.99);
    }
}

/// Draws answers from fixed confusion matrices.
fn confusion_sim(seed: u64, n: usize, cms: &[[[f64; 3]; 3]]) -> (Dataset, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold: Vec<Label> = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let mut answers = Vec::new();
    for &g in &gold {
        for cm in cms {
            let row = cm[g as usize - 1];
            let u: f64 = rng.random();
            let a = if u < row[0] { 1 } else if u < row[0] + row[1] { 2 } else { 3 };
            answers.push(a);
        }
    }
    let features = DMatrix::from_element(n, 1, 1.0);
    let ds = Dataset::new(features, answers, cms.len(), 3, vec![None; cms.len()], None).unwrap();
    (ds, gold)
}

#[test]
fn dawid_skene_recovers_confusion_matrices() {
    let cms = [
        [[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8]],
        [[0.7, 0.2, 0.1], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7]],
        [[0.8, 0.1, 0.1], [0.3, 0.6, 0.1], [0.1, 0.1, 0.8]],
        [[0.6, 0.3, 0.1], [0.1, 0.8, 0.1], [0.1, 0.2, 0.7]],
        [[0.85, 0.1, 0.05], [0.05, 0.85, 0.1], [0.1, 0.05, 0.85]],
    ];
    let (ds, _) = confusion_sim(21, 500, &cms);
    let (_, est) = dawid_skene(&ds, 50, 1e-8);
    for (w, cm) in cms.iter().enumerate() {
        for r in 0..3 {
            for c in 0..3 {
                let e = est[w].rows()[r][c];
                assert!((e - cm[r][c]).abs() < 0.1, "worker {w} ({r},{c}): {e} vs {}", cm[r][c]);
            }
        }
    }
}

#[test]
fn glad_ranks_a_contrarian_below_the_crowd() {
    let good = [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]];
    // always answers a wrong class
    let contrarian = [[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]];
    let (ds, _) = confusion_sim(4, 200, &[good, good, good, good, contrarian]);
    let (_, params) = glad(&ds, 50);
    for w in 0..4 {
        assert!(params.ability[4] < params.ability[w]);
    }
}

#[test]
fn awmv_beats_majority_vote_under_positive_bias() {
    // binary labels; wrong answers are mostly false positives
    let mut wins = 0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let gold: Vec<Label> = (0..n).map(|_| rng.random_range(1..=2)).collect();
        let mut answers = Vec::new();
        for &g in &gold {
            for _ in 0..5 {
                let flip = if g == 1 { rng.random_bool(0.4) } else { rng.random_bool(0.1) };
                answers.push(if flip { 3 - g } else { g });
            }
        }
        let ds = Dataset::new(DMatrix::from_element(n, 1, 1.0), answers, 5, 2, vec![None; 5], None).unwrap();
        let gold = GoldLabels::new(gold);
        let a = accuracy(&awmv(&ds).unwrap().labels, &gold).unwrap();
        let m = accuracy(&majority_vote(&ds).labels, &gold).unwrap();
        wins += usize::from(a >= m);
    }
    assert!(wins >= 6, "AWMV won {wins}/10");
}
