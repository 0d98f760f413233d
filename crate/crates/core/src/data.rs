//! Datasets, answer matrices, aggregation results and the on-disk formats.
//!
//! Classes are 1-based everywhere; an answer value of `0` means the worker
//! gave no answer for that task.
//!
//! Two on-disk layouts are supported:
//!
//! * **CSV**: a directory holding `answers.csv` (first line a comment
//!   `# tasks=N workers=W classes=C dim=d`, then the columns
//!   `task_id,worker_id,label,order_rank`), `features.csv`
//!   (`task_id,f0,...,f{d-1}`) and an optional `gold.csv` (`task_id,label`).
//!   Ids are 0-based, `order_rank` is 1-based and may be left empty.
//! * **JSON**: a single document mirroring [`DatasetFile`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A class label. `0` is reserved for "no answer".
pub type Label = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Parse(format!("unknown format `{other}`"))),
        }
    }
}

/// Ground-truth labels. Only evaluation code reads these.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabels(Vec<Label>);

impl GoldLabels {
    pub fn new(labels: Vec<Label>) -> Self {
        GoldLabels(labels)
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Features, answers, optional completion orders and optional gold labels.
///
/// Immutable once built; every constructor validates the invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    answers: Vec<Label>,
    n_workers: usize,
    n_classes: usize,
    completion_order: Vec<Option<Vec<usize>>>,
    gold: Option<GoldLabels>,
}

impl Dataset {
    /// `answers` is row-major `n_tasks x n_workers`; `completion_order` has
    /// one entry per worker.
    pub fn new(
        features: DMatrix<f64>,
        answers: Vec<Label>,
        n_workers: usize,
        n_classes: usize,
        mut completion_order: Vec<Option<Vec<usize>>>,
        gold: Option<GoldLabels>,
    ) -> Result<Self> {
        let n_tasks = features.nrows();
        // an empty declared order carries no information
        for o in completion_order.iter_mut() {
            if o.as_ref().is_some_and(|v| v.is_empty()) {
                *o = None;
            }
        }
        if n_tasks == 0 || n_workers == 0 || features.ncols() == 0 {
            return Err(Error::Validation(
                "dataset needs at least one task, one worker and one feature".into(),
            ));
        }
        if n_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if answers.len() != n_tasks * n_workers {
            return Err(Error::Validation(format!(
                "answer matrix has {} entries, expected {}x{}",
                answers.len(),
                n_tasks,
                n_workers
            )));
        }
        if let Some((idx, &a)) = answers
            .iter()
            .enumerate()
            .find(|(_, &a)| a as usize > n_classes)
        {
            return Err(Error::Validation(format!(
                "answer {a} of task {} worker {} outside 0..={n_classes}",
                idx / n_workers,
                idx % n_workers
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        if completion_order.len() != n_workers {
            return Err(Error::Validation(format!(
                "{} completion orders for {n_workers} workers",
                completion_order.len()
            )));
        }
        for (w, order) in completion_order.iter().enumerate() {
            let Some(order) = order else { continue };
            let mut answered: Vec<usize> = (0..n_tasks)
                .filter(|&i| answers[i * n_workers + w] != 0)
                .collect();
            let mut sorted = order.clone();
            sorted.sort_unstable();
            answered.sort_unstable();
            if sorted != answered {
                return Err(Error::Validation(format!(
                    "completion order of worker {w} is not a permutation of its answered tasks"
                )));
            }
        }
        if let Some(g) = &gold {
            if g.len() != n_tasks {
                return Err(Error::Validation(format!(
                    "gold has {} labels for {n_tasks} tasks",
                    g.len()
                )));
            }
            if g.labels().iter().any(|&l| l == 0 || l as usize > n_classes) {
                return Err(Error::Validation("gold label outside 1..=C".into()));
            }
        }
        Ok(Dataset {
            features,
            answers,
            n_workers,
            n_classes,
            completion_order,
            gold,
        })
    }

    /// Builds a dataset from sparse `(task, worker, label)` triples.
    pub fn from_triples(
        features: DMatrix<f64>,
        n_workers: usize,
        n_classes: usize,
        triples: &[(usize, usize, Label)],
        completion_order: Vec<Option<Vec<usize>>>,
        gold: Option<GoldLabels>,
    ) -> Result<Self> {
        let n_tasks = features.nrows();
        let mut answers = vec![0; n_tasks * n_workers];
        for &(i, w, a) in triples {
            if i >= n_tasks || w >= n_workers {
                return Err(Error::Validation(format!(
                    "answer ({i}, {w}) outside {n_tasks}x{n_workers}"
                )));
            }
            if answers[i * n_workers + w] != 0 {
                return Err(Error::Validation(format!(
                    "duplicate answer for task {i}, worker {w}"
                )));
            }
            answers[i * n_workers + w] = a;
        }
        Dataset::new(
            features,
            answers,
            n_workers,
            n_classes,
            completion_order,
            gold,
        )
    }

    pub fn n_tasks(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn answer(&self, task: usize, worker: usize) -> Label {
        self.answers[task * self.n_workers + worker]
    }

    /// Row `task` of the answer matrix.
    pub fn answers_row(&self, task: usize) -> &[Label] {
        &self.answers[task * self.n_workers..(task + 1) * self.n_workers]
    }

    pub fn answers(&self) -> &[Label] {
        &self.answers
    }

    /// `(worker, label)` for every answer given to `task`.
    pub fn task_answers(&self, task: usize) -> impl Iterator<Item = (usize, Label)> + '_ {
        self.answers_row(task)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0)
            .map(|(w, &a)| (w, a))
    }

    /// Tasks answered by `worker`, ascending.
    pub fn worker_tasks(&self, worker: usize) -> Vec<usize> {
        (0..self.n_tasks())
            .filter(|&i| self.answer(i, worker) != 0)
            .collect()
    }

    pub fn n_answers(&self) -> usize {
        self.answers.iter().filter(|&&a| a != 0).count()
    }

    pub fn completion_order(&self, worker: usize) -> Option<&[usize]> {
        self.completion_order[worker].as_deref()
    }

    pub fn completion_orders(&self) -> &[Option<Vec<usize>>] {
        &self.completion_order
    }

    pub fn gold(&self) -> Option<&GoldLabels> {
        self.gold.as_ref()
    }

    pub fn with_gold(mut self, gold: Option<GoldLabels>) -> Result<Self> {
        self.gold = gold;
        Dataset::new(
            self.features,
            self.answers,
            self.n_workers,
            self.n_classes,
            self.completion_order,
            self.gold,
        )
    }

    pub fn without_gold(&self) -> Self {
        Dataset {
            gold: None,
            ..self.clone()
        }
    }

    /// Same tasks and gold, new answers and orders.
    pub fn with_answers(
        &self,
        answers: Vec<Label>,
        n_workers: usize,
        completion_order: Vec<Option<Vec<usize>>>,
    ) -> Result<Self> {
        Dataset::new(
            self.features.clone(),
            answers,
            n_workers,
            self.n_classes,
            completion_order,
            self.gold.clone(),
        )
    }
}

/// A worker's completion order, possibly reconstructed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerOrder {
    /// Task indices in the order they were completed; rank = position + 1.
    pub order: Vec<usize>,
    /// Set when no order was recorded and ascending task index was used.
    pub synthetic: bool,
}

impl WorkerOrder {
    /// `(task, rank)` pairs with 1-based ranks.
    pub fn ranked(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.order.iter().enumerate().map(|(k, &i)| (i, k + 1))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Declared orders pass through; missing ones fall back to ascending task
/// index and are flagged synthetic.
pub fn infer_order(dataset: &Dataset) -> Vec<WorkerOrder> {
    (0..dataset.n_workers())
        .map(|w| match dataset.completion_order(w) {
            Some(order) => WorkerOrder {
                order: order.to_vec(),
                synthetic: false,
            },
            None => WorkerOrder {
                order: dataset.worker_tasks(w),
                synthetic: true,
            },
        })
        .collect()
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy(pred: &[Label], gold: &GoldLabels) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred
        .iter()
        .zip(gold.labels())
        .filter(|(p, g)| p == g)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub objective: Option<f64>,
    pub converged: bool,
}

/// Output contract shared by every aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub labels: Vec<Label>,
    pub label_probs: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl AggregationResult {
    /// Normalizes each row of `weights` and takes the argmax (ties go to the
    /// smallest class). Rows with no positive mass become uniform.
    pub fn from_weights(weights: Vec<Vec<f64>>, diagnostics: Diagnostics) -> Self {
        let label_probs: Vec<Vec<f64>> = weights
            .into_iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                if total > 0.0 && total.is_finite() {
                    row.iter().map(|v| v / total).collect()
                } else {
                    vec![1.0 / row.len() as f64; row.len()]
                }
            })
            .collect();
        let labels = label_probs.iter().map(|row| argmax_label(row)).collect();
        AggregationResult {
            labels,
            label_probs,
            diagnostics,
        }
    }
}

/// 1-based argmax, ties broken toward the smallest class.
pub fn argmax_label(row: &[f64]) -> Label {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best as Label + 1
}

/// JSON dataset layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub n_tasks: usize,
    pub n_workers: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    /// `[task, worker, label]` triples, 0-based ids.
    pub answers: Vec<[usize; 3]>,
    pub completion_order: Vec<Option<Vec<usize>>>,
    #[serde(default)]
    pub gold: Option<Vec<Label>>,
}

impl From<&Dataset> for DatasetFile {
    fn from(ds: &Dataset) -> Self {
        let answers = (0..ds.n_tasks())
            .flat_map(|i| ds.task_answers(i).map(move |(w, a)| [i, w, a as usize]))
            .collect();
        DatasetFile {
            n_tasks: ds.n_tasks(),
            n_workers: ds.n_workers(),
            n_classes: ds.n_classes(),
            dim: ds.dim(),
            features: (0..ds.n_tasks())
                .map(|i| ds.features().row(i).iter().copied().collect())
                .collect(),
            answers,
            completion_order: ds.completion_orders().to_vec(),
            gold: ds.gold().map(|g| g.labels().to_vec()),
        }
    }
}

impl TryFrom<DatasetFile> for Dataset {
    type Error = Error;

    fn try_from(file: DatasetFile) -> Result<Self> {
        if file.features.len() != file.n_tasks {
            return Err(Error::Validation(format!(
                "{} feature rows for {} tasks",
                file.features.len(),
                file.n_tasks
            )));
        }
        if let Some(row) = file.features.iter().find(|r| r.len() != file.dim) {
            return Err(Error::Validation(format!(
                "feature row of length {} but dim = {}",
                row.len(),
                file.dim
            )));
        }
        let flat: Vec<f64> = file.features.iter().flatten().copied().collect();
        let features = DMatrix::from_row_slice(file.n_tasks, file.dim, &flat);
        let mut triples = Vec::with_capacity(file.answers.len());
        for [i, w, a] in file.answers {
            if a > file.n_classes {
                return Err(Error::Validation(format!(
                    "answer {a} outside 0..={}",
                    file.n_classes
                )));
            }
            if a != 0 {
                triples.push((i, w, a as Label));
            }
        }
        Dataset::from_triples(
            features,
            file.n_workers,
            file.n_classes,
            &triples,
            file.completion_order,
            file.gold.map(GoldLabels::new),
        )
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Loads a dataset; for CSV `path` is the directory holding the files.
pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    match format {
        Format::Json => {
            let text = fs::read_to_string(path)?;
            let file: DatasetFile =
                serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            Dataset::try_from(file)
        }
        Format::Csv => load_csv(path),
    }
}

/// Writes a dataset; for CSV `path` is a directory (created if missing).
pub fn save_dataset(dataset: &Dataset, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Json => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            let file = DatasetFile::from(dataset);
            fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
            Ok(())
        }
        Format::Csv => save_csv(dataset, path),
    }
}

fn save_csv(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let orders = infer_order(ds);
    let mut rank = vec![0usize; ds.n_tasks() * ds.n_workers()];
    for (w, o) in orders.iter().enumerate() {
        if o.synthetic {
            continue;
        }
        for (i, r) in o.ranked() {
            rank[i * ds.n_workers() + w] = r;
        }
    }
    let mut out = format!(
        "# tasks={} workers={} classes={} dim={}\ntask_id,worker_id,label,order_rank\n",
        ds.n_tasks(),
        ds.n_workers(),
        ds.n_classes(),
        ds.dim()
    );
    for i in 0..ds.n_tasks() {
        for (w, a) in ds.task_answers(i) {
            let r = rank[i * ds.n_workers() + w];
            if r == 0 {
                writeln!(out, "{i},{w},{a},").unwrap();
            } else {
                writeln!(out, "{i},{w},{a},{r}").unwrap();
            }
        }
    }
    fs::write(dir.join("answers.csv"), out)?;

    let mut out = String::from("task_id");
    for j in 0..ds.dim() {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for i in 0..ds.n_tasks() {
        out.push_str(&i.to_string());
        for v in ds.features().row(i).iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    fs::write(dir.join("features.csv"), out)?;

    let gold_path = dir.join("gold.csv");
    if let Some(g) = ds.gold() {
        let mut out = String::from("task_id,label\n");
        for (i, l) in g.labels().iter().enumerate() {
            writeln!(out, "{i},{l}").unwrap();
        }
        fs::write(gold_path, out)?;
    } else if gold_path.exists() {
        fs::remove_file(gold_path)?;
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} `{s}`")))
}

fn parse_header(line: &str) -> Result<(usize, usize, usize, usize)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse("answers.csv must start with a `# tasks=...` header".into()))?;
    let (mut n, mut w, mut c, mut d) = (None, None, None, None);
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header entry `{kv}`")))?;
        let v: usize = parse_field(v, k, 1)?;
        match k {
            "tasks" => n = Some(v),
            "workers" => w = Some(v),
            "classes" => c = Some(v),
            "dim" => d = Some(v),
            _ => return Err(Error::Parse(format!("unknown header key `{k}`"))),
        }
    }
    match (n, w, c, d) {
        (Some(n), Some(w), Some(c), Some(d)) => Ok((n, w, c, d)),
        _ => Err(Error::Parse(
            "header must declare tasks, workers, classes and dim".into(),
        )),
    }
}

fn load_csv(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("answers.csv"))?;
    let first = text.lines().next().unwrap_or_default();
    let (n_tasks, n_workers, n_classes, dim) = parse_header(first)?;

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut triples = Vec::new();
    let mut ranked: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_workers];
    let mut unranked = vec![0usize; n_workers];
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let line = k + 3;
        if rec.len() < 3 {
            return Err(Error::Parse(format!("line {line}: expected 3-4 fields")));
        }
        let i: usize = parse_field(&rec[0], "task_id", line)?;
        let w: usize = parse_field(&rec[1], "worker_id", line)?;
        let a: Label = parse_field(&rec[2], "label", line)?;
        if i >= n_tasks || w >= n_workers {
            return Err(Error::Validation(format!(
                "line {line}: ids ({i}, {w}) outside {n_tasks}x{n_workers}"
            )));
        }
        if a as usize > n_classes {
            return Err(Error::Validation(format!(
                "line {line}: answer {a} outside 0..={n_classes}"
            )));
        }
        if a == 0 {
            continue;
        }
        match rec.get(3).map(str::trim).filter(|s| !s.is_empty()) {
            Some(r) => ranked[w].push((parse_field(r, "order_rank", line)?, i)),
            None => unranked[w] += 1,
        }
        triples.push((i, w, a));
    }
    let mut orders = Vec::with_capacity(n_workers);
    for (w, mut r) in ranked.into_iter().enumerate() {
        if r.is_empty() {
            orders.push(None);
            continue;
        }
        if unranked[w] > 0 {
            return Err(Error::Validation(format!(
                "worker {w} has ranks on only some answers"
            )));
        }
        r.sort_unstable();
        if r.iter().enumerate().any(|(k, &(rank, _))| rank != k + 1) {
            return Err(Error::Validation(format!(
                "ranks of worker {w} are not 1..={}",
                r.len()
            )));
        }
        orders.push(Some(r.into_iter().map(|(_, i)| i).collect()));
    }

    let mut rows = vec![None; n_tasks];
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(dir.join("features.csv"))?;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let line = k + 2;
        if rec.len() != dim + 1 {
            return Err(Error::Validation(format!(
                "features line {line}: {} values, expected {dim}",
                rec.len().saturating_sub(1)
            )));
        }
        let i: usize = parse_field(&rec[0], "task_id", line)?;
        if i >= n_tasks {
            return Err(Error::Validation(format!("features line {line}: task {i} out of range")));
        }
        let row: Vec<f64> = (1..=dim)
            .map(|j| parse_field(&rec[j], "feature", line))
            .collect::<Result<_>>()?;
        rows[i] = Some(row);
    }
    let mut flat = Vec::with_capacity(n_tasks * dim);
    for (i, r) in rows.into_iter().enumerate() {
        flat.extend(r.ok_or_else(|| Error::Validation(format!("no features for task {i}")))?);
    }
    let features = DMatrix::from_row_slice(n_tasks, dim, &flat);

    let gold_path = dir.join("gold.csv");
    let gold = if gold_path.exists() {
        let mut labels = vec![0; n_tasks];
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(gold_path)?;
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let line = k + 2;
            if rec.len() != 2 {
                return Err(Error::Parse(format!("gold line {line}: expected 2 fields")));
            }
            let i: usize = parse_field(&rec[0], "task_id", line)?;
            if i >= n_tasks {
                return Err(Error::Validation(format!("gold line {line}: task {i} out of range")));
            }
            labels[i] = parse_field(&rec[1], "label", line)?;
        }
        Some(GoldLabels::new(labels))
    } else {
        None
    };

    Dataset::from_triples(features, n_workers, n_classes, &triples, orders, gold)
}
