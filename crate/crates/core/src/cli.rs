//! Command-line front end: dataset I/O, method dispatch, the benchmark
//! harness and figure-ready data series.
//!
//! Every command is deterministic given `--seed`. Wall-clock timings are the
//! one nondeterministic quantity, so they are only written with `--timing`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::baselines::{awmv, dawid_skene, glad, gtic, majority_vote, EM_MAX_ITERS};
use crate::data::{accuracy, load_dataset, save_dataset, AggregationResult, Dataset, Format};
use crate::ep::EpConfig;
use crate::error::{Error, Result};
use crate::gem::{fit_with_kernel, quality_histogram, FitResult, GemConfig, QualityHistogram, DEFAULT_ATTENTION_PENALTY};
use crate::kernels::Kernel;
use crate::quadrature::DEFAULT_POINTS;
use crate::simulator::{derive_seed, inject_noise, inject_spammers, reannotate, simulate, SimSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Caps the number of benchmark cells run at once.
pub const THREADS_ENV: &str = "CROWD_ATTN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "crowd-attn", version, about = "Attention-aware crowd label aggregation")]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Format of emitted datasets and series.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mv,
    Ds,
    Glad,
    Awmv,
    Gtic,
    A3c,
    A3cNa,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Mv,
        Method::Ds,
        Method::Glad,
        Method::Awmv,
        Method::Gtic,
        Method::A3cNa,
        Method::A3c,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mv => "mv",
            Method::Ds => "ds",
            Method::Glad => "glad",
            Method::Awmv => "awmv",
            Method::Gtic => "gtic",
            Method::A3c => "a3c",
            Method::A3cNa => "a3c-na",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Poisson,
    Gaussian,
    Uniform,
    None,
}

impl From<AttentionArg> for AttentionKind {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::Poisson => AttentionKind::Poisson,
            AttentionArg::Gaussian => AttentionKind::Gaussian,
            AttentionArg::Uniform => AttentionKind::Uniform,
            AttentionArg::None => AttentionKind::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Dot,
    Rbf,
}

/// Model and inference settings shared by the commands that fit.
#[derive(Clone, Debug, Args)]
pub struct FitArgs {
    /// Attention family used by `a3c`.
    #[arg(long, value_enum, default_value_t = AttentionArg::Poisson)]
    pub attention: AttentionArg,
    #[arg(long, default_value_t = 50)]
    pub gem_max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub gem_tol: f64,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 9.0)]
    pub beta: f64,
    /// Also fit the Beta prior over the outlier rate.
    #[arg(long)]
    pub optimize_prior: bool,
    /// Objective cost, in nats, of letting one worker's quality follow attention.
    #[arg(long, default_value_t = DEFAULT_ATTENTION_PENALTY)]
    pub attention_penalty: f64,
    #[arg(long, value_enum, default_value_t = KernelArg::Dot)]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 1.0)]
    pub lengthscale: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub ep_tol: f64,
    #[arg(long, default_value_t = 200)]
    pub ep_max_sweeps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub ep_damping: f64,
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    pub quad_points: usize,
}

impl Default for FitArgs {
    fn default() -> Self {
        FitArgs {
            attention: AttentionArg::Poisson,
            gem_max_iters: 50,
            gem_tol: 1e-4,
            alpha: 2.0,
            beta: 9.0,
            optimize_prior: false,
            attention_penalty: DEFAULT_ATTENTION_PENALTY,
            kernel: KernelArg::Dot,
            lengthscale: 1.0,
            ep_tol: 1e-5,
            ep_max_sweeps: 200,
            ep_damping: 0.5,
            quad_points: DEFAULT_POINTS,
        }
    }
}

impl FitArgs {
    pub fn kernel(&self) -> Kernel {
        match self.kernel {
            KernelArg::Dot => Kernel::Dot,
            KernelArg::Rbf => Kernel::Rbf {
                lengthscale: self.lengthscale,
            },
        }
    }

    pub fn gem_config(&self, attention: AttentionKind) -> GemConfig {
        let mut cfg = GemConfig::new(attention);
        cfg.max_iters = self.gem_max_iters;
        cfg.tol = self.gem_tol;
        cfg.alpha = self.alpha;
        cfg.beta = self.beta;
        cfg.optimize_prior = self.optimize_prior;
        cfg.attention_penalty = self.attention_penalty;
        cfg.ep = EpConfig {
            tol: self.ep_tol,
            max_sweeps: self.ep_max_sweeps,
            damping: self.ep_damping,
            quad_points: self.quad_points,
            ..EpConfig::default()
        };
        cfg
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Validation("alpha and beta must be positive".into()));
        }
        if !(self.ep_damping > 0.0 && self.ep_damping <= 1.0) {
            return Err(Error::Validation("EP damping must lie in (0, 1]".into()));
        }
        if self.gem_max_iters == 0 || self.quad_points == 0 {
            return Err(Error::Validation("iteration caps and quadrature points must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate one dataset with one method.
    Aggregate {
        /// A JSON dataset file or a CSV dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to CSV for directories and JSON otherwise.
        #[arg(long, value_enum)]
        input_format: Option<FormatArg>,
        #[arg(long, value_enum)]
        method: Method,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Generate a simulated dataset.
    Simulate {
        /// JSON simulation spec; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also emit a copy with this fraction of each worker's answers flipped.
        #[arg(long)]
        noise: Option<f64>,
        /// Also emit a copy with this many random spammers added.
        #[arg(long, default_value_t = 0)]
        random_spammers: usize,
        /// ... and this many uniform spammers.
        #[arg(long, default_value_t = 0)]
        uniform_spammers: usize,
    },
    /// Run several methods on several datasets and tabulate accuracy.
    Benchmark {
        /// Datasets with gold labels; repeatable.
        #[arg(long)]
        dataset: Vec<PathBuf>,
        #[arg(long, value_enum)]
        input_format: Option<FormatArg>,
        /// Also benchmark this many simulated datasets, seeded from `--seed`.
        #[arg(long, default_value_t = 0)]
        simulations: usize,
        /// JSON simulation spec for `--simulations`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Re-annotate every dataset with Poisson and Gaussian attention and
        /// compare `a3c` with `a3c-na` on the results.
        #[arg(long)]
        attention_variants: bool,
        /// Record wall-clock seconds (output is then no longer reproducible).
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Emit data series from a saved fit.
    Analyze {
        /// A `fit.json` written by `aggregate --method a3c`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// `auto`, or explicit `expert,normal,spammer` worker ids.
        #[arg(long, default_value = "auto")]
        triple: String,
    },
}

/// The output of one method on one dataset.
#[derive(Clone, Debug)]
pub struct MethodOutput {
    pub result: AggregationResult,
    pub fit: Option<FitResult>,
}

/// Runs `method`. `seed` drives the only stochastic baseline, GTIC.
pub fn run_method(method: Method, dataset: &Dataset, args: &FitArgs, seed: u64) -> Result<MethodOutput> {
    let plain = |result| Ok(MethodOutput { result, fit: None });
    match method {
        Method::Mv => plain(majority_vote(dataset)),
        Method::Ds => plain(dawid_skene(dataset, EM_MAX_ITERS, 1e-6).0),
        Method::Glad => plain(glad(dataset, EM_MAX_ITERS).0),
        Method::Awmv => plain(awmv(dataset)?),
        Method::Gtic => plain(gtic(dataset, seed)),
        Method::A3c | Method::A3cNa => {
            let kind = if method == Method::A3c {
                args.attention.into()
            } else {
                AttentionKind::None
            };
            let fit = fit_with_kernel(dataset, &args.kernel(), &args.gem_config(kind))?;
            Ok(MethodOutput {
                result: fit.result.clone(),
                fit: Some(fit),
            })
        }
    }
}

/// Reads a dataset, guessing the layout from the path when not given.
pub fn load_input(path: &Path, format: Option<FormatArg>) -> Result<Dataset> {
    let format = match format {
        Some(f) => f.into(),
        None if path.is_dir() => Format::Csv,
        None => Format::Json,
    };
    load_dataset(path, format)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn dataset_target(dir: &Path, stem: &str, format: Format) -> PathBuf {
    match format {
        Format::Csv => dir.join(stem),
        Format::Json => dir.join(format!("{stem}.json")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    /// Present when the dataset carries gold labels.
    pub accuracy: Option<f64>,
    pub result: AggregationResult,
}

fn cmd_aggregate(cli: &Cli, path: &Path, input: Option<FormatArg>, method: Method, args: &FitArgs) -> Result<bool> {
    args.validate()?;
    let dataset = load_input(path, input)?;
    let out = run_method(method, &dataset, args, cli.seed)?;
    let acc = dataset.gold().map(|g| accuracy(&out.result.labels, g)).transpose()?;
    let report = AggregateReport {
        dataset: dataset_name(path),
        method,
        seed: cli.seed,
        accuracy: acc,
        result: out.result.clone(),
    };
    write_json(&cli.out_dir.join("result.json"), &report)?;
    if cli.format == FormatArg::Csv {
        let c = dataset.n_classes();
        let mut text = String::from("task_id,label");
        for k in 1..=c {
            write!(text, ",p{k}").unwrap();
        }
        text.push('\n');
        for (i, (l, p)) in out.result.labels.iter().zip(&out.result.label_probs).enumerate() {
            write!(text, "{i},{l}").unwrap();
            for v in p {
                write!(text, ",{v}").unwrap();
            }
            text.push('\n');
        }
        write_text(&cli.out_dir.join("labels.csv"), &text)?;
    }
    if let Some(fit) = &out.fit {
        write_json(&cli.out_dir.join("fit.json"), fit)?;
    }
    Ok(out.result.diagnostics.converged)
}

fn read_spec(path: Option<&Path>) -> Result<SimSpec> {
    match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Validation(format!("bad spec: {e}"))),
        None => Ok(SimSpec::default()),
    }
}

fn cmd_simulate(cli: &Cli, spec: Option<&Path>, noise: Option<f64>, n_random: usize, n_uniform: usize) -> Result<()> {
    let mut spec = read_spec(spec)?;
    spec.seed = cli.seed;
    if noise.is_some() {
        spec.noise_ratio = noise;
    }
    spec.validate()?;
    let sim = simulate(&spec)?;
    let format: Format = cli.format.into();
    let dir = &cli.out_dir;
    save_dataset(&sim.dataset, &dataset_target(dir, "dataset", format), format)?;
    write_json(&dir.join("profiles.json"), &sim.profiles)?;
    write_json(&dir.join("spec.json"), &spec)?;
    if let Some(r) = spec.noise_ratio {
        let noisy = inject_noise(&sim.dataset, r, derive_seed(cli.seed, 0x6e6f))?;
        save_dataset(&noisy, &dataset_target(dir, "dataset_noisy", format), format)?;
    }
    if n_random + n_uniform > 0 {
        let spammed = inject_spammers(&sim.dataset, n_random, n_uniform, derive_seed(cli.seed, 0x7370))?;
        save_dataset(&spammed, &dataset_target(dir, "dataset_spammers", format), format)?;
    }
    Ok(())
}

/// One row of an accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: Method,
    pub accuracy: f64,
    pub iters: usize,
    /// Zero unless timing was requested.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub dataset: String,
    pub method: Method,
    pub error: String,
}

/// `lambda_w` (or `mu_w`) of one attentive worker against the peak of its
/// fitted quality curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuitablePoint {
    pub worker: usize,
    pub max_quality: f64,
    pub location: f64,
}

/// Per-fit series for figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSeries {
    pub dataset: String,
    pub method: Method,
    pub histogram: QualityHistogram,
    /// Sorted by ascending `max_quality`.
    pub suitable: Vec<SuitablePoint>,
    pub curves: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub gem: GemConfig,
    pub rows: Vec<ReportRow>,
    /// A3C against A3C(nA) on the re-annotated variants.
    pub variant_rows: Vec<ReportRow>,
    pub failures: Vec<Failure>,
    pub series: Vec<FitSeries>,
    pub wall_seconds: Option<f64>,
}

pub fn suitable_series(fit: &FitResult) -> Vec<SuitablePoint> {
    let mut pts: Vec<SuitablePoint> = fit
        .suitable_counts
        .iter()
        .enumerate()
        .filter_map(|(w, s)| {
            s.map(|location| SuitablePoint {
                worker: w,
                max_quality: fit.quality_curves[w].max(),
                location,
            })
        })
        .collect();
    pts.sort_by(|a, b| a.max_quality.total_cmp(&b.max_quality).then(a.worker.cmp(&b.worker)));
    pts
}

pub fn fit_series(dataset: &str, method: Method, fit: &FitResult, bins: usize) -> FitSeries {
    FitSeries {
        dataset: dataset.to_string(),
        method,
        histogram: quality_histogram(&fit.global_quality, bins),
        suitable: suitable_series(fit),
        curves: fit.quality_curves.iter().map(|c| c.values()).collect(),
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::Validation(e.to_string()))
}

struct Cell {
    dataset: usize,
    method: Method,
}

struct CellOutput {
    row: std::result::Result<ReportRow, Failure>,
    fit: Option<FitResult>,
}

fn run_cells(
    pool: &rayon::ThreadPool,
    datasets: &[(String, Dataset)],
    cells: &[Cell],
    args: &FitArgs,
    seed: u64,
    timing: bool,
) -> Vec<CellOutput> {
    pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let (name, ds) = &datasets[cell.dataset];
                let fail = |e: Error| Failure {
                    dataset: name.clone(),
                    method: cell.method,
                    error: e.to_string(),
                };
                let start = Instant::now();
                let out = run_method(cell.method, ds, args, seed);
                let secs = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
                match out.and_then(|o| {
                    let gold = ds.gold().ok_or_else(|| Error::Validation("benchmark datasets need gold labels".into()))?;
                    Ok((accuracy(&o.result.labels, gold)?, o))
                }) {
                    Ok((acc, o)) => CellOutput {
                        row: Ok(ReportRow {
                            dataset: name.clone(),
                            method: cell.method,
                            accuracy: acc,
                            iters: o.result.diagnostics.iterations,
                            seconds: secs,
                        }),
                        fit: o.fit,
                    },
                    Err(e) => CellOutput {
                        row: Err(fail(e)),
                        fit: None,
                    },
                }
            })
            .collect()
    })
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut text = String::from("dataset,method,accuracy,iters,seconds\n");
    for r in rows {
        writeln!(text, "{},{},{},{},{}", r.dataset, r.method.name(), r.accuracy, r.iters, r.seconds).unwrap();
    }
    text
}

pub struct BenchmarkInput<'a> {
    pub datasets: Vec<(String, Dataset)>,
    pub methods: &'a [Method],
    pub attention_variants: bool,
    pub timing: bool,
    pub fit: &'a FitArgs,
    pub seed: u64,
}

/// Runs every (dataset, method) cell; failures are recorded, not raised.
pub fn benchmark(input: BenchmarkInput<'_>) -> Result<BenchmarkReport> {
    input.fit.validate()?;
    let start = Instant::now();
    let pool = thread_pool()?;
    let methods: Vec<Method> = if input.methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        input.methods.to_vec()
    };
    let datasets = input.datasets;
    let cells: Vec<Cell> = (0..datasets.len())
        .flat_map(|d| methods.iter().map(move |&method| Cell { dataset: d, method }))
        .collect();
    let outputs = run_cells(&pool, &datasets, &cells, input.fit, input.seed, input.timing);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut series = Vec::new();
    let mut na_fits: Vec<Option<FitResult>> = vec![None; datasets.len()];
    for (cell, out) in cells.iter().zip(outputs) {
        match out.row {
            Ok(r) => rows.push(r),
            Err(f) => failures.push(f),
        }
        if let Some(fit) = out.fit {
            series.push(fit_series(&datasets[cell.dataset].0, cell.method, &fit, 10));
            if cell.method == Method::A3cNa {
                na_fits[cell.dataset] = Some(fit);
            }
        }
    }
    let mut variant_rows = Vec::new();
    if input.attention_variants {
        // A3C(nA) fits supply the global qualities the variants are
        // re-annotated from
        let missing: Vec<Cell> = (0..datasets.len())
            .filter(|&d| na_fits[d].is_none())
            .map(|d| Cell {
                dataset: d,
                method: Method::A3cNa,
            })
            .collect();
        for (cell, out) in missing.iter().zip(run_cells(&pool, &datasets, &missing, input.fit, input.seed, false)) {
            match (out.fit, out.row) {
                (Some(fit), _) => na_fits[cell.dataset] = Some(fit),
                (None, Err(f)) => failures.push(f),
                (None, Ok(_)) => {}
            }
        }
        let mut variants = Vec::new();
        let mut variant_args = Vec::new();
        for (d, (name, ds)) in datasets.iter().enumerate() {
            let Some(fit) = &na_fits[d] else { continue };
            for (k, (kind, arg, tag)) in [
                (AttentionKind::Poisson, AttentionArg::Poisson, "P"),
                (AttentionKind::Gaussian, AttentionArg::Gaussian, "G"),
            ]
            .into_iter()
            .enumerate()
            {
                let vseed = derive_seed(input.seed, (2 * d + k) as u64 + 0x7661);
                match reannotate(ds, fit, kind, vseed) {
                    Ok(v) => {
                        variants.push((format!("{name}({tag})"), v));
                        variant_args.push(arg);
                    }
                    Err(e) => failures.push(Failure {
                        dataset: format!("{name}({tag})"),
                        method: Method::A3c,
                        error: e.to_string(),
                    }),
                }
            }
        }
        // the attention family of each A3C cell follows its variant
        for (v, arg) in variant_args.iter().enumerate() {
            let args = FitArgs {
                attention: *arg,
                ..input.fit.clone()
            };
            let cells = [Method::A3c, Method::A3cNa].map(|method| Cell { dataset: v, method });
            let outs = run_cells(&pool, &variants, &cells, &args, input.seed, input.timing);
            for (cell, out) in cells.iter().zip(outs) {
                match out.row {
                    Ok(r) => variant_rows.push(r),
                    Err(f) => failures.push(f),
                }
                if let Some(fit) = out.fit {
                    series.push(fit_series(&variants[v].0, cell.method, &fit, 10));
                }
            }
        }
    }
    Ok(BenchmarkReport {
        seed: input.seed,
        methods,
        gem: input.fit.gem_config(input.fit.attention.into()),
        rows,
        variant_rows,
        failures,
        series,
        wall_seconds: input.timing.then(|| start.elapsed().as_secs_f64()),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_benchmark(
    cli: &Cli,
    paths: &[PathBuf],
    input_format: Option<FormatArg>,
    simulations: usize,
    spec: Option<&Path>,
    methods: &[Method],
    attention_variants: bool,
    timing: bool,
    args: &FitArgs,
) -> Result<()> {
    let mut datasets = Vec::new();
    for p in paths {
        datasets.push((dataset_name(p), load_input(p, input_format)?));
    }
    if simulations > 0 {
        let base = read_spec(spec)?;
        for k in 0..simulations {
            let spec = SimSpec {
                seed: cli.seed + k as u64,
                ..base.clone()
            };
            spec.validate()?;
            datasets.push((format!("sim-{}", spec.seed), simulate(&spec)?.dataset));
        }
    }
    if datasets.is_empty() {
        return Err(Error::Validation("benchmark needs --dataset or --simulations".into()));
    }
    let report = benchmark(BenchmarkInput {
        datasets,
        methods,
        attention_variants,
        timing,
        fit: args,
        seed: cli.seed,
    })?;
    write_json(&cli.out_dir.join("report.json"), &report)?;
    write_text(&cli.out_dir.join("report.csv"), &report_csv(&report.rows))?;
    if attention_variants {
        write_text(&cli.out_dir.join("report_variants.csv"), &report_csv(&report.variant_rows))?;
    }
    Ok(())
}

/// Worker ids picked as exemplars of each type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub expert: usize,
    pub normal: usize,
    pub spammer: usize,
}

/// The best worker at or above 0.9, the normal worker (0.6 to 0.9) with
/// the strongest attention effect, and the worst worker below 0.5. Each
/// falls back to the nearest candidate when its band is empty.
pub fn select_triple(fit: &FitResult) -> Result<Triple> {
    let q = &fit.global_quality;
    if q.is_empty() {
        return Err(Error::MissingFit("fit has no workers".into()));
    }
    let by_q = |pred: &dyn Fn(f64) -> bool, best_high: bool| {
        let mut ids: Vec<usize> = (0..q.len()).filter(|&w| pred(q[w])).collect();
        if ids.is_empty() {
            ids = (0..q.len()).collect();
        }
        ids.into_iter()
            .reduce(|a, b| {
                let better = if best_high { q[b] > q[a] } else { q[b] < q[a] };
                if better {
                    b
                } else {
                    a
                }
            })
            .unwrap()
    };
    let expert = by_q(&|v| v >= 0.9, true);
    let spammer = by_q(&|v| v < 0.5, false);
    let normals: Vec<usize> = (0..q.len()).filter(|&w| (0.6..0.9).contains(&q[w])).collect();
    let strength = |w: usize| fit.quality_curves[w].range();
    let normal = if normals.is_empty() {
        (0..q.len())
            .min_by(|&a, &b| (q[a] - 0.75).abs().total_cmp(&(q[b] - 0.75).abs()))
            .unwrap()
    } else {
        normals
            .into_iter()
            .reduce(|a, b| if strength(b) > strength(a) { b } else { a })
            .unwrap()
    };
    Ok(Triple {
        expert,
        normal,
        spammer,
    })
}

fn parse_triple(s: &str, fit: &FitResult) -> Result<Triple> {
    if s == "auto" {
        return select_triple(fit);
    }
    let ids: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Validation(format!("bad worker id `{t}`"))))
        .collect::<Result<_>>()?;
    let &[expert, normal, spammer] = ids.as_slice() else {
        return Err(Error::Validation("--triple takes three worker ids".into()));
    };
    if let Some(&w) = ids.iter().find(|&&w| w >= fit.global_quality.len()) {
        return Err(Error::Validation(format!("no worker {w} in the fit")));
    }
    Ok(Triple {
        expert,
        normal,
        spammer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub role: String,
    pub worker: usize,
    pub rank: usize,
    pub quality: f64,
}

/// The three series emitted by `analyze`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub histogram: QualityHistogram,
    pub triple: Triple,
    pub curves: Vec<CurvePoint>,
    pub suitable: Vec<SuitablePoint>,
}

pub fn analyze(fit: &FitResult, bins: usize, triple: Triple) -> Analysis {
    let mut curves = Vec::new();
    for (role, w) in [("expert", triple.expert), ("normal", triple.normal), ("spammer", triple.spammer)] {
        for &(rank, quality) in &fit.quality_curves[w].points {
            curves.push(CurvePoint {
                role: role.into(),
                worker: w,
                rank,
                quality,
            });
        }
    }
    Analysis {
        histogram: quality_histogram(&fit.global_quality, bins),
        triple,
        curves,
        suitable: suitable_series(fit),
    }
}

pub fn load_fit(path: &Path) -> Result<FitResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingFit(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::MissingFit(format!("{} is not a fit: {e}", path.display())))
}

fn cmd_analyze(cli: &Cli, path: &Path, bins: usize, triple: &str) -> Result<()> {
    if bins == 0 {
        return Err(Error::Validation("--bins must be positive".into()));
    }
    let fit = load_fit(path)?;
    let triple = parse_triple(triple, &fit)?;
    let a = analyze(&fit, bins, triple);
    let dir = &cli.out_dir;
    match cli.format {
        FormatArg::Json => write_json(&dir.join("analysis.json"), &a),
        FormatArg::Csv => {
            let mut hist = String::from("bin_lo,bin_hi,count\n");
            for (k, n) in a.histogram.counts.iter().enumerate() {
                writeln!(hist, "{},{},{}", a.histogram.edges[k], a.histogram.edges[k + 1], n).unwrap();
            }
            let mut curves = String::from("role,worker,rank,quality\n");
            for p in &a.curves {
                writeln!(curves, "{},{},{},{}", p.role, p.worker, p.rank, p.quality).unwrap();
            }
            let mut suit = String::from("worker,max_quality,location\n");
            for p in &a.suitable {
                writeln!(suit, "{},{},{}", p.worker, p.max_quality, p.location).unwrap();
            }
            write_text(&dir.join("histogram.csv"), &hist)?;
            write_text(&dir.join("curves.csv"), &curves)?;
            write_text(&dir.join("suitable.csv"), &suit)
        }
    }
}

/// Runs a parsed command. `Ok(false)` means results were written but some
/// fit did not converge.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Aggregate {
            dataset,
            input_format,
            method,
            fit,
        } => cmd_aggregate(cli, dataset, *input_format, *method, fit),
        Command::Simulate {
            spec,
            noise,
            random_spammers,
            uniform_spammers,
        } => cmd_simulate(cli, spec.as_deref(), *noise, *random_spammers, *uniform_spammers).map(|_| true),
        Command::Benchmark {
            dataset,
            input_format,
            simulations,
            spec,
            methods,
            attention_variants,
            timing,
            fit,
        } => cmd_benchmark(
            cli,
            dataset,
            *input_format,
            *simulations,
            spec.as_deref(),
            methods,
            *attention_variants,
            *timing,
            fit,
        )
        .map(|_| true),
        Command::Analyze { fit, bins, triple } => cmd_analyze(cli, fit, *bins, triple).map(|_| true),
    }
}

/// Parses `args` and runs them, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("warning: results written, but the fit did not converge");
            EXIT_NOT_CONVERGED
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_VALIDATION
        }
    }
}
