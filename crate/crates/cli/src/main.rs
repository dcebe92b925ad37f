//! Command-line front end: run experiments, sweep one axis at a time,
//! verify gradients against finite differences, and generate or
//! validate synthetic feature streams.
//!
//! Exit codes: 0 success, 2 configuration problems (field-level
//! message), 1 runtime failures. Every failure prints a single
//! `error: <kind>: <message>` line on stderr. The environment variables
//! `CVQA_OUT_DIR` and `CVQA_SEED` override the output directory and the
//! seed list; explicit flags beat both.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cvqa_core::ama::MemoryPool;
use cvqa_core::config::ExperimentConfig;
use cvqa_core::datagen::{self, Sample, Split, StreamHeader};
use cvqa_core::error::Error;
use cvqa_core::harness::{self, Report};
use cvqa_core::linalg::{Matrix, Vector};
use cvqa_core::optim::ParamGroup;
use cvqa_core::pipeline::{self, LossKind, ModelParams};

#[derive(Parser)]
#[command(name = "cvqa", version, about = "Continual multimodal VQA laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write reports.
    Run(RunArgs),
    /// Sweep one axis around the configured experiment.
    Sweep(SweepArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic feature stream and export it.
    GenData(GenDataArgs),
    /// Validate an exported feature stream file.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel seed workers (default: rayon's thread count).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Which report files to write.
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sweep axis.
    #[arg(long, value_enum)]
    axis: Axis,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    /// Rehearsal buffer capacities, desk-scaled.
    #[value(name = "memory_size")]
    MemorySize,
    /// Both retrieval strategies.
    #[value(name = "strategy")]
    Strategy,
    /// Fixed (alpha, beta) gate overrides on a 5x5 grid.
    #[value(name = "alpha_beta")]
    AlphaBeta,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Only check parameter names with one of these comma-separated
    /// prefixes; matching nothing passes vacuously.
    #[arg(long, value_delimiter = ',')]
    groups: Vec<String>,
    /// Test hook: add 1 to this parameter's analytic gradient so the
    /// check must fail and name it.
    #[arg(long)]
    corrupt_group: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct IngestArgs {
    /// Stream file to validate.
    path: PathBuf,
}

/// Failure carrying its exit class: config problems exit 2, everything
/// else exits 1.
enum Failure {
    Config(String),
    Runtime(String),
}

fn one_line(text: String) -> String {
    text.replace('\n', " ")
}

fn config_failure(e: Error) -> Failure {
    Failure::Config(one_line(e.to_string()))
}

fn runtime_failure(e: Error) -> Failure {
    Failure::Runtime(one_line(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Ingest(args) => cmd_ingest(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: config: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: runtime: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Load, override, and validate the experiment config. Precedence:
/// flags over environment over file over defaults; the environment can
/// only touch the output directory and the seed list.
fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text).map_err(config_failure)?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(dir) = env::var("CVQA_OUT_DIR") {
        cfg.run.out_dir = dir;
    }
    if let Ok(raw) = env::var("CVQA_SEED") {
        let seed: u64 = raw
            .parse()
            .map_err(|_| Failure::Config(format!("CVQA_SEED: `{raw}` is not a seed")))?;
        cfg.run.seeds = vec![seed];
    }
    if let Some(dir) = &common.out_dir {
        cfg.run.out_dir = dir.display().to_string();
    }
    if let Some(seed) = common.seed {
        cfg.run.seeds = vec![seed];
    }
    let warnings = cfg.validate().map_err(config_failure)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

/// Run all seeds, in parallel when --jobs allows, in seed-list order.
fn run_seeds(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<Report, Failure> {
    let run = || -> cvqa_core::Result<Report> {
        let outcomes: cvqa_core::Result<Vec<_>> = cfg
            .run
            .seeds
            .par_iter()
            .map(|&seed| harness::run_seed(cfg, seed))
            .collect();
        harness::assemble_report(cfg, &outcomes?)
    };
    let report = match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Failure::Runtime(one_line(e.to_string())))?;
            pool.install(run)
        }
        None => run(),
    };
    report.map_err(runtime_failure)
}

fn write_report_files(
    report: &Report,
    out_dir: &Path,
    basename: &str,
    format: Format,
) -> Result<Vec<PathBuf>, Failure> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    if format.json() {
        let path = out_dir.join(format!("{basename}.json"));
        harness::write_atomic(&path, &harness::report_json(report)).map_err(runtime_failure)?;
        written.push(path);
    }
    if format.csv() {
        let path = out_dir.join(format!("{basename}.csv"));
        harness::write_atomic(&path, &harness::report_csv(report)).map_err(runtime_failure)?;
        written.push(path);
    }
    Ok(written)
}

fn print_summary(report: &Report) {
    let agg = &report.aggregate;
    let fmt_af = |af: Option<f64>| af.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "standard: ap {:.4} +/- {:.4}, af {} +/- {}",
        agg.standard.ap_mean,
        agg.standard.ap_std,
        fmt_af(agg.standard.af_mean),
        fmt_af(agg.standard.af_std),
    );
    println!(
        "novel: ap {:.4} +/- {:.4}, af {} +/- {}",
        agg.novel.ap_mean,
        agg.novel.ap_std,
        fmt_af(agg.novel.af_mean),
        fmt_af(agg.novel.af_std),
    );
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let report = run_seeds(&cfg, args.common.jobs)?;
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    let written = write_report_files(&report, &out_dir, "report", args.common.format)?;
    println!("config {}", report.config_hash);
    print_summary(&report);
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Buffer capacities follow the published sweep {50, 100, 500, 1000,
/// 5000} scaled down 25x to desk size.
const MEMORY_SWEEP: [usize; 5] = [2, 4, 20, 40, 200];
const GATE_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

fn sweep_points(axis: Axis, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    match axis {
        Axis::MemorySize => MEMORY_SWEEP
            .iter()
            .map(|&capacity| {
                let mut cfg = base.clone();
                cfg.replay.capacity = capacity;
                (format!("memory_size_{capacity}"), cfg)
            })
            .collect(),
        Axis::Strategy => {
            use cvqa_core::ama::RetrievalStrategy::*;
            [(MaxSimilarity, "max_similarity"), (Random, "random")]
                .into_iter()
                .map(|(strategy, name)| {
                    let mut cfg = base.clone();
                    cfg.memory.strategy = strategy;
                    (format!("strategy_{name}"), cfg)
                })
                .collect()
        }
        Axis::AlphaBeta => {
            let mut points = Vec::with_capacity(25);
            for &alpha in &GATE_GRID {
                for &beta in &GATE_GRID {
                    let mut cfg = base.clone();
                    cfg.ablation.alpha = Some(alpha);
                    cfg.ablation.beta = Some(beta);
                    points.push((format!("alpha_beta_{alpha}_{beta}"), cfg));
                }
            }
            points
        }
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let base = load_config(&args.common)?;
    let out_dir = PathBuf::from(&base.run.out_dir);
    let points = sweep_points(args.axis, &base);

    let mut merged = harness::csv_header();
    for (name, cfg) in &points {
        cfg.validate().map_err(config_failure)?;
        let report = run_seeds(cfg, args.common.jobs)?;
        for row in harness::csv_rows(&report) {
            merged.push('\n');
            merged.push_str(&row);
        }
        let written = write_report_files(&report, &out_dir, name, args.common.format)?;
        println!(
            "{name}: standard ap {:.4} af {}",
            report.aggregate.standard.ap_mean,
            report
                .aggregate
                .standard
                .af_mean
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        );
        for path in written {
            println!("wrote {}", path.display());
        }
    }
    merged.push('\n');
    let axis_name = match args.axis {
        Axis::MemorySize => "memory_size",
        Axis::Strategy => "strategy",
        Axis::AlphaBeta => "alpha_beta",
    };
    let merged_path = out_dir.join(format!("sweep_{axis_name}.csv"));
    harness::write_atomic(&merged_path, &merged).map_err(runtime_failure)?;
    println!("wrote {}", merged_path.display());
    Ok(())
}

struct GroupStats {
    max_abs: f64,
    max_rel: f64,
    ok: bool,
}

/// Analytic-vs-numeric gradient comparison across three seeded
/// instances and all four losses, reported per parameter.
fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let dims = cfg.model_dims();
    if dims.d > 16 {
        return Err(Failure::Config(format!(
            "field `data.d`: gradient checking is limited to d <= 16, got {}",
            dims.d
        )));
    }
    let settings = cfg.pipeline_settings();
    let base_seed = cfg.run.seeds[0];
    let eps = 1e-5;

    let mut names = Vec::new();
    {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(base_seed);
        let probe = ModelParams::init(&dims, &mut probe_rng).map_err(runtime_failure)?;
        probe.visit(&mut |name, _| names.push(name.to_string()));
    }
    if let Some(target) = &args.corrupt_group {
        if !names.iter().any(|n| n == target || n.starts_with(target.as_str())) {
            return Err(Failure::Config(format!(
                "field `corrupt-group`: no parameter named `{target}`"
            )));
        }
    }
    let selected: Vec<String> = names
        .into_iter()
        .filter(|n| args.groups.is_empty() || args.groups.iter().any(|g| n.starts_with(g.as_str())))
        .collect();
    if selected.is_empty() {
        println!("gradcheck: no parameter groups matched the filter; vacuously passing");
        return Ok(());
    }

    let mut stats: Vec<(String, GroupStats)> = selected
        .iter()
        .map(|n| (n.clone(), GroupStats { max_abs: 0.0, max_rel: 0.0, ok: true }))
        .collect();

    for instance in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(1 + instance));
        let params = ModelParams::init(&dims, &mut rng).map_err(runtime_failure)?;
        let sample = Sample {
            task: 0,
            split: Split::Train,
            regions: Matrix::from_fn(cfg.data.n, dims.d, |_, _| rng.random_range(-1.0..1.0)),
            query: Matrix::from_fn(cfg.data.l, dims.d, |_, _| rng.random_range(-1.0..1.0)),
            answer: (0..dims.t_max).map(|_| rng.random_range(1..dims.vocab)).collect(),
            pair: (0, 0),
        };
        let mut pool =
            MemoryPool::new(cfg.memory.k + 1, cfg.memory.lambda, 2.0).map_err(runtime_failure)?;
        for _ in 0..cfg.memory.k + 1 {
            let h_v = Vector::new((0..dims.d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .map_err(runtime_failure)?;
            let h_q = Vector::new((0..dims.d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .map_err(runtime_failure)?;
            pool.admit_or_update(&h_v, &h_q).map_err(runtime_failure)?;
        }
        let ctx = pipeline::prepare_context(&params, &pool, &sample, &settings, true, &mut rng)
            .map_err(runtime_failure)?;

        for kind in [LossKind::Gonf, LossKind::Ama, LossKind::Decoder, LossKind::Total] {
            let grads = match pipeline::loss_grads(kind, &params, &sample, &ctx, &settings)
                .map_err(runtime_failure)?
            {
                Some(g) => g,
                None => continue,
            };
            for (name, entry) in stats.iter_mut() {
                let analytic = grads
                    .get(name)
                    .ok_or_else(|| Failure::Runtime(format!("no gradient for `{name}`")))?;
                let corrupted = args
                    .corrupt_group
                    .as_deref()
                    .is_some_and(|t| name == t || name.starts_with(t));
                for i in 0..analytic.rows() {
                    for j in 0..analytic.cols() {
                        let mut a = analytic.get(i, j);
                        if corrupted {
                            a += 1.0;
                        }
                        let mut plus = params.clone();
                        let mut minus = params.clone();
                        plus.visit_mut(&mut |n, m| {
                            if n == name {
                                m.set(i, j, m.get(i, j) + eps);
                            }
                        });
                        minus.visit_mut(&mut |n, m| {
                            if n == name {
                                m.set(i, j, m.get(i, j) - eps);
                            }
                        });
                        let f = |p: &ModelParams| -> Result<f64, Failure> {
                            pipeline::loss_value(kind, p, &sample, &ctx, &settings)
                                .map_err(runtime_failure)?
                                .ok_or_else(|| Failure::Runtime("loss became inactive".into()))
                        };
                        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * eps);
                        let abs = (a - numeric).abs();
                        let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
                        entry.max_abs = entry.max_abs.max(abs);
                        if abs > 1e-6 {
                            entry.max_rel = entry.max_rel.max(rel);
                        }
                        if abs > 1e-4 && rel > 1e-3 {
                            entry.ok = false;
                        }
                    }
                }
            }
        }
    }

    let mut failing = Vec::new();
    for (name, entry) in &stats {
        let verdict = if entry.ok { "PASS" } else { "FAIL" };
        println!(
            "{name:<16} max_abs {: >9.3e}  max_rel {: >9.3e}  {verdict}",
            entry.max_abs, entry.max_rel
        );
        if !entry.ok {
            failing.push(name.clone());
        }
    }
    if failing.is_empty() {
        println!("gradcheck: all {} parameter groups within tolerance", stats.len());
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed for: {}",
            failing.join(", ")
        )))
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let seed = cfg.run.seeds[0];
    let stream = datagen::generate_stream(&cfg.data, seed).map_err(runtime_failure)?;
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", out_dir.display())))?;
    let path = out_dir.join(format!("stream_{seed}.ndjson"));
    let header = StreamHeader::from_config(&cfg.data);
    datagen::export_stream(&stream, header, &path).map_err(runtime_failure)?;
    let records: usize = stream
        .iter()
        .map(|t| t.train.len() + t.standard_test.len() + t.novel_test.len())
        .sum();
    println!("wrote {} ({} tasks, {records} records)", path.display(), stream.len());
    Ok(())
}

fn cmd_ingest(args: &IngestArgs) -> Result<(), Failure> {
    let (header, tasks) = datagen::ingest_features(&args.path).map_err(runtime_failure)?;
    println!(
        "header: version {} d {} n {} L {} T {} vocab {}",
        header.version, header.d, header.n, header.l, header.t, header.vocab
    );
    for task in &tasks {
        println!(
            "task {} ({}): {} train, {} standard, {} novel, {} held-out pairs",
            task.id,
            task.name,
            task.train.len(),
            task.standard_test.len(),
            task.novel_test.len(),
            task.held_out.len()
        );
    }
    println!("ok: {} tasks", tasks.len());
    Ok(())
}
