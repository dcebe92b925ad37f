//! Experiment harness: rehearsal buffer, accuracy bookkeeping, the
//! per-sample training loop, read-only evaluation, checkpointing, and
//! multi-seed orchestration with JSON and CSV reporting.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ama::{self, MemoryPool};
use crate::config::ExperimentConfig;
use crate::datagen::{self, task_name, Sample, TaskSpec, TASK_NAMES};
use crate::decoder::PAD_TOKEN;
use crate::error::{Error, Result};
use crate::linalg::tape::Tape;
use crate::optim::Adam;
use crate::pipeline::{self, ModelParams, ModelVars, PipelineSettings};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed-capacity rehearsal buffer filled by reservoir sampling
/// (Algorithm R): after `seen` offers every offered sample is retained
/// with probability `capacity / seen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    seen: u64,
    items: Vec<Sample>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, seen: 0, items: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of samples ever offered.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    /// Offer one sample; returns whether it was retained.
    pub fn offer(&mut self, sample: &Sample, rng: &mut ChaCha8Rng) -> bool {
        self.seen += 1;
        if self.capacity == 0 {
            return false;
        }
        if self.items.len() < self.capacity {
            self.items.push(sample.clone());
            return true;
        }
        let j = rng.random_range(0..self.seen);
        if (j as usize) < self.capacity {
            self.items[j as usize] = sample.clone();
            true
        } else {
            false
        }
    }

    /// Uniform draw without removal.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Option<&Sample> {
        if self.items.is_empty() {
            None
        } else {
            Some(&self.items[rng.random_range(0..self.items.len())])
        }
    }
}

/// Lower-triangular, write-once record of test accuracy: entry `(l, j)`
/// is accuracy on task `j` measured right after training task `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix { tasks, cells: vec![None; tasks * (tasks + 1) / 2] }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    fn slot(&self, l: usize, j: usize) -> Result<usize> {
        if l >= self.tasks {
            return Err(Error::IndexOutOfRange { index: l, size: self.tasks });
        }
        if j > l {
            return Err(Error::IndexOutOfRange { index: j, size: l + 1 });
        }
        Ok(l * (l + 1) / 2 + j)
    }

    pub fn record(&mut self, l: usize, j: usize, accuracy: f64) -> Result<()> {
        if !accuracy.is_finite() {
            return Err(Error::NonFinite("accuracy matrix entry"));
        }
        let slot = self.slot(l, j)?;
        if self.cells[slot].is_some() {
            return Err(Error::DuplicateEntry { row: l, col: j });
        }
        self.cells[slot] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, l: usize, j: usize) -> Result<f64> {
        self.cells[self.slot(l, j)?].ok_or(Error::IncompleteMatrix { row: l, col: j })
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.is_some())
    }

    /// Average performance: mean final-row accuracy over all tasks.
    pub fn ap(&self) -> Result<f64> {
        let t = self.tasks;
        let mut sum = 0.0;
        for j in 0..t {
            sum += self.get(t - 1, j)?;
        }
        Ok(sum / t as f64)
    }

    /// Average forgetting: for each task but the last, the drop from its
    /// best accuracy before the final task to its final accuracy.
    pub fn af(&self) -> Result<f64> {
        let t = self.tasks;
        if t < 2 {
            return Err(Error::SingleTask);
        }
        let mut sum = 0.0;
        for j in 0..t - 1 {
            let mut best = f64::NEG_INFINITY;
            for l in j..t - 1 {
                best = best.max(self.get(l, j)?);
            }
            sum += best - self.get(t - 1, j)?;
        }
        Ok(sum / (t - 1) as f64)
    }

    /// Completed lower triangle as jagged rows, for report serialization.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.tasks)
            .map(|l| (0..=l).map(|j| self.get(l, j)).collect())
            .collect()
    }
}

/// Everything training mutates, bundled for checkpointing. Serialized
/// with exact float round-tripping, so a saved and reloaded state
/// continues bit-for-bit identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub version: u32,
    pub params: ModelParams,
    pub pool: MemoryPool,
    pub buffer: ReplayBuffer,
    pub optimizer: Adam,
    /// Optimizer applications so far (current and replay steps alike).
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Optimizer steps a full run is expected to take, for warmup scheduling.
/// Every sample costs one step plus one replay step once the buffer has
/// content, so the replay factor is an upper bound.
pub fn planned_steps(cfg: &ExperimentConfig) -> u64 {
    let per_epoch = (cfg.data.tasks * cfg.data.train_per_task) as u64;
    let replay_factor = if cfg.replay.capacity > 0 { 2 } else { 1 };
    cfg.train.epochs as u64 * per_epoch * replay_factor
}

impl ModelState {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&cfg.model_dims(), &mut rng)?;
        let pool = MemoryPool::new(cfg.memory.capacity, cfg.memory.lambda, cfg.memory.sim_threshold)?;
        Ok(ModelState {
            version: CHECKPOINT_VERSION,
            params,
            pool,
            buffer: ReplayBuffer::new(cfg.replay.capacity),
            optimizer: Adam::new(cfg.adam_config(), planned_steps(cfg)),
            step: 0,
            rng,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: ModelState = serde_json::from_str(text)
            .map_err(|e| Error::Parse { record: 0, message: e.to_string() })?;
        if state.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                record: 0,
                message: format!(
                    "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                    state.version
                ),
            });
        }
        state.pool.validate()?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, &e))?;
        Self::from_json(&text)
    }
}

/// One optimizer step on one sample: freeze the step context, take the
/// gradient of the total loss, apply it, then admit the sample's pooled
/// projections to the memory pool. Returns the pre-step total loss.
fn train_step(state: &mut ModelState, sample: &Sample, settings: &PipelineSettings) -> Result<f64> {
    let ctx = pipeline::prepare_context(&state.params, &state.pool, sample, settings, true, &mut state.rng)?;
    let plain = pipeline::forward_losses(&state.params, sample, &ctx, settings)?;
    // Admission projections come from the same forward pass the step
    // differentiates, so they use pre-update parameters.
    let admit = if settings.enable_ama {
        Some(ama::project(&plain.h, &state.params.ama.w_vis, &state.params.ama.w_txt)?)
    } else {
        None
    };
    let tape = Tape::new();
    let vars = ModelVars::register(&tape, &state.params)?;
    let trace = pipeline::build_forward(&tape, &vars, &state.params, sample, &ctx, settings)?;
    let grads = trace.total.backward()?;
    state.optimizer.apply(&mut state.params, &grads)?;
    state.step += 1;
    if let Some((h_v, h_q)) = admit {
        state.pool.admit_or_update(&h_v, &h_q)?;
    }
    Ok(plain.total)
}

/// Train on one task's stream in arrival order. Per sample: one step on
/// the sample, then one step on a uniform rehearsal draw when the buffer
/// has content, then (first epoch only) a reservoir offer of the sample.
/// Returns the per-step losses in execution order; errors carry the
/// index of the step that failed.
pub fn train_task(
    state: &mut ModelState,
    task: &TaskSpec,
    settings: &PipelineSettings,
    epochs: usize,
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        for sample in &task.train {
            let wrap = |state: &ModelState| {
                let index = state.step;
                move |e: Error| Error::Step { index, source: Box::new(e) }
            };
            let loss = train_step(state, sample, settings).map_err(wrap(state))?;
            losses.push(loss);
            let replayed = state.buffer.draw(&mut state.rng).cloned();
            if let Some(replay) = replayed {
                let loss = train_step(state, &replay, settings).map_err(wrap(state))?;
                losses.push(loss);
            }
            if epoch == 0 {
                state.buffer.offer(sample, &mut state.rng);
            }
        }
    }
    Ok(losses)
}

/// Whether a free-running prediction answers a sample correctly: every
/// non-pad truth token must match at its step.
pub fn answers_match(prediction: &[usize], truth: &[usize]) -> bool {
    truth
        .iter()
        .enumerate()
        .all(|(t, &tok)| tok == PAD_TOKEN || prediction.get(t) == Some(&tok))
}

/// Exact-match accuracy on a test set. Read-only: no pool writes, no
/// corruption noise; the rng only feeds the random retrieval strategy.
pub fn evaluate(
    params: &ModelParams,
    pool: &MemoryPool,
    samples: &[Sample],
    settings: &PipelineSettings,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut correct = 0usize;
    for sample in samples {
        let prediction = pipeline::infer(params, pool, sample, settings, rng)?;
        if answers_match(&prediction, &sample.answer) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Per-cell evaluation rng: deterministic in (seed, trained-task,
/// evaluated-task, paradigm) so cells never share a random stream.
fn eval_rng(seed: u64, trained: usize, evaluated: usize, paradigm: u64) -> ChaCha8Rng {
    let mut key = seed ^ 0x9E37_79B9_7F4A_7C15;
    for part in [trained as u64, evaluated as u64, paradigm] {
        key = key.wrapping_mul(0x0100_0000_01B3).wrapping_add(part + 1);
    }
    ChaCha8Rng::seed_from_u64(key)
}

/// Full accuracy matrices for one seed: both test paradigms, evaluated
/// on every seen task after each task finishes training.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub standard: AccuracyMatrix,
    pub novel: AccuracyMatrix,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let stream = datagen::generate_stream(&cfg.data, seed)?;
    let settings = cfg.pipeline_settings();
    let mut state = ModelState::new(cfg, seed)?;
    let tasks = stream.len();
    let mut standard = AccuracyMatrix::new(tasks);
    let mut novel = AccuracyMatrix::new(tasks);
    for (l, task) in stream.iter().enumerate() {
        train_task(&mut state, task, &settings, cfg.train.epochs)?;
        for (j, seen) in stream.iter().take(l + 1).enumerate() {
            let mut rng = eval_rng(seed, l, j, 0);
            standard.record(l, j, evaluate(&state.params, &state.pool, &seen.standard_test, &settings, &mut rng)?)?;
            let mut rng = eval_rng(seed, l, j, 1);
            novel.record(l, j, evaluate(&state.params, &state.pool, &seen.novel_test, &settings, &mut rng)?)?;
        }
    }
    Ok(SeedOutcome { seed, standard, novel })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmMetrics {
    pub ap: f64,
    /// Undefined (null) for single-task streams.
    pub af: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub accuracy_matrix_standard: Vec<Vec<f64>>,
    pub accuracy_matrix_novel: Vec<Vec<f64>>,
    pub standard: ParadigmMetrics,
    pub novel: ParadigmMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmAggregate {
    pub ap_mean: f64,
    pub ap_std: f64,
    pub af_mean: Option<f64>,
    pub af_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub standard: ParadigmAggregate,
    pub novel: ParadigmAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: Aggregate,
}

/// Mean and sample standard deviation (n - 1 denominator; zero when
/// fewer than two values). An empty slice yields a NaN mean.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn metrics_for(matrix: &AccuracyMatrix) -> Result<ParadigmMetrics> {
    let ap = matrix.ap()?;
    let af = match matrix.af() {
        Ok(v) => Some(v),
        Err(Error::SingleTask) => None,
        Err(e) => return Err(e),
    };
    Ok(ParadigmMetrics { ap, af })
}

fn aggregate_paradigm(metrics: &[&ParadigmMetrics]) -> ParadigmAggregate {
    let aps: Vec<f64> = metrics.iter().map(|m| m.ap).collect();
    let (ap_mean, ap_std) = mean_std(&aps);
    let afs: Vec<f64> = metrics.iter().filter_map(|m| m.af).collect();
    let (af_mean, af_std) = if afs.len() == metrics.len() && !afs.is_empty() {
        let (m, s) = mean_std(&afs);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    ParadigmAggregate { ap_mean, ap_std, af_mean, af_std }
}

pub fn assemble_report(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Result<Report> {
    let mut per_seed = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        per_seed.push(SeedReport {
            seed: outcome.seed,
            accuracy_matrix_standard: outcome.standard.rows()?,
            accuracy_matrix_novel: outcome.novel.rows()?,
            standard: metrics_for(&outcome.standard)?,
            novel: metrics_for(&outcome.novel)?,
        });
    }
    let standard = aggregate_paradigm(&per_seed.iter().map(|s| &s.standard).collect::<Vec<_>>());
    let novel = aggregate_paradigm(&per_seed.iter().map(|s| &s.novel).collect::<Vec<_>>());
    Ok(Report {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        per_seed,
        aggregate: Aggregate { standard, novel },
    })
}

/// Run every configured seed sequentially and aggregate. Callers that
/// parallelize seeds can use [`run_seed`] directly and assemble with
/// [`assemble_report`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let outcomes: Vec<SeedOutcome> = cfg
        .run
        .seeds
        .iter()
        .map(|&seed| run_seed(cfg, seed))
        .collect::<Result<_>>()?;
    assemble_report(cfg, &outcomes)
}

/// Fixed CSV schema: identity columns, headline metrics, then one
/// final-accuracy column per canonical task name.
pub fn csv_header() -> String {
    let mut cols: Vec<&str> = vec!["config_hash", "seed", "paradigm", "task", "ap", "af"];
    cols.extend(TASK_NAMES.iter());
    cols.join(",")
}

fn csv_row(hash: &str, seed: u64, paradigm: &str, matrix_rows: &[Vec<f64>], metrics: &ParadigmMetrics) -> String {
    let tasks = matrix_rows.len();
    let mut fields = vec![
        hash.to_string(),
        seed.to_string(),
        paradigm.to_string(),
        tasks.to_string(),
        format!("{}", metrics.ap),
        metrics.af.map(|v| format!("{v}")).unwrap_or_default(),
    ];
    let final_row = matrix_rows.last().map(Vec::as_slice).unwrap_or(&[]);
    for j in 0..TASK_NAMES.len() {
        fields.push(final_row.get(j).map(|v| format!("{v}")).unwrap_or_default());
    }
    fields.join(",")
}

/// Flat rows, one per (seed, paradigm), in seed order with standard
/// before novel. Float fields use shortest round-trip formatting, so
/// identical runs serialize byte-identically.
pub fn csv_rows(report: &Report) -> Vec<String> {
    let mut rows = Vec::with_capacity(report.per_seed.len() * 2);
    for seed_report in &report.per_seed {
        rows.push(csv_row(
            &report.config_hash,
            seed_report.seed,
            "standard",
            &seed_report.accuracy_matrix_standard,
            &seed_report.standard,
        ));
        rows.push(csv_row(
            &report.config_hash,
            seed_report.seed,
            "novel",
            &seed_report.accuracy_matrix_novel,
            &seed_report.novel,
        ));
    }
    rows
}

pub fn report_csv(report: &Report) -> String {
    let mut out = csv_header();
    for row in csv_rows(report) {
        out.push('\n');
        out.push_str(&row);
    }
    out.push('\n');
    out
}

pub fn report_json(report: &Report) -> String {
    serde_json::to_string_pretty(report).expect("report serialization is infallible")
}

/// Write through a sibling temp file and rename, so readers never see a
/// partial file and interrupted runs leave the previous version intact.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let ext = match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    };
    let tmp = path.with_extension(ext);
    fs::write(&tmp, content).map_err(|e| Error::io(&tmp, &e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, &e))?;
    Ok(())
}

/// Canonical display name for a task column, mirroring [`task_name`].
pub fn task_column(id: usize) -> String {
    task_name(id)
}
