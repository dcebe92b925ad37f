//! End-to-end model composition: noise filtering, memory read, decoding,
//! and the weighted total loss, with a plain path for evaluation and
//! finite differences and a tape path for training gradients. Module
//! toggles route around disabled stages and renormalize the loss
//! weights over whatever remains active.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ama::{self, AmaParams, AmaVars, GateOverride, GateState, MemoryPool, Modality, RetrievalStrategy, RetrievedSets};
use crate::datagen::Sample;
use crate::decoder::{self, AnswerSequence, DecoderParams, DecoderVars};
use crate::error::{Error, Result};
use crate::gonf::{self, EntropySign, GonfParams, GonfVars};
use crate::linalg::tape::{Gradients, Tape, Var};
use crate::linalg::{cosine_sim, Matrix, Vector};
use crate::optim::ParamGroup;

/// Shape settings the trainable state is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Feature dimension shared by regions, queries, and the hidden state.
    pub d: usize,
    /// Decoder projection width (each half of the decoder input).
    pub d_e: usize,
    /// Decoder attention width.
    pub d_att: usize,
    pub vocab: usize,
    /// Answer steps.
    pub t_max: usize,
    /// Denoiser input-corruption std, training only.
    pub noise_sigma: f64,
}

/// All trainable parameters of the three stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub gonf: GonfParams,
    pub ama: AmaParams,
    pub dec: DecoderParams,
}

impl ModelParams {
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ModelParams {
            gonf: GonfParams::init(dims.d, dims.noise_sigma, rng)?,
            ama: AmaParams::init(dims.d, rng),
            dec: DecoderParams::init(dims.d, dims.d_e, dims.d_att, dims.vocab, dims.t_max, rng)?,
        })
    }
}

impl ParamGroup for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.gonf.visit(f);
        self.ama.visit(f);
        self.dec.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.gonf.visit_mut(f);
        self.ama.visit_mut(f);
        self.dec.visit_mut(f);
    }
}

/// Forward-pass behavior switches and loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    /// Stage loss weights (filtering, memory, decoding); must lie on the
    /// probability simplex.
    pub phi: [f64; 3],
    pub entropy_sign: EntropySign,
    /// Prototypes retrieved per modality (clamped to the pool size).
    pub k: usize,
    pub strategy: RetrievalStrategy,
    pub enable_gonf: bool,
    pub enable_ama: bool,
    pub gate_override: Option<GateOverride>,
}

/// Frozen per-step inputs that the loss is NOT differentiated through:
/// the denoiser's sampled corruption and the retrieved prototypes.
/// Freezing them keeps the analytic and finite-difference paths on the
/// same function of the parameters.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub noise: Option<Matrix>,
    pub retrieved: Option<RetrievedSets>,
    pub k_eff: usize,
}

impl StepContext {
    /// No corruption, no memory read: the pure-eval shape for an empty pool.
    pub fn bare() -> Self {
        StepContext { noise: None, retrieved: None, k_eff: 0 }
    }
}

fn vanilla_hidden(sample: &Sample) -> Result<Vector> {
    let stacked = sample.regions.concat_rows(&sample.query)?;
    Vector::from_matrix(&stacked.mean_rows())
}

/// Pooled hidden state H on the plain path, honoring the filtering toggle.
pub fn plain_hidden(
    params: &ModelParams,
    sample: &Sample,
    settings: &PipelineSettings,
    noise: Option<&Matrix>,
) -> Result<Vector> {
    if settings.enable_gonf {
        let out = gonf::forward(
            &sample.regions,
            &sample.query,
            &params.gonf,
            settings.theta1,
            settings.entropy_sign,
            noise,
        )?;
        Ok(out.hidden)
    } else {
        vanilla_hidden(sample)
    }
}

/// Samples this step's frozen context: corruption noise (training only)
/// and a memory retrieval against the current pool, with k clamped to
/// the pool size and skipped entirely while the pool is empty.
pub fn prepare_context(
    params: &ModelParams,
    pool: &MemoryPool,
    sample: &Sample,
    settings: &PipelineSettings,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepContext> {
    let sigma = params.gonf.dae.noise_sigma;
    let noise = if training && settings.enable_gonf && sigma > 0.0 {
        Some(gonf::sample_noise(sample.regions.rows(), sample.regions.cols(), sigma, rng)?)
    } else {
        None
    };
    let mut ctx = StepContext { noise, retrieved: None, k_eff: 0 };
    if settings.enable_ama {
        let available = pool.len(Modality::Visual).min(pool.len(Modality::Textual));
        if available > 0 {
            let k_eff = settings.k.min(available);
            let h = plain_hidden(params, sample, settings, ctx.noise.as_ref())?;
            let (h_v, h_q) = ama::project(&h, &params.ama.w_vis, &params.ama.w_txt)?;
            let res = pool.retrieve_top_k(&h_v, &h_q, k_eff, settings.strategy, rng)?;
            ctx.retrieved = Some(RetrievedSets::capture(pool, &res));
            ctx.k_eff = k_eff;
        }
    }
    Ok(ctx)
}

/// Loss weights over the active stages, renormalized to sum to 1. The
/// decoder is always active; filtering and memory drop out with their
/// toggles (memory also drops while the pool is empty).
fn weights_for(settings: &PipelineSettings, ama_active: bool) -> Result<(Option<f64>, Option<f64>, f64)> {
    decoder::check_simplex(&settings.phi)?;
    let mut sum = settings.phi[2];
    if settings.enable_gonf {
        sum += settings.phi[0];
    }
    if ama_active {
        sum += settings.phi[1];
    }
    if sum <= 0.0 {
        return Err(Error::ConfigInvalid {
            field: "phi".into(),
            message: "active stage loss weights sum to zero".into(),
        });
    }
    Ok((
        settings.enable_gonf.then(|| settings.phi[0] / sum),
        ama_active.then(|| settings.phi[1] / sum),
        settings.phi[2] / sum,
    ))
}

/// Memory stage on the plain path against frozen retrieved prototypes;
/// similarities are recomputed from the stored vectors so the result is
/// a pure function of the parameters.
fn plain_ama(
    h: &Vector,
    sets: &RetrievedSets,
    params: &AmaParams,
    settings: &PipelineSettings,
) -> Result<(f64, Vector)> {
    let (h_v, h_q) = ama::project(h, &params.w_vis, &params.w_txt)?;
    let v_proto = sets.v_proto()?;
    let q_proto = sets.q_proto()?;
    let gate_state = match settings.gate_override {
        Some(o) => GateState { g_v: o.alpha, g_q: o.beta },
        None => ama::gate(h, &q_proto, &v_proto, &params.w_gate)?,
    };
    let (_, _, h_prime) = ama::fuse(h, &q_proto, &v_proto, gate_state, &params.w_alpha, &params.w_beta)?;
    let mut sim = 0.0;
    for p in &sets.visual {
        sim += cosine_sim(&h_v, p)?;
    }
    for p in &sets.textual {
        sim += cosine_sim(&h_q, p)?;
    }
    let budget = gate_state.g_q + gate_state.g_v - 1.0;
    let drift = h_prime.sub(h)?;
    let loss = -sim + settings.theta2 * budget * budget + settings.theta3 * drift.dot(&drift)?;
    Ok((loss, h_prime))
}

/// Stage and total losses for one sample on the plain path.
#[derive(Debug, Clone)]
pub struct PlainForward {
    pub l_gonf: Option<f64>,
    pub l_ama: Option<f64>,
    pub l_dec: f64,
    pub total: f64,
    pub h: Vector,
    pub h_prime: Vector,
}

pub fn forward_losses(
    params: &ModelParams,
    sample: &Sample,
    ctx: &StepContext,
    settings: &PipelineSettings,
) -> Result<PlainForward> {
    let (l_gonf, h) = if settings.enable_gonf {
        let out = gonf::forward(
            &sample.regions,
            &sample.query,
            &params.gonf,
            settings.theta1,
            settings.entropy_sign,
            ctx.noise.as_ref(),
        )?;
        (Some(out.loss), out.hidden)
    } else {
        (None, vanilla_hidden(sample)?)
    };
    let (l_ama, h_prime) = match &ctx.retrieved {
        Some(sets) if settings.enable_ama => {
            let (loss, h_prime) = plain_ama(&h, sets, &params.ama, settings)?;
            (Some(loss), h_prime)
        }
        _ => (None, h.clone()),
    };
    let e = decoder::project_and_concat(&h_prime, &params.dec)?;
    let l_dec = decoder::decode_loss(&e, &sample.answer, &params.dec)?;

    let (w_gonf, w_ama, w_dec) = weights_for(settings, l_ama.is_some())?;
    let mut total = w_dec * l_dec;
    if let (Some(w), Some(l)) = (w_gonf, l_gonf) {
        total += w * l;
    }
    if let (Some(w), Some(l)) = (w_ama, l_ama) {
        total += w * l;
    }
    Ok(PlainForward { l_gonf, l_ama, l_dec, total, h, h_prime })
}

/// Tape-registered handles for every stage's parameters. All groups are
/// always registered so disabled stages report exact zero gradients.
pub struct ModelVars {
    pub gonf: GonfVars,
    pub ama: AmaVars,
    pub dec: DecoderVars,
}

impl ModelVars {
    pub fn register(tape: &Tape, p: &ModelParams) -> Result<Self> {
        Ok(ModelVars {
            gonf: GonfVars::register(tape, &p.gonf)?,
            ama: AmaVars::register(tape, &p.ama)?,
            dec: DecoderVars::register(tape, &p.dec)?,
        })
    }
}

/// Differentiable forward pass over one sample.
pub struct ForwardTrace {
    pub l_gonf: Option<Var>,
    pub l_ama: Option<Var>,
    pub l_dec: Var,
    pub total: Var,
    /// d x 1 fused hidden state.
    pub h_prime: Var,
}

pub fn build_forward(
    tape: &Tape,
    vars: &ModelVars,
    params: &ModelParams,
    sample: &Sample,
    ctx: &StepContext,
    settings: &PipelineSettings,
) -> Result<ForwardTrace> {
    let (l_gonf, h) = if settings.enable_gonf {
        let trace = gonf::build(
            tape,
            &vars.gonf,
            &sample.regions,
            &sample.query,
            ctx.noise.as_ref(),
            settings.theta1,
            settings.entropy_sign,
        )?;
        (Some(trace.loss), trace.hidden.transpose())
    } else {
        let v = tape.leaf(sample.regions.clone());
        let q = tape.leaf(sample.query.clone());
        (None, v.concat_rows(&q)?.mean_rows()?.transpose())
    };
    let (l_ama, h_prime) = match &ctx.retrieved {
        Some(sets) if settings.enable_ama => {
            let trace = ama::build(
                tape,
                &vars.ama,
                &h,
                sets,
                settings.theta2,
                settings.theta3,
                settings.gate_override,
            )?;
            (Some(trace.loss), trace.h_prime)
        }
        _ => (None, h.clone()),
    };
    let l_dec = decoder::build(tape, &vars.dec, &h_prime, &sample.answer, &params.dec)?;

    let (w_gonf, w_ama, w_dec) = weights_for(settings, l_ama.is_some())?;
    let mut total = l_dec.scale(w_dec);
    if let (Some(w), Some(l)) = (w_gonf, &l_gonf) {
        total = total.add(&l.scale(w))?;
    }
    if let (Some(w), Some(l)) = (w_ama, &l_ama) {
        total = total.add(&l.scale(w))?;
    }
    Ok(ForwardTrace { l_gonf, l_ama, l_dec, total, h_prime })
}

/// Which composite loss a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Gonf,
    Ama,
    Decoder,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Gonf, LossKind::Ama, LossKind::Decoder, LossKind::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Gonf => "gonf",
            LossKind::Ama => "ama",
            LossKind::Decoder => "decoder",
            LossKind::Total => "total",
        }
    }
}

/// The requested loss value on the plain path; `None` when the stage is
/// inactive under these settings and context.
pub fn loss_value(
    kind: LossKind,
    params: &ModelParams,
    sample: &Sample,
    ctx: &StepContext,
    settings: &PipelineSettings,
) -> Result<Option<f64>> {
    let fwd = forward_losses(params, sample, ctx, settings)?;
    Ok(match kind {
        LossKind::Gonf => fwd.l_gonf,
        LossKind::Ama => fwd.l_ama,
        LossKind::Decoder => Some(fwd.l_dec),
        LossKind::Total => Some(fwd.total),
    })
}

/// Analytic gradients of the requested loss for every parameter;
/// `None` when that loss is inactive.
pub fn loss_grads(
    kind: LossKind,
    params: &ModelParams,
    sample: &Sample,
    ctx: &StepContext,
    settings: &PipelineSettings,
) -> Result<Option<Gradients>> {
    let tape = Tape::new();
    let vars = ModelVars::register(&tape, params)?;
    let trace = build_forward(&tape, &vars, params, sample, ctx, settings)?;
    let node = match kind {
        LossKind::Gonf => trace.l_gonf,
        LossKind::Ama => trace.l_ama,
        LossKind::Decoder => Some(trace.l_dec),
        LossKind::Total => Some(trace.total),
    };
    node.map(|n| n.backward()).transpose()
}

/// Free-running greedy prediction for one sample (read-only: no pool
/// writes, no corruption noise).
pub fn infer(
    params: &ModelParams,
    pool: &MemoryPool,
    sample: &Sample,
    settings: &PipelineSettings,
    rng: &mut ChaCha8Rng,
) -> Result<AnswerSequence> {
    let ctx = prepare_context(params, pool, sample, settings, false, rng)?;
    let fwd = forward_losses(params, sample, &ctx, settings)?;
    let e = decoder::project_and_concat(&fwd.h_prime, &params.dec)?;
    decoder::predict(&e, &params.dec)
}
