//! Experiment configuration: a versioned TOML schema covering data
//! generation, model shapes, loss weights, memory behavior, training,
//! ablation toggles, and run orchestration, with field-level validation
//! and a canonical hash for report provenance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ama::{GateOverride, RetrievalStrategy};
use crate::datagen::DatagenConfig;
use crate::error::{Error, Result};
use crate::gonf::EntropySign;
use crate::optim::AdamConfig;
use crate::pipeline::{ModelDims, PipelineSettings};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    /// Decoder projection width.
    pub d_e: usize,
    /// Decoder attention width.
    pub d_att: usize,
    /// Denoiser input-corruption std (training only).
    pub noise_sigma: f64,
    pub entropy_sign: EntropySign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSection {
    /// Entropy weight in the filtering loss.
    pub theta1: f64,
    /// Gate-budget weight in the memory loss.
    pub theta2: f64,
    /// Drift weight in the memory loss.
    pub theta3: f64,
    /// Stage weights (filtering, memory, decoding) on the simplex.
    pub phi: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySection {
    /// Prototype pool capacity per modality.
    pub capacity: usize,
    /// Temporal-interpolation factor.
    pub lambda: f64,
    /// Cosine similarity at or above which admission updates in place.
    pub sim_threshold: f64,
    /// Prototypes retrieved per modality.
    pub k: usize,
    pub strategy: RetrievalStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplaySection {
    /// Rehearsal buffer capacity in samples.
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Fraction of planned steps spent on linear warmup.
    pub warmup_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub enable_gonf: bool,
    pub enable_ama: bool,
    /// Fixed visual-gate override; set together with `beta` to bypass
    /// the learned gate in sensitivity sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out_dir: String,
}

/// The complete experiment description; everything a run needs except
/// the command-line invocation itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data: DatagenConfig,
    pub model: ModelSection,
    pub loss: LossSection,
    pub memory: MemorySection,
    pub replay: ReplaySection,
    pub train: TrainSection,
    pub ablation: AblationSection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            data: DatagenConfig::default(),
            model: ModelSection {
                d_e: 32,
                d_att: 32,
                noise_sigma: 0.1,
                entropy_sign: EntropySign::AsPrinted,
            },
            loss: LossSection {
                theta1: 0.3,
                theta2: 0.1,
                theta3: 0.1,
                phi: [0.3, 0.2, 0.5],
            },
            memory: MemorySection {
                capacity: 50,
                lambda: 0.9,
                // High enough that only near-duplicates merge; lower
                // settings let EMA updates blur distinct prototypes
                // together, which blunts max-similarity retrieval.
                sim_threshold: 0.85,
                k: 3,
                strategy: RetrievalStrategy::MaxSimilarity,
            },
            replay: ReplaySection { capacity: 200 },
            // The cited schedule (3e-5, 10% warmup) assumes a pretrained
            // backbone; training this model from scratch needs a larger
            // rate to move at all within desk-scale budgets.
            train: TrainSection {
                learning_rate: 5e-3,
                epochs: 2,
                clip_norm: 5.0,
                warmup_frac: 0.1,
            },
            ablation: AblationSection {
                enable_gonf: true,
                enable_ama: true,
                alpha: None,
                beta: None,
            },
            run: RunSection {
                seeds: vec![0, 1, 2, 3, 4],
                out_dir: "runs".into(),
            },
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigInvalid { field: field.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| invalid("<config>", e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(invalid(
                "version",
                format!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version),
            ));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization is infallible")
    }

    /// Field-level validation. Hard violations error; soft ones (values
    /// outside studied ranges) come back as warning strings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();

        self.data.validate()?;

        if self.model.d_e < 1 || self.model.d_att < 1 {
            return Err(invalid("model.d_e", "projection widths must be at least 1"));
        }
        if !self.model.noise_sigma.is_finite() || self.model.noise_sigma < 0.0 {
            return Err(invalid("model.noise_sigma", "must be finite and non-negative"));
        }

        let phi = self.loss.phi;
        let sum: f64 = phi.iter().sum();
        if phi.iter().any(|&x| !x.is_finite() || x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(
                "loss.phi",
                format!("must lie on the probability simplex (sum = {sum})"),
            ));
        }
        for (name, value) in [
            ("loss.theta1", self.loss.theta1),
            ("loss.theta2", self.loss.theta2),
            ("loss.theta3", self.loss.theta3),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(invalid(name, "must be finite and non-negative"));
            }
        }
        if !(0.1..=0.5).contains(&self.loss.theta1) {
            warnings.push(format!(
                "loss.theta1 = {} is outside the studied [0.1, 0.5] band",
                self.loss.theta1
            ));
        }

        if self.memory.capacity < 1 {
            return Err(invalid("memory.capacity", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.memory.lambda) {
            return Err(invalid(
                "memory.lambda",
                format!("{} is outside [0, 1]", self.memory.lambda),
            ));
        }
        if !self.memory.sim_threshold.is_finite() {
            return Err(invalid("memory.sim_threshold", "must be finite"));
        }
        if self.memory.k < 1 {
            return Err(invalid("memory.k", "must be at least 1"));
        }

        if self.replay.capacity < 1 {
            return Err(invalid("replay.capacity", "must be at least 1"));
        }

        if !self.train.learning_rate.is_finite() || self.train.learning_rate <= 0.0 {
            return Err(invalid("train.learning_rate", "must be finite and positive"));
        }
        if self.train.epochs < 1 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if !self.train.clip_norm.is_finite() || self.train.clip_norm <= 0.0 {
            return Err(invalid("train.clip_norm", "must be finite and positive"));
        }
        if !(0.0..=1.0).contains(&self.train.warmup_frac) {
            return Err(invalid("train.warmup_frac", "must be in [0, 1]"));
        }

        match (self.ablation.alpha, self.ablation.beta) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                    return Err(invalid("ablation.alpha", "gate overrides must be in [0, 1]"));
                }
            }
            _ => {
                return Err(invalid(
                    "ablation.alpha",
                    "alpha and beta overrides must be set together",
                ));
            }
        }

        if self.run.seeds.is_empty() {
            return Err(invalid("run.seeds", "at least one seed is required"));
        }

        Ok(warnings)
    }

    /// Canonical JSON rendering: struct field order, no whitespace.
    /// Stable across runs, so its digest identifies the configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialization is infallible")
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn gate_override(&self) -> Option<GateOverride> {
        match (self.ablation.alpha, self.ablation.beta) {
            (Some(alpha), Some(beta)) => Some(GateOverride { alpha, beta }),
            _ => None,
        }
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            theta1: self.loss.theta1,
            theta2: self.loss.theta2,
            theta3: self.loss.theta3,
            phi: self.loss.phi,
            entropy_sign: self.model.entropy_sign,
            k: self.memory.k,
            strategy: self.memory.strategy,
            enable_gonf: self.ablation.enable_gonf,
            enable_ama: self.ablation.enable_ama,
            gate_override: self.gate_override(),
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            d: self.data.d,
            d_e: self.model.d_e,
            d_att: self.model.d_att,
            vocab: self.data.vocab,
            t_max: self.data.t,
            noise_sigma: self.model.noise_sigma,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.learning_rate,
            clip_norm: self.train.clip_norm,
            warmup_frac: self.train.warmup_frac,
            ..AdamConfig::default()
        }
    }
}
