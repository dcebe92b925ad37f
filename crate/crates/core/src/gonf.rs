//! Global noise filtering: region scoring, global feature fusion, a
//! denoising autoencoder over region features, residual enhancement, and
//! a compact attention-pooling encoder that fuses regions with the query.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::tape::{Tape, Var};
use crate::linalg::{scaled_dot_attention, Matrix, Vector};
use crate::optim::ParamGroup;

/// Sign convention for the attention-entropy term of the filtering loss.
///
/// `AsPrinted` charges the entropy to the loss (minimization sharpens the
/// region weights); `Smoothing` rewards it (minimization flattens them).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    AsPrinted,
    Smoothing,
}

/// Denoising autoencoder: one hidden layer, ReLU, trained with additive
/// Gaussian input noise. Rows are encoded independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaeParams {
    /// d x h encoder weight.
    pub w_enc: Matrix,
    /// 1 x h encoder bias.
    pub b_enc: Matrix,
    /// h x d decoder weight.
    pub w_dec: Matrix,
    /// 1 x d decoder bias.
    pub b_dec: Matrix,
    /// Std of the additive input noise; applied in training mode only.
    pub noise_sigma: f64,
}

impl DaeParams {
    pub fn new(w_enc: Matrix, b_enc: Matrix, w_dec: Matrix, b_dec: Matrix, noise_sigma: f64) -> Result<Self> {
        let d = w_enc.rows();
        let h = w_enc.cols();
        if h < 1 {
            return Err(Error::ConfigInvalid {
                field: "dae.hidden".into(),
                message: "hidden width must be at least 1".into(),
            });
        }
        if b_enc.shape() != (1, h) || w_dec.shape() != (h, d) || b_dec.shape() != (1, d) {
            return Err(Error::ShapeMismatch(format!(
                "autoencoder shapes inconsistent: enc {}x{}, b_enc {}x{}, dec {}x{}, b_dec {}x{}",
                d, h,
                b_enc.rows(), b_enc.cols(),
                w_dec.rows(), w_dec.cols(),
                b_dec.rows(), b_dec.cols()
            )));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::ConfigInvalid {
                field: "dae.noise_sigma".into(),
                message: format!("noise std must be non-negative, got {noise_sigma}"),
            });
        }
        Ok(DaeParams { w_enc, b_enc, w_dec, b_dec, noise_sigma })
    }

    /// Hidden width: input dim halved, rounded up.
    pub fn hidden_dim(d: usize) -> usize {
        d.div_ceil(2)
    }

    pub fn init(d: usize, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = Self::hidden_dim(d);
        DaeParams::new(
            Matrix::init_uniform(d, h, d, rng),
            Matrix::zeros(1, h),
            Matrix::init_uniform(h, d, h, rng),
            Matrix::zeros(1, d),
            noise_sigma,
        )
    }
}

impl ParamGroup for DaeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("dae.w_enc", &self.w_enc);
        f("dae.b_enc", &self.b_enc);
        f("dae.w_dec", &self.w_dec);
        f("dae.b_dec", &self.b_dec);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("dae.w_enc", &mut self.w_enc);
        f("dae.b_enc", &mut self.b_enc);
        f("dae.w_dec", &mut self.w_dec);
        f("dae.b_dec", &mut self.b_dec);
    }
}

/// All trainable state of the filtering stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GonfParams {
    /// 1 x d region scorer weight.
    pub scorer_w: Matrix,
    /// 1 x 1 region scorer bias.
    pub scorer_b: Matrix,
    pub dae: DaeParams,
    /// d x d projections of the fusion attention layer.
    pub attn_q: Matrix,
    pub attn_k: Matrix,
    pub attn_v: Matrix,
}

impl GonfParams {
    pub fn init(d: usize, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(GonfParams {
            scorer_w: Matrix::init_uniform(1, d, d, rng),
            scorer_b: Matrix::zeros(1, 1),
            dae: DaeParams::init(d, noise_sigma, rng)?,
            attn_q: Matrix::init_uniform(d, d, d, rng),
            attn_k: Matrix::init_uniform(d, d, d, rng),
            attn_v: Matrix::init_uniform(d, d, d, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.scorer_w.cols()
    }
}

impl ParamGroup for GonfParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("gonf.scorer_w", &self.scorer_w);
        f("gonf.scorer_b", &self.scorer_b);
        f("gonf.dae.w_enc", &self.dae.w_enc);
        f("gonf.dae.b_enc", &self.dae.b_enc);
        f("gonf.dae.w_dec", &self.dae.w_dec);
        f("gonf.dae.b_dec", &self.dae.b_dec);
        f("gonf.attn_q", &self.attn_q);
        f("gonf.attn_k", &self.attn_k);
        f("gonf.attn_v", &self.attn_v);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("gonf.scorer_w", &mut self.scorer_w);
        f("gonf.scorer_b", &mut self.scorer_b);
        f("gonf.dae.w_enc", &mut self.dae.w_enc);
        f("gonf.dae.b_enc", &mut self.dae.b_enc);
        f("gonf.dae.w_dec", &mut self.dae.w_dec);
        f("gonf.dae.b_dec", &mut self.dae.b_dec);
        f("gonf.attn_q", &mut self.attn_q);
        f("gonf.attn_k", &mut self.attn_k);
        f("gonf.attn_v", &mut self.attn_v);
    }
}

/// Everything the filtering stage produces for one sample.
#[derive(Debug, Clone)]
pub struct GonfOutput {
    /// Region attention weights, a simplex point of length n.
    pub weights: Vector,
    /// Global feature G, length d.
    pub global: Vector,
    /// Reconstructed regions V', n x d.
    pub denoised: Matrix,
    /// Enhanced regions V'' = V' + G, n x d.
    pub enhanced: Matrix,
    /// Pooled multimodal hidden state H, length d.
    pub hidden: Vector,
    pub loss: f64,
}

fn check_simplex(values: &[f64], tol: f64) -> Result<()> {
    if values.iter().any(|&v| v < 0.0) {
        return Err(Error::SimplexViolation { sum: values.iter().sum() });
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::SimplexViolation { sum });
    }
    Ok(())
}

/// Region attention weights: softmax over the scorer's per-row scores.
pub fn score_regions(regions: &Matrix, scorer_w: &Matrix, scorer_b: f64) -> Result<Vector> {
    if scorer_w.shape() != (1, regions.cols()) {
        return Err(Error::dims(
            "score_regions",
            format!("1x{}", regions.cols()),
            format!("{}x{}", scorer_w.rows(), scorer_w.cols()),
        ));
    }
    let scores = regions.matmul(&scorer_w.transpose())?;
    let shifted: Vec<f64> = scores.data().iter().map(|s| s + scorer_b).collect();
    crate::linalg::softmax(&Vector::new(shifted)?)
}

/// Weighted sum of region rows: G = sum_m w_m V_m.
pub fn global_fuse(regions: &Matrix, weights: &Vector) -> Result<Vector> {
    if weights.len() != regions.rows() {
        return Err(Error::dims(
            "global_fuse",
            format!("{} weights", regions.rows()),
            weights.len().to_string(),
        ));
    }
    let fused = weights.as_row().matmul(regions)?;
    Vector::from_matrix(&fused)
}

/// Draws an additive-noise matrix with entries from N(0, sigma^2).
pub fn sample_noise(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    if sigma == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| Error::ConfigInvalid {
        field: "dae.noise_sigma".into(),
        message: format!("invalid noise std {sigma}"),
    })?;
    Ok(Matrix::from_fn(rows, cols, |_, _| normal.sample(rng)))
}

fn dae_apply(input: &Matrix, p: &DaeParams) -> Result<Matrix> {
    let hidden = input
        .matmul(&p.w_enc)?
        .broadcast_add_row(&p.b_enc)?
        .map(|v| v.max(0.0));
    hidden.matmul(&p.w_dec)?.broadcast_add_row(&p.b_dec)
}

/// Runs the autoencoder over every region row. In training mode the rows
/// are corrupted with Gaussian noise before encoding; the caller's rng
/// makes the corruption reproducible.
pub fn dae_forward(regions: &Matrix, p: &DaeParams, training: bool, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    if regions.cols() != p.w_enc.rows() {
        return Err(Error::dims(
            "dae_forward",
            format!("{} feature cols", p.w_enc.rows()),
            regions.cols().to_string(),
        ));
    }
    if training && p.noise_sigma > 0.0 {
        let noise = sample_noise(regions.rows(), regions.cols(), p.noise_sigma, rng)?;
        dae_apply(&regions.add(&noise)?, p)
    } else {
        dae_apply(regions, p)
    }
}

/// Residual enhancement: every denoised row gains the global feature.
pub fn enhance(denoised: &Matrix, global: &Vector) -> Result<Matrix> {
    if global.len() != denoised.cols() {
        return Err(Error::dims(
            "enhance",
            format!("{} entries", denoised.cols()),
            global.len().to_string(),
        ));
    }
    denoised.broadcast_add_row(&global.as_row())
}

/// Filtering loss: mean over regions of reconstruction error plus the
/// weighted attention-entropy term (sign per [`EntropySign`]).
pub fn gonf_loss(
    regions: &Matrix,
    denoised: &Matrix,
    weights: &Vector,
    theta1: f64,
    sign: EntropySign,
) -> Result<f64> {
    if regions.shape() != denoised.shape() {
        return Err(Error::dims(
            "gonf_loss",
            format!("{}x{}", regions.rows(), regions.cols()),
            format!("{}x{}", denoised.rows(), denoised.cols()),
        ));
    }
    if weights.len() != regions.rows() {
        return Err(Error::dims(
            "gonf_loss",
            format!("{} weights", regions.rows()),
            weights.len().to_string(),
        ));
    }
    check_simplex(weights.data(), 1e-12)?;
    let recon = regions.sub(denoised)?.frobenius_sq();
    // sum of w ln w, with 0 ln 0 := 0; always <= 0 on the simplex.
    let wlnw: f64 = weights
        .data()
        .iter()
        .map(|&w| if w == 0.0 { 0.0 } else { w * w.ln() })
        .sum();
    let n = regions.rows() as f64;
    let total = match sign {
        EntropySign::AsPrinted => recon - theta1 * wlnw,
        EntropySign::Smoothing => recon + theta1 * wlnw,
    };
    Ok(total / n)
}

/// Attention-pooled fusion of enhanced regions and query tokens: one
/// scaled-dot-product self-attention pass over the stacked rows, then a
/// mean over the attended rows.
pub fn encode_multimodal(enhanced: &Matrix, query: &Matrix, params: &GonfParams) -> Result<Vector> {
    if enhanced.cols() != query.cols() {
        return Err(Error::dims(
            "encode_multimodal",
            format!("{} query cols", enhanced.cols()),
            query.cols().to_string(),
        ));
    }
    let stacked = enhanced.concat_rows(query)?;
    let q = stacked.matmul(&params.attn_q)?;
    let k = stacked.matmul(&params.attn_k)?;
    let v = stacked.matmul(&params.attn_v)?;
    let attended = scaled_dot_attention(&q, &k, &v)?;
    Vector::from_matrix(&attended.mean_rows())
}

/// Whole filtering stage on the plain (evaluation) path. `noise`, when
/// given, is added to the autoencoder input; evaluation passes `None`.
pub fn forward(
    regions: &Matrix,
    query: &Matrix,
    params: &GonfParams,
    theta1: f64,
    sign: EntropySign,
    noise: Option<&Matrix>,
) -> Result<GonfOutput> {
    let weights = score_regions(regions, &params.scorer_w, params.scorer_b.get(0, 0))?;
    let global = global_fuse(regions, &weights)?;
    let denoised = match noise {
        Some(nz) => dae_apply(&regions.add(nz)?, &params.dae)?,
        None => dae_apply(regions, &params.dae)?,
    };
    let enhanced = enhance(&denoised, &global)?;
    let hidden = encode_multimodal(&enhanced, query, params)?;
    let loss = gonf_loss(regions, &denoised, &weights, theta1, sign)?;
    Ok(GonfOutput { weights, global, denoised, enhanced, hidden, loss })
}

/// Tape-registered handles to every filtering parameter.
pub struct GonfVars {
    pub scorer_w: Var,
    pub scorer_b: Var,
    pub enc_w: Var,
    pub enc_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
    pub attn_q: Var,
    pub attn_k: Var,
    pub attn_v: Var,
}

impl GonfVars {
    pub fn register(tape: &Tape, p: &GonfParams) -> Result<Self> {
        Ok(GonfVars {
            scorer_w: tape.param("gonf.scorer_w", p.scorer_w.clone())?,
            scorer_b: tape.param("gonf.scorer_b", p.scorer_b.clone())?,
            enc_w: tape.param("gonf.dae.w_enc", p.dae.w_enc.clone())?,
            enc_b: tape.param("gonf.dae.b_enc", p.dae.b_enc.clone())?,
            dec_w: tape.param("gonf.dae.w_dec", p.dae.w_dec.clone())?,
            dec_b: tape.param("gonf.dae.b_dec", p.dae.b_dec.clone())?,
            attn_q: tape.param("gonf.attn_q", p.attn_q.clone())?,
            attn_k: tape.param("gonf.attn_k", p.attn_k.clone())?,
            attn_v: tape.param("gonf.attn_v", p.attn_v.clone())?,
        })
    }
}

/// Differentiable filtering stage.
pub struct GonfTrace {
    /// 1 x n region weights.
    pub weights: Var,
    /// 1 x d pooled hidden state H.
    pub hidden: Var,
    /// 1 x 1 filtering loss.
    pub loss: Var,
}

/// Builds the filtering stage on a tape. Mirrors [`forward`] exactly:
/// same math, same noise handling, differentiable throughout.
pub fn build(
    tape: &Tape,
    vars: &GonfVars,
    regions: &Matrix,
    query: &Matrix,
    noise: Option<&Matrix>,
    theta1: f64,
    sign: EntropySign,
) -> Result<GonfTrace> {
    let n = regions.rows();
    let v = tape.leaf(regions.clone());
    let q = tape.leaf(query.clone());

    let scores = v
        .matmul(&vars.scorer_w.transpose())?
        .broadcast_add_row(&vars.scorer_b)?;
    let weights = scores.transpose().softmax_rows()?;

    let global = weights.matmul(&v)?;

    let dae_in = match noise {
        Some(nz) => v.add(&tape.leaf(nz.clone()))?,
        None => v.clone(),
    };
    let hidden_act = dae_in
        .matmul(&vars.enc_w)?
        .broadcast_add_row(&vars.enc_b)?
        .relu();
    let denoised = hidden_act
        .matmul(&vars.dec_w)?
        .broadcast_add_row(&vars.dec_b)?;

    let enhanced = denoised.broadcast_add_row(&global)?;

    let stacked = enhanced.concat_rows(&q)?;
    let att_q = stacked.matmul(&vars.attn_q)?;
    let att_k = stacked.matmul(&vars.attn_k)?;
    let att_v = stacked.matmul(&vars.attn_v)?;
    let scale = 1.0 / (att_q.cols() as f64).sqrt();
    let attended = att_q
        .matmul(&att_k.transpose())?
        .scale(scale)
        .softmax_rows()?
        .matmul(&att_v)?;
    let hidden = attended.mean_rows()?;

    let recon = v.sub(&denoised)?.frobenius_sq()?;
    let wlnw = weights.xlnx()?.sum();
    let combined = match sign {
        EntropySign::AsPrinted => recon.sub(&wlnw.scale(theta1))?,
        EntropySign::Smoothing => recon.add(&wlnw.scale(theta1))?,
    };
    let loss = combined.scale(1.0 / n as f64);

    Ok(GonfTrace { weights, hidden, loss })
}
