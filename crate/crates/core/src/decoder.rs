//! Answer decoding: parallel projections of the fused hidden state, a
//! cross-attention readout, a per-step token classifier with
//! teacher-forced negative log-likelihood, and the weighted total loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::tape::{Tape, Var};
use crate::linalg::{scaled_dot_attention, Matrix, Vector};
use crate::optim::ParamGroup;

/// Reserved pad token id; also the start-of-answer input at step 0.
pub const PAD_TOKEN: usize = 0;

/// Ground-truth answer: exactly T token ids in `[0, vocab)`, padded
/// with [`PAD_TOKEN`].
pub type AnswerSequence = Vec<usize>;

/// Trainable state of the decoding stage plus its two size settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// d_e x d projection of the fused state into the visual slot.
    pub w_vis: Matrix,
    /// d_e x d projection of the fused state into the textual slot.
    pub w_txt: Matrix,
    /// d_att x 2d_e query map over the shifted answer embedding.
    pub w_query: Matrix,
    /// d_att x 2d_e key map over the decoder input.
    pub w_key: Matrix,
    /// d_att x 2d_e value map over the decoder input.
    pub w_value: Matrix,
    /// vocab x 2d_e learned token embeddings.
    pub embed: Matrix,
    /// T x 2d_e learned step-position embeddings.
    pub pos: Matrix,
    /// vocab x d_att output classifier weight.
    pub w_out: Matrix,
    /// vocab x 1 output classifier bias.
    pub b_out: Matrix,
    pub vocab: usize,
    pub t_max: usize,
}

impl DecoderParams {
    pub fn init(d: usize, d_e: usize, d_att: usize, vocab: usize, t_max: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::ConfigInvalid {
                field: "decoder.vocab".into(),
                message: "answer vocabulary needs at least 2 tokens".into(),
            });
        }
        if t_max < 1 {
            return Err(Error::ConfigInvalid {
                field: "decoder.t_max".into(),
                message: "answers need at least 1 step".into(),
            });
        }
        Ok(DecoderParams {
            w_vis: Matrix::init_uniform(d_e, d, d, rng),
            w_txt: Matrix::init_uniform(d_e, d, d, rng),
            w_query: Matrix::init_uniform(d_att, 2 * d_e, 2 * d_e, rng),
            w_key: Matrix::init_uniform(d_att, 2 * d_e, 2 * d_e, rng),
            w_value: Matrix::init_uniform(d_att, 2 * d_e, 2 * d_e, rng),
            embed: Matrix::init_uniform(vocab, 2 * d_e, 2 * d_e, rng),
            pos: Matrix::init_uniform(t_max, 2 * d_e, 2 * d_e, rng),
            w_out: Matrix::init_uniform(vocab, d_att, d_att, rng),
            b_out: Matrix::zeros(vocab, 1),
            vocab,
            t_max,
        })
    }
}

impl ParamGroup for DecoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("dec.w_vis", &self.w_vis);
        f("dec.w_txt", &self.w_txt);
        f("dec.w_query", &self.w_query);
        f("dec.w_key", &self.w_key);
        f("dec.w_value", &self.w_value);
        f("dec.embed", &self.embed);
        f("dec.pos", &self.pos);
        f("dec.w_out", &self.w_out);
        f("dec.b_out", &self.b_out);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("dec.w_vis", &mut self.w_vis);
        f("dec.w_txt", &mut self.w_txt);
        f("dec.w_query", &mut self.w_query);
        f("dec.w_key", &mut self.w_key);
        f("dec.w_value", &mut self.w_value);
        f("dec.embed", &mut self.embed);
        f("dec.pos", &mut self.pos);
        f("dec.w_out", &mut self.w_out);
        f("dec.b_out", &mut self.b_out);
    }
}

/// Unified decoder input `E = concat(W_vis h', W_txt h')`.
pub fn project_and_concat(h_prime: &Vector, p: &DecoderParams) -> Result<Vector> {
    let col = h_prime.as_column();
    let top = p.w_vis.matmul(&col)?;
    let bot = p.w_txt.matmul(&col)?;
    Vector::from_matrix(&top.concat_rows(&bot)?)
}

/// Row-wise `softmax(Q Kᵀ / sqrt(d_k)) V` with `d_k = q.cols`.
pub fn cross_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    scaled_dot_attention(q, k, v)
}

/// Log-probabilities via a stable log-sum-exp; exact 0 for a dominant
/// logit whose rivals underflow.
fn log_softmax(logits: &Matrix) -> Vec<f64> {
    let xs: Vec<f64> = (0..logits.rows()).map(|i| logits.get(i, 0)).collect();
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// One decode step on the plain path: classifier logits (vocab x 1) for
/// step `t` given the previous token.
fn step_logits(e_col: &Matrix, prev: usize, t: usize, p: &DecoderParams) -> Result<Matrix> {
    if prev >= p.vocab {
        return Err(Error::TokenOutOfRange { token: prev, vocab: p.vocab });
    }
    if t >= p.t_max {
        return Err(Error::IndexOutOfRange { index: t, size: p.t_max });
    }
    let k = p.w_key.matmul(e_col)?;
    let v = p.w_value.matmul(e_col)?;
    let q_in = p.embed.row_vector(prev).as_row().add(&p.pos.row_vector(t).as_row())?;
    let q = p.w_query.matmul(&q_in.transpose())?;
    let attn = cross_attention(&q.transpose(), &k.transpose(), &v.transpose())?;
    p.w_out.matmul(&attn.transpose())?.add(&p.b_out)
}

/// Teacher-forced negative log-likelihood of `truth`, summed over
/// non-pad steps. Step t's query comes from the previous truth token
/// (the pad id at t = 0).
pub fn decode_loss(e: &Vector, truth: &AnswerSequence, p: &DecoderParams) -> Result<f64> {
    if truth.len() != p.t_max {
        return Err(Error::dims(
            "decode_loss",
            format!("{} answer steps", p.t_max),
            truth.len().to_string(),
        ));
    }
    for &tok in truth {
        if tok >= p.vocab {
            return Err(Error::TokenOutOfRange { token: tok, vocab: p.vocab });
        }
    }
    let e_col = e.as_column();
    let mut loss = 0.0;
    for (t, &tok) in truth.iter().enumerate() {
        if tok == PAD_TOKEN {
            continue;
        }
        let prev = if t == 0 { PAD_TOKEN } else { truth[t - 1] };
        let logits = step_logits(&e_col, prev, t, p)?;
        loss -= log_softmax(&logits)[tok];
    }
    Ok(loss)
}

/// Free-running greedy decode: feeds each argmax back as the next
/// step's input. Ties go to the lower token id.
pub fn predict(e: &Vector, p: &DecoderParams) -> Result<AnswerSequence> {
    let e_col = e.as_column();
    let mut out = Vec::with_capacity(p.t_max);
    let mut prev = PAD_TOKEN;
    for t in 0..p.t_max {
        let logits = step_logits(&e_col, prev, t, p)?;
        let mut best = 0;
        for i in 1..p.vocab {
            if logits.get(i, 0) > logits.get(best, 0) {
                best = i;
            }
        }
        out.push(best);
        prev = best;
    }
    Ok(out)
}

/// Weighted sum of the three stage losses; the weights must lie on the
/// probability simplex within 1e-9.
pub fn total_loss(l_gonf: f64, l_ama: f64, l_dec: f64, phi: &[f64; 3]) -> Result<f64> {
    check_simplex(phi)?;
    Ok(phi[0] * l_gonf + phi[1] * l_ama + phi[2] * l_dec)
}

pub(crate) fn check_simplex(phi: &[f64; 3]) -> Result<()> {
    let sum: f64 = phi.iter().sum();
    if phi.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::SimplexViolation { sum });
    }
    Ok(())
}

/// Tape-registered handles to the stage parameters.
pub struct DecoderVars {
    pub w_vis: Var,
    pub w_txt: Var,
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub embed: Var,
    pub pos: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl DecoderVars {
    pub fn register(tape: &Tape, p: &DecoderParams) -> Result<Self> {
        Ok(DecoderVars {
            w_vis: tape.param("dec.w_vis", p.w_vis.clone())?,
            w_txt: tape.param("dec.w_txt", p.w_txt.clone())?,
            w_query: tape.param("dec.w_query", p.w_query.clone())?,
            w_key: tape.param("dec.w_key", p.w_key.clone())?,
            w_value: tape.param("dec.w_value", p.w_value.clone())?,
            embed: tape.param("dec.embed", p.embed.clone())?,
            pos: tape.param("dec.pos", p.pos.clone())?,
            w_out: tape.param("dec.w_out", p.w_out.clone())?,
            b_out: tape.param("dec.b_out", p.b_out.clone())?,
        })
    }
}

/// Differentiable teacher-forced NLL. `h_prime` is the fused d x 1
/// hidden state node; mirrors [`decode_loss`] exactly.
pub fn build(
    tape: &Tape,
    vars: &DecoderVars,
    h_prime: &Var,
    truth: &AnswerSequence,
    p: &DecoderParams,
) -> Result<Var> {
    if truth.len() != p.t_max {
        return Err(Error::dims(
            "decode_loss",
            format!("{} answer steps", p.t_max),
            truth.len().to_string(),
        ));
    }
    for &tok in truth {
        if tok >= p.vocab {
            return Err(Error::TokenOutOfRange { token: tok, vocab: p.vocab });
        }
    }
    let e = vars.w_vis.matmul(h_prime)?.concat_rows(&vars.w_txt.matmul(h_prime)?)?;
    let k = vars.w_key.matmul(&e)?.transpose();
    let v = vars.w_value.matmul(&e)?.transpose();
    let scale = 1.0 / (k.value().cols() as f64).sqrt();

    let mut loss: Option<Var> = None;
    for (t, &tok) in truth.iter().enumerate() {
        if tok == PAD_TOKEN {
            continue;
        }
        let prev = if t == 0 { PAD_TOKEN } else { truth[t - 1] };
        let q_in = vars.embed.slice_rows(prev, 1)?.add(&vars.pos.slice_rows(t, 1)?)?;
        let q = vars.w_query.matmul(&q_in.transpose())?.transpose();
        let attn = q.matmul(&k.transpose())?.scale(scale).softmax_rows()?.matmul(&v)?;
        let logits = vars.w_out.matmul(&attn.transpose())?.add(&vars.b_out)?;
        let logp = logits.transpose().log_softmax_rows()?.pick(0, tok)?;
        loss = Some(match loss {
            Some(acc) => acc.sub(&logp)?,
            None => logp.scale(-1.0),
        });
    }
    match loss {
        Some(l) => Ok(l),
        // All-pad answer: nothing to predict, zero loss.
        None => Ok(tape.leaf(Matrix::zeros(1, 1))),
    }
}
