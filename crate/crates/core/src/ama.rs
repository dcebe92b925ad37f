//! Adaptive memory allocation: modality projections, a capacity-bounded
//! prototype pool per modality, top-k cosine retrieval, gated prototype
//! fusion, temporal-interpolation updates, and the stage loss.

use rand::seq::index::sample as sample_indices;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::tape::{Tape, Var};
use crate::linalg::{cosine_sim, sigmoid_scalar, Matrix, Vector};
use crate::optim::ParamGroup;

/// Which prototype set an operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How retrieval picks k prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStrategy {
    MaxSimilarity,
    Random,
}

/// One stored prototype with its recency stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vector,
    pub last_update: u64,
}

/// What `admit_or_update` did for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitOutcome {
    Inserted { index: usize },
    Updated { index: usize },
}

/// Index and cosine score of one retrieved prototype.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieved {
    pub index: usize,
    pub score: f64,
}

/// Top-k retrieval output for both modalities, with the mean prototypes
/// that downstream gating and fusion consume.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub visual: Vec<Retrieved>,
    pub textual: Vec<Retrieved>,
    /// Arithmetic mean of the retrieved visual prototypes.
    pub v_proto: Vector,
    /// Arithmetic mean of the retrieved textual prototypes.
    pub q_proto: Vector,
}

/// Capacity-bounded prototype store, one set per modality, with
/// exponential-moving-average updates and oldest-first eviction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPool {
    visual: Vec<Prototype>,
    textual: Vec<Prototype>,
    capacity: usize,
    lambda: f64,
    sim_threshold: f64,
    /// Monotone logical clock stamping every insert/update.
    clock: u64,
}

impl MemoryPool {
    pub fn new(capacity: usize, lambda: f64, sim_threshold: f64) -> Result<Self> {
        if capacity < 1 {
            return Err(Error::ConfigInvalid {
                field: "memory.capacity".into(),
                message: "capacity must be at least 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::LambdaOutOfRange(lambda));
        }
        Ok(MemoryPool {
            visual: Vec::new(),
            textual: Vec::new(),
            capacity,
            lambda,
            sim_threshold,
            clock: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self, modality: Modality) -> usize {
        self.slot(modality).len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty() && self.textual.is_empty()
    }

    pub fn prototypes(&self, modality: Modality) -> &[Prototype] {
        self.slot(modality)
    }

    fn slot(&self, modality: Modality) -> &Vec<Prototype> {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    fn slot_mut(&mut self, modality: Modality) -> &mut Vec<Prototype> {
        match modality {
            Modality::Visual => &mut self.visual,
            Modality::Textual => &mut self.textual,
        }
    }

    /// Top-k retrieval against both modalities. `max_similarity` takes the
    /// k highest cosine scores (ties to the lower index); `random` picks k
    /// uniformly without replacement. Scores come back non-increasing.
    pub fn retrieve_top_k(
        &self,
        h_v: &Vector,
        h_q: &Vector,
        k: usize,
        strategy: RetrievalStrategy,
        rng: &mut ChaCha8Rng,
    ) -> Result<RetrievalResult> {
        let visual = self.retrieve_one(h_v, Modality::Visual, k, strategy, rng)?;
        let textual = self.retrieve_one(h_q, Modality::Textual, k, strategy, rng)?;
        let v_proto = self.mean_of(Modality::Visual, &visual)?;
        let q_proto = self.mean_of(Modality::Textual, &textual)?;
        Ok(RetrievalResult { visual, textual, v_proto, q_proto })
    }

    fn retrieve_one(
        &self,
        query: &Vector,
        modality: Modality,
        k: usize,
        strategy: RetrievalStrategy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Retrieved>> {
        let pool = self.slot(modality);
        if pool.is_empty() {
            return Err(Error::EmptyPool { modality: modality.as_str() });
        }
        if k > pool.len() {
            return Err(Error::KTooLarge { k, size: pool.len() });
        }
        let mut picked: Vec<Retrieved> = match strategy {
            RetrievalStrategy::MaxSimilarity => {
                let mut scored = Vec::with_capacity(pool.len());
                for (index, proto) in pool.iter().enumerate() {
                    scored.push(Retrieved {
                        index,
                        score: cosine_sim(query, &proto.vector)?,
                    });
                }
                scored.sort_by(|a, b| {
                    b.score
                        .partial_cmp(&a.score)
                        .expect("finite scores")
                        .then(a.index.cmp(&b.index))
                });
                scored.truncate(k);
                scored
            }
            RetrievalStrategy::Random => {
                let chosen = sample_indices(rng, pool.len(), k);
                let mut scored = Vec::with_capacity(k);
                for index in chosen {
                    scored.push(Retrieved {
                        index,
                        score: cosine_sim(query, &pool[index].vector)?,
                    });
                }
                scored.sort_by(|a, b| {
                    b.score
                        .partial_cmp(&a.score)
                        .expect("finite scores")
                        .then(a.index.cmp(&b.index))
                });
                scored
            }
        };
        picked.shrink_to_fit();
        Ok(picked)
    }

    fn mean_of(&self, modality: Modality, picked: &[Retrieved]) -> Result<Vector> {
        let pool = self.slot(modality);
        let dim = pool[picked[0].index].vector.len();
        let mut acc = Vector::zeros(dim);
        for r in picked {
            acc = acc.add(&pool[r.index].vector)?;
        }
        Ok(acc.scale(1.0 / picked.len() as f64))
    }

    /// Temporal interpolation of one prototype toward `h`:
    /// `P <- lambda P + (1 - lambda) h`, recency stamp refreshed.
    pub fn memory_update(&mut self, modality: Modality, index: usize, h: &Vector) -> Result<()> {
        let lambda = self.lambda;
        let clock = self.tick();
        let pool = self.slot_mut(modality);
        let Some(proto) = pool.get_mut(index) else {
            return Err(Error::IndexOutOfRange { index, size: pool.len() });
        };
        let blended = proto.vector.scale(lambda).add(&h.scale(1.0 - lambda))?;
        if blended.norm() <= 1e-12 {
            return Err(Error::ZeroVector("memory_update blend"));
        }
        proto.vector = blended;
        proto.last_update = clock;
        Ok(())
    }

    /// Per modality: EMA-update the best match when its cosine similarity
    /// reaches the threshold, otherwise insert (evicting the stalest
    /// prototype when full). Returns what happened per modality.
    pub fn admit_or_update(&mut self, h_v: &Vector, h_q: &Vector) -> Result<(AdmitOutcome, AdmitOutcome)> {
        let vis = self.admit_one(Modality::Visual, h_v)?;
        let txt = self.admit_one(Modality::Textual, h_q)?;
        Ok((vis, txt))
    }

    fn admit_one(&mut self, modality: Modality, h: &Vector) -> Result<AdmitOutcome> {
        if h.norm() <= 1e-12 {
            return Err(Error::ZeroVector("admit_or_update feature"));
        }
        let best = {
            let pool = self.slot(modality);
            let mut best: Option<(usize, f64)> = None;
            for (i, p) in pool.iter().enumerate() {
                let s = cosine_sim(h, &p.vector)?;
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((i, s));
                }
            }
            best
        };
        match best {
            Some((index, score)) if score >= self.sim_threshold => {
                self.memory_update(modality, index, h)?;
                Ok(AdmitOutcome::Updated { index })
            }
            _ => {
                let clock = self.tick();
                let capacity = self.capacity;
                let pool = self.slot_mut(modality);
                if pool.len() == capacity {
                    let oldest = pool
                        .iter()
                        .enumerate()
                        .min_by_key(|(i, p)| (p.last_update, *i))
                        .map(|(i, _)| i)
                        .expect("non-empty at capacity");
                    pool.remove(oldest);
                }
                pool.push(Prototype { vector: h.clone(), last_update: clock });
                Ok(AdmitOutcome::Inserted { index: pool.len() - 1 })
            }
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Structural invariants; run after deserializing a checkpoint.
    pub fn validate(&self) -> Result<()> {
        if self.capacity < 1 {
            return Err(Error::ConfigInvalid {
                field: "memory.capacity".into(),
                message: "capacity must be at least 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::LambdaOutOfRange(self.lambda));
        }
        for modality in [Modality::Visual, Modality::Textual] {
            let pool = self.slot(modality);
            if pool.len() > self.capacity {
                return Err(Error::ShapeMismatch(format!(
                    "{modality} pool holds {} prototypes, capacity {}",
                    pool.len(),
                    self.capacity
                )));
            }
            for p in pool {
                if !p.vector.data().iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("pool prototype"));
                }
                if p.vector.norm() <= 1e-12 {
                    return Err(Error::ZeroVector("pool prototype"));
                }
            }
        }
        Ok(())
    }
}

/// Trainable state of the memory stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmaParams {
    /// d x d visual projection.
    pub w_vis: Matrix,
    /// d x d textual projection.
    pub w_txt: Matrix,
    /// 2 x 3d gate weight.
    pub w_gate: Matrix,
    /// d x d map from the visual prototype to textual mixing weights.
    pub w_alpha: Matrix,
    /// d x d map from the textual prototype to visual mixing weights.
    pub w_beta: Matrix,
}

impl AmaParams {
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        AmaParams {
            w_vis: Matrix::init_uniform(d, d, d, rng),
            w_txt: Matrix::init_uniform(d, d, d, rng),
            w_gate: Matrix::init_uniform(2, 3 * d, 3 * d, rng),
            w_alpha: Matrix::init_uniform(d, d, d, rng),
            w_beta: Matrix::init_uniform(d, d, d, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_vis.rows()
    }
}

impl ParamGroup for AmaParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("ama.w_vis", &self.w_vis);
        f("ama.w_txt", &self.w_txt);
        f("ama.w_gate", &self.w_gate);
        f("ama.w_alpha", &self.w_alpha);
        f("ama.w_beta", &self.w_beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("ama.w_vis", &mut self.w_vis);
        f("ama.w_txt", &mut self.w_txt);
        f("ama.w_gate", &mut self.w_gate);
        f("ama.w_alpha", &mut self.w_alpha);
        f("ama.w_beta", &mut self.w_beta);
    }
}

/// Gate activations for the two modalities, both in (0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateState {
    pub g_v: f64,
    pub g_q: f64,
}

/// Fixed gate override used by the sensitivity sweep: replaces (g_v, g_q)
/// with constants, bypassing the learned gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateOverride {
    pub alpha: f64,
    pub beta: f64,
}

/// Projects the hidden state into the two modality subspaces.
pub fn project(h: &Vector, w_vis: &Matrix, w_txt: &Matrix) -> Result<(Vector, Vector)> {
    let col = h.as_column();
    let h_v = Vector::from_matrix(&w_vis.matmul(&col)?)?;
    let h_q = Vector::from_matrix(&w_txt.matmul(&col)?)?;
    Ok((h_v, h_q))
}

/// Gate from the concatenated `[h; q_proto; v_proto]` column.
pub fn gate(h: &Vector, q_proto: &Vector, v_proto: &Vector, w_gate: &Matrix) -> Result<GateState> {
    let expected = h.len() + q_proto.len() + v_proto.len();
    if w_gate.shape() != (2, expected) {
        return Err(Error::dims(
            "gate",
            format!("2x{expected}"),
            format!("{}x{}", w_gate.rows(), w_gate.cols()),
        ));
    }
    let mut stacked = Vec::with_capacity(expected);
    stacked.extend_from_slice(h.data());
    stacked.extend_from_slice(q_proto.data());
    stacked.extend_from_slice(v_proto.data());
    let logits = w_gate.matmul(&Vector::from(stacked).as_column())?;
    Ok(GateState {
        g_v: sigmoid_scalar(logits.get(0, 0)),
        g_q: sigmoid_scalar(logits.get(1, 0)),
    })
}

/// Gated cross-modal fusion:
/// `alpha = g_v softmax(W_alpha v_proto)`, `beta = g_q softmax(W_beta q_proto)`,
/// `h' = h + alpha (.) q_proto + beta (.) v_proto`.
///
/// The mixing vector for each modality is derived from the other
/// modality's prototype; that pairing is deliberate.
pub fn fuse(
    h: &Vector,
    q_proto: &Vector,
    v_proto: &Vector,
    gate: GateState,
    w_alpha: &Matrix,
    w_beta: &Matrix,
) -> Result<(Vector, Vector, Vector)> {
    let alpha_raw = Vector::from_matrix(&w_alpha.matmul(&v_proto.as_column())?)?;
    let beta_raw = Vector::from_matrix(&w_beta.matmul(&q_proto.as_column())?)?;
    let alpha = crate::linalg::softmax(&alpha_raw)?.scale(gate.g_v);
    let beta = crate::linalg::softmax(&beta_raw)?.scale(gate.g_q);
    if alpha.len() != q_proto.len() || beta.len() != v_proto.len() {
        return Err(Error::dims(
            "fuse",
            format!("{} mixing entries", q_proto.len()),
            format!("{}/{}", alpha.len(), beta.len()),
        ));
    }
    let mut h_prime = h.clone();
    for i in 0..h_prime.len() {
        let bump = alpha.get(i) * q_proto.get(i) + beta.get(i) * v_proto.get(i);
        h_prime = {
            let mut data = h_prime.data().to_vec();
            data[i] += bump;
            Vector::from(data)
        };
    }
    Ok((alpha, beta, h_prime))
}

/// Stage loss: negative retrieved similarities, a gate-budget penalty
/// pulling `g_v + g_q` toward 1, and a drift penalty on `h' - h`.
pub fn ama_loss(
    retrieval: &RetrievalResult,
    gate: GateState,
    h: &Vector,
    h_prime: &Vector,
    theta2: f64,
    theta3: f64,
) -> Result<f64> {
    if h.len() != h_prime.len() {
        return Err(Error::dims("ama_loss", h.len().to_string(), h_prime.len().to_string()));
    }
    let sim_sum: f64 = retrieval
        .visual
        .iter()
        .chain(retrieval.textual.iter())
        .map(|r| r.score)
        .sum();
    let budget = gate.g_q + gate.g_v - 1.0;
    let drift = h_prime.sub(h)?;
    Ok(-sim_sum + theta2 * budget * budget + theta3 * drift.dot(&drift)?)
}

/// Full memory stage output on the plain path.
#[derive(Debug, Clone)]
pub struct AmaOutput {
    pub h_v: Vector,
    pub h_q: Vector,
    pub retrieval: RetrievalResult,
    pub gate: GateState,
    pub alpha: Vector,
    pub beta: Vector,
    pub h_prime: Vector,
    pub loss: f64,
}

/// Plain-path memory stage: project, retrieve, gate, fuse, loss.
/// The pool is read-only here; admissions happen in the training loop.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    h: &Vector,
    pool: &MemoryPool,
    params: &AmaParams,
    k: usize,
    strategy: RetrievalStrategy,
    theta2: f64,
    theta3: f64,
    gate_override: Option<GateOverride>,
    rng: &mut ChaCha8Rng,
) -> Result<AmaOutput> {
    let (h_v, h_q) = project(h, &params.w_vis, &params.w_txt)?;
    let retrieval = pool.retrieve_top_k(&h_v, &h_q, k, strategy, rng)?;
    let gate_state = match gate_override {
        Some(o) => GateState { g_v: o.alpha, g_q: o.beta },
        None => gate(h, &retrieval.q_proto, &retrieval.v_proto, &params.w_gate)?,
    };
    let (alpha, beta, h_prime) = fuse(
        h,
        &retrieval.q_proto,
        &retrieval.v_proto,
        gate_state,
        &params.w_alpha,
        &params.w_beta,
    )?;
    let loss = ama_loss(&retrieval, gate_state, h, &h_prime, theta2, theta3)?;
    Ok(AmaOutput { h_v, h_q, retrieval, gate: gate_state, alpha, beta, h_prime, loss })
}

/// Tape-registered handles to the stage parameters.
pub struct AmaVars {
    pub w_vis: Var,
    pub w_txt: Var,
    pub w_gate: Var,
    pub w_alpha: Var,
    pub w_beta: Var,
}

impl AmaVars {
    pub fn register(tape: &Tape, p: &AmaParams) -> Result<Self> {
        Ok(AmaVars {
            w_vis: tape.param("ama.w_vis", p.w_vis.clone())?,
            w_txt: tape.param("ama.w_txt", p.w_txt.clone())?,
            w_gate: tape.param("ama.w_gate", p.w_gate.clone())?,
            w_alpha: tape.param("ama.w_alpha", p.w_alpha.clone())?,
            w_beta: tape.param("ama.w_beta", p.w_beta.clone())?,
        })
    }
}

/// Differentiable memory stage built around fixed retrieved prototypes.
pub struct AmaTrace {
    /// d x 1 projected visual query.
    pub h_v: Var,
    /// d x 1 projected textual query.
    pub h_q: Var,
    /// d x 1 fused hidden state H'.
    pub h_prime: Var,
    /// 1 x 1 stage loss.
    pub loss: Var,
}

/// Retrieved prototype vectors captured as constants for one step. The
/// stage differentiates through the projections and gate but never
/// through stored memory.
#[derive(Debug, Clone)]
pub struct RetrievedSets {
    pub visual: Vec<Vector>,
    pub textual: Vec<Vector>,
}

impl RetrievedSets {
    pub fn capture(pool: &MemoryPool, retrieval: &RetrievalResult) -> Self {
        RetrievedSets {
            visual: retrieval
                .visual
                .iter()
                .map(|r| pool.prototypes(Modality::Visual)[r.index].vector.clone())
                .collect(),
            textual: retrieval
                .textual
                .iter()
                .map(|r| pool.prototypes(Modality::Textual)[r.index].vector.clone())
                .collect(),
        }
    }

    pub fn v_proto(&self) -> Result<Vector> {
        mean_vectors(&self.visual)
    }

    pub fn q_proto(&self) -> Result<Vector> {
        mean_vectors(&self.textual)
    }
}

fn mean_vectors(vs: &[Vector]) -> Result<Vector> {
    let first = vs.first().ok_or(Error::EmptyPool { modality: "retrieved" })?;
    let mut acc = Vector::zeros(first.len());
    for v in vs {
        acc = acc.add(v)?;
    }
    Ok(acc.scale(1.0 / vs.len() as f64))
}

/// Cosine similarity between a tape node (d x 1) and a constant vector,
/// as a 1 x 1 node.
fn tape_cosine(tape: &Tape, h: &Var, proto: &Vector) -> Result<Var> {
    let p = tape.leaf(proto.as_column());
    let dot = h.transpose().matmul(&p)?;
    let h_norm = h.frobenius_sq()?.sqrt()?;
    let p_norm = p.frobenius_sq()?.sqrt()?;
    dot.div(&h_norm.mul(&p_norm)?)
}

/// Builds the memory stage on a tape. `h` is a d x 1 column node from the
/// encoder; retrieved prototypes come in as constants.
#[allow(clippy::too_many_arguments)]
pub fn build(
    tape: &Tape,
    vars: &AmaVars,
    h: &Var,
    retrieved: &RetrievedSets,
    theta2: f64,
    theta3: f64,
    gate_override: Option<GateOverride>,
) -> Result<AmaTrace> {
    let h_v = vars.w_vis.matmul(h)?;
    let h_q = vars.w_txt.matmul(h)?;

    let v_proto = tape.leaf(retrieved.v_proto()?.as_column());
    let q_proto = tape.leaf(retrieved.q_proto()?.as_column());

    let (g_v, g_q) = match gate_override {
        Some(o) => {
            let g_v = tape.leaf(Matrix::new(1, 1, vec![o.alpha])?);
            let g_q = tape.leaf(Matrix::new(1, 1, vec![o.beta])?);
            (g_v, g_q)
        }
        None => {
            let stacked = h.concat_rows(&q_proto)?.concat_rows(&v_proto)?;
            let gates = vars.w_gate.matmul(&stacked)?.sigmoid();
            (gates.pick(0, 0)?, gates.pick(1, 0)?)
        }
    };

    let alpha = vars
        .w_alpha
        .matmul(&v_proto)?
        .transpose()
        .softmax_rows()?
        .transpose()
        .scale_by(&g_v)?;
    let beta = vars
        .w_beta
        .matmul(&q_proto)?
        .transpose()
        .softmax_rows()?
        .transpose()
        .scale_by(&g_q)?;

    let h_prime = h.add(&alpha.mul(&q_proto)?)?.add(&beta.mul(&v_proto)?)?;

    let mut sim_sum: Option<Var> = None;
    for proto in &retrieved.visual {
        let s = tape_cosine(tape, &h_v, proto)?;
        sim_sum = Some(match sim_sum {
            Some(acc) => acc.add(&s)?,
            None => s,
        });
    }
    for proto in &retrieved.textual {
        let s = tape_cosine(tape, &h_q, proto)?;
        sim_sum = Some(match sim_sum {
            Some(acc) => acc.add(&s)?,
            None => s,
        });
    }
    let sim_sum = sim_sum.ok_or(Error::EmptyPool { modality: "retrieved" })?;

    let one = tape.leaf(Matrix::new(1, 1, vec![1.0])?);
    let budget = g_v.add(&g_q)?.sub(&one)?;
    let budget_sq = budget.mul(&budget)?;
    let drift = h_prime.sub(h)?.frobenius_sq()?;

    let loss = sim_sum
        .scale(-1.0)
        .add(&budget_sq.scale(theta2))?
        .add(&drift.scale(theta3))?;

    Ok(AmaTrace { h_v, h_q, h_prime, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::tape::{compare_grads, finite_difference};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vector {
        Vector::from((0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn seeded_pool(d: usize, count: usize, rng: &mut ChaCha8Rng) -> MemoryPool {
        let mut pool = MemoryPool::new(64, 0.9, 2.0).unwrap(); // threshold 2 => always insert
        for _ in 0..count {
            let v = rand_vec(d, rng);
            let q = rand_vec(d, rng);
            pool.admit_or_update(&v, &q).unwrap();
        }
        pool
    }

    #[test]
    fn project_zero_and_identity() {
        let mut r = rng(1);
        let w_vis = Matrix::identity(3);
        let w_txt = Matrix::init_uniform(3, 3, 3, &mut r);
        let zero = Vector::zeros(3);
        let (hv, hq) = project(&zero, &w_vis, &w_txt).unwrap();
        assert_eq!(hv.data(), &[0.0; 3]);
        assert_eq!(hq.data(), &[0.0; 3]);

        let h = Vector::from(vec![1.0, -2.0, 0.5]);
        let (hv, _) = project(&h, &w_vis, &w_txt).unwrap();
        assert_eq!(hv.data(), h.data());
    }

    #[test]
    fn project_matches_matvec_oracle() {
        let mut r = rng(2);
        let w_vis = Matrix::init_uniform(4, 4, 4, &mut r);
        let w_txt = Matrix::init_uniform(4, 4, 4, &mut r);
        let h = rand_vec(4, &mut r);
        let (hv, hq) = project(&h, &w_vis, &w_txt).unwrap();
        for i in 0..4 {
            let ev: f64 = (0..4).map(|j| w_vis.get(i, j) * h.get(j)).sum();
            let eq: f64 = (0..4).map(|j| w_txt.get(i, j) * h.get(j)).sum();
            assert!((hv.get(i) - ev).abs() < 1e-12);
            assert!((hq.get(i) - eq).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_copy_is_top_one_with_similarity_one() {
        let mut r = rng(3);
        let mut pool = MemoryPool::new(8, 0.9, 2.0).unwrap();
        let target = rand_vec(4, &mut r);
        for _ in 0..3 {
            pool.admit_or_update(&rand_vec(4, &mut r), &rand_vec(4, &mut r)).unwrap();
        }
        pool.admit_or_update(&target.scale(2.0), &rand_vec(4, &mut r)).unwrap();
        let res = pool
            .retrieve_top_k(&target, &rand_vec(4, &mut r), 1, RetrievalStrategy::MaxSimilarity, &mut r)
            .unwrap();
        assert_eq!(res.visual[0].index, 3);
        assert!((res.visual[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_pool_size_returns_all_sorted() {
        let mut r = rng(4);
        let pool = seeded_pool(4, 5, &mut r);
        let q = rand_vec(4, &mut r);
        let res = pool
            .retrieve_top_k(&q, &q, 5, RetrievalStrategy::MaxSimilarity, &mut r)
            .unwrap();
        assert_eq!(res.visual.len(), 5);
        let mut seen: Vec<usize> = res.visual.iter().map(|x| x.index).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        for w in res.visual.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut r = rng(5);
        for trial in 0..20 {
            let pool = seeded_pool(6, 10, &mut r);
            let q = rand_vec(6, &mut r);
            let res = pool
                .retrieve_top_k(&q, &q, 3, RetrievalStrategy::MaxSimilarity, &mut r)
                .unwrap();
            // Brute force: compute every similarity, stable sort desc.
            let mut all: Vec<(usize, f64)> = pool
                .prototypes(Modality::Visual)
                .iter()
                .enumerate()
                .map(|(i, p)| (i, cosine_sim(&q, &p.vector).unwrap()))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (got, want) in res.visual.iter().zip(all.iter().take(3)) {
                assert_eq!(got.index, want.0, "trial {trial}");
                assert!((got.score - want.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_strategy_is_uniform_without_replacement() {
        let mut r = rng(6);
        let pool = seeded_pool(4, 6, &mut r);
        let q = rand_vec(4, &mut r);
        let mut counts = [0usize; 6];
        for _ in 0..3000 {
            let res = pool
                .retrieve_top_k(&q, &q, 2, RetrievalStrategy::Random, &mut r)
                .unwrap();
            assert_eq!(res.visual.len(), 2);
            assert_ne!(res.visual[0].index, res.visual[1].index);
            assert!(res.visual[0].score >= res.visual[1].score);
            for x in &res.visual {
                counts[x.index] += 1;
            }
        }
        // Each index expected 1000 times; allow a generous band.
        for (i, c) in counts.iter().enumerate() {
            assert!((800..1200).contains(c), "index {i} drawn {c} times");
        }
    }

    #[test]
    fn retrieval_error_cases() {
        let mut r = rng(7);
        let empty = MemoryPool::new(4, 0.9, 0.7).unwrap();
        let q = rand_vec(3, &mut r);
        assert!(matches!(
            empty.retrieve_top_k(&q, &q, 1, RetrievalStrategy::MaxSimilarity, &mut r),
            Err(Error::EmptyPool { .. })
        ));
        let pool = seeded_pool(3, 2, &mut r);
        assert!(matches!(
            pool.retrieve_top_k(&q, &q, 5, RetrievalStrategy::MaxSimilarity, &mut r),
            Err(Error::KTooLarge { k: 5, size: 2 })
        ));
        let zero = Vector::zeros(3);
        assert!(matches!(
            pool.retrieve_top_k(&zero, &q, 1, RetrievalStrategy::MaxSimilarity, &mut r),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn retrieval_index_set_invariant_to_query_scaling() {
        let mut r = rng(8);
        let pool = seeded_pool(5, 12, &mut r);
        let q = rand_vec(5, &mut r);
        let a = pool.retrieve_top_k(&q, &q, 4, RetrievalStrategy::MaxSimilarity, &mut r).unwrap();
        let scaled = q.scale(7.5);
        let b = pool
            .retrieve_top_k(&scaled, &scaled, 4, RetrievalStrategy::MaxSimilarity, &mut r)
            .unwrap();
        let ia: Vec<usize> = a.visual.iter().map(|x| x.index).collect();
        let ib: Vec<usize> = b.visual.iter().map(|x| x.index).collect();
        assert_eq!(ia, ib);
    }

    #[test]
    fn gate_zero_weights_give_half() {
        let h = Vector::from(vec![1.0, 2.0]);
        let g = gate(&h, &h, &h, &Matrix::zeros(2, 6)).unwrap();
        assert_eq!(g.g_v, 0.5);
        assert_eq!(g.g_q, 0.5);
    }

    #[test]
    fn gate_saturates_with_large_positive_logits() {
        let h = Vector::from(vec![1.0, 1.0]);
        let w = Matrix::from_fn(2, 6, |_, _| 20.0);
        let g = gate(&h, &h, &h, &w).unwrap();
        assert!((g.g_v - 1.0).abs() < 1e-8);
        assert!((g.g_q - 1.0).abs() < 1e-8);
    }

    #[test]
    fn gate_matches_matvec_sigmoid_oracle() {
        let mut r = rng(9);
        let h = rand_vec(3, &mut r);
        let qp = rand_vec(3, &mut r);
        let vp = rand_vec(3, &mut r);
        let w = Matrix::init_uniform(2, 9, 9, &mut r);
        let g = gate(&h, &qp, &vp, &w).unwrap();
        let stacked: Vec<f64> = h
            .data()
            .iter()
            .chain(qp.data())
            .chain(vp.data())
            .cloned()
            .collect();
        for (row, got) in [(0, g.g_v), (1, g.g_q)] {
            let logit: f64 = (0..9).map(|j| w.get(row, j) * stacked[j]).sum();
            let want = 1.0 / (1.0 + (-logit).exp());
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_zero_gate_is_identity() {
        let mut r = rng(10);
        let h = rand_vec(4, &mut r);
        let qp = rand_vec(4, &mut r);
        let vp = rand_vec(4, &mut r);
        let w = Matrix::init_uniform(4, 4, 4, &mut r);
        let (_, _, h_prime) = fuse(&h, &qp, &vp, GateState { g_v: 0.0, g_q: 0.0 }, &w, &w).unwrap();
        assert_eq!(h_prime.data(), h.data());
    }

    #[test]
    fn fuse_mixing_weights_sum_to_gates() {
        let mut r = rng(11);
        let h = rand_vec(4, &mut r);
        let qp = rand_vec(4, &mut r);
        let vp = rand_vec(4, &mut r);
        let wa = Matrix::init_uniform(4, 4, 4, &mut r);
        let wb = Matrix::init_uniform(4, 4, 4, &mut r);
        let g = GateState { g_v: 1.0, g_q: 0.37 };
        let (alpha, beta, _) = fuse(&h, &qp, &vp, g, &wa, &wb).unwrap();
        let sa: f64 = alpha.data().iter().sum();
        let sb: f64 = beta.data().iter().sum();
        assert!((sa - 1.0).abs() < 1e-12);
        assert!((sb - 0.37).abs() < 1e-12);
    }

    #[test]
    fn fuse_matches_stepwise_oracle() {
        let mut r = rng(12);
        let h = rand_vec(3, &mut r);
        let qp = rand_vec(3, &mut r);
        let vp = rand_vec(3, &mut r);
        let wa = Matrix::init_uniform(3, 3, 3, &mut r);
        let wb = Matrix::init_uniform(3, 3, 3, &mut r);
        let g = GateState { g_v: 0.6, g_q: 0.3 };
        let (alpha, beta, h_prime) = fuse(&h, &qp, &vp, g, &wa, &wb).unwrap();

        let matvec = |w: &Matrix, v: &Vector| -> Vec<f64> {
            (0..3)
                .map(|i| (0..3).map(|j| w.get(i, j) * v.get(j)).sum())
                .collect()
        };
        let softmax = |x: &[f64]| -> Vec<f64> {
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        };
        let ea = softmax(&matvec(&wa, &vp));
        let eb = softmax(&matvec(&wb, &qp));
        for i in 0..3 {
            assert!((alpha.get(i) - 0.6 * ea[i]).abs() < 1e-12);
            assert!((beta.get(i) - 0.3 * eb[i]).abs() < 1e-12);
            let want = h.get(i) + 0.6 * ea[i] * qp.get(i) + 0.3 * eb[i] * vp.get(i);
            assert!((h_prime.get(i) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_update_trivial_lambdas_and_midpoint() {
        let mut r = rng(13);
        // lambda = 1: unchanged.
        let mut pool = MemoryPool::new(4, 1.0, 2.0).unwrap();
        let p0 = rand_vec(2, &mut r);
        pool.admit_or_update(&p0, &p0).unwrap();
        pool.memory_update(Modality::Visual, 0, &rand_vec(2, &mut r)).unwrap();
        assert_eq!(pool.prototypes(Modality::Visual)[0].vector.data(), p0.data());

        // lambda = 0: replaced.
        let mut pool = MemoryPool::new(4, 0.0, 2.0).unwrap();
        pool.admit_or_update(&p0, &p0).unwrap();
        let h = Vector::from(vec![5.0, -1.0]);
        pool.memory_update(Modality::Visual, 0, &h).unwrap();
        assert_eq!(pool.prototypes(Modality::Visual)[0].vector.data(), h.data());

        // lambda = 0.5 midpoint.
        let mut pool = MemoryPool::new(4, 0.5, 2.0).unwrap();
        let p = Vector::from(vec![1.0, 1.0]);
        pool.admit_or_update(&p, &p).unwrap();
        let h = Vector::from(vec![3.0, 5.0]);
        pool.memory_update(Modality::Visual, 0, &h).unwrap();
        assert_eq!(pool.prototypes(Modality::Visual)[0].vector.data(), &[2.0, 3.0]);
    }

    #[test]
    fn ema_contracts_exactly_with_dyadic_lambda() {
        // Integer coordinates and lambda 0.5 keep every step exact in
        // floating point, so the geometric decay identity holds with ==.
        let mut pool = MemoryPool::new(2, 0.5, 2.0).unwrap();
        let p0 = Vector::from(vec![1.0, 1.0]);
        pool.admit_or_update(&p0, &p0).unwrap();
        let h = Vector::from(vec![3.0, 5.0]);
        let initial_gap = p0.sub(&h).unwrap().norm();
        for i in 1..=20u32 {
            pool.memory_update(Modality::Visual, 0, &h).unwrap();
            let gap = pool.prototypes(Modality::Visual)[0]
                .vector
                .sub(&h)
                .unwrap()
                .norm();
            assert_eq!(gap, 0.5_f64.powi(i as i32) * initial_gap, "step {i}");
        }
    }

    #[test]
    fn ema_contracts_within_tolerance_for_general_lambda() {
        let mut r = rng(14);
        let lambda = 0.83;
        let mut pool = MemoryPool::new(2, lambda, 2.0).unwrap();
        let p0 = rand_vec(3, &mut r);
        pool.admit_or_update(&p0, &p0).unwrap();
        let h = rand_vec(3, &mut r);
        let initial_gap = p0.sub(&h).unwrap().norm();
        for i in 1..=15i32 {
            pool.memory_update(Modality::Visual, 0, &h).unwrap();
            let gap = pool.prototypes(Modality::Visual)[0]
                .vector
                .sub(&h)
                .unwrap()
                .norm();
            let want = lambda.powi(i) * initial_gap;
            assert!((gap - want).abs() <= 1e-12 * want.max(1.0), "step {i}");
        }
    }

    #[test]
    fn admit_empty_pool_inserts_verbatim() {
        let mut r = rng(15);
        let mut pool = MemoryPool::new(4, 0.9, 0.7).unwrap();
        let hv = rand_vec(3, &mut r);
        let hq = rand_vec(3, &mut r);
        let (a, b) = pool.admit_or_update(&hv, &hq).unwrap();
        assert_eq!(a, AdmitOutcome::Inserted { index: 0 });
        assert_eq!(b, AdmitOutcome::Inserted { index: 0 });
        assert_eq!(pool.prototypes(Modality::Visual)[0].vector.data(), hv.data());
        assert_eq!(pool.prototypes(Modality::Textual)[0].vector.data(), hq.data());
    }

    #[test]
    fn admit_identical_feature_updates_in_place() {
        let mut r = rng(16);
        let mut pool = MemoryPool::new(4, 0.5, 0.9).unwrap();
        let hv = rand_vec(3, &mut r);
        let hq = rand_vec(3, &mut r);
        pool.admit_or_update(&hv, &hq).unwrap();
        let (a, _) = pool.admit_or_update(&hv, &hq).unwrap();
        assert_eq!(a, AdmitOutcome::Updated { index: 0 });
        // Midpoint of equal points: unchanged.
        for (x, y) in pool.prototypes(Modality::Visual)[0].vector.data().iter().zip(hv.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(pool.len(Modality::Visual), 1);
    }

    #[test]
    fn admit_evicts_oldest_at_capacity() {
        // Capacity 2, three mutually dissimilar features: the first
        // admitted (oldest stamp) must be evicted.
        let mut pool = MemoryPool::new(2, 0.9, 0.99).unwrap();
        let e1 = Vector::from(vec![1.0, 0.0, 0.0]);
        let e2 = Vector::from(vec![0.0, 1.0, 0.0]);
        let e3 = Vector::from(vec![0.0, 0.0, 1.0]);
        pool.admit_or_update(&e1, &e1).unwrap();
        pool.admit_or_update(&e2, &e2).unwrap();
        pool.admit_or_update(&e3, &e3).unwrap();
        assert_eq!(pool.len(Modality::Visual), 2);
        let stored: Vec<&[f64]> = pool
            .prototypes(Modality::Visual)
            .iter()
            .map(|p| p.vector.data())
            .collect();
        assert!(stored.contains(&e2.data()));
        assert!(stored.contains(&e3.data()));
        assert!(!stored.contains(&e1.data()));
    }

    #[test]
    fn ama_loss_perfect_case_is_minus_two_k() {
        // Every retrieved similarity 1, balanced gate, no drift.
        let k = 3;
        let retrieval = RetrievalResult {
            visual: (0..k).map(|index| Retrieved { index, score: 1.0 }).collect(),
            textual: (0..k).map(|index| Retrieved { index, score: 1.0 }).collect(),
            v_proto: Vector::from(vec![1.0]),
            q_proto: Vector::from(vec![1.0]),
        };
        let h = Vector::from(vec![0.4, 0.2]);
        let loss = ama_loss(
            &retrieval,
            GateState { g_v: 0.5, g_q: 0.5 },
            &h,
            &h,
            0.8,
            0.9,
        )
        .unwrap();
        assert_eq!(loss, -(2.0 * k as f64));
    }

    #[test]
    fn ama_loss_balanced_gate_kills_budget_term() {
        let retrieval = RetrievalResult {
            visual: vec![Retrieved { index: 0, score: 0.2 }],
            textual: vec![Retrieved { index: 0, score: -0.1 }],
            v_proto: Vector::from(vec![1.0]),
            q_proto: Vector::from(vec![1.0]),
        };
        let h = Vector::from(vec![1.0]);
        let h_prime = Vector::from(vec![1.5]);
        let loss = ama_loss(
            &retrieval,
            GateState { g_v: 0.7, g_q: 0.3 },
            &h,
            &h_prime,
            123.0,
            2.0,
        )
        .unwrap();
        // -0.1 from sims + 0 budget + 2 * 0.25 drift.
        assert!((loss - (-0.1 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn ama_loss_matches_formula_oracle() {
        let mut r = rng(17);
        let pool = seeded_pool(4, 6, &mut r);
        let h = rand_vec(4, &mut r);
        let params = AmaParams::init(4, &mut r);
        let out = forward(
            &h,
            &pool,
            &params,
            2,
            RetrievalStrategy::MaxSimilarity,
            0.3,
            0.7,
            None,
            &mut r,
        )
        .unwrap();
        let mut want = 0.0;
        for x in out.retrieval.visual.iter().chain(out.retrieval.textual.iter()) {
            want -= x.score;
        }
        let b = out.gate.g_q + out.gate.g_v - 1.0;
        want += 0.3 * b * b;
        let drift = out.h_prime.sub(&h).unwrap();
        want += 0.7 * drift.dot(&drift).unwrap();
        assert!((out.loss - want).abs() < 1e-10);
    }

    #[test]
    fn pool_capacity_never_exceeded_and_no_zero_prototypes() {
        let mut r = rng(18);
        let mut pool = MemoryPool::new(5, 0.8, 0.6).unwrap();
        for _ in 0..500 {
            let hv = rand_vec(4, &mut r);
            let hq = rand_vec(4, &mut r);
            pool.admit_or_update(&hv, &hq).unwrap();
            assert!(pool.len(Modality::Visual) <= 5);
            assert!(pool.len(Modality::Textual) <= 5);
        }
        pool.validate().unwrap();
    }

    #[test]
    fn pool_checkpoint_round_trips_exactly() {
        let mut r = rng(19);
        let mut pool = MemoryPool::new(6, 0.77, 0.65).unwrap();
        for _ in 0..40 {
            pool.admit_or_update(&rand_vec(5, &mut r), &rand_vec(5, &mut r)).unwrap();
        }
        let json = serde_json::to_string(&pool).unwrap();
        let back: MemoryPool = serde_json::from_str(&json).unwrap();
        assert_eq!(back, pool);
        back.validate().unwrap();
    }

    #[test]
    fn plain_and_tape_paths_agree() {
        let mut r = rng(20);
        let pool = seeded_pool(4, 5, &mut r);
        let params = AmaParams::init(4, &mut r);
        let h = rand_vec(4, &mut r);

        let plain = forward(
            &h,
            &pool,
            &params,
            2,
            RetrievalStrategy::MaxSimilarity,
            0.4,
            0.6,
            None,
            &mut r,
        )
        .unwrap();

        let sets = RetrievedSets::capture(&pool, &plain.retrieval);
        let tape = Tape::new();
        let vars = AmaVars::register(&tape, &params).unwrap();
        let h_node = tape.leaf(h.as_column());
        let trace = build(&tape, &vars, &h_node, &sets, 0.4, 0.6, None).unwrap();

        assert!((plain.loss - trace.loss.scalar().unwrap()).abs() < 1e-12);
        let hp = trace.h_prime.value();
        for (a, b) in plain.h_prime.data().iter().zip(hp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_gradients_match_finite_differences() {
        let mut r = rng(21);
        let pool = seeded_pool(4, 6, &mut r);
        let params = AmaParams::init(4, &mut r);
        let h = rand_vec(4, &mut r);
        let plain = forward(
            &h,
            &pool,
            &params,
            2,
            RetrievalStrategy::MaxSimilarity,
            0.4,
            0.6,
            None,
            &mut r,
        )
        .unwrap();
        let sets = RetrievedSets::capture(&pool, &plain.retrieval);

        let build_loss = |p: &AmaParams| -> Result<f64> {
            let t = Tape::new();
            let vars = AmaVars::register(&t, p)?;
            let h_node = t.leaf(h.as_column());
            build(&t, &vars, &h_node, &sets, 0.4, 0.6, None)?.loss.scalar()
        };

        let tape = Tape::new();
        let vars = AmaVars::register(&tape, &params).unwrap();
        let h_node = tape.leaf(h.as_column());
        let trace = build(&tape, &vars, &h_node, &sets, 0.4, 0.6, None).unwrap();
        let grads = trace.loss.backward().unwrap();

        for name in params.param_names() {
            let mut probe = params.clone();
            let mut current = None;
            probe.visit(&mut |n, m| {
                if n == name {
                    current = Some(m.clone());
                }
            });
            let at = current.unwrap();
            let mut f = |m: &Matrix| -> Result<f64> {
                probe.visit_mut(&mut |n, slot| {
                    if n == name {
                        *slot = m.clone();
                    }
                });
                build_loss(&probe)
            };
            let numeric = finite_difference(&mut f, &at, 1e-5).unwrap();
            let analytic = grads.get(&name).unwrap();
            assert!(
                compare_grads(analytic, &numeric, 1e-4, 1e-3).unwrap().is_none(),
                "gradient mismatch in {name}"
            );
        }
    }

    #[test]
    fn gate_override_bypasses_learned_gate() {
        let mut r = rng(22);
        let pool = seeded_pool(3, 4, &mut r);
        let params = AmaParams::init(3, &mut r);
        let h = rand_vec(3, &mut r);
        let out = forward(
            &h,
            &pool,
            &params,
            2,
            RetrievalStrategy::MaxSimilarity,
            0.1,
            0.1,
            Some(GateOverride { alpha: 0.8, beta: 0.2 }),
            &mut r,
        )
        .unwrap();
        assert_eq!(out.gate.g_v, 0.8);
        assert_eq!(out.gate.g_q, 0.2);
        let sa: f64 = out.alpha.data().iter().sum();
        assert!((sa - 0.8).abs() < 1e-12);
    }
}
