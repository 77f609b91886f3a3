// SPDX-License-Identifier: MIT OR Apache-2.0

//! Latent structural causal model.
//!
//! A [`ModelSpec`] fixes a transition mechanism `h_t = f_t(h_<t, x, ε_t)` for
//! every latent step and a readout `g` that maps a prefix of states to a
//! distribution over answer symbols. Transitions are affine maps over an
//! explicit list of source steps followed by a pointwise activation, which
//! makes the causal routing of every model inspectable: a step can only
//! depend on the sources it lists, and every source precedes it.
//!
//! [`rollout`] realizes one trajectory. In stochastic mode all randomness
//! (`ε_1..ε_T` for the transitions and `ε_y` for answer sampling) is drawn
//! up front from seed-derived streams and stored in the [`NoiseRecord`], so
//! [`replay`] and counterfactual rollouts can reuse it exactly.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::StepDistribution;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, tag};
use crate::toys::Routing;

/// One latent step state `h_t ∈ R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentState(Vec<f64>);

impl LatentState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("latent state contains a non-finite value".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Training paradigm of the model that produced a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Coconut,
    Codi,
    CotSft,
    Toy,
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Paradigm::Coconut => "coconut",
            Paradigm::Codi => "codi",
            Paradigm::CotSft => "cot_sft",
            Paradigm::Toy => "toy",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }
}

/// A dependency on an earlier step (1-based absolute index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Read {
    pub from: usize,
    pub weight: Matrix,
}

/// Parameters of `f_t` for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMap {
    pub reads: Vec<Read>,
    /// `d × input_dim`
    pub input: Matrix,
    pub bias: Vec<f64>,
    /// Per-dimension scale of the transition noise (stochastic models only).
    pub noise: Vec<f64>,
    pub activation: Activation,
}

impl StepMap {
    pub fn new(dim: usize, input_dim: usize, activation: Activation) -> Self {
        Self {
            reads: Vec::new(),
            input: Matrix::zeros(dim, input_dim),
            bias: vec![0.0; dim],
            noise: vec![0.0; dim],
            activation,
        }
    }

    /// Weight of the read from `from`, created on first use.
    pub fn read_mut(&mut self, from: usize, dim: usize) -> &mut Matrix {
        let pos = match self.reads.iter().position(|r| r.from == from) {
            Some(p) => p,
            None => {
                self.reads.push(Read {
                    from,
                    weight: Matrix::zeros(dim, dim),
                });
                self.reads.len() - 1
            }
        };
        &mut self.reads[pos].weight
    }
}

/// Transition family `f_1..f_T`: affine reads followed by an activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub steps: Vec<StepMap>,
}

/// Readout `g`: logits from the last state of a prefix, direct reads of
/// designated earlier steps once they exist, and the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// `V × d`, applied to the last state of the prefix.
    pub last: Matrix,
    /// `V × d` reads of fixed steps, active when the prefix reaches them.
    pub direct: Vec<Read>,
    /// `V × input_dim`
    pub input: Matrix,
    pub bias: Vec<f64>,
    pub temperature: f64,
    /// Logit bonus for repeating the previous gold token under teacher forcing.
    pub prefix_gain: f64,
}

impl Readout {
    pub fn new(vocab: usize, dim: usize, input_dim: usize) -> Self {
        Self {
            last: Matrix::zeros(vocab, dim),
            direct: Vec::new(),
            input: Matrix::zeros(vocab, input_dim),
            bias: vec![0.0; vocab],
            temperature: 1.0,
            prefix_gain: 0.0,
        }
    }
}

/// An immutable latent reasoner: dimensions, vocabulary, `f_t` and `g`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    dim: usize,
    input_dim: usize,
    vocab: Arc<[String]>,
    transition: Transition,
    readout: Readout,
    stochastic: bool,
    paradigm: Paradigm,
    routing: Option<Routing>,
    fingerprint: u64,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawModelSpec {
    dim: usize,
    budget: usize,
    input_dim: usize,
    vocab: Vec<String>,
    transition: Transition,
    readout: Readout,
    stochastic: bool,
    paradigm: Paradigm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    routing: Option<Routing>,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        if raw.budget != raw.transition.steps.len() {
            return Err(Error::Config(format!(
                "budget {} disagrees with {} transition steps",
                raw.budget,
                raw.transition.steps.len()
            )));
        }
        let mut spec = ModelSpec::new(
            raw.dim,
            raw.input_dim,
            raw.vocab,
            raw.transition,
            raw.readout,
            raw.stochastic,
            raw.paradigm,
        )?;
        spec.routing = raw.routing;
        Ok(spec)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(m: ModelSpec) -> Self {
        RawModelSpec {
            dim: m.dim,
            budget: m.budget(),
            input_dim: m.input_dim,
            vocab: m.vocab.to_vec(),
            transition: m.transition,
            readout: m.readout,
            stochastic: m.stochastic,
            paradigm: m.paradigm,
            routing: m.routing,
        }
    }
}

impl PartialEq for ModelSpec {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
            && self.transition == other.transition
            && self.readout == other.readout
            && self.vocab == other.vocab
    }
}

impl ModelSpec {
    /// Validate shapes and causal ordering, then freeze the model.
    pub fn new(
        dim: usize,
        input_dim: usize,
        vocab: Vec<String>,
        transition: Transition,
        readout: Readout,
        stochastic: bool,
        paradigm: Paradigm,
    ) -> Result<Self> {
        let budget = transition.steps.len();
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if vocab.len() < 2 {
            return Err(Error::Config("vocabulary needs at least two symbols".into()));
        }
        for (i, a) in vocab.iter().enumerate() {
            if a.is_empty() || a.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary symbol {a:?}")));
            }
            if vocab[..i].contains(a) {
                return Err(Error::Config(format!("duplicate vocabulary symbol {a:?}")));
            }
        }
        for (idx, step) in transition.steps.iter().enumerate() {
            let t = idx + 1;
            for read in &step.reads {
                if read.from == 0 || read.from >= t {
                    return Err(Error::Config(format!(
                        "step {t} reads step {} (must be in 1..{t})",
                        read.from
                    )));
                }
                check_shape(&read.weight, dim, dim, "transition read")?;
            }
            check_shape(&step.input, dim, input_dim, "transition input")?;
            if step.bias.len() != dim || step.noise.len() != dim {
                return Err(Error::Config(format!("step {t}: bias/noise length must be {dim}")));
            }
            if step.bias.iter().chain(&step.noise).any(|v| !v.is_finite()) || step.noise.iter().any(|v| *v < 0.0) {
                return Err(Error::Config(format!("step {t}: invalid bias or noise scale")));
            }
        }
        let v = vocab.len();
        check_shape(&readout.last, v, dim, "readout")?;
        check_shape(&readout.input, v, input_dim, "readout input")?;
        for read in &readout.direct {
            if read.from == 0 || read.from > budget {
                return Err(Error::Config(format!("readout reads step {} outside 1..={budget}", read.from)));
            }
            check_shape(&read.weight, v, dim, "readout direct read")?;
        }
        if readout.bias.len() != v || readout.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config(format!("readout bias must have {v} finite entries")));
        }
        if !(readout.temperature.is_finite() && readout.temperature > 0.0) || !readout.prefix_gain.is_finite() {
            return Err(Error::Config("readout temperature must be positive".into()));
        }

        let mut spec = Self {
            dim,
            input_dim,
            vocab: vocab.into(),
            transition,
            readout,
            stochastic,
            paradigm,
            routing: None,
            fingerprint: 0,
        };
        spec.fingerprint = spec.compute_fingerprint();
        Ok(spec)
    }

    pub(crate) fn with_routing(mut self, routing: Routing) -> Self {
        self.routing = Some(routing);
        self
    }

    fn compute_fingerprint(&self) -> u64 {
        let raw = RawModelSpec::from(Self {
            routing: None,
            ..self.clone()
        });
        let bytes = serde_json::to_vec(&raw).expect("model spec serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn budget(&self) -> usize {
        self.transition.steps.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn vocab(&self) -> &Arc<[String]> {
        &self.vocab
    }

    pub fn transition(&self) -> &Transition {
        &self.transition
    }

    pub fn readout(&self) -> &Readout {
        &self.readout
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn paradigm(&self) -> Paradigm {
        self.paradigm
    }

    /// Ground-truth routing metadata (designed toys only).
    pub fn routing(&self) -> Option<&Routing> {
        self.routing.as_ref()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Copy of this model with stochasticity switched on or off.
    pub fn with_stochastic(&self, stochastic: bool) -> Self {
        let mut m = self.clone();
        m.stochastic = stochastic;
        m.fingerprint = m.compute_fingerprint();
        m
    }

    pub fn symbol_index(&self, symbol: &str) -> Option<usize> {
        self.vocab.iter().position(|s| s == symbol)
    }

    /// Whitespace tokenization of an answer string over the vocabulary.
    pub fn tokenize(&self, answer: &str) -> Result<Vec<usize>> {
        let tokens: Vec<usize> = answer
            .split_whitespace()
            .map(|tok| {
                self.symbol_index(tok)
                    .ok_or_else(|| Error::Vocabulary(format!("symbol {tok:?} is not in the model vocabulary")))
            })
            .collect::<Result<_>>()?;
        if tokens.is_empty() {
            return Err(Error::Vocabulary("answer tokenizes to zero symbols".into()));
        }
        Ok(tokens)
    }

    pub(crate) fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(Error::Config(format!(
                "input encoding has length {} but the model expects {}",
                input.len(),
                self.input_dim
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("input encoding contains a non-finite value".into()));
        }
        Ok(())
    }

    /// Readout logits (before temperature) for a nonempty prefix of states.
    pub(crate) fn readout_logits(&self, prefix: &[LatentState], input: &[f64]) -> Result<Vec<f64>> {
        let k = prefix.len();
        if k == 0 || k > self.budget() {
            return Err(Error::Range(format!(
                "prefix length {k} outside 1..={}",
                self.budget()
            )));
        }
        let mut logits = self.readout.bias.clone();
        self.readout.last.mul_add(prefix[k - 1].values(), &mut logits);
        for read in self.readout.direct.iter().filter(|r| r.from <= k) {
            read.weight.mul_add(prefix[read.from - 1].values(), &mut logits);
        }
        self.readout.input.mul_add(input, &mut logits);
        Ok(logits)
    }

    /// Temperature-scaled softmax of raw readout logits.
    pub(crate) fn distribution(&self, logits: &[f64]) -> StepDistribution {
        let scaled: Vec<f64> = logits.iter().map(|z| z / self.readout.temperature).collect();
        StepDistribution::from_logits(self.vocab.clone(), &scaled).expect("logits match vocabulary")
    }
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.rows() != rows || m.cols() != cols || !m.is_finite() {
        return Err(Error::Config(format!(
            "{what} weight is {}x{}, expected finite {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Randomness consumed by one rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    /// Master seed of a stochastic rollout; `None` for deterministic ones.
    pub seed: Option<u64>,
    /// Standard-normal draws `ε_1..ε_T`, each of length `d` (empty when deterministic).
    pub steps: Vec<Vec<f64>>,
    /// Uniform draw `ε_y` used to sample the answer (stochastic only).
    pub readout: Option<f64>,
}

impl NoiseRecord {
    pub fn deterministic() -> Self {
        Self {
            seed: None,
            steps: Vec::new(),
            readout: None,
        }
    }

    /// Draw every noise term for `model` from streams derived from `seed`.
    pub fn draw(model: &ModelSpec, seed: u64) -> Self {
        if !model.is_stochastic() {
            return Self::deterministic();
        }
        let steps = (1..=model.budget())
            .map(|t| {
                let mut rng = rng::stream(seed, &[tag::TRANSITION, t as u64]);
                (0..model.dim()).map(|_| rng.sample(StandardNormal)).collect()
            })
            .collect();
        let readout = rng::stream(seed, &[tag::READOUT]).random::<f64>();
        Self {
            seed: Some(seed),
            steps,
            readout: Some(readout),
        }
    }

    pub(crate) fn step(&self, t: usize) -> Option<&[f64]> {
        self.steps.get(t - 1).map(Vec::as_slice)
    }

    fn check(&self, model: &ModelSpec) -> Result<()> {
        if !model.is_stochastic() {
            return Ok(());
        }
        let ok = self.steps.len() == model.budget()
            && self.steps.iter().all(|e| e.len() == model.dim())
            && self.readout.is_some();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("noise record does not match the stochastic model".into()))
        }
    }
}

/// A realized rollout: input, states `h_1..h_T`, randomness and answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub input: Vec<f64>,
    pub states: Vec<LatentState>,
    pub noise: NoiseRecord,
    pub answer: String,
    pub answer_index: usize,
    pub answer_dist: StepDistribution,
    pub model_fingerprint: u64,
}

impl Trajectory {
    pub fn budget(&self) -> usize {
        self.states.len()
    }
}

/// Compute `h_step` from the first `step − 1` entries of `history`.
///
/// Entries of `history` at index `step − 1` and beyond are never read, so
/// callers may pass a longer buffer with placeholder future slots.
pub fn transition_step(
    model: &ModelSpec,
    history: &[LatentState],
    input: &[f64],
    step: usize,
    noise: Option<&[f64]>,
) -> Result<LatentState> {
    let budget = model.budget();
    if step == 0 || step > budget {
        return Err(Error::Range(format!("step {step} outside 1..={budget}")));
    }
    if history.len() < step - 1 {
        return Err(Error::Range(format!(
            "step {step} needs {} history states, got {}",
            step - 1,
            history.len()
        )));
    }
    model.check_input(input)?;
    let past = &history[..step - 1];
    if let Some(bad) = past.iter().find(|h| h.dim() != model.dim()) {
        return Err(Error::Shape(format!(
            "history state has dimension {} but the model has {}",
            bad.dim(),
            model.dim()
        )));
    }
    let map = &model.transition.steps[step - 1];
    let mut pre = map.bias.clone();
    for read in &map.reads {
        read.weight.mul_add(past[read.from - 1].values(), &mut pre);
    }
    map.input.mul_add(input, &mut pre);
    if let Some(eps) = noise {
        if eps.len() != model.dim() {
            return Err(Error::Shape(format!(
                "noise draw has length {} but the model has {}",
                eps.len(),
                model.dim()
            )));
        }
        for ((p, s), e) in pre.iter_mut().zip(&map.noise).zip(eps) {
            *p += s * e;
        }
    }
    let values: Vec<f64> = pre.into_iter().map(|v| map.activation.apply(v)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("step {step} produced a non-finite state")));
    }
    Ok(LatentState::from_raw(values))
}

/// Readout distribution `g(h_1..h_k, x)` for a prefix of length `k`.
pub fn decode(model: &ModelSpec, prefix: &[LatentState], input: &[f64]) -> Result<StepDistribution> {
    model.check_input(input)?;
    let logits = model.readout_logits(prefix, input)?;
    Ok(model.distribution(&logits))
}

/// Realize one trajectory for `input`. Deterministic models ignore `seed`.
pub fn rollout(model: &ModelSpec, input: &[f64], seed: u64) -> Result<Trajectory> {
    model.check_input(input)?;
    replay(model, input, NoiseRecord::draw(model, seed))
}

/// Rerun `model` on `input` with previously recorded randomness.
pub fn replay(model: &ModelSpec, input: &[f64], noise: NoiseRecord) -> Result<Trajectory> {
    model.check_input(input)?;
    noise.check(model)?;
    let budget = model.budget();
    let mut states = Vec::with_capacity(budget);
    for t in 1..=budget {
        let h = transition_step(model, &states, input, t, noise.step(t))?;
        states.push(h);
    }
    let answer_dist = decode(model, &states, input)?;
    let answer_index = final_answer(&answer_dist, &noise);
    Ok(Trajectory {
        input: input.to_vec(),
        answer: model.vocab[answer_index].clone(),
        answer_index,
        answer_dist,
        states,
        noise,
        model_fingerprint: model.fingerprint,
    })
}

/// Arg-max in deterministic mode, the recorded sample otherwise.
pub(crate) fn final_answer(dist: &StepDistribution, noise: &NoiseRecord) -> usize {
    match noise.readout {
        Some(u) => dist.sample_index(u),
        None => dist.argmax(),
    }
}
