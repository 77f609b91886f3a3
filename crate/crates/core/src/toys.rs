// SPDX-License-Identifier: MIT OR Apache-2.0

//! Designed latent reasoners with known causal routing.
//!
//! Each toy reserves a few "functional" dimensions whose roles are fixed by
//! construction; any extra dimensions requested through `dim` become
//! nuisance channels with seeded random weights that the readout ignores.
//!
//! Routing toys share the vocabulary `A B U F`: `A`/`B` are the two answers
//! selected by the sign of the input signal, `U` ("undecided") wins whenever
//! the answer signal is absent, and `F` is a filler symbol whose mass is
//! driven by a local, fast-forgetting channel.

use rand::Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scm::{Activation, ModelSpec, Paradigm, Readout, StepMap, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// One-dimensional `h_t = a·h_{t−1} + b` with `h_0 = 0`.
    Linear,
    /// Every step reads only its predecessor; the answer crosses each step.
    Chain,
    /// A source step writes the answer; only the final step reads it back.
    Skip,
    /// The readout arg-max is fixed from a commit step onward.
    Commit,
    /// The answer is decodable from step 1 but must survive every later step.
    Stabilizer,
    /// States hide the eventual mode from the readout until the last step.
    ReadoutGap,
}

impl ToyKind {
    pub const ALL: [ToyKind; 6] = [
        ToyKind::Linear,
        ToyKind::Chain,
        ToyKind::Skip,
        ToyKind::Commit,
        ToyKind::Stabilizer,
        ToyKind::ReadoutGap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Linear => "linear",
            ToyKind::Chain => "chain",
            ToyKind::Skip => "skip",
            ToyKind::Commit => "commit",
            ToyKind::Stabilizer => "stabilizer",
            ToyKind::ReadoutGap => "readout_gap",
        }
    }

    /// Number of functional dimensions the construction needs.
    pub fn min_dim(self) -> usize {
        match self {
            ToyKind::Linear | ToyKind::Stabilizer => 1,
            ToyKind::Chain | ToyKind::Skip | ToyKind::ReadoutGap => 2,
            ToyKind::Commit => 3,
        }
    }
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "readout-gap" && *k == ToyKind::ReadoutGap))
            .ok_or_else(|| Error::Config(format!("unknown toy kind {s:?}")))
    }
}

impl std::fmt::Display for ToyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Routing configuration for [`make_toy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyParams {
    /// Source step of the skip toy.
    pub skip_source: usize,
    /// Commit step `k*` of the commit toy.
    pub commit_step: usize,
    /// Per-step decay of the residual support for the alternative answer.
    pub residual_decay: f64,
    pub linear_a: f64,
    pub linear_b: f64,
    pub stochastic: bool,
    /// Transition noise scale override; each kind has its own default.
    pub noise_scale: Option<f64>,
    pub temperature: f64,
    /// Gain of the final-step mode write in the readout-gap toy.
    pub mode_gain: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            skip_source: 1,
            commit_step: 2,
            residual_decay: 0.5,
            linear_a: 2.0,
            linear_b: 1.0,
            stochastic: false,
            noise_scale: None,
            temperature: 1.0,
            mode_gain: 5.0,
        }
    }
}

/// Ground-truth routing recorded on designed toys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub kind: ToyKind,
    /// Steps whose state carries the answer signal to the final readout.
    pub carrier_steps: Vec<usize>,
    /// `(source, sink)` of a skip connection.
    pub skip: Option<(usize, usize)>,
    pub commit_step: Option<usize>,
    /// Dimension that carries the answer signal.
    pub signal_dim: usize,
}

const ROUTING_VOCAB: [&str; 4] = ["A", "B", "U", "F"];
const MODE_VOCAB: [&str; 2] = ["Yes", "No"];
const ANSWER_A: usize = 0;
const ANSWER_B: usize = 1;
const UNDECIDED: usize = 2;
const FILLER: usize = 3;

/// Local channel shared by the routing toys: starts high and relaxes to a
/// fixed point, forgetting a perturbation by roughly half per step.
const LOCAL_START: f64 = 1.5;
const LOCAL_BIAS: f64 = 0.3;
const LOCAL_RECUR: f64 = 0.5;
const FILLER_BASE: f64 = -2.5;
const CARRY_GAIN: f64 = 1.5;

/// Build a designed toy model.
pub fn make_toy(kind: ToyKind, dim: usize, budget: usize, seed: u64, params: &ToyParams) -> Result<ModelSpec> {
    if dim < kind.min_dim() {
        return Err(Error::Config(format!("{kind} toy needs dim >= {}", kind.min_dim())));
    }
    if kind == ToyKind::Linear {
        if dim != 1 {
            return Err(Error::Config("linear toy is one-dimensional".into()));
        }
        if budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
    } else if budget < 2 {
        return Err(Error::Config("toy budget must be at least 2".into()));
    }
    if !(params.temperature.is_finite() && params.temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if params.noise_scale.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
        return Err(Error::Config("noise scale must be nonnegative".into()));
    }

    let mut b = Builder::new(kind, dim, budget, params);
    let routing = match kind {
        ToyKind::Linear => b.linear(),
        ToyKind::Chain => b.chain(),
        ToyKind::Skip => b.skip()?,
        ToyKind::Commit => b.commit()?,
        ToyKind::Stabilizer => b.stabilizer(),
        ToyKind::ReadoutGap => b.readout_gap(),
    };
    b.nuisance(seed);
    b.readout.temperature = params.temperature;

    let vocab: Vec<String> = match kind {
        ToyKind::Linear => vec!["A".into(), "B".into()],
        ToyKind::ReadoutGap => MODE_VOCAB.iter().map(|s| s.to_string()).collect(),
        _ => ROUTING_VOCAB.iter().map(|s| s.to_string()).collect(),
    };
    let input_dim = b.input_dim;
    let spec = ModelSpec::new(
        dim,
        input_dim,
        vocab,
        Transition { steps: b.steps },
        b.readout,
        params.stochastic,
        Paradigm::Toy,
    )?;
    Ok(spec.with_routing(routing))
}

struct Builder<'a> {
    dim: usize,
    budget: usize,
    input_dim: usize,
    functional: usize,
    params: &'a ToyParams,
    steps: Vec<StepMap>,
    readout: Readout,
}

impl<'a> Builder<'a> {
    fn new(kind: ToyKind, dim: usize, budget: usize, params: &'a ToyParams) -> Self {
        let input_dim = usize::from(kind != ToyKind::Linear);
        let vocab = match kind {
            ToyKind::Linear => 2,
            ToyKind::ReadoutGap => MODE_VOCAB.len(),
            _ => ROUTING_VOCAB.len(),
        };
        let activation = if kind == ToyKind::Linear {
            Activation::Identity
        } else {
            Activation::Tanh
        };
        Self {
            dim,
            budget,
            input_dim,
            functional: kind.min_dim(),
            params,
            steps: vec![StepMap::new(dim, input_dim, activation); budget],
            readout: Readout::new(vocab, dim, input_dim),
        }
    }

    fn step(&mut self, t: usize) -> &mut StepMap {
        &mut self.steps[t - 1]
    }

    fn read(&mut self, t: usize, from: usize, row: usize, col: usize, w: f64) {
        let dim = self.dim;
        self.step(t).read_mut(from, dim).set(row, col, w);
    }

    fn noise(&mut self, t: usize, dim: usize, default: f64) {
        if self.params.stochastic {
            let s = self.params.noise_scale.unwrap_or(default);
            self.step(t).noise[dim] = s;
        }
    }

    /// Answer logits `±w·h[dim]` on A/B from the last state.
    fn answer_readout(&mut self, dim: usize, w: f64, undecided: f64) {
        self.readout.last.set(ANSWER_A, dim, w);
        self.readout.last.set(ANSWER_B, dim, -w);
        self.readout.bias[UNDECIDED] = undecided;
    }

    fn local_channel(&mut self, dim: usize, filler_gain: f64) {
        for t in 1..=self.budget {
            if t == 1 {
                self.step(1).bias[dim] = LOCAL_START;
            } else {
                self.step(t).bias[dim] = LOCAL_BIAS;
                self.read(t, t - 1, dim, dim, LOCAL_RECUR);
            }
            self.noise(t, dim, 0.01);
        }
        self.readout.bias[FILLER] = FILLER_BASE;
        self.readout.last.set(FILLER, dim, filler_gain);
    }

    fn linear(&mut self) -> Routing {
        let (a, b) = (self.params.linear_a, self.params.linear_b);
        for t in 1..=self.budget {
            self.step(t).bias[0] = b;
            if t > 1 {
                self.read(t, t - 1, 0, 0, a);
            }
            self.noise(t, 0, 0.1);
        }
        self.readout.last.set(0, 0, 1.0);
        Routing {
            kind: ToyKind::Linear,
            carrier_steps: (1..=self.budget).collect(),
            skip: None,
            commit_step: None,
            signal_dim: 0,
        }
    }

    fn chain(&mut self) -> Routing {
        for t in 1..=self.budget {
            if t == 1 {
                self.step(1).input.set(0, 0, 1.0);
            } else {
                self.read(t, t - 1, 0, 0, CARRY_GAIN);
            }
            self.noise(t, 0, 0.01);
        }
        // A−U margin is small on purpose: losing the carry flips the answer
        // while moving the distribution very little.
        self.answer_readout(0, 0.01, 0.005);
        self.local_channel(1, 2.0);
        Routing {
            kind: ToyKind::Chain,
            carrier_steps: (1..=self.budget).collect(),
            skip: None,
            commit_step: None,
            signal_dim: 0,
        }
    }

    fn skip(&mut self) -> Result<Routing> {
        let source = self.params.skip_source;
        let sink = self.budget;
        if source == 0 || source >= sink {
            return Err(Error::Config(format!(
                "skip source {source} must lie in 1..{sink}"
            )));
        }
        self.step(source).input.set(0, 0, 1.0);
        self.read(sink, source, 0, 0, CARRY_GAIN);
        self.noise(source, 0, 0.01);
        self.noise(sink, 0, 0.01);
        self.answer_readout(0, 4.0, 0.5);
        self.local_channel(1, 1.0);
        Ok(Routing {
            kind: ToyKind::Skip,
            carrier_steps: vec![source, sink],
            skip: Some((source, sink)),
            commit_step: None,
            signal_dim: 0,
        })
    }

    fn commit(&mut self) -> Result<Routing> {
        let k = self.params.commit_step;
        let decay = self.params.residual_decay;
        if k == 0 || k > self.budget {
            return Err(Error::Config(format!(
                "commit step {k} must lie in 1..={}",
                self.budget
            )));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config("residual decay must lie in [0, 1)".into()));
        }
        // dim 0: committed answer, dim 1: residual support for the alternative
        self.step(k).input.set(0, 0, 1.0);
        self.step(k).input.set(1, 0, 0.6);
        for t in k + 1..=self.budget {
            self.read(t, t - 1, 0, 0, CARRY_GAIN);
            self.read(t, t - 1, 1, 1, decay);
        }
        for t in k..=self.budget {
            self.noise(t, 0, 0.01);
            self.noise(t, 1, 0.01);
        }
        self.answer_readout(0, 1.0, 0.5);
        self.readout.last.set(ANSWER_A, 1, -1.5);
        self.readout.last.set(ANSWER_B, 1, 1.5);
        let mut direct = crate::linalg::Matrix::zeros(ROUTING_VOCAB.len(), self.dim);
        direct.set(ANSWER_A, 0, 3.0);
        direct.set(ANSWER_B, 0, -3.0);
        self.readout.direct.push(crate::scm::Read {
            from: k,
            weight: direct,
        });
        self.local_channel(2, 1.0);
        Ok(Routing {
            kind: ToyKind::Commit,
            carrier_steps: (k..=self.budget).collect(),
            skip: None,
            commit_step: Some(k),
            signal_dim: 0,
        })
    }

    fn stabilizer(&mut self) -> Routing {
        for t in 1..=self.budget {
            if t == 1 {
                self.step(1).input.set(0, 0, 3.0);
            } else {
                self.read(t, t - 1, 0, 0, CARRY_GAIN);
            }
            self.noise(t, 0, 0.01);
        }
        self.answer_readout(0, 2.0, 0.5);
        Routing {
            kind: ToyKind::Stabilizer,
            carrier_steps: (1..=self.budget).collect(),
            skip: None,
            commit_step: None,
            signal_dim: 0,
        }
    }

    fn readout_gap(&mut self) -> Routing {
        let last = self.budget;
        let gain = self.params.mode_gain;
        // dim 0: output bias toward "Yes", present before the last step only
        // dim 1: weak mode drift before the last step, amplified at the last
        for t in 1..last {
            self.step(t).bias[0] = 3.0;
            self.step(t).input.set(1, 0, 0.05);
            if t > 1 {
                self.read(t, t - 1, 1, 1, 0.5);
            }
            self.noise(t, 1, 0.05);
        }
        self.read(last, last - 1, 1, 1, gain);
        self.step(last).input.set(1, 0, 0.6 * gain);
        if self.params.stochastic {
            self.step(last).noise[1] = gain * self.params.noise_scale.unwrap_or(1.0);
        }
        self.readout.last.set(0, 0, 2.5);
        self.readout.last.set(1, 0, -2.5);
        self.readout.last.set(0, 1, 4.0);
        self.readout.last.set(1, 1, -4.0);
        Routing {
            kind: ToyKind::ReadoutGap,
            carrier_steps: vec![last],
            skip: None,
            commit_step: None,
            signal_dim: 1,
        }
    }

    /// Seeded random chain dynamics on the dimensions past the functional ones.
    fn nuisance(&mut self, seed: u64) {
        let extra = self.dim - self.functional;
        if extra == 0 {
            return;
        }
        let mut rng = rng::stream(seed, &[tag::TOY]);
        let recur = Normal::new(0.0, 0.6 / (extra as f64).sqrt()).expect("valid normal");
        let small = Normal::new(0.0, 0.3).expect("valid normal");
        let lo = self.functional;
        for t in 1..=self.budget {
            for i in lo..self.dim {
                if self.input_dim > 0 {
                    let w = rng.sample(small);
                    self.step(t).input.set(i, 0, w);
                }
                self.step(t).bias[i] = 0.3 * rng.sample(small);
                if t > 1 {
                    for j in lo..self.dim {
                        let w = rng.sample(recur);
                        self.read(t, t - 1, i, j, w);
                    }
                }
                self.noise(t, i, 0.3);
            }
        }
    }
}

/// Synthetic labelled inputs matching a toy's encoding contract.
///
/// Routing toys draw a signed signal `x = ±U(0.5, 1.5)` whose sign selects
/// the gold answer; the readout-gap toy draws `x ∼ U(−0.5, 0.5)`.
pub fn toy_dataset(model: &ModelSpec, n: usize, seed: u64) -> Result<Vec<Example>> {
    let routing = model
        .routing()
        .ok_or_else(|| Error::Config("synthetic datasets need a designed toy model".into()))?;
    let mut rng = rng::stream(seed, &[tag::DATASET, n as u64]);
    let magnitude = Uniform::new(0.5, 1.5).expect("valid range");
    let centered = Uniform::new(-0.5, 0.5).expect("valid range");
    let examples = (0..n)
        .map(|i| {
            let (input, gold) = match routing.kind {
                ToyKind::Linear => (Vec::new(), "A".to_owned()),
                ToyKind::ReadoutGap => {
                    let x: f64 = rng.sample(centered);
                    (vec![x], if x >= 0.0 { "Yes" } else { "No" }.to_owned())
                }
                _ => {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let x = sign * rng.sample(magnitude);
                    (vec![x], if x > 0.0 { "A" } else { "B" }.to_owned())
                }
            };
            Example {
                id: format!("ex{i:05}"),
                input,
                gold,
            }
        })
        .collect();
    Ok(examples)
}
