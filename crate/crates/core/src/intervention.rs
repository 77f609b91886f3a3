// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-step do-interventions.
//!
//! `do(h_t ← h̃_t)` copies the baseline prefix `h_<t`, overwrites step `t`
//! with the output of an [`InterventionOp`], and recomputes every later step
//! with the unchanged transition mechanism and the baseline's recorded noise.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::dist::StepDistribution;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scm::{decode, final_answer, rollout, transition_step, LatentState, ModelSpec, Trajectory};

/// Global and per-step mean latent states of a set of trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub global_mean: LatentState,
    pub step_means: Vec<LatentState>,
    pub sample_count: usize,
}

impl LatentStats {
    pub fn budget(&self) -> usize {
        self.step_means.len()
    }

    pub fn dim(&self) -> usize {
        self.global_mean.dim()
    }

    /// Means over state lists that all share `T` and `d`.
    pub fn from_state_lists<'a, I>(lists: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [LatentState]>,
    {
        let mut iter = lists.into_iter().peekable();
        let first = iter
            .peek()
            .ok_or_else(|| Error::Argument("latent statistics need at least one trajectory".into()))?;
        let budget = first.len();
        let dim = first.first().map_or(0, LatentState::dim);
        if budget == 0 || dim == 0 {
            return Err(Error::Shape("trajectories must have at least one nonempty state".into()));
        }
        let mut step_sums = vec![vec![0.0; dim]; budget];
        let mut count = 0usize;
        for states in iter {
            if states.len() != budget || states.iter().any(|h| h.dim() != dim) {
                return Err(Error::Shape(format!(
                    "trajectory shapes differ: expected {budget}x{dim}"
                )));
            }
            for (sum, h) in step_sums.iter_mut().zip(states) {
                for (s, v) in sum.iter_mut().zip(h.values()) {
                    *s += v;
                }
            }
            count += 1;
        }
        let n = count as f64;
        let step_means: Vec<LatentState> = step_sums
            .iter()
            .map(|sum| LatentState::from_raw(sum.iter().map(|s| s / n).collect()))
            .collect();
        let global: Vec<f64> = (0..dim)
            .map(|j| step_sums.iter().map(|s| s[j]).sum::<f64>() / (n * budget as f64))
            .collect();
        Ok(Self {
            global_mean: LatentState::from_raw(global),
            step_means,
            sample_count: count,
        })
    }
}

/// `μ` and `μ_t` estimated from baseline trajectories.
pub fn estimate_latent_stats(trajectories: &[Trajectory]) -> Result<LatentStats> {
    LatentStats::from_state_lists(trajectories.iter().map(|t| t.states.as_slice()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    Mean,
    MeanStep,
    GaussianH,
    GaussianMu,
    GaussianMuStep,
    Identity,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Zero,
        OpKind::Mean,
        OpKind::MeanStep,
        OpKind::GaussianH,
        OpKind::GaussianMu,
        OpKind::GaussianMuStep,
        OpKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Mean => "mean",
            OpKind::MeanStep => "mean_step",
            OpKind::GaussianH => "gaussian_h",
            OpKind::GaussianMu => "gaussian_mu",
            OpKind::GaussianMuStep => "gaussian_mu_step",
            OpKind::Identity => "identity",
        }
    }

    pub fn needs_stats(self) -> bool {
        matches!(
            self,
            OpKind::Mean | OpKind::MeanStep | OpKind::GaussianMu | OpKind::GaussianMuStep
        )
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, OpKind::GaussianH | OpKind::GaussianMu | OpKind::GaussianMuStep)
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown intervention operator {s:?}")))
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Serializable summary of an operator (kind and noise scale).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpDescriptor {
    pub kind: OpKind,
    pub sigma: f64,
}

/// Default noise scale of the Gaussian operators.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// The rule producing `h̃_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionOp {
    kind: OpKind,
    sigma: f64,
    stats: Option<Arc<LatentStats>>,
}

impl InterventionOp {
    pub fn new(kind: OpKind, sigma: f64, stats: Option<Arc<LatentStats>>) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be a nonnegative real, got {sigma}")));
        }
        if kind.needs_stats() && stats.is_none() {
            return Err(Error::Config(format!("operator {kind} needs latent statistics")));
        }
        Ok(Self { kind, sigma, stats })
    }

    pub fn zero() -> Self {
        Self {
            kind: OpKind::Zero,
            sigma: DEFAULT_SIGMA,
            stats: None,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: OpKind::Identity,
            sigma: DEFAULT_SIGMA,
            stats: None,
        }
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn stats(&self) -> Option<&LatentStats> {
        self.stats.as_deref()
    }

    pub fn descriptor(&self) -> OpDescriptor {
        OpDescriptor {
            kind: self.kind,
            sigma: self.sigma,
        }
    }
}

/// Seed of the operator stream for one `(example, step, operator)` cell.
pub fn operator_seed(master: u64, example: usize, step: usize, kind: OpKind) -> u64 {
    rng::derive_seed(master, &[tag::OPERATOR, example as u64, step as u64, kind.code()])
}

/// Produce the edited state `h̃_t` for `state` at `step`.
pub fn apply_operator<R: Rng + ?Sized>(
    op: &InterventionOp,
    state: &LatentState,
    step: usize,
    rng: &mut R,
) -> Result<LatentState> {
    let stats = op.stats.as_deref();
    if op.kind.needs_stats() {
        let stats = stats.ok_or_else(|| Error::Config(format!("operator {} needs latent statistics", op.kind)))?;
        if stats.dim() != state.dim() {
            return Err(Error::Shape(format!(
                "statistics have dimension {} but the state has {}",
                stats.dim(),
                state.dim()
            )));
        }
        if matches!(op.kind, OpKind::MeanStep | OpKind::GaussianMuStep) && (step == 0 || step > stats.budget()) {
            return Err(Error::Range(format!("step {step} outside 1..={}", stats.budget())));
        }
    }
    let center: Vec<f64> = match op.kind {
        OpKind::Identity => return Ok(state.clone()),
        OpKind::Zero => return Ok(LatentState::zeros(state.dim())),
        OpKind::Mean | OpKind::GaussianMu => stats.expect("checked").global_mean.values().to_vec(),
        OpKind::MeanStep | OpKind::GaussianMuStep => stats.expect("checked").step_means[step - 1].values().to_vec(),
        OpKind::GaussianH => state.values().to_vec(),
    };
    if !op.kind.is_gaussian() {
        return Ok(LatentState::from_raw(center));
    }
    let noisy = center
        .into_iter()
        .map(|c| {
            let eps: f64 = rng.sample(StandardNormal);
            c + op.sigma * eps
        })
        .collect();
    Ok(LatentState::from_raw(noisy))
}

/// Post-intervention trajectory `h̃_1..h̃_T` and its answer `ỹ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualTrajectory<'a> {
    pub base: &'a Trajectory,
    pub intervened_step: usize,
    pub overwritten_state: LatentState,
    pub states: Vec<LatentState>,
    pub answer: String,
    pub answer_index: usize,
    pub answer_dist: StepDistribution,
}

/// Apply `do(h_step ← op(h_step))` to `base` and recompute downstream.
///
/// `seed` drives the operator's Gaussian draws; see [`operator_seed`].
pub fn do_rollout<'a>(
    model: &ModelSpec,
    base: &'a Trajectory,
    step: usize,
    op: &InterventionOp,
    seed: u64,
) -> Result<CounterfactualTrajectory<'a>> {
    if base.model_fingerprint != model.fingerprint() || base.states.len() != model.budget() {
        return Err(Error::Config("trajectory was not produced by this model".into()));
    }
    let budget = model.budget();
    if step == 0 || step > budget {
        return Err(Error::Range(format!("intervention step {step} outside 1..={budget}")));
    }
    let mut rng = rng::stream(seed, &[tag::OPERATOR]);
    let overwritten = apply_operator(op, &base.states[step - 1], step, &mut rng)?;
    if overwritten.dim() != model.dim() {
        return Err(Error::Shape("operator output does not match model dimension".into()));
    }
    let mut states = Vec::with_capacity(budget);
    states.extend_from_slice(&base.states[..step - 1]);
    states.push(overwritten.clone());
    for t in step + 1..=budget {
        let h = transition_step(model, &states, &base.input, t, base.noise.step(t))?;
        states.push(h);
    }
    let answer_dist = decode(model, &states, &base.input)?;
    let answer_index = final_answer(&answer_dist, &base.noise);
    Ok(CounterfactualTrajectory {
        base,
        intervened_step: step,
        overwritten_state: overwritten,
        answer: model.vocab()[answer_index].clone(),
        answer_index,
        answer_dist,
        states,
    })
}

/// Seed of the baseline rollout of example `example`.
pub fn rollout_seed(master: u64, example: usize) -> u64 {
    rng::derive_seed(master, &[tag::ROLLOUT, example as u64])
}

/// One baseline rollout per example, in dataset order.
pub fn baseline_rollouts(model: &ModelSpec, examples: &[Example], seed: u64) -> Result<Vec<Trajectory>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            rollout(model, &ex.input, rollout_seed(seed, i)).map_err(|e| match e {
                Error::Config(m) => Error::Record {
                    example_id: ex.id.clone(),
                    message: m,
                },
                other => other,
            })
        })
        .collect()
}
