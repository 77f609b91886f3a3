// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flip rates under single-step interventions and early-stop solved fractions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::intervention::{baseline_rollouts, do_rollout, operator_seed, InterventionOp, OpDescriptor};
use crate::readout::early_stop_decode;
use crate::scm::{ModelSpec, Trajectory};

const WILSON_Z: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes / n` at 95% coverage.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Flip counts at one intervention step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCounts {
    pub flips: usize,
    pub right_to_wrong: usize,
    pub wrong_to_right: usize,
    /// Flips between two wrong answers (only possible with more than two symbols).
    pub wrong_to_wrong: usize,
    pub n: usize,
}

impl FlipCounts {
    pub fn record(&mut self, gold: &str, baseline: &str, counterfactual: &str) {
        self.n += 1;
        if baseline == counterfactual {
            return;
        }
        self.flips += 1;
        if baseline == gold {
            self.right_to_wrong += 1;
        } else if counterfactual == gold {
            self.wrong_to_right += 1;
        } else {
            self.wrong_to_wrong += 1;
        }
    }

    pub fn rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.flips as f64 / self.n as f64
        }
    }
}

/// `Flip(t)` for `t = 1..T` with direction counts and Wilson intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub per_step: Vec<f64>,
    pub n_examples: usize,
    pub op: OpDescriptor,
    pub counts: Vec<FlipCounts>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

impl FlipReport {
    pub fn from_counts(op: OpDescriptor, counts: Vec<FlipCounts>) -> Result<Self> {
        let n = counts.first().map_or(0, |c| c.n);
        if n == 0 || counts.iter().any(|c| c.n != n) {
            return Err(Error::Argument("flip counts need a common nonzero example count".into()));
        }
        let per_step = counts.iter().map(FlipCounts::rate).collect();
        let (ci_low, ci_high) = counts.iter().map(|c| wilson_interval(c.flips, n)).unzip();
        Ok(Self {
            per_step,
            n_examples: n,
            op,
            counts,
            ci_low,
            ci_high,
        })
    }

    /// Report from already decoded answers: `counterfactual[i][t − 1]` is
    /// example `i`'s answer under the intervention at step `t`.
    pub fn from_answers(
        op: OpDescriptor,
        gold: &[String],
        baseline: &[String],
        counterfactual: &[Vec<String>],
    ) -> Result<Self> {
        if gold.is_empty() || gold.len() != baseline.len() || gold.len() != counterfactual.len() {
            return Err(Error::Argument("answer lists must be nonempty and aligned".into()));
        }
        let budget = counterfactual[0].len();
        if counterfactual.iter().any(|row| row.len() != budget) {
            return Err(Error::Shape("counterfactual answers cover different step counts".into()));
        }
        let mut counts = vec![FlipCounts::default(); budget];
        for ((g, b), row) in gold.iter().zip(baseline).zip(counterfactual) {
            for (c, cf) in counts.iter_mut().zip(row) {
                c.record(g, b, cf);
            }
        }
        Self::from_counts(op, counts)
    }

    pub fn budget(&self) -> usize {
        self.per_step.len()
    }
}

fn check_dataset(dataset: &[Example]) -> Result<()> {
    if dataset.is_empty() {
        Err(Error::Argument("dataset is empty".into()))
    } else {
        Ok(())
    }
}

fn counterfactual_answers(
    model: &ModelSpec,
    base: &Trajectory,
    example: usize,
    steps: &[usize],
    op: &InterventionOp,
    seed: u64,
) -> Result<Vec<String>> {
    steps
        .iter()
        .map(|&t| {
            let cf = do_rollout(model, base, t, op, operator_seed(seed, example, t, op.kind()))?;
            Ok(cf.answer)
        })
        .collect()
}

fn flip_counts(
    model: &ModelSpec,
    dataset: &[Example],
    baselines: &[Trajectory],
    op: &InterventionOp,
    steps: &[usize],
    seed: u64,
) -> Result<Vec<FlipCounts>> {
    let rows: Vec<Vec<String>> = baselines
        .par_iter()
        .enumerate()
        .map(|(i, base)| counterfactual_answers(model, base, i, steps, op, seed))
        .collect::<Result<_>>()?;
    let mut counts = vec![FlipCounts::default(); steps.len()];
    for ((ex, base), row) in dataset.iter().zip(baselines).zip(&rows) {
        for (c, cf) in counts.iter_mut().zip(row) {
            c.record(&ex.gold, &base.answer, cf);
        }
    }
    Ok(counts)
}

/// Flip statistics for an intervention at a single step `t`.
///
/// A flip is a change relative to the baseline prediction; gold only
/// decides the direction.
pub fn flip_rate(
    model: &ModelSpec,
    dataset: &[Example],
    op: &InterventionOp,
    step: usize,
    seed: u64,
) -> Result<FlipCounts> {
    check_dataset(dataset)?;
    if step == 0 || step > model.budget() {
        return Err(Error::Range(format!("step {step} outside 1..={}", model.budget())));
    }
    let baselines = baseline_rollouts(model, dataset, seed)?;
    Ok(flip_counts(model, dataset, &baselines, op, &[step], seed)?[0])
}

/// Sweep `t = 1..T`, reusing one baseline rollout per example.
pub fn flip_profile(model: &ModelSpec, dataset: &[Example], op: &InterventionOp, seed: u64) -> Result<FlipReport> {
    check_dataset(dataset)?;
    let baselines = baseline_rollouts(model, dataset, seed)?;
    flip_profile_with_baselines(model, dataset, &baselines, op, seed)
}

pub fn flip_profile_with_baselines(
    model: &ModelSpec,
    dataset: &[Example],
    baselines: &[Trajectory],
    op: &InterventionOp,
    seed: u64,
) -> Result<FlipReport> {
    check_dataset(dataset)?;
    if baselines.len() != dataset.len() {
        return Err(Error::Argument("one baseline per example is required".into()));
    }
    let steps: Vec<usize> = (1..=model.budget()).collect();
    let counts = flip_counts(model, dataset, baselines, op, &steps, seed)?;
    FlipReport::from_counts(op.descriptor(), counts)
}

/// `k_i`: the first truncation length whose decode equals `gold`, if any.
pub fn earliest_correct_step(model: &ModelSpec, trajectory: &Trajectory, gold: &str) -> Result<Option<usize>> {
    model.tokenize(gold)?;
    for k in 1..=trajectory.budget() {
        if early_stop_decode(model, trajectory, k)? == gold {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// `S(k) = #{i : k_i ≤ k} / N` for `k = 1..budget`; `None` is never counted.
pub fn solved_fraction_curve(earliest: &[Option<usize>], budget: usize) -> Result<Vec<f64>> {
    if earliest.is_empty() {
        return Err(Error::Argument("solved fraction needs at least one example".into()));
    }
    let mut hist = vec![0usize; budget + 1];
    for k in earliest.iter().flatten() {
        if *k == 0 || *k > budget {
            return Err(Error::Range(format!("earliest step {k} outside 1..={budget}")));
        }
        hist[*k] += 1;
    }
    let n = earliest.len() as f64;
    let mut solved = 0usize;
    Ok((1..=budget)
        .map(|k| {
            solved += hist[k];
            solved as f64 / n
        })
        .collect())
}

/// Earliest decodable step per example and the cumulative solved fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopReport {
    pub budget: usize,
    pub ids: Vec<String>,
    pub gold: Vec<String>,
    pub earliest: Vec<Option<usize>>,
    pub curve: Vec<f64>,
}

impl EarlyStopReport {
    pub fn new(budget: usize, ids: Vec<String>, gold: Vec<String>, earliest: Vec<Option<usize>>) -> Result<Self> {
        if ids.len() != earliest.len() || gold.len() != earliest.len() {
            return Err(Error::Argument("early-stop lists must be aligned".into()));
        }
        let curve = solved_fraction_curve(&earliest, budget)?;
        Ok(Self {
            budget,
            ids,
            gold,
            earliest,
            curve,
        })
    }

    /// `k_i` with "never" written as `T + 1` plus a solved flag.
    pub fn encoded(&self, i: usize) -> (usize, bool) {
        match self.earliest[i] {
            Some(k) => (k, true),
            None => (self.budget + 1, false),
        }
    }
}

pub fn early_stop_report(model: &ModelSpec, dataset: &[Example], seed: u64) -> Result<EarlyStopReport> {
    check_dataset(dataset)?;
    let baselines = baseline_rollouts(model, dataset, seed)?;
    let earliest = dataset
        .par_iter()
        .zip(&baselines)
        .map(|(ex, tr)| earliest_correct_step(model, tr, &ex.gold))
        .collect::<Result<Vec<_>>>()?;
    EarlyStopReport::new(
        model.budget(),
        dataset.iter().map(|e| e.id.clone()).collect(),
        dataset.iter().map(|e| e.gold.clone()).collect(),
        earliest,
    )
}
