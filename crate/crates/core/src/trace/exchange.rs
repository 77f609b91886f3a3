// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace export for built-in models and ingestion of exported traces into
//! the influence, flip and early-stop analyses.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use super::plan::InterventionPlan;
use super::{InterventionTag, StoredDistribution, TraceRecord, SCHEMA_VERSION};
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::influence::{example_cells, InfluenceAccumulator, InfluenceMatrix};
use crate::intervention::{baseline_rollouts, do_rollout, operator_seed, LatentStats, OpDescriptor};
use crate::necessity::{EarlyStopReport, FlipReport};
use crate::readout::{early_stop_decode, teacher_forced_dist, AnswerTemplate};
use crate::scm::{LatentState, ModelSpec, Trajectory};

fn stored_readouts(
    model: &ModelSpec,
    states: &[LatentState],
    input: &[f64],
    gold: &str,
    template: &AnswerTemplate,
    steps: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, Vec<StoredDistribution>>> {
    steps
        .into_iter()
        .map(|s| {
            let score = teacher_forced_dist(model, states, s, input, gold, template)?;
            Ok((s, score.per_position.iter().map(StoredDistribution::encode).collect()))
        })
        .collect()
}

fn base_record(model: &ModelSpec, ex: &Example, index: usize, seed: u64, states: &[LatentState], answer: &str) -> TraceRecord {
    let mut meta = BTreeMap::new();
    meta.insert("source".to_owned(), serde_json::json!("builtin"));
    meta.insert(
        "model_fingerprint".to_owned(),
        serde_json::json!(format!("{:016x}", model.fingerprint())),
    );
    meta.insert("seed".to_owned(), serde_json::json!(seed));
    meta.insert("example_index".to_owned(), serde_json::json!(index));
    TraceRecord {
        schema_version: SCHEMA_VERSION,
        example_id: ex.id.clone(),
        paradigm: model.paradigm(),
        budget: model.budget(),
        dim: model.dim(),
        states: states.iter().map(|h| h.values().to_vec()).collect(),
        gold: ex.gold.clone(),
        baseline_answer: answer.to_owned(),
        vocab: Some(model.vocab().to_vec()),
        teacher_forced: None,
        intervention: None,
        counterfactual_answer: None,
        early_stop_answers: None,
        meta,
    }
}

/// Baseline records with teacher-forced readouts at every step and
/// early-stop answers, as an exporter would write them.
pub fn export_baseline(
    model: &ModelSpec,
    dataset: &[Example],
    template: &AnswerTemplate,
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    let baselines = baseline_rollouts(model, dataset, seed)?;
    dataset
        .par_iter()
        .zip(&baselines)
        .enumerate()
        .map(|(i, (ex, tr))| {
            let mut r = base_record(model, ex, i, seed, &tr.states, &tr.answer);
            r.teacher_forced = Some(stored_readouts(model, &tr.states, &tr.input, &ex.gold, template, 1..=model.budget())?);
            r.early_stop_answers = Some(
                (1..=model.budget())
                    .map(|k| early_stop_decode(model, tr, k))
                    .collect::<Result<_>>()?,
            );
            Ok(r)
        })
        .collect()
}

fn counterfactual_records(
    model: &ModelSpec,
    ex: &Example,
    index: usize,
    base: &Trajectory,
    plan: &InterventionPlan,
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    let op = plan.operator()?;
    plan.steps
        .iter()
        .map(|&t| {
            let cf = do_rollout(model, base, t, &op, operator_seed(seed, index, t, op.kind()))?;
            let mut r = base_record(model, ex, index, seed, &cf.states, &base.answer);
            r.teacher_forced = Some(stored_readouts(model, &cf.states, &base.input, &ex.gold, &plan.template, plan.readouts_for(t))?);
            r.counterfactual_answer = Some(cf.answer);
            r.intervention = Some(InterventionTag {
                plan_id: plan.plan_id.clone(),
                step: t,
                op: plan.op,
            });
            Ok(r)
        })
        .collect()
}

/// Run `plan` against a built-in model: one counterfactual record per
/// example and planned step.
pub fn execute_plan(model: &ModelSpec, dataset: &[Example], plan: &InterventionPlan, seed: u64) -> Result<Vec<TraceRecord>> {
    plan.validate()?;
    if plan.budget != model.budget() {
        return Err(Error::Config(format!(
            "plan budget {} does not match the model budget {}",
            plan.budget,
            model.budget()
        )));
    }
    let baselines = baseline_rollouts(model, dataset, seed)?;
    let nested: Vec<Vec<TraceRecord>> = dataset
        .par_iter()
        .zip(&baselines)
        .enumerate()
        .map(|(i, (ex, base))| counterfactual_records(model, ex, i, base, plan, seed))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Counterfactual records keyed by `(example_id, step)`.
#[derive(Debug)]
pub struct TraceIndex<'a> {
    by_key: HashMap<(&'a str, usize), &'a TraceRecord>,
    op: Option<OpDescriptor>,
}

impl<'a> TraceIndex<'a> {
    pub fn new(counterfactual: &'a [TraceRecord]) -> Result<Self> {
        let mut by_key = HashMap::new();
        let mut op: Option<OpDescriptor> = None;
        for r in counterfactual {
            let tag = r.intervention.as_ref().ok_or_else(|| Error::Record {
                example_id: r.example_id.clone(),
                message: "counterfactual record without an intervention tag".into(),
            })?;
            match op {
                Some(o) if o != tag.op => {
                    return Err(Error::Data("counterfactual records mix intervention operators".into()));
                }
                _ => op = Some(tag.op),
            }
            if by_key.insert((r.example_id.as_str(), tag.step), r).is_some() {
                return Err(Error::Record {
                    example_id: r.example_id.clone(),
                    message: format!("duplicate counterfactual for step {}", tag.step),
                });
            }
        }
        Ok(Self { by_key, op })
    }

    pub fn get(&self, example_id: &str, step: usize) -> Result<&'a TraceRecord> {
        self.by_key.get(&(example_id, step)).copied().ok_or_else(|| {
            Error::Data(format!("no counterfactual trace for `{example_id}` at step {step}"))
        })
    }

    pub fn op(&self) -> Option<OpDescriptor> {
        self.op
    }
}

fn common_budget(baseline: &[TraceRecord]) -> Result<usize> {
    let first = baseline.first().ok_or_else(|| Error::Argument("no baseline traces".into()))?;
    if let Some(r) = baseline.iter().find(|r| r.budget != first.budget) {
        return Err(Error::Record {
            example_id: r.example_id.clone(),
            message: format!("T = {} differs from T = {} of the other traces", r.budget, first.budget),
        });
    }
    if let Some(r) = baseline.iter().find(|r| r.is_counterfactual()) {
        return Err(Error::Record {
            example_id: r.example_id.clone(),
            message: "counterfactual record in the baseline file".into(),
        });
    }
    Ok(first.budget)
}

/// `W` from exported baseline and counterfactual traces.
pub fn ingest_influence(baseline: &[TraceRecord], counterfactual: &[TraceRecord], correct_only: bool) -> Result<InfluenceMatrix> {
    let budget = common_budget(baseline)?;
    let index = TraceIndex::new(counterfactual)?;
    let cells: Vec<Option<Vec<f64>>> = baseline
        .par_iter()
        .map(|b| {
            if correct_only && b.baseline_answer != b.gold {
                return Ok(None);
            }
            let scores = (1..=budget).map(|s| b.teacher_forced_score(s)).collect::<Result<Vec<_>>>()?;
            example_cells(budget, &scores, |t, s| index.get(&b.example_id, t)?.teacher_forced_score(s)).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut acc = InfluenceAccumulator::new(budget);
    for c in cells.iter().flatten() {
        acc.add(c)?;
    }
    acc.finish()
}

/// Flip report from exported traces; every step `1..=T` must be present.
pub fn ingest_flips(baseline: &[TraceRecord], counterfactual: &[TraceRecord]) -> Result<FlipReport> {
    let budget = common_budget(baseline)?;
    let index = TraceIndex::new(counterfactual)?;
    let op = index
        .op()
        .ok_or_else(|| Error::Data("no counterfactual traces to ingest".into()))?;
    let gold: Vec<String> = baseline.iter().map(|b| b.gold.clone()).collect();
    let base: Vec<String> = baseline.iter().map(|b| b.baseline_answer.clone()).collect();
    let cf: Vec<Vec<String>> = baseline
        .iter()
        .map(|b| {
            (1..=budget)
                .map(|t| {
                    let r = index.get(&b.example_id, t)?;
                    r.counterfactual_answer.clone().ok_or_else(|| Error::Record {
                        example_id: r.example_id.clone(),
                        message: "counterfactual record without counterfactual_answer".into(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    FlipReport::from_answers(op, &gold, &base, &cf)
}

/// Early-stop report from the `early_stop_answers` of baseline traces.
pub fn ingest_early_stop(baseline: &[TraceRecord]) -> Result<EarlyStopReport> {
    let budget = common_budget(baseline)?;
    let earliest = baseline
        .iter()
        .map(|b| {
            let answers = b.early_stop_answers.as_ref().ok_or_else(|| {
                Error::Data(format!("trace `{}` has no early_stop_answers", b.example_id))
            })?;
            Ok(answers.iter().position(|a| *a == b.gold).map(|k| k + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    EarlyStopReport::new(
        budget,
        baseline.iter().map(|b| b.example_id.clone()).collect(),
        baseline.iter().map(|b| b.gold.clone()).collect(),
        earliest,
    )
}

/// `μ` and `μ_t` over baseline trace states.
pub fn stats_from_traces(baseline: &[TraceRecord]) -> Result<LatentStats> {
    let lists: Vec<Vec<LatentState>> = baseline
        .iter()
        .map(|r| r.states.iter().map(|row| LatentState::new(row.clone())).collect())
        .collect::<Result<_>>()?;
    LatentStats::from_state_lists(lists.iter().map(Vec::as_slice))
}
