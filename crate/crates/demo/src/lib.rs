// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser demo: each exported function runs one analysis on a toy model
//! and returns its result as a JSON string.

use latentscm::influence::{
    export_graph, influence_matrix, normalize_influence, sparsify, structure_metrics, Edge, GraphFormat,
    StructureSummary, DEFAULT_LOCALITY_K, DEFAULT_M_EARLY, DEFAULT_M_LATE,
};
use latentscm::intervention::{baseline_rollouts, estimate_latent_stats, InterventionOp, OpKind, DEFAULT_SIGMA};
use latentscm::necessity::{early_stop_report, flip_profile};
use latentscm::readout::AnswerTemplate;
use latentscm::superposition::{superposition_analysis, SuperpositionConfig};
use latentscm::toys::{make_toy, toy_dataset, ToyKind, ToyParams};
use latentscm::ModelSpec;
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

const BUDGET: usize = 6;
const MAX_EXAMPLES: usize = 500;

type Json = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn toy(kind: &str, stochastic: bool) -> Result<ModelSpec, String> {
    let kind: ToyKind = kind.parse().map_err(err)?;
    let dim = if kind == ToyKind::Linear { 1 } else { 4 };
    let params = ToyParams {
        stochastic,
        ..ToyParams::default()
    };
    make_toy(kind, dim, BUDGET, 0, &params).map_err(err)
}

fn examples(n: usize) -> Result<usize, String> {
    if n == 0 || n > MAX_EXAMPLES {
        return Err(format!("examples must lie in 1..={MAX_EXAMPLES}"));
    }
    Ok(n)
}

fn operator(model: &ModelSpec, data: &[latentscm::dataset::Example], op: &str, seed: u64) -> Result<InterventionOp, String> {
    let kind: OpKind = op.parse().map_err(err)?;
    let stats = if kind.needs_stats() {
        let bases = baseline_rollouts(model, data, seed).map_err(err)?;
        Some(std::sync::Arc::new(estimate_latent_stats(&bases).map_err(err)?))
    } else {
        None
    };
    InterventionOp::new(kind, DEFAULT_SIGMA, stats).map_err(err)
}

#[derive(Serialize)]
struct InfluenceView {
    w: Vec<Vec<f64>>,
    wbar: Vec<Vec<f64>>,
    metrics: StructureSummary,
    edges: Vec<Edge>,
    dot: String,
}

/// Influence matrix, structure metrics and principal graph of a toy.
#[wasm_bindgen]
pub fn influence(kind: &str, op: &str, n_examples: usize, alpha: f64, seed: u64) -> Json {
    let model = toy(kind, false)?;
    let data = toy_dataset(&model, examples(n_examples)?, seed).map_err(err)?;
    let op = operator(&model, &data, op, seed)?;
    let w = influence_matrix(&model, &data, &op, &AnswerTemplate::coconut(), seed, false).map_err(err)?;
    let wbar = normalize_influence(&w);
    let graph = sparsify(&w, alpha).map_err(err)?;
    let grid = |get: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (1..=BUDGET).map(|t| (1..=BUDGET).map(|s| get(t, s)).collect()).collect()
    };
    let view = InfluenceView {
        w: grid(&|t, s| w.get(t, s)),
        wbar: grid(&|t, s| wbar.get(t, s)),
        metrics: structure_metrics(&wbar, DEFAULT_LOCALITY_K, DEFAULT_M_EARLY, DEFAULT_M_LATE),
        dot: export_graph(&graph, GraphFormat::Dot).map_err(err)?,
        edges: graph.edges,
    };
    serde_json::to_string(&view).map_err(err)
}

#[derive(Serialize)]
struct NecessityView {
    flip_rate: Vec<f64>,
    ci_low: Vec<f64>,
    ci_high: Vec<f64>,
    solved_fraction: Vec<f64>,
}

/// Per-step flip rates under an operator and the early-stop solved curve.
#[wasm_bindgen]
pub fn necessity(kind: &str, op: &str, n_examples: usize, seed: u64) -> Json {
    let model = toy(kind, false)?;
    let data = toy_dataset(&model, examples(n_examples)?, seed).map_err(err)?;
    let op = operator(&model, &data, op, seed)?;
    let flips = flip_profile(&model, &data, &op, seed).map_err(err)?;
    let early = early_stop_report(&model, &data, seed).map_err(err)?;
    serde_json::to_string(&NecessityView {
        flip_rate: flips.per_step,
        ci_low: flips.ci_low,
        ci_high: flips.ci_high,
        solved_fraction: early.curve,
    })
    .map_err(err)
}

#[derive(Serialize)]
struct SuperpositionView {
    teacher_forced: Vec<f64>,
    probe: Vec<f64>,
    prompts: usize,
    excluded: usize,
}

/// Teacher-forced and probe superposition curves of the stochastic
/// readout-gap toy.
#[wasm_bindgen]
pub fn superposition(n_prompts: usize, rollouts: usize, seed: u64) -> Json {
    let model = toy("readout_gap", true)?;
    let data = toy_dataset(&model, examples(n_prompts)?, seed).map_err(err)?;
    let config = SuperpositionConfig {
        rollouts,
        ..SuperpositionConfig::default()
    };
    let r = superposition_analysis(&model, &data, &AnswerTemplate::coconut(), &config, seed).map_err(err)?;
    serde_json::to_string(&SuperpositionView {
        teacher_forced: r.teacher_forced.per_step,
        probe: r.probe.per_step,
        prompts: r.prompts.len(),
        excluded: r.excluded.len(),
    })
    .map_err(err)
}
