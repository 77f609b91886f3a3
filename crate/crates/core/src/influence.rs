// SPDX-License-Identifier: MIT OR Apache-2.0

//! Step-to-step influence matrices, structure metrics and principal graphs.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::intervention::{baseline_rollouts, do_rollout, operator_seed, InterventionOp};
use crate::readout::{teacher_forced_dist, token_averaged_kl, AnswerTemplate, TeacherForcedScore};
use crate::scm::{ModelSpec, Trajectory};

/// `ε` in `W̄ = W / (ΣW + ε)`.
pub const DEFAULT_EPSILON: f64 = 1e-12;
/// Sparsification threshold as a fraction of `max W`.
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_LOCALITY_K: usize = 1;
pub const DEFAULT_M_EARLY: usize = 2;
pub const DEFAULT_M_LATE: usize = 5;

/// Row-major `T × T` buffer; only `t < s` cells carry data.
fn idx(size: usize, t: usize, s: usize) -> usize {
    (t - 1) * size + (s - 1)
}

fn pairs(size: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..=size).flat_map(move |t| (t + 1..=size).map(move |s| (t, s)))
}

/// `W_{t,s}`: mean token-averaged KL at readout step `s` caused by an
/// intervention at step `t`, for `t < s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    size: usize,
    entries: Vec<f64>,
    n_examples: usize,
}

impl InfluenceMatrix {
    pub fn from_entries(size: usize, entries: Vec<f64>, n_examples: usize) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::Shape(format!(
                "influence matrix of size {size} needs {} entries, got {}",
                size * size,
                entries.len()
            )));
        }
        for t in 1..=size {
            for s in 1..=size {
                let v = entries[idx(size, t, s)];
                if t >= s && v != 0.0 {
                    return Err(Error::Shape(format!("entry ({t}, {s}) outside the strict upper triangle")));
                }
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Range(format!("entry ({t}, {s}) = {v} is not a nonnegative real")));
                }
            }
        }
        Ok(Self {
            size,
            entries,
            n_examples,
        })
    }

    /// Build from `(t, s, w)` triples; unlisted pairs are zero.
    pub fn from_triples(size: usize, triples: &[(usize, usize, f64)], n_examples: usize) -> Result<Self> {
        let mut entries = vec![0.0; size * size];
        for &(t, s, w) in triples {
            if t == 0 || t >= s || s > size {
                return Err(Error::Range(format!("pair ({t}, {s}) is not t < s within 1..={size}")));
            }
            entries[idx(size, t, s)] = w;
        }
        Self::from_entries(size, entries, n_examples)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    /// `W_{t,s}`, zero off the strict upper triangle.
    pub fn get(&self, t: usize, s: usize) -> f64 {
        if t == 0 || t >= s || s > self.size {
            0.0
        } else {
            self.entries[idx(self.size, t, s)]
        }
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        pairs(self.size).map(|(t, s)| (t, s, self.get(t, s)))
    }

    pub fn total(&self) -> f64 {
        self.pairs().map(|(_, _, w)| w).sum()
    }

    pub fn max(&self) -> f64 {
        self.pairs().map(|(_, _, w)| w).fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_entries(self.size, self.entries.iter().map(|w| w * c).collect(), self.n_examples)
    }
}

/// Sums per-example KL cells in a fixed order and averages them.
#[derive(Clone, Debug)]
pub struct InfluenceAccumulator {
    size: usize,
    sums: Vec<f64>,
    n: usize,
}

impl InfluenceAccumulator {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            sums: vec![0.0; size * size],
            n: 0,
        }
    }

    /// Add one example's `T × T` cell buffer.
    pub fn add(&mut self, cells: &[f64]) -> Result<()> {
        if cells.len() != self.sums.len() {
            return Err(Error::Shape("per-example influence cells have the wrong size".into()));
        }
        for (acc, c) in self.sums.iter_mut().zip(cells) {
            *acc += c;
        }
        self.n += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<InfluenceMatrix> {
        if self.n == 0 {
            return Err(Error::Data("no examples contributed to the influence matrix".into()));
        }
        let n = self.n as f64;
        InfluenceMatrix::from_entries(self.size, self.sums.into_iter().map(|v| v / n).collect(), self.n)
    }
}

/// Per-example `KL_{t→s}` cells, computed from scores already in hand.
///
/// `baseline[s − 1]` is the baseline score at readout step `s`, and
/// `intervened(t, s)` yields the score at `s` after intervening at `t`.
pub fn example_cells<F>(size: usize, baseline: &[TeacherForcedScore], mut intervened: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, usize) -> Result<TeacherForcedScore>,
{
    if baseline.len() != size {
        return Err(Error::Shape(format!(
            "{} baseline scores for {size} readout steps",
            baseline.len()
        )));
    }
    let mut cells = vec![0.0; size * size];
    for (t, s) in pairs(size) {
        let q = intervened(t, s)?;
        cells[idx(size, t, s)] = token_averaged_kl(&baseline[s - 1], &q)?;
    }
    Ok(cells)
}

/// Native per-example cells: teacher-forced scores of `gold` on the
/// baseline and on each `do(h_t)` rollout.
pub fn native_example_cells(
    model: &ModelSpec,
    base: &Trajectory,
    gold: &str,
    example: usize,
    op: &InterventionOp,
    template: &AnswerTemplate,
    seed: u64,
) -> Result<Vec<f64>> {
    let size = model.budget();
    let baseline: Vec<TeacherForcedScore> = (1..=size)
        .map(|s| teacher_forced_dist(model, &base.states, s, &base.input, gold, template))
        .collect::<Result<_>>()?;
    let mut counterfactual = Vec::with_capacity(size);
    for t in 1..size {
        counterfactual.push(do_rollout(model, base, t, op, operator_seed(seed, example, t, op.kind()))?);
    }
    example_cells(size, &baseline, |t, s| {
        teacher_forced_dist(model, &counterfactual[t - 1].states, s, &base.input, gold, template)
    })
}

/// Estimate `W` over `dataset`; `correct_only` keeps examples whose baseline
/// answer equals gold.
pub fn influence_matrix(
    model: &ModelSpec,
    dataset: &[Example],
    op: &InterventionOp,
    template: &AnswerTemplate,
    seed: u64,
    correct_only: bool,
) -> Result<InfluenceMatrix> {
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let baselines = baseline_rollouts(model, dataset, seed)?;
    let cells: Vec<Option<Vec<f64>>> = dataset
        .par_iter()
        .zip(&baselines)
        .enumerate()
        .map(|(i, (ex, base))| {
            if correct_only && base.answer != ex.gold {
                return Ok(None);
            }
            native_example_cells(model, base, &ex.gold, i, op, template, seed).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut acc = InfluenceAccumulator::new(model.budget());
    for c in cells.iter().flatten() {
        acc.add(c)?;
    }
    acc.finish()
}

/// `W̄ = W / (Σ_{t<s} W + ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedInfluence {
    size: usize,
    entries: Vec<f64>,
    pub epsilon: f64,
    /// Set when `W` carries no mass.
    pub degenerate: bool,
}

impl NormalizedInfluence {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, t: usize, s: usize) -> f64 {
        if t == 0 || t >= s || s > self.size {
            0.0
        } else {
            self.entries[idx(self.size, t, s)]
        }
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        pairs(self.size).map(|(t, s)| (t, s, self.get(t, s)))
    }

    pub fn total(&self) -> f64 {
        self.pairs().map(|(_, _, w)| w).sum()
    }
}

pub fn normalize_influence(w: &InfluenceMatrix) -> NormalizedInfluence {
    normalize_influence_with(w, DEFAULT_EPSILON)
}

pub fn normalize_influence_with(w: &InfluenceMatrix, epsilon: f64) -> NormalizedInfluence {
    let total = w.total();
    let denom = total + epsilon;
    NormalizedInfluence {
        size: w.size,
        entries: w.entries.iter().map(|v| if total > 0.0 { v / denom } else { 0.0 }).collect(),
        epsilon,
        degenerate: total <= 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub locality: f64,
    pub span: f64,
    pub early_out: f64,
    pub late_in: f64,
    pub k: usize,
    pub m_early: usize,
    pub m_late: usize,
    pub degenerate: bool,
}

/// Locality, span, early-out and late-in of a normalized matrix.
pub fn structure_metrics(wbar: &NormalizedInfluence, k: usize, m_early: usize, m_late: usize) -> StructureSummary {
    let mut summary = StructureSummary {
        locality: 0.0,
        span: 0.0,
        early_out: 0.0,
        late_in: 0.0,
        k,
        m_early,
        m_late,
        degenerate: wbar.degenerate,
    };
    if wbar.degenerate {
        return summary;
    }
    for (t, s, w) in wbar.pairs() {
        let hop = s - t;
        if hop <= k {
            summary.locality += w;
        }
        summary.span += hop as f64 * w;
        if t <= m_early {
            summary.early_out += w;
        }
        if s >= m_late {
            summary.late_in += w;
        }
    }
    summary
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Thresholded top-1-outgoing sparsification of `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalGraph {
    pub steps: usize,
    pub alpha: f64,
    pub edges: Vec<Edge>,
}

impl PrincipalGraph {
    /// `(from, to)` pairs, ignoring weights.
    pub fn topology(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.from, e.to)).collect()
    }

    pub fn is_path(&self) -> bool {
        self.topology() == (1..self.steps).map(|t| (t, t + 1)).collect::<Vec<_>>()
    }
}

/// Drop entries below `α·max W`, then keep each node's strongest surviving
/// outgoing edge (smallest target on ties). Weights stay raw.
pub fn sparsify(w: &InfluenceMatrix, alpha: f64) -> Result<PrincipalGraph> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let max = w.max();
    let mut edges = Vec::new();
    if max > 0.0 {
        let threshold = alpha * max;
        for t in 1..w.size {
            let mut best: Option<Edge> = None;
            for s in t + 1..=w.size {
                let v = w.get(t, s);
                if v <= 0.0 || v < threshold {
                    continue;
                }
                if best.is_none_or(|b| v > b.weight) {
                    best = Some(Edge {
                        from: t,
                        to: s,
                        weight: v,
                    });
                }
            }
            edges.extend(best);
        }
    }
    Ok(PrincipalGraph {
        steps: w.size,
        alpha,
        edges,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Self::Dot),
            "json" => Ok(Self::Json),
            other => Err(Error::Argument(format!("unknown graph format {other:?}"))),
        }
    }
}

const MIN_PEN: f64 = 1.0;
const MAX_PEN: f64 = 6.0;

pub fn export_graph(g: &PrincipalGraph, format: GraphFormat) -> Result<String> {
    match format {
        GraphFormat::Json => Ok(serde_json::to_string_pretty(g)? + "\n"),
        GraphFormat::Dot => Ok(to_dot(g)),
    }
}

fn to_dot(g: &PrincipalGraph) -> String {
    let mut out = String::new();
    let max = g.edges.iter().map(|e| e.weight).fold(0.0, f64::max);
    out.push_str("digraph influence {\n");
    let _ = writeln!(out, "  graph [rankdir=LR, steps=\"{}\", alpha=\"{}\"];", g.steps, g.alpha);
    out.push_str("  node [shape=circle];\n");
    for t in 1..=g.steps {
        let _ = writeln!(out, "  {t};");
    }
    for e in &g.edges {
        let pen = if max > 0.0 {
            MIN_PEN + (MAX_PEN - MIN_PEN) * e.weight / max
        } else {
            MIN_PEN
        };
        let _ = writeln!(
            out,
            "  {} -> {} [weight=\"{}\", penwidth=\"{pen:.3}\"];",
            e.from, e.to, e.weight
        );
    }
    out.push_str("}\n");
    out
}

pub fn parse_graph_json(text: &str) -> Result<PrincipalGraph> {
    Ok(serde_json::from_str(text)?)
}

fn attr<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    let start = text.find(&format!("{key}=\""))? + key.len() + 2;
    let len = text[start..].find('"')?;
    Some(&text[start..start + len])
}

fn dot_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Read back a graph written by [`export_graph`] in DOT form.
pub fn parse_graph_dot(text: &str) -> Result<PrincipalGraph> {
    let mut steps = None;
    let mut alpha = None;
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let no = i + 1;
        if line.starts_with("graph [") {
            steps = Some(
                attr(line, "steps")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| dot_error(no, "missing steps attribute"))?,
            );
            alpha = Some(
                attr(line, "alpha")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| dot_error(no, "missing alpha attribute"))?,
            );
        } else if let Some((lhs, rest)) = line.split_once("->") {
            let from = lhs.trim().parse::<usize>().map_err(|e| dot_error(no, e.to_string()))?;
            let to_str = rest.trim_start().split(|c: char| !c.is_ascii_digit()).next().unwrap_or("");
            let to = to_str.parse::<usize>().map_err(|e| dot_error(no, e.to_string()))?;
            let weight = attr(rest, "weight")
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| dot_error(no, "edge without weight"))?;
            edges.push(Edge { from, to, weight });
        }
    }
    Ok(PrincipalGraph {
        steps: steps.ok_or_else(|| dot_error(0, "no graph attribute line"))?,
        alpha: alpha.unwrap_or(DEFAULT_ALPHA),
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toys::{make_toy, toy_dataset, ToyKind, ToyParams};

    fn uniform(size: usize) -> InfluenceMatrix {
        let triples: Vec<_> = pairs(size).map(|(t, s)| (t, s, 1.0)).collect();
        InfluenceMatrix::from_triples(size, &triples, 1).unwrap()
    }

    fn chain_matrix(size: usize) -> InfluenceMatrix {
        let triples: Vec<_> = (1..size).map(|t| (t, t + 1, 0.5 + t as f64)).collect();
        InfluenceMatrix::from_triples(size, &triples, 1).unwrap()
    }

    #[test]
    fn matrix_validation() {
        assert!(InfluenceMatrix::from_entries(2, vec![0.0; 3], 1).is_err());
        assert!(InfluenceMatrix::from_entries(2, vec![0.0, 1.0, 1.0, 0.0], 1).is_err());
        assert!(InfluenceMatrix::from_entries(2, vec![0.0, -1.0, 0.0, 0.0], 1).is_err());
        assert!(InfluenceMatrix::from_triples(3, &[(2, 2, 1.0)], 1).is_err());
    }

    #[test]
    fn normalization_examples() {
        let w = InfluenceMatrix::from_triples(4, &[(1, 3, 5.0)], 1).unwrap();
        let n = normalize_influence(&w);
        assert!((n.get(1, 3) - 1.0).abs() < 1e-12);
        let n = normalize_influence(&uniform(3));
        for (_, _, v) in n.pairs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let zero = InfluenceMatrix::from_triples(4, &[], 1).unwrap();
        let n = normalize_influence(&zero);
        assert!(n.degenerate);
        assert_eq!(n.total(), 0.0);
    }

    #[test]
    fn metrics_hand_cases() {
        let m = structure_metrics(&normalize_influence(&uniform(3)), 1, 2, 2);
        assert!((m.locality - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.span - 4.0 / 3.0).abs() < 1e-12);
        assert!((m.early_out - 1.0).abs() < 1e-12);
        assert!((m.late_in - 1.0).abs() < 1e-12);

        let chain = structure_metrics(&normalize_influence(&chain_matrix(6)), 1, 2, 5);
        assert!((chain.locality - 1.0).abs() < 1e-12);
        assert!((chain.span - 1.0).abs() < 1e-12);

        let edge = InfluenceMatrix::from_triples(6, &[(1, 6, 2.0)], 1).unwrap();
        let e = structure_metrics(&normalize_influence(&edge), 1, 2, 5);
        assert_eq!(e.locality, 0.0);
        assert!((e.span - 5.0).abs() < 1e-11);
        assert!((e.early_out - 1.0).abs() < 1e-12);
        assert!((e.late_in - 1.0).abs() < 1e-12);

        let degenerate = structure_metrics(&normalize_influence(&InfluenceMatrix::from_triples(6, &[], 1).unwrap()), 1, 2, 5);
        assert!(degenerate.degenerate);
        assert_eq!(degenerate.span, 0.0);
    }

    #[test]
    fn sparsify_examples() {
        let w = InfluenceMatrix::from_triples(4, &[(1, 2, 0.9), (1, 3, 0.05), (1, 4, 0.5)], 1).unwrap();
        let g = sparsify(&w, 0.1).unwrap();
        assert_eq!(g.topology(), vec![(1, 2)]);
        assert_eq!(g.edges[0].weight, 0.9);
        assert!(sparsify(&chain_matrix(6), 0.1).unwrap().is_path());
        assert!(sparsify(&InfluenceMatrix::from_triples(6, &[], 1).unwrap(), 0.1).unwrap().edges.is_empty());
        let one = sparsify(&w, 1.0).unwrap();
        assert_eq!(one.topology(), vec![(1, 2)]);
        assert!(sparsify(&w, 1.5).is_err());
    }

    #[test]
    fn sparsify_threshold_before_top1() {
        let w = InfluenceMatrix::from_triples(3, &[(1, 2, 1.0), (2, 3, 0.05)], 1).unwrap();
        assert_eq!(sparsify(&w, 0.1).unwrap().topology(), vec![(1, 2)]);
    }

    #[test]
    fn sparsify_tie_prefers_smaller_target() {
        let w = InfluenceMatrix::from_triples(4, &[(1, 3, 1.0), (1, 4, 1.0)], 1).unwrap();
        assert_eq!(sparsify(&w, 0.1).unwrap().topology(), vec![(1, 3)]);
    }

    #[test]
    fn graph_round_trips() {
        let g = sparsify(&chain_matrix(6), 0.1).unwrap();
        let json = export_graph(&g, GraphFormat::Json).unwrap();
        assert_eq!(parse_graph_json(&json).unwrap(), g);
        let dot = export_graph(&g, GraphFormat::Dot).unwrap();
        assert_eq!(parse_graph_dot(&dot).unwrap(), g);
        assert_eq!(dot.matches("->").count(), 5);
        let empty = PrincipalGraph {
            steps: 3,
            alpha: 0.1,
            edges: vec![],
        };
        let dot = export_graph(&empty, GraphFormat::Dot).unwrap();
        assert!(!dot.contains("->"));
        assert_eq!(parse_graph_dot(&dot).unwrap(), empty);
        assert!("svg".parse::<GraphFormat>().is_err());
    }

    #[test]
    fn identity_gives_zero_matrix() {
        let m = make_toy(ToyKind::Chain, 4, 6, 0, &ToyParams::default()).unwrap();
        let data = toy_dataset(&m, 5, 0).unwrap();
        let w = influence_matrix(&m, &data, &InterventionOp::identity(), &AnswerTemplate::coconut(), 0, false).unwrap();
        assert_eq!(w.total(), 0.0);
        assert_eq!(w.n_examples(), 5);
    }

    #[test]
    fn chain_adjacent_dominance() {
        let m = make_toy(ToyKind::Chain, 4, 6, 0, &ToyParams::default()).unwrap();
        let data = toy_dataset(&m, 30, 0).unwrap();
        let w = influence_matrix(&m, &data, &InterventionOp::zero(), &AnswerTemplate::coconut(), 0, false).unwrap();
        for t in 1..6 {
            let best = (t + 1..=6).max_by(|&a, &b| w.get(t, a).total_cmp(&w.get(t, b)).then(b.cmp(&a))).unwrap();
            assert_eq!(best, t + 1, "row {t}");
        }
        assert!(sparsify(&w, DEFAULT_ALPHA).unwrap().is_path());
    }

    #[test]
    fn skip_source_to_sink_dominates() {
        let m = make_toy(ToyKind::Skip, 4, 6, 0, &ToyParams::default()).unwrap();
        let data = toy_dataset(&m, 30, 0).unwrap();
        let w = influence_matrix(&m, &data, &InterventionOp::zero(), &AnswerTemplate::coconut(), 0, false).unwrap();
        let max = w.max();
        assert_eq!(w.get(1, 6), max);
        let s = structure_metrics(&normalize_influence(&w), 1, 2, 5);
        assert!(s.locality <= 0.4 && s.span >= 3.0, "{s:?}");
    }

    #[test]
    fn correct_only_filters() {
        let m = make_toy(ToyKind::Chain, 4, 6, 0, &ToyParams::default()).unwrap();
        let mut data = toy_dataset(&m, 6, 0).unwrap();
        for ex in &mut data {
            ex.gold = "F".into();
        }
        let r = influence_matrix(&m, &data, &InterventionOp::zero(), &AnswerTemplate::coconut(), 0, true);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
