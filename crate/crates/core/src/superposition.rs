// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multi-rollout mode analysis: superposition scores from teacher-forced
//! readouts and from per-step linear probes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::readout::{teacher_forced_dist, AnswerTemplate};
use crate::rng::{self, tag};
use crate::scm::{rollout, LatentState, ModelSpec, Trajectory};

pub const DEFAULT_ROLLOUTS: usize = 32;
pub const DEFAULT_MIN_RETAINED: usize = 4;
pub const DEFAULT_L2: f64 = 1e-3;
/// Largest vocabulary accepted without `force_large_vocab`.
pub const MAX_MODE_VOCAB: usize = 26;

const PAIR_TOLERANCE: f64 = 1e-9;

/// `(p_A, p_B)` from two scores by a two-way softmax.
pub fn two_way_softmax(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    (ea / z, eb / z)
}

/// `K` seeded stochastic rollouts of one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSet {
    pub input: Vec<f64>,
    pub rollouts: Vec<Trajectory>,
}

impl RolloutSet {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }
}

pub fn sample_rollouts(model: &ModelSpec, input: &[f64], k: usize, seed: u64) -> Result<RolloutSet> {
    if !model.is_stochastic() {
        return Err(Error::Config("rollout sampling needs a stochastic model".into()));
    }
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 rollouts, got {k}")));
    }
    let rollouts = (0..k)
        .map(|j| rollout(model, input, rng::derive_seed(seed, &[j as u64])))
        .collect::<Result<_>>()?;
    Ok(RolloutSet {
        input: input.to_vec(),
        rollouts,
    })
}

/// The two most frequent answers of a rollout set and who voted for them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePartition {
    pub mode_a: String,
    pub mode_b: String,
    pub members_a: Vec<usize>,
    pub members_b: Vec<usize>,
    pub residual: Vec<usize>,
}

impl ModePartition {
    pub fn retained(&self) -> usize {
        self.members_a.len() + self.members_b.len()
    }

    /// Retained rollout indices in order, each with its label (0 for A).
    pub fn labelled(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .members_a
            .iter()
            .map(|&i| (i, 0))
            .chain(self.members_b.iter().map(|&i| (i, 1)))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Modes are the two most frequent answers, ties broken by vocabulary
/// order; `None` when fewer than two distinct answers occur.
pub fn partition_modes(rs: &RolloutSet) -> Option<ModePartition> {
    let mut counts: Vec<(usize, &str, usize)> = Vec::new();
    for r in &rs.rollouts {
        match counts.iter_mut().find(|c| c.0 == r.answer_index) {
            Some(c) => c.2 += 1,
            None => counts.push((r.answer_index, &r.answer, 1)),
        }
    }
    if counts.len() < 2 {
        return None;
    }
    counts.sort_by(|x, y| y.2.cmp(&x.2).then(x.0.cmp(&y.0)));
    let (a, b) = (counts[0].0, counts[1].0);
    let mut part = ModePartition {
        mode_a: counts[0].1.to_owned(),
        mode_b: counts[1].1.to_owned(),
        members_a: Vec::new(),
        members_b: Vec::new(),
        residual: Vec::new(),
    };
    for (i, r) in rs.rollouts.iter().enumerate() {
        if r.answer_index == a {
            part.members_a.push(i);
        } else if r.answer_index == b {
            part.members_b.push(i);
        } else {
            part.residual.push(i);
        }
    }
    Some(part)
}

/// Teacher-forced `(p_A, p_B)` at readout step `step`, renormalized over the
/// two modes from their summed token log-probabilities.
pub fn mode_probs_teacher_forced(
    model: &ModelSpec,
    states: &[LatentState],
    input: &[f64],
    step: usize,
    mode_a: &str,
    mode_b: &str,
    template: &AnswerTemplate,
) -> Result<(f64, f64)> {
    let sa = teacher_forced_dist(model, states, step, input, mode_a, template)?.log_prob();
    let sb = teacher_forced_dist(model, states, step, input, mode_b, template)?.log_prob();
    Ok(two_way_softmax(sa, sb))
}

/// Linear two-class probe `π_t(h) = softmax(W h + b)` for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepProbe {
    pub step: usize,
    pub weights: Matrix,
    pub bias: [f64; 2],
    pub l2: f64,
    pub train_accuracy: f64,
    pub iterations: usize,
}

impl StepProbe {
    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Logit of mode a minus logit of mode b.
    pub fn margin(&self, h: &[f64]) -> f64 {
        let mut logits = self.bias.to_vec();
        self.weights.mul_add(h, &mut logits);
        logits[0] - logits[1]
    }
}

/// Indices of a class-balanced subset: the majority class is subsampled
/// (seeded) down to the minority count. Output is sorted.
pub fn balance(labels: &[usize], seed: u64) -> Result<Vec<usize>> {
    let mut by_class = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(Error::Data(format!("probe label {l} is not 0 or 1")));
        }
        by_class[l].push(i);
    }
    let keep = by_class[0].len().min(by_class[1].len());
    let mut rng = rng::stream(seed, &[tag::PROBE]);
    let mut out = Vec::with_capacity(2 * keep);
    for class in &by_class {
        if class.len() == keep {
            out.extend_from_slice(class);
        } else {
            let picked = rand::seq::index::sample(&mut rng, class.len(), keep);
            out.extend(picked.iter().map(|j| class[j]));
        }
    }
    out.sort_unstable();
    Ok(out)
}

const MAX_ITERATIONS: usize = 5000;
const GRAD_TOLERANCE: f64 = 1e-9;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fit an ℓ2-regularized logistic probe on a balanced subset of `states`.
///
/// Label 0 is mode A. Optimization is full-batch gradient descent with step
/// `1/L` for the loss's smoothness bound `L`, so the result is a pure
/// function of the inputs and `seed`.
pub fn train_probe(states: &[LatentState], labels: &[usize], step: usize, l2: f64, seed: u64) -> Result<StepProbe> {
    if states.len() != labels.len() {
        return Err(Error::Shape("states and labels differ in length".into()));
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(Error::Config(format!("l2 must be nonnegative, got {l2}")));
    }
    let dim = states.first().map_or(0, LatentState::dim);
    if states.iter().any(|h| h.dim() != dim) {
        return Err(Error::Shape("probe states differ in dimension".into()));
    }
    let idx = balance(labels, seed)?;
    if idx.len() < 4 {
        return Err(Error::Data(format!(
            "probe at step {step} needs at least 2 examples of each mode after balancing"
        )));
    }
    let n = idx.len() as f64;
    let xs: Vec<&[f64]> = idx.iter().map(|&i| states[i].values()).collect();
    // y = 1 for mode A so that sigmoid(z) is p_A.
    let ys: Vec<f64> = idx.iter().map(|&i| if labels[i] == 0 { 1.0 } else { 0.0 }).collect();
    let max_sq = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0).fold(0.0, f64::max);
    let lr = 1.0 / (0.25 * max_sq + l2);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut gw: Vec<f64> = w.iter().map(|wi| l2 * wi).collect();
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let z = b + w.iter().zip(x.iter()).map(|(a, v)| a * v).sum::<f64>();
            let r = (sigmoid(z) - y) / n;
            for (g, v) in gw.iter_mut().zip(x.iter()) {
                *g += r * v;
            }
            gb += r;
        }
        let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g;
        }
        b -= lr * gb;
        if norm < GRAD_TOLERANCE {
            break;
        }
    }
    let mut weights = Matrix::zeros(2, dim);
    for (j, wj) in w.iter().enumerate() {
        weights.set(0, j, wj / 2.0);
        weights.set(1, j, -wj / 2.0);
    }
    let mut probe = StepProbe {
        step,
        weights,
        bias: [b / 2.0, -b / 2.0],
        l2,
        train_accuracy: 0.0,
        iterations,
    };
    let train_states: Vec<&LatentState> = idx.iter().map(|&i| &states[i]).collect();
    let train_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    probe.train_accuracy = accuracy_of(&probe, &train_states, &train_labels)?;
    Ok(probe)
}

fn accuracy_of(probe: &StepProbe, states: &[&LatentState], labels: &[usize]) -> Result<f64> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (h, &l) in states.iter().zip(labels) {
        let (pa, _) = probe_mode_probs(probe, h)?;
        let predicted = if pa >= 0.5 { 0 } else { 1 };
        hits += usize::from(predicted == l);
    }
    Ok(hits as f64 / states.len() as f64)
}

/// Fraction of `states` whose arg-max probe class equals the label.
pub fn probe_accuracy(probe: &StepProbe, states: &[LatentState], labels: &[usize]) -> Result<f64> {
    let refs: Vec<&LatentState> = states.iter().collect();
    accuracy_of(probe, &refs, labels)
}

/// `(ŝ_A, ŝ_B)` for one state.
pub fn probe_mode_probs(probe: &StepProbe, state: &LatentState) -> Result<(f64, f64)> {
    if state.dim() != probe.dim() {
        return Err(Error::Shape(format!(
            "probe expects dimension {} but the state has {}",
            probe.dim(),
            state.dim()
        )));
    }
    let mut logits = probe.bias.to_vec();
    probe.weights.mul_add(state.values(), &mut logits);
    Ok(two_way_softmax(logits[0], logits[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    TeacherForced,
    Probe,
}

impl std::fmt::Display for ReadoutKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TeacherForced => "teacher_forced",
            Self::Probe => "probe",
        })
    }
}

/// `SS(t) = min(p_A(t), p_B(t))` for each step.
pub fn superposition_curve(probs_per_step: &[(f64, f64)]) -> Result<Vec<f64>> {
    probs_per_step
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let ok = a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0 && (a + b - 1.0).abs() <= PAIR_TOLERANCE;
            if ok {
                Ok(a.min(b))
            } else {
                Err(Error::Shape(format!("step {}: ({a}, {b}) is not a distribution", i + 1)))
            }
        })
        .collect()
}

/// Mean superposition score per step over prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpositionCurve {
    pub per_step: Vec<f64>,
    pub readout_kind: ReadoutKind,
    /// Prompts averaged at each step.
    pub n: usize,
}

impl SuperpositionCurve {
    pub fn mean(&self) -> f64 {
        self.per_step.iter().sum::<f64>() / self.per_step.len() as f64
    }
}

/// Elementwise mean of per-prompt curves.
pub fn mean_curve(curves: &[Vec<f64>], readout_kind: ReadoutKind) -> Result<SuperpositionCurve> {
    let len = curves.first().map(Vec::len).ok_or_else(|| Error::Data("no curves to aggregate".into()))?;
    if curves.iter().any(|c| c.len() != len) {
        return Err(Error::Shape("curves differ in length".into()));
    }
    let n = curves.len() as f64;
    let per_step = (0..len).map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / n).collect();
    Ok(SuperpositionCurve {
        per_step,
        readout_kind,
        n: curves.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperpositionConfig {
    pub rollouts: usize,
    pub min_retained: usize,
    pub l2: f64,
    pub force_large_vocab: bool,
}

impl Default for SuperpositionConfig {
    fn default() -> Self {
        Self {
            rollouts: DEFAULT_ROLLOUTS,
            min_retained: DEFAULT_MIN_RETAINED,
            l2: DEFAULT_L2,
            force_large_vocab: false,
        }
    }
}

/// A prompt that survived mode filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalPrompt {
    pub example: usize,
    pub rollouts: RolloutSet,
    pub partition: ModePartition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub id: String,
    pub mode_a: String,
    pub mode_b: String,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpositionReport {
    pub teacher_forced: SuperpositionCurve,
    pub probe: SuperpositionCurve,
    pub probes: Vec<StepProbe>,
    pub prompts: Vec<PromptSummary>,
    pub excluded: Vec<String>,
}

/// Seed of the rollout set for prompt `example`.
pub fn prompt_seed(master: u64, example: usize) -> u64 {
    rng::derive_seed(master, &[tag::ROLLOUT, example as u64])
}

/// Sample, filter and partition every prompt.
pub fn collect_modal_prompts(
    model: &ModelSpec,
    dataset: &[Example],
    config: &SuperpositionConfig,
    seed: u64,
) -> Result<(Vec<ModalPrompt>, Vec<usize>)> {
    if model.vocab().len() > MAX_MODE_VOCAB && !config.force_large_vocab {
        return Err(Error::Config(format!(
            "vocabulary of {} symbols is too open-ended for two-mode analysis (limit {MAX_MODE_VOCAB}); force to override",
            model.vocab().len()
        )));
    }
    if !model.is_stochastic() {
        return Err(Error::Config("superposition analysis needs a stochastic model".into()));
    }
    if config.rollouts < 2 {
        return Err(Error::Argument(format!("need at least 2 rollouts per prompt, got {}", config.rollouts)));
    }
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let sampled: Vec<RolloutSet> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, ex)| sample_rollouts(model, &ex.input, config.rollouts, prompt_seed(seed, i)))
        .collect::<Result<_>>()?;
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (i, rs) in sampled.into_iter().enumerate() {
        match partition_modes(&rs) {
            Some(p) if p.retained() >= config.min_retained => kept.push(ModalPrompt {
                example: i,
                rollouts: rs,
                partition: p,
            }),
            _ => excluded.push(i),
        }
    }
    Ok((kept, excluded))
}

/// Probe labels follow vocabulary order of the two modes so that one probe
/// per step can pool prompts.
fn canonical_label(model: &ModelSpec, part: &ModePartition, answer: &str) -> usize {
    let ia = model.symbol_index(&part.mode_a);
    let ib = model.symbol_index(&part.mode_b);
    let first = if ia <= ib { &part.mode_a } else { &part.mode_b };
    usize::from(answer != first)
}

/// Teacher-forced and probe superposition curves over `dataset`.
pub fn superposition_analysis(
    model: &ModelSpec,
    dataset: &[Example],
    template: &AnswerTemplate,
    config: &SuperpositionConfig,
    seed: u64,
) -> Result<SuperpositionReport> {
    let (kept, excluded) = collect_modal_prompts(model, dataset, config, seed)?;
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no prompt produced two modes with at least {} retained rollouts",
            config.min_retained
        )));
    }
    let budget = model.budget();

    let tf_curves: Vec<Vec<f64>> = kept
        .par_iter()
        .map(|p| {
            let retained = p.partition.labelled();
            let mut sums = vec![0.0; budget];
            for &(r, _) in &retained {
                let tr = &p.rollouts.rollouts[r];
                let pairs: Vec<(f64, f64)> = (1..=budget)
                    .map(|t| {
                        mode_probs_teacher_forced(model, &tr.states, &tr.input, t, &p.partition.mode_a, &p.partition.mode_b, template)
                    })
                    .collect::<Result<_>>()?;
                for (s, v) in sums.iter_mut().zip(superposition_curve(&pairs)?) {
                    *s += v;
                }
            }
            Ok(sums.into_iter().map(|s| s / retained.len() as f64).collect())
        })
        .collect::<Result<_>>()?;

    let probes: Vec<StepProbe> = (1..=budget)
        .into_par_iter()
        .map(|t| {
            let mut states = Vec::new();
            let mut labels = Vec::new();
            for p in &kept {
                for (r, _) in p.partition.labelled() {
                    let tr = &p.rollouts.rollouts[r];
                    states.push(tr.states[t - 1].clone());
                    labels.push(canonical_label(model, &p.partition, &tr.answer));
                }
            }
            train_probe(&states, &labels, t, config.l2, rng::derive_seed(seed, &[tag::PROBE, t as u64]))
        })
        .collect::<Result<_>>()?;

    let probe_curves: Vec<Vec<f64>> = kept
        .iter()
        .map(|p| {
            let retained = p.partition.labelled();
            let mut sums = vec![0.0; budget];
            for &(r, _) in &retained {
                let tr = &p.rollouts.rollouts[r];
                let pairs: Vec<(f64, f64)> = probes
                    .iter()
                    .map(|probe| probe_mode_probs(probe, &tr.states[probe.step - 1]))
                    .collect::<Result<_>>()?;
                for (s, v) in sums.iter_mut().zip(superposition_curve(&pairs)?) {
                    *s += v;
                }
            }
            Ok(sums.into_iter().map(|s| s / retained.len() as f64).collect())
        })
        .collect::<Result<_>>()?;

    Ok(SuperpositionReport {
        teacher_forced: mean_curve(&tf_curves, ReadoutKind::TeacherForced)?,
        probe: mean_curve(&probe_curves, ReadoutKind::Probe)?,
        probes,
        prompts: kept
            .iter()
            .map(|p| PromptSummary {
                id: dataset[p.example].id.clone(),
                mode_a: p.partition.mode_a.clone(),
                mode_b: p.partition.mode_b.clone(),
                retained: p.partition.retained(),
            })
            .collect(),
        excluded: excluded.into_iter().map(|i| dataset[i].id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toys::{make_toy, toy_dataset, ToyKind, ToyParams};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn stochastic(kind: ToyKind, params: ToyParams) -> ModelSpec {
        let p = ToyParams {
            stochastic: true,
            ..params
        };
        make_toy(kind, 4, 6, 0, &p).unwrap()
    }

    fn fake_set(answers: &[(usize, &str)]) -> RolloutSet {
        let m = make_toy(ToyKind::Chain, 4, 6, 0, &ToyParams::default()).unwrap();
        let base = rollout(&m, &[1.0], 0).unwrap();
        RolloutSet {
            input: vec![1.0],
            rollouts: answers
                .iter()
                .map(|&(i, a)| Trajectory {
                    answer: a.to_owned(),
                    answer_index: i,
                    ..base.clone()
                })
                .collect(),
        }
    }

    fn clusters(n: usize, seed: u64) -> (Vec<LatentState>, Vec<usize>) {
        let mut rng = rng::stream(seed, &[]);
        let mut states = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n {
            let label = i % 2;
            let c = if label == 0 { 3.0 } else { -3.0 };
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            states.push(LatentState::new(vec![c + 0.1 * x, c + 0.1 * y]).unwrap());
            labels.push(label);
        }
        (states, labels)
    }

    #[test]
    fn two_way_softmax_closed_form() {
        assert_eq!(two_way_softmax(1.3, 1.3), (0.5, 0.5));
        let (a, b) = two_way_softmax(9f64.ln(), 0.0);
        assert!((a - 0.9).abs() < 1e-12 && (b - 0.1).abs() < 1e-12);
    }

    #[test]
    fn partition_examples() {
        let mut answers = vec![(0, "A"); 5];
        answers.extend([(1, "B"); 3]);
        answers.push((2, "C"));
        let p = partition_modes(&fake_set(&answers)).unwrap();
        assert_eq!((p.mode_a.as_str(), p.mode_b.as_str()), ("A", "B"));
        assert_eq!(p.retained(), 8);
        assert_eq!(p.residual, vec![8]);

        assert!(partition_modes(&fake_set(&[(0, "A"); 4])).is_none());

        let p = partition_modes(&fake_set(&[(1, "B"), (0, "A"), (1, "B"), (0, "A")])).unwrap();
        assert_eq!((p.mode_a.as_str(), p.mode_b.as_str()), ("A", "B"));
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = stochastic(ToyKind::ReadoutGap, ToyParams::default());
        let a = sample_rollouts(&m, &[0.1], 8, 3).unwrap();
        let b = sample_rollouts(&m, &[0.1], 8, 3).unwrap();
        assert_eq!(a, b);
        let det = make_toy(ToyKind::ReadoutGap, 4, 6, 0, &ToyParams::default()).unwrap();
        assert!(matches!(sample_rollouts(&det, &[0.1], 8, 3), Err(Error::Config(_))));
        assert!(sample_rollouts(&m, &[0.1], 1, 3).is_err());
    }

    #[test]
    fn commit_toy_rollouts_agree() {
        let m = stochastic(
            ToyKind::Commit,
            ToyParams {
                noise_scale: Some(1e-6),
                temperature: 0.01,
                ..ToyParams::default()
            },
        );
        let rs = sample_rollouts(&m, &[0.9], 32, 1).unwrap();
        assert!(rs.rollouts.iter().all(|r| r.answer == rs.rollouts[0].answer));
    }

    #[test]
    fn fifty_fifty_toy_shows_both_modes() {
        let m = stochastic(
            ToyKind::ReadoutGap,
            ToyParams {
                mode_gain: 0.0,
                ..ToyParams::default()
            },
        );
        let rs = sample_rollouts(&m, &[0.0], 400, 5).unwrap();
        let p = partition_modes(&rs).unwrap();
        assert!(!p.members_a.is_empty() && !p.members_b.is_empty());
    }

    #[test]
    fn balancing_counts() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 80)).collect();
        let idx = balance(&labels, 1).unwrap();
        assert_eq!(idx.len(), 40);
        assert_eq!(idx.iter().filter(|&&i| labels[i] == 0).count(), 20);
        assert_eq!(balance(&labels, 1).unwrap(), idx);
        assert!(balance(&[0, 2], 1).is_err());
    }

    #[test]
    fn separable_clusters() {
        let (states, labels) = clusters(50, 2);
        let p = train_probe(&states, &labels, 1, DEFAULT_L2, 0).unwrap();
        assert_eq!(p.train_accuracy, 1.0);
        let (held, held_labels) = clusters(50, 99);
        assert_eq!(probe_accuracy(&p, &held, &held_labels).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_labels_near_chance() {
        let mut rng = rng::stream(7, &[]);
        let states: Vec<LatentState> = (0..200)
            .map(|_| LatentState::new(vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).unwrap())
            .collect();
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let p = train_probe(&states, &labels, 1, 0.1, 0).unwrap();
        assert!((0.35..=0.65).contains(&p.train_accuracy), "{}", p.train_accuracy);
    }

    #[test]
    fn single_class_rejected() {
        let (states, _) = clusters(5, 2);
        assert!(matches!(train_probe(&states, &[0; 10], 1, 0.1, 0), Err(Error::Data(_))));
    }

    #[test]
    fn probe_probability_cases() {
        let zero = StepProbe {
            step: 1,
            weights: Matrix::zeros(2, 3),
            bias: [0.0, 0.0],
            l2: 0.0,
            train_accuracy: 0.0,
            iterations: 0,
        };
        let h = LatentState::new(vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(probe_mode_probs(&zero, &h).unwrap(), (0.5, 0.5));
        assert!(probe_mode_probs(&zero, &LatentState::zeros(2)).is_err());
        let mut p = zero.clone();
        p.weights.set(0, 0, 1.0);
        p.weights.set(1, 0, -1.0);
        let on_boundary = LatentState::new(vec![0.0, 5.0, 5.0]).unwrap();
        assert_eq!(probe_mode_probs(&p, &on_boundary).unwrap(), (0.5, 0.5));
        let (a, _) = probe_mode_probs(&p, &h).unwrap();
        assert!((a - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        assert!(p.margin(h.values()) > 0.0);
    }

    #[test]
    fn curve_cases() {
        assert_eq!(superposition_curve(&[(0.5, 0.5), (0.9, 0.1), (1.0, 0.0)]).unwrap(), vec![0.5, 0.1, 0.0]);
        assert!(matches!(superposition_curve(&[(0.5, 0.6)]), Err(Error::Shape(_))));
    }

    #[test]
    fn commit_teacher_forced_mode_after_commit() {
        let m = make_toy(ToyKind::Commit, 4, 6, 0, &ToyParams::default()).unwrap();
        let t = AnswerTemplate::coconut();
        for ex in toy_dataset(&m, 10, 0).unwrap() {
            let tr = rollout(&m, &ex.input, 0).unwrap();
            let other = if ex.gold == "A" { "B" } else { "A" };
            for s in 2..=6 {
                let (pa, _) = mode_probs_teacher_forced(&m, &tr.states, &tr.input, s, &ex.gold, other, &t).unwrap();
                assert!(pa > 0.5);
            }
        }
    }

    #[test]
    fn pipeline_rejects_bad_configs() {
        let det = make_toy(ToyKind::ReadoutGap, 4, 6, 0, &ToyParams::default()).unwrap();
        let data = toy_dataset(&det, 4, 0).unwrap();
        let t = AnswerTemplate::coconut();
        let cfg = SuperpositionConfig::default();
        assert!(matches!(superposition_analysis(&det, &data, &t, &cfg, 0), Err(Error::Config(_))));
        let m = stochastic(ToyKind::ReadoutGap, ToyParams::default());
        let one = SuperpositionConfig {
            rollouts: 1,
            ..cfg
        };
        assert!(superposition_analysis(&m, &data, &t, &one, 0).is_err());
    }

    #[test]
    fn readout_gap_signature() {
        let m = stochastic(ToyKind::ReadoutGap, ToyParams::default());
        let data = toy_dataset(&m, 40, 0).unwrap();
        let r = superposition_analysis(&m, &data, &AnswerTemplate::coconut(), &SuperpositionConfig::default(), 0).unwrap();
        let tf = &r.teacher_forced.per_step;
        let pr = &r.probe.per_step;
        for t in 0..5 {
            assert!(pr[t] - tf[t] >= 0.1, "t={} probe={pr:?} tf={tf:?}", t + 1);
        }
        assert!(pr[4] - pr[5] >= 0.1, "probe={pr:?}");
        assert!(pr.iter().chain(tf).all(|v| (0.0..=0.5).contains(v)));
    }
}
