// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace files: newline-delimited JSON records of latent trajectories and
//! their teacher-forced readouts, written by exporters and read back for
//! analysis.

pub mod exchange;
pub mod hexfloat;
pub mod plan;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::{support_of, StepDistribution};
use crate::error::{Error, Result};
use crate::intervention::OpDescriptor;
use crate::readout::TeacherForcedScore;
use crate::scm::Paradigm;

pub use exchange::{
    export_baseline, execute_plan, ingest_early_stop, ingest_flips, ingest_influence, stats_from_traces,
    TraceIndex,
};
pub use plan::{read_plan, write_plan, InterventionPlan};

pub const SCHEMA_VERSION: u32 = 1;

/// Vocabularies larger than this are stored sparsely.
pub const DENSE_VOCAB_LIMIT: usize = 64;
/// Tokens listed explicitly in a sparse distribution.
pub const SPARSE_TOP: usize = 64;
/// Tolerance on `Σ p = 1` for distributions read from traces.
pub const TRACE_TOLERANCE: f64 = 1e-6;

/// One teacher-forced distribution as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StoredDistribution {
    Dense { probs: Vec<f64> },
    /// Listed `(token, prob)` pairs plus the mass of every unlisted token.
    Sparse { top: Vec<(usize, f64)>, tail: f64 },
}

impl StoredDistribution {
    /// Dense for small vocabularies, top-64 plus tail otherwise.
    pub fn encode(d: &StepDistribution) -> Self {
        let probs = d.probs();
        if probs.len() <= DENSE_VOCAB_LIMIT {
            return Self::Dense { probs: probs.to_vec() };
        }
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut top: Vec<(usize, f64)> = order[..SPARSE_TOP].iter().map(|&i| (i, probs[i])).collect();
        top.sort_by_key(|e| e.0);
        let tail = order[SPARSE_TOP..].iter().map(|&i| probs[i]).sum();
        Self::Sparse { top, tail }
    }

    /// Expand over `vocab_size` tokens, spreading the tail uniformly.
    pub fn expand(&self, vocab_size: usize) -> Result<Vec<f64>> {
        match self {
            Self::Dense { probs } => {
                if probs.len() != vocab_size {
                    return Err(Error::Shape(format!(
                        "dense distribution has {} entries for a vocabulary of {vocab_size}",
                        probs.len()
                    )));
                }
                Ok(probs.clone())
            }
            Self::Sparse { top, tail } => {
                let mut out = vec![f64::NAN; vocab_size];
                for &(i, p) in top {
                    let slot = out
                        .get_mut(i)
                        .ok_or_else(|| Error::Shape(format!("token {i} outside a vocabulary of {vocab_size}")))?;
                    if !slot.is_nan() {
                        return Err(Error::Shape(format!("token {i} listed twice")));
                    }
                    *slot = p;
                }
                let unlisted = vocab_size - top.len();
                let fill = if unlisted > 0 { tail / unlisted as f64 } else { 0.0 };
                if unlisted == 0 && *tail > TRACE_TOLERANCE {
                    return Err(Error::Shape("tail mass with no unlisted tokens".into()));
                }
                for v in out.iter_mut().filter(|v| v.is_nan()) {
                    *v = fill;
                }
                Ok(out)
            }
        }
    }

    fn mass(&self) -> f64 {
        match self {
            Self::Dense { probs } => probs.iter().sum(),
            Self::Sparse { top, tail } => top.iter().map(|e| e.1).sum::<f64>() + tail,
        }
    }

    fn is_valid(&self) -> bool {
        let ok = |p: &f64| p.is_finite() && *p >= 0.0;
        match self {
            Self::Dense { probs } => probs.iter().all(ok),
            Self::Sparse { top, tail } => top.iter().all(|e| ok(&e.1)) && ok(tail),
        }
    }
}

/// The intervention that produced a counterfactual record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionTag {
    pub plan_id: String,
    pub step: usize,
    pub op: OpDescriptor,
}

/// One serialized trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub example_id: String,
    pub paradigm: Paradigm,
    #[serde(rename = "T")]
    pub budget: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    #[serde(with = "hexfloat::matrix")]
    pub states: Vec<Vec<f64>>,
    pub gold: String,
    pub baseline_answer: String,
    /// Answer symbols indexing the stored distributions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    /// Readout step `s` to one distribution per gold token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_forced: Option<BTreeMap<usize, Vec<StoredDistribution>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<InterventionTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_answer: Option<String>,
    /// Arg-max answer decoded from `h_1..h_k`, for `k = 1..T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_answers: Option<Vec<String>>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl TraceRecord {
    fn invalid(&self, message: impl Into<String>) -> Error {
        Error::Record {
            example_id: self.example_id.clone(),
            message: message.into(),
        }
    }

    /// Check every invariant of the record.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        if self.budget == 0 || self.dim == 0 {
            return Err(self.invalid("T and d must be positive"));
        }
        if self.states.len() != self.budget {
            return Err(self.invalid(format!("{} state rows for T = {}", self.states.len(), self.budget)));
        }
        if let Some((t, row)) = self.states.iter().enumerate().find(|(_, r)| r.len() != self.dim) {
            return Err(self.invalid(format!("state row {} has length {} but d = {}", t + 1, row.len(), self.dim)));
        }
        if self.states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.invalid("non-finite state value"));
        }
        if let Some(answers) = &self.early_stop_answers {
            if answers.len() != self.budget {
                return Err(self.invalid(format!("{} early-stop answers for T = {}", answers.len(), self.budget)));
            }
        }
        if let Some(tag) = &self.intervention {
            if tag.step == 0 || tag.step > self.budget {
                return Err(self.invalid(format!("intervention step {} outside 1..={}", tag.step, self.budget)));
            }
        }
        if let Some(tf) = &self.teacher_forced {
            let vocab = self
                .vocab
                .as_ref()
                .ok_or_else(|| self.invalid("teacher_forced readouts need a vocab"))?;
            let gold_len = self.gold.split_whitespace().count();
            for (&s, dists) in tf {
                if s == 0 || s > self.budget {
                    return Err(self.invalid(format!("readout step {s} outside 1..={}", self.budget)));
                }
                if dists.len() != gold_len {
                    return Err(self.invalid(format!(
                        "readout step {s} has {} positions for a {gold_len}-token gold answer",
                        dists.len()
                    )));
                }
                for d in dists {
                    if !d.is_valid() {
                        return Err(self.invalid(format!("readout step {s}: negative or non-finite probability")));
                    }
                    let mass = d.mass();
                    if (mass - 1.0).abs() > TRACE_TOLERANCE {
                        return Err(self.invalid(format!("readout step {s}: distribution sums to {mass}")));
                    }
                    d.expand(vocab.len()).map_err(|e| self.invalid(e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    pub fn is_counterfactual(&self) -> bool {
        self.intervention.is_some()
    }

    /// The answer this record's trajectory produced.
    pub fn answer(&self) -> &str {
        self.counterfactual_answer.as_deref().unwrap_or(&self.baseline_answer)
    }

    /// Rebuild the teacher-forced score of `gold` at readout step `s`.
    pub fn teacher_forced_score(&self, s: usize) -> Result<TeacherForcedScore> {
        let vocab = self
            .vocab
            .as_ref()
            .ok_or_else(|| self.invalid("record has no vocab"))?;
        let dists = self
            .teacher_forced
            .as_ref()
            .and_then(|tf| tf.get(&s))
            .ok_or_else(|| {
                Error::Data(format!(
                    "trace `{}` has no teacher_forced readout at step {s}; re-export with teacher-forced distributions",
                    self.example_id
                ))
            })?;
        let support: Arc<[String]> = support_of(vocab);
        let tokens: Vec<usize> = self
            .gold
            .split_whitespace()
            .map(|tok| {
                vocab
                    .iter()
                    .position(|v| v == tok)
                    .ok_or_else(|| Error::Vocabulary(format!("gold symbol {tok:?} missing from trace vocab")))
            })
            .collect::<Result<_>>()?;
        let per_position = dists
            .iter()
            .map(|d| StepDistribution::with_tolerance(support.clone(), d.expand(vocab.len())?, TRACE_TOLERANCE))
            .collect::<Result<_>>()?;
        TeacherForcedScore::new(per_position, tokens)
    }
}

/// Records read from a trace file plus any rejected lines.
#[derive(Debug, Default)]
pub struct TraceBatch {
    pub records: Vec<TraceRecord>,
    pub errors: Vec<Error>,
}

fn parse_line(line: &str, number: usize) -> Result<TraceRecord> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: number,
        message: e.to_string(),
    })?;
    let version = value.get("schema_version").and_then(serde_json::Value::as_u64);
    match version {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::SchemaVersion {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: SCHEMA_VERSION,
            })
        }
        None => {
            return Err(Error::Parse {
                line: number,
                message: "missing schema_version".into(),
            })
        }
    }
    let record: TraceRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
        line: number,
        message: e.to_string(),
    })?;
    record.validate().map_err(|e| match e {
        Error::Record { example_id, message } => Error::Record {
            example_id,
            message: format!("line {number}: {message}"),
        },
        other => other,
    })?;
    Ok(record)
}

fn read_lines(path: &Path, skip_bad: bool) -> Result<TraceBatch> {
    let file = std::fs::File::open(path)?;
    let mut batch = TraceBatch::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, i + 1) {
            Ok(r) => batch.records.push(r),
            Err(e) if skip_bad => batch.errors.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok(batch)
}

/// Read and validate every record; the first bad line aborts.
pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    Ok(read_lines(path.as_ref(), false)?.records)
}

/// Read every valid record and collect the errors of the others.
pub fn read_traces_lenient(path: impl AsRef<Path>) -> Result<TraceBatch> {
    read_lines(path.as_ref(), true)
}

/// Serialize one record per line after validating all of them.
pub fn write_traces(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
