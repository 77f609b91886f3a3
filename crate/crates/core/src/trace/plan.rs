// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention plans handed to trace exporters.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::intervention::{InterventionOp, LatentStats, OpDescriptor};
use crate::readout::AnswerTemplate;

/// Which interventions and readouts an exporter must run per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub schema_version: u32,
    pub plan_id: String,
    #[serde(rename = "T")]
    pub budget: usize,
    pub op: OpDescriptor,
    /// Steps `t` to intervene on; one counterfactual record each.
    pub steps: Vec<usize>,
    /// Readout steps `s` recorded on counterfactual records.
    pub readout_steps: Vec<usize>,
    /// `(t, s)` cells destined for influence analysis.
    pub pairs: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<LatentStats>,
    pub template: AnswerTemplate,
}

impl InterventionPlan {
    /// Every step intervened, every `t < s` pair read out.
    pub fn all_pairs(
        plan_id: impl Into<String>,
        budget: usize,
        op: OpDescriptor,
        stats: Option<LatentStats>,
        template: AnswerTemplate,
    ) -> Result<Self> {
        let plan = Self {
            schema_version: SCHEMA_VERSION,
            plan_id: plan_id.into(),
            budget,
            op,
            steps: (1..=budget).collect(),
            readout_steps: (2..=budget).collect(),
            pairs: (1..=budget).flat_map(|t| (t + 1..=budget).map(move |s| (t, s))).collect(),
            stats,
            template,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let in_range = |v: &usize| (1..=self.budget).contains(v);
        if self.budget == 0 {
            return Err(Error::Config("plan budget must be positive".into()));
        }
        if let Some(t) = self.steps.iter().find(|t| !in_range(t)) {
            return Err(Error::Config(format!("plan step {t} outside 1..={}", self.budget)));
        }
        if let Some(s) = self.readout_steps.iter().find(|s| !in_range(s)) {
            return Err(Error::Config(format!("plan readout step {s} outside 1..={}", self.budget)));
        }
        for &(t, s) in &self.pairs {
            if t >= s {
                return Err(Error::Config(format!("plan pair ({t}, {s}) must satisfy t < s")));
            }
            if !in_range(&t) || !in_range(&s) {
                return Err(Error::Config(format!("plan pair ({t}, {s}) outside 1..={}", self.budget)));
            }
            if !self.steps.contains(&t) || !self.readout_steps.contains(&s) {
                return Err(Error::Config(format!("plan pair ({t}, {s}) is not covered by steps and readout_steps")));
            }
        }
        if let Some(stats) = &self.stats {
            if stats.budget() != self.budget {
                return Err(Error::Config("plan statistics cover a different budget".into()));
            }
        }
        self.operator().map(|_| ())
    }

    /// The operator the plan describes.
    pub fn operator(&self) -> Result<InterventionOp> {
        InterventionOp::new(self.op.kind, self.op.sigma, self.stats.clone().map(Arc::new))
    }

    /// Readout steps to record after intervening at `t`.
    pub fn readouts_for(&self, t: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.pairs.iter().filter(|p| p.0 == t).map(|p| p.1).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

pub fn write_plan(plan: &InterventionPlan, path: impl AsRef<Path>) -> Result<()> {
    plan.validate()?;
    std::fs::write(path, serde_json::to_string_pretty(plan)? + "\n")?;
    Ok(())
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<InterventionPlan> {
    let text = std::fs::read_to_string(path)?;
    let plan: InterventionPlan = serde_json::from_str(&text)?;
    plan.validate()?;
    Ok(plan)
}
