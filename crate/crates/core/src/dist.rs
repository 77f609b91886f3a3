// SPDX-License-Identifier: MIT OR Apache-2.0

//! Categorical distributions over answer symbols.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` for distributions built in memory.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A normalized distribution over an ordered support of symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    support: Arc<[String]>,
    probs: Vec<f64>,
}

impl StepDistribution {
    /// Wrap `probs` after checking length, sign and normalization.
    pub fn new(support: Arc<[String]>, probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(support, probs, NORMALIZATION_TOL)
    }

    pub(crate) fn with_tolerance(support: Arc<[String]>, probs: Vec<f64>, tol: f64) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::Shape(format!(
                "support has {} symbols but {} probabilities were given",
                support.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Data("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::Data(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { support, probs })
    }

    /// Softmax of `logits` with max-subtraction.
    pub fn from_logits(support: Arc<[String]>, logits: &[f64]) -> Result<Self> {
        if support.len() != logits.len() {
            return Err(Error::Shape(format!(
                "support has {} symbols but {} logits were given",
                support.len(),
                logits.len()
            )));
        }
        let probs = softmax(logits);
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &Arc<[String]> {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the most probable symbol; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn argmax_symbol(&self) -> &str {
        &self.support[self.argmax()]
    }

    pub fn prob_of(&self, symbol: &str) -> Option<f64> {
        self.support
            .iter()
            .position(|s| s == symbol)
            .map(|i| self.probs[i])
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }

    /// Inverse-CDF sample driven by a uniform draw `u ∈ [0, 1)`.
    pub fn sample_index(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding slack above the last cumulative value
        self.probs
            .iter()
            .rposition(|p| *p > 0.0)
            .unwrap_or(self.probs.len() - 1)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn support_of<S: AsRef<str>>(symbols: &[S]) -> Arc<[String]> {
    symbols.iter().map(|s| s.as_ref().to_owned()).collect()
}
