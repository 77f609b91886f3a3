// SPDX-License-Identifier: MIT OR Apache-2.0

//! Teacher-forced answer scoring, answer templates, KL and early-stop decoding.

use serde::{Deserialize, Serialize};

use crate::dist::StepDistribution;
use crate::error::{Error, Result};
use crate::scm::{decode, LatentState, ModelSpec, Paradigm, Trajectory};

/// Floor applied to the second argument of [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

const PLACEHOLDER: &str = "{answer}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    Coconut,
    Codi,
    Custom,
}

impl std::str::FromStr for TemplateStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coconut" => Ok(Self::Coconut),
            "codi" => Ok(Self::Codi),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown template style {other:?}"))),
        }
    }
}

impl std::fmt::Display for TemplateStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Coconut => "coconut",
            Self::Codi => "codi",
            Self::Custom => "custom",
        })
    }
}

/// Context in which a gold answer is scored, e.g. `"### {answer}"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct AnswerTemplate {
    style: TemplateStyle,
    pattern: String,
}

#[derive(Deserialize)]
struct RawTemplate {
    style: TemplateStyle,
    pattern: Option<String>,
}

impl TryFrom<RawTemplate> for AnswerTemplate {
    type Error = Error;

    fn try_from(raw: RawTemplate) -> Result<Self> {
        match (raw.style, raw.pattern) {
            (TemplateStyle::Custom, Some(p)) => Self::custom(p),
            (TemplateStyle::Custom, None) => Err(Error::Config("custom template needs a pattern".into())),
            (style, pattern) => {
                let t = Self::builtin(style);
                match pattern {
                    Some(p) if p != t.pattern => Err(Error::Config(format!(
                        "{style} template has the fixed pattern {:?}",
                        t.pattern
                    ))),
                    _ => Ok(t),
                }
            }
        }
    }
}

impl AnswerTemplate {
    pub fn coconut() -> Self {
        Self {
            style: TemplateStyle::Coconut,
            pattern: "### {answer}".into(),
        }
    }

    pub fn codi() -> Self {
        Self {
            style: TemplateStyle::Codi,
            pattern: "The answer is {answer}".into(),
        }
    }

    /// A pattern containing `{answer}` exactly once.
    pub fn custom(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::Config(format!(
                "template pattern {pattern:?} must contain {PLACEHOLDER} exactly once"
            )));
        }
        Ok(Self {
            style: TemplateStyle::Custom,
            pattern,
        })
    }

    fn builtin(style: TemplateStyle) -> Self {
        match style {
            TemplateStyle::Codi => Self::codi(),
            _ => Self::coconut(),
        }
    }

    /// Templates follow the reasoning method, not the dataset.
    pub fn for_paradigm(paradigm: Paradigm) -> Self {
        match paradigm {
            Paradigm::Codi | Paradigm::CotSft => Self::codi(),
            Paradigm::Coconut | Paradigm::Toy => Self::coconut(),
        }
    }

    pub fn style(&self) -> TemplateStyle {
        self.style
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn render(&self, answer: &str) -> String {
        self.pattern.replacen(PLACEHOLDER, answer, 1)
    }

    /// The answer substring of a rendered string, if it matches the pattern.
    pub fn extract<'s>(&self, rendered: &'s str) -> Option<&'s str> {
        let (head, tail) = self.pattern.split_once(PLACEHOLDER)?;
        rendered.strip_prefix(head)?.strip_suffix(tail)
    }
}

/// Per-position readout distributions for a gold answer `a_1..a_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedScore {
    pub per_position: Vec<StepDistribution>,
    pub gold_tokens: Vec<usize>,
}

impl TeacherForcedScore {
    pub fn new(per_position: Vec<StepDistribution>, gold_tokens: Vec<usize>) -> Result<Self> {
        if per_position.len() != gold_tokens.len() || per_position.is_empty() {
            return Err(Error::Shape(format!(
                "{} distributions for {} gold tokens",
                per_position.len(),
                gold_tokens.len()
            )));
        }
        if let Some((d, &tok)) = per_position.iter().zip(&gold_tokens).find(|(d, &tok)| tok >= d.len()) {
            return Err(Error::Shape(format!("gold token {tok} outside a support of {}", d.len())));
        }
        Ok(Self {
            per_position,
            gold_tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.gold_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold_tokens.is_empty()
    }

    /// `Σ_ℓ ln p_ℓ(a_ℓ)`, with probabilities floored like [`kl_divergence`].
    pub fn log_prob(&self) -> f64 {
        self.per_position
            .iter()
            .zip(&self.gold_tokens)
            .map(|(d, &tok)| d.probs()[tok].max(KL_FLOOR).ln())
            .sum()
    }
}

/// Score `gold` token by token when reading out from `states[..step]`.
///
/// Position `ℓ` conditions on the gold prefix `a_<ℓ`: the readout receives
/// the previous gold token, never a sampled one.
pub fn teacher_forced_dist(
    model: &ModelSpec,
    states: &[LatentState],
    step: usize,
    input: &[f64],
    gold: &str,
    template: &AnswerTemplate,
) -> Result<TeacherForcedScore> {
    if step == 0 || step > model.budget() || step > states.len() {
        return Err(Error::Range(format!("readout step {step} outside 1..={}", model.budget())));
    }
    let rendered = template.render(gold);
    let answer = template
        .extract(&rendered)
        .ok_or_else(|| Error::Config("template does not round-trip the answer".into()))?;
    let tokens = model.tokenize(answer)?;
    model.check_input(input)?;
    let base = model.readout_logits(&states[..step], input)?;
    let gain = model.readout().prefix_gain;
    let mut per_position = Vec::with_capacity(tokens.len());
    let mut prev: Option<usize> = None;
    for &tok in &tokens {
        let mut logits = base.clone();
        if let Some(p) = prev {
            logits[p] += gain;
        }
        per_position.push(model.distribution(&logits));
        prev = Some(tok);
    }
    TeacherForcedScore::new(per_position, tokens)
}

/// `KL(p ∥ q)` in nats with `q` floored at [`KL_FLOOR`].
///
/// Terms are summed as `p·ln(p/q) − p + q`, each nonnegative, which equals
/// the KL divergence for normalized inputs. Near `p = q` the term is
/// evaluated as `p·(r − ln(1 + r))` with `r = (q − p)/p`.
pub fn kl_divergence(p: &StepDistribution, q: &StepDistribution) -> Result<f64> {
    if p.support() != q.support() {
        return Err(Error::Shape(format!(
            "KL between supports of size {} and {} that differ",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_terms(p.probs(), q.probs()))
}

pub(crate) fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                return qi.max(0.0);
            }
            let qi = qi.max(KL_FLOOR);
            let r = (qi - pi) / pi;
            let term = if r.abs() < 0.5 {
                pi * (r - r.ln_1p())
            } else {
                pi * (pi / qi).ln() - pi + qi
            };
            term.max(0.0)
        })
        .sum()
}

/// Mean per-position KL between two scores of the same gold answer.
pub fn token_averaged_kl(base: &TeacherForcedScore, intervened: &TeacherForcedScore) -> Result<f64> {
    if base.gold_tokens != intervened.gold_tokens || base.per_position.len() != intervened.per_position.len() {
        return Err(Error::Shape("teacher-forced scores cover different gold answers".into()));
    }
    let mut total = 0.0;
    for (p, q) in base.per_position.iter().zip(&intervened.per_position) {
        total += kl_divergence(p, q)?;
    }
    Ok(total / base.len() as f64)
}

/// Readout distribution after truncating the trajectory at step `k`.
pub fn early_stop_distribution(model: &ModelSpec, trajectory: &Trajectory, k: usize) -> Result<StepDistribution> {
    if k == 0 || k > trajectory.budget() {
        return Err(Error::Range(format!(
            "early-stop step {k} outside 1..={}",
            trajectory.budget()
        )));
    }
    decode(model, &trajectory.states[..k], &trajectory.input)
}

/// Arg-max answer decoded from `h_1..h_k`.
pub fn early_stop_decode(model: &ModelSpec, trajectory: &Trajectory, k: usize) -> Result<String> {
    Ok(early_stop_distribution(model, trajectory, k)?.argmax_symbol().to_owned())
}
