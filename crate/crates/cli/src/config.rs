// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: TOML file, flag overrides and the resolved record
//! written next to every result set.

use std::path::{Path, PathBuf};

use clap::Args;
use latentscm::influence::{DEFAULT_ALPHA, DEFAULT_LOCALITY_K, DEFAULT_M_EARLY, DEFAULT_M_LATE};
use latentscm::intervention::{OpKind, DEFAULT_SIGMA};
use latentscm::readout::{AnswerTemplate, TemplateStyle};
use latentscm::superposition::SuperpositionConfig;
use latentscm::toys::{ToyKind, ToyParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const DEFAULT_OUT: &str = "results";

/// Parameters of a built-in toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Latent width; the linear toy is always one-dimensional.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub budget: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub params: ToyParams,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: None,
            budget: 6,
            seed: 0,
            params: ToyParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `toy:<kind>` or `traces:<baseline trace file>`.
    pub model: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Number of generated examples when no dataset file is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PathBuf>,
    pub skip_bad: bool,
    pub op: OpKind,
    pub sigma: f64,
    pub alpha: f64,
    pub k: usize,
    pub m_early: usize,
    pub m_late: usize,
    pub correct_only: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<AnswerTemplate>,
    pub toy: ToyConfig,
    pub superposition: SuperpositionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "toy:chain".into(),
            seed: 0,
            dataset: None,
            synthetic: None,
            counterfactual: None,
            plan: None,
            skip_bad: false,
            op: OpKind::Zero,
            sigma: DEFAULT_SIGMA,
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_LOCALITY_K,
            m_early: DEFAULT_M_EARLY,
            m_late: DEFAULT_M_LATE,
            correct_only: false,
            out: None,
            template: None,
            toy: ToyConfig::default(),
            superposition: SuperpositionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSource {
    Toy(ToyKind),
    Traces(PathBuf),
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// TOML run configuration
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Model source: toy:<kind> or traces:<baseline.ndjson>
    #[arg(long)]
    pub model: Option<String>,
    /// Dataset file, one {"id","input","gold"} object per line
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Generate N examples from the toy instead of reading a dataset
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Counterfactual trace file produced from a plan
    #[arg(long, value_name = "FILE")]
    pub counterfactual: Option<PathBuf>,
    /// Intervention plan to execute (export)
    #[arg(long, value_name = "FILE")]
    pub plan: Option<PathBuf>,
    /// Collect malformed trace lines instead of stopping at the first
    #[arg(long)]
    pub skip_bad: bool,
    /// Intervention operator
    #[arg(long)]
    pub op: Option<OpKind>,
    /// Noise scale of the gaussian operators
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Sparsification threshold as a fraction of max W
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Locality hop limit
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m_early: Option<usize>,
    #[arg(long)]
    pub m_late: Option<usize>,
    /// Average influence over baseline-correct examples only
    #[arg(long)]
    pub correct_only: bool,
    /// Answer template style
    #[arg(long)]
    pub template: Option<TemplateStyle>,
    /// Pattern of a custom template, containing {answer} once
    #[arg(long)]
    pub pattern: Option<String>,
    /// Rollouts per prompt (K) for superposition analysis
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub min_retained: Option<usize>,
    /// L2 penalty of the step probes
    #[arg(long)]
    pub l2: Option<f64>,
    /// Allow two-mode analysis on large vocabularies
    #[arg(long)]
    pub force_large_vocab: bool,
    /// Sample transitions and readouts of the toy
    #[arg(long)]
    pub stochastic: bool,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of latent steps T of the toy
    #[arg(long)]
    pub budget: Option<usize>,
    /// Seed of the toy's random weights
    #[arg(long)]
    pub toy_seed: Option<u64>,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, short = 'o', value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, short = 'j')]
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Ok(toml::from_str(&text)?)
    }

    /// Config file (if any) with flag overrides applied and validated.
    pub fn from_args(args: &RunArgs) -> CliResult<Self> {
        let mut c = match &args.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(c.model, args.model);
        set!(c.seed, args.seed);
        set!(c.op, args.op);
        set!(c.sigma, args.sigma);
        set!(c.alpha, args.alpha);
        set!(c.k, args.k);
        set!(c.m_early, args.m_early);
        set!(c.m_late, args.m_late);
        set!(c.superposition.rollouts, args.rollouts);
        set!(c.superposition.min_retained, args.min_retained);
        set!(c.superposition.l2, args.l2);
        set!(c.toy.budget, args.budget);
        set!(c.toy.seed, args.toy_seed);
        if args.dataset.is_some() {
            c.dataset = args.dataset.clone();
            c.synthetic = None;
        }
        if args.synthetic.is_some() {
            c.synthetic = args.synthetic;
            c.dataset = None;
        }
        c.counterfactual = args.counterfactual.clone().or(c.counterfactual);
        c.plan = args.plan.clone().or(c.plan);
        c.out = args.out.clone().or(c.out);
        c.toy.dim = args.dim.or(c.toy.dim);
        c.skip_bad |= args.skip_bad;
        c.correct_only |= args.correct_only;
        c.superposition.force_large_vocab |= args.force_large_vocab;
        c.toy.params.stochastic |= args.stochastic;
        match (args.template, &args.pattern) {
            (Some(TemplateStyle::Custom) | None, Some(p)) => c.template = Some(AnswerTemplate::custom(p.clone())?),
            (Some(TemplateStyle::Custom), None) => {
                return Err(CliError::Usage("--template custom needs --pattern".into()));
            }
            (Some(TemplateStyle::Coconut), None) => c.template = Some(AnswerTemplate::coconut()),
            (Some(TemplateStyle::Codi), None) => c.template = Some(AnswerTemplate::codi()),
            (Some(style), Some(_)) => {
                return Err(CliError::Usage(format!("--pattern only applies to custom templates, not {style}")));
            }
            (None, None) => {}
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.source()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return usage(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return usage(format!("sigma must be a nonnegative number, got {}", self.sigma));
        }
        if self.k == 0 {
            return usage("k must be at least 1".into());
        }
        if self.superposition.rollouts < 2 {
            return usage(format!(
                "superposition needs at least 2 rollouts per prompt, got {}",
                self.superposition.rollouts
            ));
        }
        if self.synthetic == Some(0) {
            return usage("--synthetic must be positive".into());
        }
        if self.toy.budget == 0 {
            return usage("toy budget must be positive".into());
        }
        Ok(())
    }

    pub fn source(&self) -> CliResult<ModelSource> {
        if let Some(kind) = self.model.strip_prefix("toy:") {
            return Ok(ModelSource::Toy(kind.parse()?));
        }
        if let Some(path) = self.model.strip_prefix("traces:") {
            if path.is_empty() {
                return Err(CliError::Usage("traces: needs a file path".into()));
            }
            return Ok(ModelSource::Traces(PathBuf::from(path)));
        }
        Err(CliError::Usage(format!(
            "model must be toy:<kind> or traces:<path>, got {:?}",
            self.model
        )))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// The resolved config as written to disk; the output directory is left out
    /// so that it does not affect the hash.
    pub fn resolved_toml(&self) -> CliResult<String> {
        let mut c = self.clone();
        c.out = None;
        toml::to_string(&c).map_err(|e| CliError::Internal(format!("cannot serialize config: {e}")))
    }

    pub fn hash(&self) -> CliResult<String> {
        let digest = Sha256::digest(self.resolved_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
