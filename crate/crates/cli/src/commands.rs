// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::sync::Arc;

use latentscm::dataset::{read_dataset, Example};
use latentscm::influence::{influence_matrix, normalize_influence, sparsify, structure_metrics, InfluenceMatrix};
use latentscm::intervention::{baseline_rollouts, estimate_latent_stats, InterventionOp, LatentStats, OpDescriptor};
use latentscm::necessity::{early_stop_report, flip_profile};
use latentscm::readout::AnswerTemplate;
use latentscm::results::{write_results, InfluenceResults, Provenance, ResultBundle};
use latentscm::superposition::superposition_analysis;
use latentscm::toys::{make_toy, toy_dataset, ToyKind};
use latentscm::trace::{
    execute_plan, export_baseline, ingest_early_stop, ingest_flips, ingest_influence, read_plan, read_traces,
    read_traces_lenient, stats_from_traces, write_plan, write_traces, InterventionPlan, TraceRecord,
};
use latentscm::ModelSpec;

use crate::config::{ModelSource, RunConfig};
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const PLAN_FILE: &str = "plan.json";
pub const BASELINE_FILE: &str = "baseline.ndjson";
pub const COUNTERFACTUAL_FILE: &str = "counterfactual.ndjson";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Intervene,
    EarlyStop,
    Influence,
    Superpose,
    Plan,
    Export,
    Ingest,
}

/// Everything a command needs, loaded from its model source.
enum Source {
    Toy { model: Box<ModelSpec>, data: Vec<Example> },
    Traces { baseline: Vec<TraceRecord> },
}

fn toy_model(cfg: &mut RunConfig, kind: ToyKind) -> CliResult<ModelSpec> {
    let dim = *cfg.toy.dim.get_or_insert(match kind {
        ToyKind::Linear => 1,
        other => other.min_dim().max(4),
    });
    Ok(make_toy(kind, dim, cfg.toy.budget, cfg.toy.seed, &cfg.toy.params)?)
}

fn dataset(cfg: &RunConfig, model: &ModelSpec) -> CliResult<Vec<Example>> {
    let data = match (&cfg.dataset, cfg.synthetic) {
        (Some(path), _) => read_dataset(path).map_err(|e| match e {
            latentscm::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::Usage(format!("dataset {} not found", path.display()))
            }
            other => other.into(),
        })?,
        (None, Some(n)) => toy_dataset(model, n, cfg.seed)?,
        (None, None) => return Err(CliError::Usage("no dataset: pass --dataset FILE or --synthetic N".into())),
    };
    if data.is_empty() {
        return Err(CliError::Usage("dataset is empty".into()));
    }
    Ok(data)
}

fn traces(path: &Path, skip_bad: bool) -> CliResult<Vec<TraceRecord>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("trace file {} not found", path.display())));
    }
    let records = if skip_bad {
        let batch = read_traces_lenient(path)?;
        for e in &batch.errors {
            eprintln!("warning: {}: skipped {e}", path.display());
        }
        batch.records
    } else {
        read_traces(path)?
    };
    if records.is_empty() {
        return Err(CliError::Core(latentscm::Error::Data(format!(
            "{} holds no trace records",
            path.display()
        ))));
    }
    Ok(records)
}

fn load(cfg: &mut RunConfig) -> CliResult<Source> {
    match cfg.source()? {
        ModelSource::Toy(kind) => {
            let model = toy_model(cfg, kind)?;
            let data = dataset(cfg, &model)?;
            if cfg.template.is_none() {
                cfg.template = Some(AnswerTemplate::for_paradigm(model.paradigm()));
            }
            Ok(Source::Toy { model: Box::new(model), data })
        }
        ModelSource::Traces(path) => {
            let baseline = traces(&path, cfg.skip_bad)?;
            if cfg.template.is_none() {
                cfg.template = Some(AnswerTemplate::for_paradigm(baseline[0].paradigm));
            }
            Ok(Source::Traces { baseline })
        }
    }
}

fn template(cfg: &RunConfig) -> &AnswerTemplate {
    cfg.template.as_ref().expect("template resolved by load")
}

fn toy_stats(model: &ModelSpec, data: &[Example], seed: u64) -> CliResult<LatentStats> {
    Ok(estimate_latent_stats(&baseline_rollouts(model, data, seed)?)?)
}

fn operator(cfg: &RunConfig, stats: impl FnOnce() -> CliResult<LatentStats>) -> CliResult<InterventionOp> {
    let stats = if cfg.op.needs_stats() { Some(Arc::new(stats()?)) } else { None };
    Ok(InterventionOp::new(cfg.op, cfg.sigma, stats)?)
}

fn counterfactual(cfg: &RunConfig, what: &str) -> CliResult<Vec<TraceRecord>> {
    let path = cfg.counterfactual.as_ref().ok_or_else(|| {
        CliError::Usage(format!(
            "{what} from traces needs --counterfactual FILE (run `plan`, then the exporter)"
        ))
    })?;
    traces(path, cfg.skip_bad)
}

fn influence_results(cfg: &RunConfig, w: InfluenceMatrix) -> CliResult<InfluenceResults> {
    let wbar = normalize_influence(&w);
    Ok(InfluenceResults {
        metrics: structure_metrics(&wbar, cfg.k, cfg.m_early, cfg.m_late),
        graph: sparsify(&w, cfg.alpha)?,
        wbar,
        w,
    })
}

fn finish(cfg: &RunConfig, mut written: Vec<PathBuf>) -> CliResult<Vec<PathBuf>> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, cfg.resolved_toml()?)?;
    written.push(path);
    Ok(written)
}

fn write_bundle(cfg: &RunConfig, bundle: &ResultBundle) -> CliResult<Vec<PathBuf>> {
    let provenance = Provenance::new(cfg.hash()?, cfg.seed);
    let written = write_results(bundle, cfg.out_dir(), &provenance)?;
    finish(cfg, written)
}

/// Run one subcommand; returns the files written.
pub fn run(command: Command, mut cfg: RunConfig) -> CliResult<Vec<PathBuf>> {
    let source = load(&mut cfg)?;
    let seed = cfg.seed;
    let mut bundle = ResultBundle::default();
    match (command, source) {
        (Command::Intervene, Source::Toy { model, data }) => {
            let op = operator(&cfg, || toy_stats(&model, &data, seed))?;
            bundle.flip = Some(flip_profile(&model, &data, &op, seed)?);
        }
        (Command::Intervene, Source::Traces { baseline }) => {
            bundle.flip = Some(ingest_flips(&baseline, &counterfactual(&cfg, "intervene")?)?);
        }
        (Command::EarlyStop, Source::Toy { model, data }) => {
            bundle.early_stop = Some(early_stop_report(&model, &data, seed)?);
        }
        (Command::EarlyStop, Source::Traces { baseline }) => {
            bundle.early_stop = Some(ingest_early_stop(&baseline)?);
        }
        (Command::Influence, Source::Toy { model, data }) => {
            let op = operator(&cfg, || toy_stats(&model, &data, seed))?;
            let w = influence_matrix(&model, &data, &op, template(&cfg), seed, cfg.correct_only)?;
            bundle.influence = Some(influence_results(&cfg, w)?);
        }
        (Command::Influence, Source::Traces { baseline }) => {
            let w = ingest_influence(&baseline, &counterfactual(&cfg, "influence")?, cfg.correct_only)?;
            bundle.influence = Some(influence_results(&cfg, w)?);
        }
        (Command::Superpose, Source::Toy { model, data }) => {
            bundle.superposition =
                Some(superposition_analysis(&model, &data, template(&cfg), &cfg.superposition, seed)?);
        }
        (Command::Superpose, Source::Traces { .. }) => {
            return Err(CliError::Usage(
                "superpose needs a model that can be sampled; trace sources are not supported".into(),
            ));
        }
        (Command::Ingest, Source::Traces { baseline }) => {
            let cf = counterfactual(&cfg, "ingest")?;
            bundle.flip = Some(ingest_flips(&baseline, &cf)?);
            let w = ingest_influence(&baseline, &cf, cfg.correct_only)?;
            bundle.influence = Some(influence_results(&cfg, w)?);
            if baseline.iter().all(|r| r.early_stop_answers.is_some()) {
                bundle.early_stop = Some(ingest_early_stop(&baseline)?);
            }
        }
        (Command::Ingest, Source::Toy { .. }) => {
            return Err(CliError::Usage("ingest reads traces: use --model traces:<baseline.ndjson>".into()));
        }
        (Command::Plan, source) => return plan(cfg, source),
        (Command::Export, Source::Toy { model, data }) => return export(cfg, &model, &data),
        (Command::Export, Source::Traces { .. }) => {
            return Err(CliError::Usage("export runs a built-in model: use --model toy:<kind>".into()));
        }
    }
    write_bundle(&cfg, &bundle)
}

fn plan(cfg: RunConfig, source: Source) -> CliResult<Vec<PathBuf>> {
    let (budget, stats) = match &source {
        Source::Toy { model, data } => (
            model.budget(),
            if cfg.op.needs_stats() { Some(toy_stats(model, data, cfg.seed)?) } else { None },
        ),
        Source::Traces { baseline } => (
            baseline[0].budget,
            if cfg.op.needs_stats() { Some(stats_from_traces(baseline)?) } else { None },
        ),
    };
    let op = OpDescriptor {
        kind: cfg.op,
        sigma: cfg.sigma,
    };
    let plan_id = format!("all-pairs-{}-t{budget}", cfg.op);
    let plan = InterventionPlan::all_pairs(plan_id, budget, op, stats, template(&cfg).clone())?;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(PLAN_FILE);
    write_plan(&plan, &path)?;
    finish(&cfg, vec![path])
}

fn export(cfg: RunConfig, model: &ModelSpec, data: &[Example]) -> CliResult<Vec<PathBuf>> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let base_path = dir.join(BASELINE_FILE);
    write_traces(&export_baseline(model, data, template(&cfg), cfg.seed)?, &base_path)?;
    let mut written = vec![base_path];
    if let Some(plan_path) = &cfg.plan {
        let plan = read_plan(plan_path)?;
        let cf_path = dir.join(COUNTERFACTUAL_FILE);
        write_traces(&execute_plan(model, data, &plan, cfg.seed)?, &cf_path)?;
        written.push(cf_path);
    }
    finish(&cfg, written)
}
