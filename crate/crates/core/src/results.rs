// SPDX-License-Identifier: MIT OR Apache-2.0

//! Result bundles written as CSV, JSON and DOT files with provenance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::influence::{export_graph, GraphFormat, InfluenceMatrix, NormalizedInfluence, PrincipalGraph, StructureSummary};
use crate::necessity::{EarlyStopReport, FlipReport};
use crate::superposition::{SuperpositionCurve, SuperpositionReport};
use crate::trace::SCHEMA_VERSION;

/// Stamped into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.into(),
            seed,
        }
    }

    fn header(&self, comment: &str) -> String {
        format!(
            "{comment} schema_version={}\n{comment} config_hash={}\n{comment} seed={}\n",
            self.schema_version, self.config_hash, self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceResults {
    pub w: InfluenceMatrix,
    pub wbar: NormalizedInfluence,
    pub metrics: StructureSummary,
    pub graph: PrincipalGraph,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultBundle {
    pub flip: Option<FlipReport>,
    pub early_stop: Option<EarlyStopReport>,
    pub influence: Option<InfluenceResults>,
    pub superposition: Option<SuperpositionReport>,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

struct Writer<'a> {
    dir: &'a Path,
    provenance: &'a Provenance,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)?;
        self.written.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &str, rows: &str) -> Result<()> {
        let text = format!("{}{header}\n{rows}", self.provenance.header("#"));
        self.put(name, &text)
    }

    fn json<T: Serialize>(&mut self, name: &str, body: T) -> Result<()> {
        let stamped = Stamped {
            provenance: self.provenance,
            body,
        };
        let text = serde_json::to_string_pretty(&stamped)? + "\n";
        self.put(name, &text)
    }
}

fn flip_rows(r: &FlipReport) -> String {
    let mut out = String::new();
    for (i, c) in r.counts.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            r.per_step[i],
            c.flips,
            c.right_to_wrong,
            c.wrong_to_right,
            c.wrong_to_wrong,
            r.n_examples,
            r.ci_low[i],
            r.ci_high[i],
            r.op.kind,
            r.op.sigma
        );
    }
    out
}

fn triangle_rows(pairs: impl Iterator<Item = (usize, usize, f64)>, n: usize) -> String {
    let mut out = String::new();
    for (t, s, w) in pairs {
        let _ = writeln!(out, "{t},{s},{w},{n}");
    }
    out
}

fn heatmap(size: usize, get: impl Fn(usize, usize) -> f64) -> (String, String) {
    let header = std::iter::once("t".to_owned())
        .chain((1..=size).map(|s| format!("s{s}")))
        .collect::<Vec<_>>()
        .join(",");
    let mut rows = String::new();
    for t in 1..=size {
        let cells: Vec<String> = (1..=size).map(|s| get(t, s).to_string()).collect();
        let _ = writeln!(rows, "{t},{}", cells.join(","));
    }
    (header, rows)
}

fn curve_rows(c: &SuperpositionCurve) -> String {
    let mut out = String::new();
    for (i, v) in c.per_step.iter().enumerate() {
        let _ = writeln!(out, "{},{v},{},{}", i + 1, c.n, c.readout_kind);
    }
    out
}

/// Write every report present in `bundle` under `dir`; returns the paths
/// written, in order.
pub fn write_results(bundle: &ResultBundle, dir: impl AsRef<Path>, provenance: &Provenance) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = Writer {
        dir,
        provenance,
        written: Vec::new(),
    };
    if let Some(r) = &bundle.flip {
        w.csv(
            "flip.csv",
            "step,flip_rate,flips,right_to_wrong,wrong_to_right,wrong_to_wrong,n_examples,ci_low,ci_high,op,sigma",
            &flip_rows(r),
        )?;
        w.json("flip.json", r)?;
    }
    if let Some(r) = &bundle.early_stop {
        let n = r.earliest.len();
        let mut rows = String::new();
        for (k, v) in r.curve.iter().enumerate() {
            let _ = writeln!(rows, "{},{v},{n}", k + 1);
        }
        w.csv("earlystop.csv", "k,solved_fraction,n_examples", &rows)?;
        let mut rows = String::new();
        for i in 0..n {
            let (k, solved) = r.encoded(i);
            let _ = writeln!(rows, "{},{},{k},{solved}", r.ids[i], r.gold[i]);
        }
        w.csv("earlystop_examples.csv", "example_id,gold,earliest_k,solved", &rows)?;
        w.json("earlystop.json", r)?;
    }
    if let Some(r) = &bundle.influence {
        let n = r.w.n_examples();
        w.csv("influence_w.csv", "t,s,w,n_examples", &triangle_rows(r.w.pairs(), n))?;
        w.csv("influence_wbar.csv", "t,s,w,n_examples", &triangle_rows(r.wbar.pairs(), n))?;
        let (header, rows) = heatmap(r.w.size(), |t, s| r.w.get(t, s));
        w.csv("influence_heatmap.csv", &header, &rows)?;
        let m = &r.metrics;
        let rows = format!(
            "{},{},{},{},{},{},{},{}\n",
            m.locality, m.span, m.early_out, m.late_in, m.k, m.m_early, m.m_late, m.degenerate
        );
        w.csv("influence_metrics.csv", "locality,span,early_out,late_in,k,m_early,m_late,degenerate", &rows)?;
        #[derive(Serialize)]
        struct Body<'a> {
            w: &'a InfluenceMatrix,
            wbar: &'a NormalizedInfluence,
            metrics: &'a StructureSummary,
        }
        w.json(
            "influence.json",
            Body {
                w: &r.w,
                wbar: &r.wbar,
                metrics: &r.metrics,
            },
        )?;
        let dot = provenance.header("//") + &export_graph(&r.graph, GraphFormat::Dot)?;
        w.put("graph.dot", &dot)?;
        w.json("graph.json", &r.graph)?;
    }
    if let Some(r) = &bundle.superposition {
        let rows = curve_rows(&r.teacher_forced) + &curve_rows(&r.probe);
        w.csv("superposition.csv", "step,mean_ss,n_prompts,readout_kind", &rows)?;
        w.json("superposition.json", r)?;
        w.json("probes.json", serde_json::json!({ "probes": &r.probes }))?;
    }
    Ok(w.written)
}
