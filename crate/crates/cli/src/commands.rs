use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use interference_core::allocation::{fci_preprocess, PreprocessOptions};
use interference_core::dataset::fmt_f64;
use interference_core::discovery::{discover_table_parents, true_parents, Discovery, DiscoveryOptions, Parent};
use interference_core::estimators::{
    enumerate_effects, estimate_table, EffectEstimate, EffectKind, EstimateOptions, Estimator, MeansTable,
};
use interference_core::graph::{build_ad_dag, network_ignorability_holds, swig_transform, GraphDocument, Intervention};
use interference_core::models::{predict_eval, split_by_id, AucTable, FeatureVariant, PredictEvalOptions};
use interference_core::sem::{oracle_table, simulate, OracleTable};
use interference_core::{AllocationRule, Dataset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_input, to_json, FileDigest, Manifest, Meta, OutDir, TOOL, VERSION};
use crate::cli::{Cli, Command};
use crate::config::{Resolved, RunConfig};
use crate::error::{CliError, Result};

/// Estimators in table column order.
const COLUMNS: [Estimator; 3] = [Estimator::Aipw, Estimator::Gformula, Estimator::Ipw];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphVerdict {
    pub rule: AllocationRule,
    pub ignorable: bool,
    pub swig: GraphDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphArtifact {
    pub meta: Meta,
    pub m: usize,
    pub dag: GraphDocument,
    pub verdicts: Vec<GraphVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeansArtifact {
    pub meta: Meta,
    pub table: MeansTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionParents {
    /// One-based.
    pub position: usize,
    pub target: String,
    pub parents: Vec<Parent>,
    pub n_candidates: usize,
    pub dropped_constant: Vec<String>,
    pub n_tests: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentsArtifact {
    pub meta: Meta,
    pub n_rows: usize,
    pub positions: Vec<PositionParents>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucArtifact {
    pub meta: Meta,
    /// Parents used by the discovered variant, per position.
    pub discovered: Vec<Vec<String>>,
    pub table: AucTable,
}

/// State shared by one command invocation.
pub struct Ctx {
    pub command: Command,
    pub resolved: Resolved,
    pub out: OutDir,
    dataset: Option<PathBuf>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

impl Ctx {
    fn meta(&self) -> Meta {
        Meta {
            tool: TOOL.to_string(),
            version: VERSION.to_string(),
            command: self.command.name().to_string(),
            config: self.resolved.config.clone(),
            inputs: self.inputs.clone(),
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let d = self.out.write(name, bytes)?;
        self.outputs.push(d);
        Ok(())
    }

    fn input(&mut self, path: &Path, producer: &'static str, flag: &'static str) -> Result<Vec<u8>> {
        let (bytes, d) = read_input(path, producer, flag)?;
        self.inputs.push(d);
        Ok(bytes)
    }

    fn optional_input(&mut self, name: &str) -> Result<Option<Vec<u8>>> {
        let path = self.out.path(name);
        if !path.exists() {
            return Ok(None);
        }
        self.input(&path, "report", "out-dir").map(Some)
    }

    fn load_dataset(&mut self) -> Result<Dataset> {
        let path = self.dataset.clone().unwrap_or_else(|| self.out.path("dataset.csv"));
        let bytes = self.input(&path, "simulate", "dataset")?;
        let d = Dataset::read_csv(bytes.as_slice()).map_err(|source| CliError::Input { path, source })?;
        Ok(if self.resolved.config.positive_only { d.positive_pageviews() } else { d })
    }

    fn finish(mut self) -> Result<()> {
        let manifest = Manifest { meta: self.meta(), outputs: std::mem::take(&mut self.outputs) };
        self.out.write(&format!("{}.manifest.json", self.command.name()), &to_json(&manifest)?)?;
        Ok(())
    }
}

/// Parse the config, resolve seeds and run the chosen command on a
/// thread pool of `--jobs` workers.
pub fn run(cli: &Cli) -> Result<()> {
    let resolved = RunConfig::load(cli.global.config.as_deref())?.resolve(cli.global.seed)?;
    let work = || -> Result<()> {
        let out = OutDir::open(&cli.global.out_dir)?;
        let mut ctx = Ctx {
            command: cli.command,
            resolved,
            out,
            dataset: cli.global.dataset.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        match cli.command {
            Command::Simulate => cmd_simulate(&mut ctx)?,
            Command::Graph => cmd_graph(&mut ctx)?,
            Command::Estimate => cmd_estimate(&mut ctx)?,
            Command::Discover => cmd_discover(&mut ctx)?,
            Command::PredictEval => cmd_predict_eval(&mut ctx)?,
            Command::Report => cmd_report(&mut ctx)?,
        }
        ctx.finish()
    };
    match cli.global.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(usize::from(jobs))
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?
            .install(work),
        None => work(),
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let core = |e: csv::Error| CliError::Core(e.into());
    w.write_record(header).map_err(core)?;
    for r in rows {
        w.write_record(r).map_err(core)?;
    }
    w.into_inner().map_err(|e| CliError::Core(interference_core::Error::Io(e.into_error())))
}

pub fn cmd_simulate(ctx: &mut Ctx) -> Result<()> {
    let sem = ctx.resolved.sem.clone();
    let sim = &ctx.resolved.config.simulate;
    let (n, draws) = (sim.n, sim.oracle_draws);
    let d = simulate(&sem, n)?;
    let mut buf = Vec::new();
    d.write_csv(&mut buf)?;
    ctx.write("dataset.csv", &buf)?;
    let oracle = oracle_table(&sem, draws)?;
    let mut buf = Vec::new();
    oracle.write_csv(&mut buf)?;
    ctx.write("oracle.csv", &buf)
}

pub fn cmd_graph(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.resolved.sem.m;
    let mut dag = build_ad_dag(m)?;
    for (from, to) in &ctx.resolved.config.graph.extra_edges {
        dag = dag.with_edge(from, to)?;
    }
    let verdicts = ctx
        .resolved
        .rules(m)?
        .into_iter()
        .map(|rule| {
            let swig = swig_transform(&dag, &Intervention::from_rule(&rule))?;
            Ok(GraphVerdict { ignorable: network_ignorability_holds(&dag, &rule)?, swig: swig.dag.to_document(), rule })
        })
        .collect::<Result<Vec<_>>>()?;
    let art = GraphArtifact { meta: ctx.meta(), m, dag: dag.to_document(), verdicts };
    ctx.write("graph.json", &to_json(&art)?)
}

fn kind_name(kind: EffectKind) -> &'static str {
    match kind {
        EffectKind::Mean => "mean",
        EffectKind::Unit => "unit",
        EffectKind::Spillover => "spillover",
        EffectKind::Overall => "overall",
        EffectKind::AverageOverall => "average_overall",
    }
}

fn effect_row(e: &EffectEstimate) -> Vec<String> {
    vec![
        e.estimator.name().to_string(),
        kind_name(e.target.kind).to_string(),
        e.target.label(),
        e.target.position.map(|i| (i + 1).to_string()).unwrap_or_default(),
        e.target.rules[0].code(),
        e.target.rules.get(1).map(AllocationRule::code).unwrap_or_default(),
        fmt_f64(e.value),
        fmt_f64(e.stderr),
        fmt_f64(e.ci.0),
        fmt_f64(e.ci.1),
    ]
}

pub fn cmd_estimate(ctx: &mut Ctx) -> Result<()> {
    let d = ctx.load_dataset()?;
    let rules = ctx.resolved.rules(d.m())?;
    let est = &ctx.resolved.config.estimate;
    let opts =
        EstimateOptions { k_folds: est.k_folds, seed: ctx.resolved.seed, level: est.level, bootstrap: est.bootstrap };
    let table = estimate_table(&d, &est.nuisance, &opts)?;

    let mut header = vec!["rule".to_string(), "position".to_string()];
    for e in COLUMNS {
        for suffix in ["", "_se", "_ci_lo", "_ci_hi"] {
            header.push(format!("{}{suffix}", e.name()));
        }
    }
    header.push("observed".to_string());
    let mut rows = Vec::new();
    for rule in &rules {
        for i in 0..d.m() {
            let mut row = vec![rule.code(), (i + 1).to_string()];
            for e in COLUMNS {
                let x = table.get(e).mean_estimate(rule, i)?;
                row.extend([fmt_f64(x.value), fmt_f64(x.stderr), fmt_f64(x.ci.0), fmt_f64(x.ci.1)]);
            }
            row.push(fmt_f64(table.observed[i]));
            rows.push(row);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write("means.csv", &csv_bytes(&header, &rows)?)?;

    let mut rows = Vec::new();
    for e in COLUMNS {
        for eff in enumerate_effects(table.get(e))? {
            if eff.target.rules.iter().all(|r| rules.contains(r)) {
                rows.push(effect_row(&eff));
            }
        }
    }
    let header = ["estimator", "kind", "label", "position", "rule", "reference", "value", "stderr", "ci_lo", "ci_hi"];
    ctx.write("effects.csv", &csv_bytes(&header, &rows)?)?;

    let art = MeansArtifact { meta: ctx.meta(), table };
    ctx.write("means.json", &to_json(&art)?)
}

/// Discover the parents of every outcome in parallel across positions.
fn discover_all(d: &Dataset, opts: &DiscoveryOptions, keep_self_in_d1: bool) -> Result<Vec<Discovery>> {
    (0..d.m())
        .into_par_iter()
        .map(|i| {
            let table = fci_preprocess(d, i, PreprocessOptions { keep_self_in_d1 })?;
            Ok(discover_table_parents(&table, opts)?)
        })
        .collect()
}

pub fn cmd_discover(ctx: &mut Ctx) -> Result<()> {
    let d = ctx.load_dataset()?;
    let section = &ctx.resolved.config.discover;
    let found = discover_all(&d, &section.options, section.keep_self_in_d1)?;
    let mut rows = Vec::new();
    for disc in &found {
        for (k, t) in disc.trace.iter().enumerate() {
            rows.push(vec![
                (k + 1).to_string(),
                disc.parents.target.clone(),
                t.level.to_string(),
                t.candidate.clone(),
                t.conditioning.join(";"),
                fmt_f64(t.statistic),
                fmt_f64(t.p_value),
                t.independent.to_string(),
            ]);
        }
    }
    let header = ["test", "target", "level", "candidate", "conditioning", "statistic", "p_value", "independent"];
    ctx.write("trace.csv", &csv_bytes(&header, &rows)?)?;
    let positions = found
        .into_iter()
        .enumerate()
        .map(|(i, disc)| PositionParents {
            position: i + 1,
            target: disc.parents.target,
            parents: disc.parents.parents,
            n_candidates: disc.candidates.len(),
            dropped_constant: disc.dropped_constant,
            n_tests: disc.trace.len(),
        })
        .collect();
    let art = ParentsArtifact { meta: ctx.meta(), n_rows: d.len(), positions };
    ctx.write("parents.json", &to_json(&art)?)
}

pub fn cmd_predict_eval(ctx: &mut Ctx) -> Result<()> {
    let d = ctx.load_dataset()?;
    let cfg = &ctx.resolved.config;
    let section = &cfg.predict_eval;
    let (train, test) = split_by_id(&d, ctx.resolved.seed, section.train_fraction)?;
    let discovered = if section.variants.contains(&FeatureVariant::Discovered) {
        discover_all(&train, &cfg.discover.options, section.keep_self_in_d1)?
            .into_iter()
            .map(|disc| disc.parents.columns())
            .collect()
    } else {
        Vec::new()
    };
    let opts = PredictEvalOptions {
        model: section.model,
        variants: section.variants.clone(),
        discovered: discovered.clone(),
        keep_self_in_d1: section.keep_self_in_d1,
    };
    let table = predict_eval(&train, &test, &opts)?;
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.position.to_string(),
                r.variant.name().to_string(),
                r.n_features.to_string(),
                fmt_f64(r.auc),
                fmt_f64(100.0 * r.rel_diff),
            ]
        })
        .collect();
    ctx.write("auc.csv", &csv_bytes(&["position", "variant", "n_features", "auc", "rel_diff_pct"], &rows)?)?;
    let art = AucArtifact { meta: ctx.meta(), discovered, table };
    ctx.write("auc.json", &to_json(&art)?)
}

fn parse_json<T: serde::de::DeserializeOwned>(ctx: &Ctx, name: &str, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Input { path: ctx.out.path(name), source: e.into() })
}

/// An estimate whose interval excludes the oracle value.
struct Flag {
    estimator: Estimator,
    rule: AllocationRule,
    position: usize,
    estimate: EffectEstimate,
    oracle: f64,
    oracle_se: f64,
}

fn oracle_flags(table: &MeansTable, oracle: &OracleTable) -> Result<Vec<Flag>> {
    let mut flags = Vec::new();
    for e in COLUMNS {
        for rule in &table.rules {
            for i in 0..table.m {
                let Some(truth) = oracle.get(rule, i) else {
                    continue;
                };
                let x = table.get(e).mean_estimate(rule, i)?;
                if truth.mean < x.ci.0 || truth.mean > x.ci.1 {
                    flags.push(Flag {
                        estimator: e,
                        rule: rule.clone(),
                        position: i,
                        estimate: x,
                        oracle: truth.mean,
                        oracle_se: truth.stderr,
                    });
                }
            }
        }
    }
    Ok(flags)
}

fn pm(e: &EffectEstimate) -> String {
    format!("{:.4} ± {:.4}", e.value, (e.ci.1 - e.ci.0) / 2.0)
}

pub fn cmd_report(ctx: &mut Ctx) -> Result<()> {
    let means_path = ctx.out.path("means.json");
    let means_bytes = ctx.input(&means_path, "estimate", "out-dir")?;
    let means: MeansArtifact = parse_json(ctx, "means.json", &means_bytes)?;
    let oracle = match ctx.optional_input("oracle.csv")? {
        Some(b) => Some(
            OracleTable::read_csv(b.as_slice())
                .map_err(|source| CliError::Input { path: ctx.out.path("oracle.csv"), source })?,
        ),
        None => None,
    };
    let graph: Option<GraphArtifact> = match ctx.optional_input("graph.json")? {
        Some(b) => Some(parse_json(ctx, "graph.json", &b)?),
        None => None,
    };
    let parents: Option<ParentsArtifact> = match ctx.optional_input("parents.json")? {
        Some(b) => Some(parse_json(ctx, "parents.json", &b)?),
        None => None,
    };
    let auc: Option<AucArtifact> = match ctx.optional_input("auc.json")? {
        Some(b) => Some(parse_json(ctx, "auc.json", &b)?),
        None => None,
    };

    let t = &means.table;
    let mut s = String::new();
    let _ = writeln!(s, "{TOOL} {VERSION} report");
    let _ = writeln!(s, "seed {}", ctx.resolved.seed);
    let _ = writeln!(s, "\ninputs");
    for d in &ctx.inputs {
        let _ = writeln!(s, "  {:<14} sha256 {}", d.file, d.sha256);
    }

    let level = t.get(Estimator::Aipw).level;
    let _ = writeln!(
        s,
        "\ncounterfactual means, N={} pageviews, K={} folds, {:.0}% intervals ({})",
        t.n,
        t.k_folds,
        100.0 * level,
        if t.get(Estimator::Aipw).replicates.is_empty() { "influence function" } else { "bootstrap" }
    );
    let _ = write!(s, "{:<9} {:>3}", "rule", "pos");
    for e in COLUMNS {
        let _ = write!(s, "  {:>17}", e.name());
    }
    let _ = write!(s, "  {:>8}", "observed");
    if oracle.is_some() {
        let _ = write!(s, "  {:>8}", "oracle");
    }
    let _ = writeln!(s);
    for rule in &t.rules {
        for i in 0..t.m {
            let _ = write!(s, "{:<9} {:>3}", rule.to_string(), i + 1);
            for e in COLUMNS {
                let _ = write!(s, "  {:>17}", pm(&t.get(e).mean_estimate(rule, i)?));
            }
            let _ = write!(s, "  {:>8.4}", t.observed[i]);
            if let Some(o) = oracle.as_ref().and_then(|o| o.get(rule, i)) {
                let _ = write!(s, "  {:>8.4}", o.mean);
            }
            let _ = writeln!(s);
        }
    }

    let _ = writeln!(s, "\naipw effects");
    for eff in enumerate_effects(t.get(Estimator::Aipw))? {
        let _ = writeln!(s, "  {:<32} {:>8.4}  [{:.4}, {:.4}]", eff.target.label(), eff.value, eff.ci.0, eff.ci.1);
    }

    let flags = match &oracle {
        Some(o) => Some(oracle_flags(t, o)?),
        None => None,
    };
    match &flags {
        Some(f) => {
            let _ = writeln!(
                s,
                "\noracle check: {} of {} intervals exclude the oracle value",
                f.len(),
                3 * t.rules.len() * t.m
            );
            for x in f {
                let _ = writeln!(
                    s,
                    "  {:<8} {} pos {}: {:.4} [{:.4}, {:.4}] vs oracle {:.4}",
                    x.estimator.name(),
                    x.rule,
                    x.position + 1,
                    x.estimate.value,
                    x.estimate.ci.0,
                    x.estimate.ci.1,
                    x.oracle
                );
            }
        }
        None => {
            let _ = writeln!(s, "\noracle check: skipped (no oracle.csv; run `interference-lab simulate`)");
        }
    }

    if let Some(g) = &graph {
        let _ = writeln!(s, "\nidentification (m={}, {} nodes, {} edges)", g.m, g.dag.nodes.len(), g.dag.edges.len());
        for v in &g.verdicts {
            let _ = writeln!(
                s,
                "  {:<9} network ignorability {}",
                v.rule.to_string(),
                if v.ignorable { "holds" } else { "FAILS" }
            );
        }
    }

    if let Some(p) = &parents {
        let sem = match &p.meta.config.sem {
            crate::config::SemSource::Inline(c) => Some(c),
            crate::config::SemSource::Path(_) => None,
        };
        let _ = writeln!(s, "\ndiscovered parents ({} rows)", p.n_rows);
        for pos in &p.positions {
            let cols: Vec<&str> = pos.parents.iter().map(|x| x.column.as_str()).collect();
            let _ = writeln!(s, "  {:<4} {}", pos.target, cols.join(" "));
            if let Some(sem) = sem.filter(|c| pos.position <= c.m) {
                let truth = true_parents(sem, pos.position - 1);
                let hit = cols.iter().filter(|c| truth.iter().any(|t| t == *c)).count();
                let _ = writeln!(
                    s,
                    "       vs configured simulator: {hit} of {} found, {} extra",
                    truth.len(),
                    cols.len() - hit
                );
            }
        }
    }

    if let Some(a) = &auc {
        let _ = writeln!(s, "\nheld-out auc (train {}, test {})", a.table.n_train, a.table.n_test);
        for r in &a.table.rows {
            let _ = writeln!(
                s,
                "  pos {} {:<12} {:>3} features  auc {:.4}  {:+.2}%",
                r.position,
                r.variant.name(),
                r.n_features,
                r.auc,
                100.0 * r.rel_diff
            );
        }
    }

    let warnings: Vec<&String> = t.warnings.iter().chain(auc.iter().flat_map(|a| &a.table.warnings)).collect();
    if !warnings.is_empty() {
        let _ = writeln!(s, "\nwarnings");
        for w in warnings {
            let _ = writeln!(s, "  {w}");
        }
    }

    let rows: Vec<Vec<String>> = flags
        .unwrap_or_default()
        .iter()
        .map(|x| {
            vec![
                x.estimator.name().to_string(),
                x.rule.code(),
                (x.position + 1).to_string(),
                fmt_f64(x.estimate.value),
                fmt_f64(x.estimate.ci.0),
                fmt_f64(x.estimate.ci.1),
                fmt_f64(x.oracle),
                fmt_f64(x.oracle_se),
            ]
        })
        .collect();
    let header = ["estimator", "rule", "position", "estimate", "ci_lo", "ci_hi", "oracle", "oracle_mc_se"];
    ctx.write("flags.csv", &csv_bytes(&header, &rows)?)?;
    ctx.write("report.txt", s.as_bytes())
}
