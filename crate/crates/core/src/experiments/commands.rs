//! Command implementations behind the `podec` binary. Each command reads a
//! TOML config (all fields optional), applies the common flags and writes
//! `record.json`, `rows.csv` (or `rows.json`) and `summary.md` to `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::pipeline::{
    choose_decomposition, initial_states, prepare, rollout_from, solve_decomposition, Representation,
};
use super::report::{bar_chart_svg, write_json, write_rows, OutputFormat, Row};
use super::{run_pipeline, run_table1, with_jobs, PipelineConfig, Table1Config};
use crate::care::{solve_care, PlantSpec};
use crate::decomposition::{
    count_decompositions, enumerate_decompositions_with_budget, Decomposition, LqrEvaluator,
    DEFAULT_ENUMERATION_BUDGET,
};
use crate::error::{Error, Result};
use crate::ga::{ga_search_with, write_trace_csv, GAConfig};
use crate::representation::{balanced_map, sparse_svd_map, transform_plant, StiefelL1Config};
use crate::serde_util::fmt_real;
use crate::tabular::{linearize, read_policy, write_policy, write_trajectory_csv, TabularPolicy};
use crate::zoo::{benchmark_by_name, derive_seed, sample, SampleConfig, SampledPlant, Strategy};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct CommonOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub format: OutputFormat,
    pub jobs: usize,
}

/// Parses a TOML config file, or the defaults when no file is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(toml::from_str(&fs::read_to_string(p)?)?),
    }
}

fn prepare_out(opts: &CommonOptions) -> Result<()> {
    fs::create_dir_all(&opts.out)?;
    Ok(())
}

/// A linear plant: a linearized benchmark when `system` is set, otherwise a
/// sampled one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSource {
    pub system: Option<String>,
    pub strategy: Strategy,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub scale: f64,
    pub zero_sv_count: usize,
}

impl Default for PlantSource {
    fn default() -> Self {
        PlantSource { system: None, strategy: Strategy::I, m: 2, n: 4, seed: 0, scale: 1.0, zero_sv_count: 0 }
    }
}

impl PlantSource {
    fn sample_config(&self, seed: u64) -> SampleConfig {
        SampleConfig { scale: self.scale, zero_sv_count: self.zero_sv_count, ..SampleConfig::new(self.strategy, self.m, self.n, seed) }
    }

    pub fn build(&self) -> Result<PlantSpec> {
        match &self.system {
            Some(name) => linearize(&benchmark_by_name(name)?),
            None => Ok(sample(&self.sample_config(self.seed))?.plant),
        }
    }
}

fn matrix_json(m: &DMatrix<f64>) -> String {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    serde_json::to_string(&rows).expect("finite matrix serializes")
}

pub fn table1(mut cfg: Table1Config, opts: &CommonOptions) -> Result<()> {
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    prepare_out(opts)?;
    let rec = with_jobs(opts.jobs, || run_table1(&cfg))??;
    write_json(&opts.out.join("record.json"), &rec)?;
    write_rows(&opts.out, &rec.rows, opts.format)?;
    fs::write(opts.out.join("summary.md"), rec.summary_markdown())?;
    fs::create_dir_all(opts.out.join("plots"))?;
    let groups: Vec<(String, Vec<f64>)> =
        rec.cells.iter().map(|c| (c.cell.clone(), vec![c.svd.fraction, c.balanced.fraction])).collect();
    fs::write(
        opts.out.join("plots/improved_fraction.svg"),
        bar_chart_svg("Fraction of plants with a lower best value-error", &["sparse SVD map", "balanced"], &groups),
    )?;
    Ok(())
}

pub fn pipeline(mut cfg: PipelineConfig, opts: &CommonOptions) -> Result<()> {
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    prepare_out(opts)?;
    let rep = with_jobs(opts.jobs, || run_pipeline(&cfg))??;
    write_json(&opts.out.join("record.json"), &rep)?;
    write_rows(&opts.out, &rep.rows, opts.format)?;
    fs::write(opts.out.join("summary.md"), rep.summary_markdown())?;
    fs::create_dir_all(opts.out.join("plots"))?;
    let n = rep.rows.len().max(1) as f64;
    fs::write(
        opts.out.join("plots/converged_fraction.svg"),
        bar_chart_svg(
            &format!("Converged rollouts: {}", cfg.system),
            &["converged"],
            &[
                ("original".into(), vec![rep.original.converged as f64 / n]),
                ("transformed".into(), vec![rep.transformed.converged as f64 / n]),
            ],
        ),
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleCommand {
    #[serde(flatten)]
    pub source: PlantSource,
    pub count: usize,
}

impl Default for SampleCommand {
    fn default() -> Self {
        SampleCommand { source: PlantSource::default(), count: 5 }
    }
}

#[derive(Serialize)]
struct SampleRow {
    sample: usize,
    seed: u64,
    strategy: String,
    retries: usize,
    a: String,
    b: String,
    q: String,
    r: String,
}

impl Row for SampleRow {
    fn header() -> Vec<&'static str> {
        vec!["sample", "seed", "strategy", "retries", "a", "b", "q", "r"]
    }
    fn record(&self) -> Vec<String> {
        vec![
            self.sample.to_string(),
            self.seed.to_string(),
            self.strategy.clone(),
            self.retries.to_string(),
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.r.clone(),
        ]
    }
}

pub fn sample_plants(mut cfg: SampleCommand, opts: &CommonOptions) -> Result<()> {
    if let Some(s) = opts.seed {
        cfg.source.seed = s;
    }
    prepare_out(opts)?;
    let plants: Vec<SampledPlant> = (0..cfg.count)
        .map(|i| sample(&cfg.source.sample_config(derive_seed(cfg.source.seed, i as u64))))
        .collect::<Result<_>>()?;
    let rows: Vec<SampleRow> = plants
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRow {
            sample: i,
            seed: s.config.seed,
            strategy: s.config.strategy.to_string(),
            retries: s.retries,
            a: matrix_json(&s.plant.a),
            b: matrix_json(&s.plant.b),
            q: matrix_json(&s.plant.q),
            r: matrix_json(&s.plant.r),
        })
        .collect();
    write_json(&opts.out.join("record.json"), &serde_json::json!({ "config": cfg, "plants": plants }))?;
    write_rows(&opts.out, &rows, opts.format)?;
    fs::write(
        opts.out.join("summary.md"),
        format!(
            "# Sampled plants\n\n{} plant(s), strategy {}, m = {}, n = {}, total retries {}.\n",
            plants.len(),
            cfg.source.strategy,
            cfg.source.m,
            cfg.source.n,
            plants.iter().map(|p| p.retries).sum::<usize>()
        ),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    #[default]
    Svd,
    Balanced,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformCommand {
    #[serde(flatten)]
    pub source: PlantSource,
    pub map: MapKind,
    pub stiefel: StiefelL1Config,
}

#[derive(Serialize)]
struct EntryRow {
    matrix: &'static str,
    row: usize,
    col: usize,
    value: f64,
}

impl Row for EntryRow {
    fn header() -> Vec<&'static str> {
        vec!["matrix", "row", "col", "value"]
    }
    fn record(&self) -> Vec<String> {
        vec![self.matrix.to_string(), self.row.to_string(), self.col.to_string(), fmt_real(self.value)]
    }
}

fn entries(name: &'static str, m: &DMatrix<f64>, out: &mut Vec<EntryRow>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(EntryRow { matrix: name, row: r, col: c, value: m[(r, c)] });
        }
    }
}

pub fn transform(mut cfg: TransformCommand, opts: &CommonOptions) -> Result<()> {
    if let Some(s) = opts.seed {
        cfg.source.seed = s;
    }
    prepare_out(opts)?;
    let plant = cfg.source.build()?;
    let map = match cfg.map {
        MapKind::Svd => sparse_svd_map(&plant, &cfg.stiefel)?,
        MapKind::Balanced => balanced_map(&plant)?,
    };
    let mapped = transform_plant(&plant, &map)?;
    let (_, k) = solve_care(&plant)?;
    let theta = map.mapped_gain(&k)?;
    let mut rows = Vec::new();
    entries("t_y", &map.t_y, &mut rows);
    entries("t_v", &map.t_v, &mut rows);
    entries("mapped_gain", &theta, &mut rows);
    write_json(
        &opts.out.join("record.json"),
        &serde_json::json!({ "config": cfg, "map": map, "plant": plant, "mapped_plant": mapped }),
    )?;
    write_rows(&opts.out, &rows, opts.format)?;
    fs::write(
        opts.out.join("summary.md"),
        format!(
            "# Representation map ({})\n\nLargest off-diagonal entry of the mapped gain: {}\n\nFallback to plain SVD basis: {}\n",
            map.provenance,
            fmt_real(crate::representation::max_offdiag(&theta)),
            map.fallback
        ),
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnumerateCommand {
    #[serde(flatten)]
    pub source: PlantSource,
    pub max_groups: Option<usize>,
    pub budget: u128,
}

impl Default for EnumerateCommand {
    fn default() -> Self {
        EnumerateCommand { source: PlantSource::default(), max_groups: None, budget: DEFAULT_ENUMERATION_BUDGET }
    }
}

#[derive(Serialize)]
struct DecompositionRow {
    index: usize,
    label: String,
    decomposition: String,
    err_lqr: f64,
    compute_surrogate: f64,
    stable: bool,
}

impl Row for DecompositionRow {
    fn header() -> Vec<&'static str> {
        vec!["index", "label", "decomposition", "err_lqr", "compute_surrogate", "stable"]
    }
    fn record(&self) -> Vec<String> {
        vec![
            self.index.to_string(),
            self.label.clone(),
            self.decomposition.clone(),
            fmt_real(self.err_lqr),
            fmt_real(self.compute_surrogate),
            self.stable.to_string(),
        ]
    }
}

pub fn enumerate(mut cfg: EnumerateCommand, opts: &CommonOptions) -> Result<()> {
    use rayon::prelude::*;
    if let Some(s) = opts.seed {
        cfg.source.seed = s;
    }
    prepare_out(opts)?;
    let plant = cfg.source.build()?;
    let (m, n) = (plant.m(), plant.n());
    let max_groups = cfg.max_groups.unwrap_or(m.min(n));
    let all: Vec<Decomposition> = enumerate_decompositions_with_budget(m, n, max_groups, cfg.budget)?.collect();
    let evaluator = LqrEvaluator::new(&plant)?;
    let evals = with_jobs(opts.jobs, || all.par_iter().map(|d| evaluator.evaluate(d)).collect::<Result<Vec<_>>>())??;
    let rows: Vec<DecompositionRow> = all
        .iter()
        .zip(&evals)
        .enumerate()
        .map(|(i, (d, e))| DecompositionRow {
            index: i,
            label: d.label(),
            decomposition: d.to_canonical_json(),
            err_lqr: e.err_lqr,
            compute_surrogate: e.compute_surrogate,
            stable: e.stable,
        })
        .collect();
    let best = rows
        .iter()
        .filter(|r| r.err_lqr.is_finite())
        .min_by(|a, b| crate::decomposition::err_cmp(a.err_lqr, b.err_lqr).then(a.compute_surrogate.total_cmp(&b.compute_surrogate)));
    write_json(
        &opts.out.join("record.json"),
        &serde_json::json!({
            "config": cfg,
            "count": count_decompositions(m, n, max_groups).to_string(),
            "best_index": best.map(|b| b.index),
        }),
    )?;
    write_rows(&opts.out, &rows, opts.format)?;
    let mut summary = format!("# Enumeration\n\n{} decompositions, {} stable.\n", rows.len(), rows.iter().filter(|r| r.stable).count());
    if let Some(b) = best {
        summary.push_str(&format!("\nBest: `{}` with value-error {}\n", b.label, fmt_real(b.err_lqr)));
    }
    fs::write(opts.out.join("summary.md"), summary)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaCommand {
    #[serde(flatten)]
    pub source: PlantSource,
    pub ga: GAConfig,
}

pub fn ga(mut cfg: GaCommand, opts: &CommonOptions) -> Result<()> {
    if let Some(s) = opts.seed {
        cfg.source.seed = s;
        cfg.ga.seed = s;
    }
    prepare_out(opts)?;
    let plant = cfg.source.build()?;
    let evaluator = LqrEvaluator::new(&plant)?;
    let out = with_jobs(opts.jobs, || ga_search_with(&evaluator, &cfg.ga))??;
    let rows: Vec<DecompositionRow> = out
        .ranked
        .iter()
        .enumerate()
        .map(|(i, r)| DecompositionRow {
            index: i,
            label: r.decomposition.label(),
            decomposition: r.decomposition.to_canonical_json(),
            err_lqr: r.evaluation.err_lqr,
            compute_surrogate: r.evaluation.compute_surrogate,
            stable: r.evaluation.stable,
        })
        .collect();
    write_json(&opts.out.join("record.json"), &serde_json::json!({ "config": cfg, "outcome": out }))?;
    write_rows(&opts.out, &rows, opts.format)?;
    write_trace_csv(&out.trace, fs::File::create(opts.out.join("trace.csv"))?)?;
    let summary = match out.best() {
        Some(b) => format!(
            "# GA search\n\n{} distinct decompositions evaluated, {} with finite value-error.\n\nBest: `{}` with value-error {}\n",
            out.ranked.len(),
            out.finite_count(),
            b.decomposition.label(),
            fmt_real(b.evaluation.err_lqr)
        ),
        None => format!("# GA search\n\n{} decompositions evaluated; none is stable.\n", out.ranked.len()),
    };
    fs::write(opts.out.join("summary.md"), summary)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyCommand {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub representation: Representation,
    /// Directory with `policy_<g>.bin` files from `pi`; solved afresh when absent.
    pub policies: Option<PathBuf>,
}

impl Default for PolicyCommand {
    fn default() -> Self {
        PolicyCommand { pipeline: PipelineConfig::default(), representation: Representation::Transformed, policies: None }
    }
}

#[derive(Serialize)]
struct PolicyRow {
    group: usize,
    states: Vec<usize>,
    inputs: Vec<usize>,
    policy_iterations: usize,
    sweeps: usize,
    mean_value: f64,
}

impl Row for PolicyRow {
    fn header() -> Vec<&'static str> {
        vec!["group", "states", "inputs", "policy_iterations", "sweeps", "mean_value"]
    }
    fn record(&self) -> Vec<String> {
        let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        vec![
            self.group.to_string(),
            join(&self.states),
            join(&self.inputs),
            self.policy_iterations.to_string(),
            self.sweeps.to_string(),
            fmt_real(self.mean_value),
        ]
    }
}

fn solve_policies(cfg: &PolicyCommand, prep: &super::pipeline::Prepared) -> Result<(Decomposition, Vec<TabularPolicy>)> {
    let choice = choose_decomposition(prep, cfg.representation, &cfg.pipeline)?;
    let policies = solve_decomposition(prep.system_for(cfg.representation), &choice.decomposition, &cfg.pipeline.dp)
        .map_err(|e| e.in_phase("policy_iteration"))?;
    Ok((choice.decomposition, policies))
}

pub fn pi(mut cfg: PolicyCommand, opts: &CommonOptions) -> Result<()> {
    if let Some(s) = opts.seed {
        cfg.pipeline.seed = s;
    }
    prepare_out(opts)?;
    let prep = prepare(&cfg.pipeline)?;
    let (d, policies) = with_jobs(opts.jobs, || solve_policies(&cfg, &prep))??;
    for (g, p) in policies.iter().enumerate() {
        write_policy(fs::File::create(opts.out.join(format!("policy_{g}.bin")))?, p)?;
    }
    let rows: Vec<PolicyRow> = policies
        .iter()
        .enumerate()
        .map(|(g, p)| PolicyRow {
            group: g,
            states: p.states.clone(),
            inputs: p.inputs.clone(),
            policy_iterations: p.policy_iterations,
            sweeps: p.sweeps,
            mean_value: p.values.iter().sum::<f64>() / p.values.len() as f64,
        })
        .collect();
    write_json(
        &opts.out.join("record.json"),
        &serde_json::json!({ "config": cfg, "decomposition": d, "map": prep.map }),
    )?;
    write_rows(&opts.out, &rows, opts.format)?;
    fs::write(
        opts.out.join("summary.md"),
        format!("# Policy iteration: {}\n\nDecomposition `{}`; {} policy file(s) written.\n", cfg.pipeline.system, d.label(), policies.len()),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct RolloutRow {
    start: usize,
    x0: Vec<f64>,
    converged: bool,
    escaped: bool,
    cost: f64,
    deviation: f64,
    steps: usize,
}

impl Row for RolloutRow {
    fn header() -> Vec<&'static str> {
        vec!["start", "x0", "converged", "escaped", "cost", "deviation", "steps"]
    }
    fn record(&self) -> Vec<String> {
        vec![
            self.start.to_string(),
            self.x0.iter().map(|&v| fmt_real(v)).collect::<Vec<_>>().join(" "),
            self.converged.to_string(),
            self.escaped.to_string(),
            fmt_real(self.cost),
            fmt_real(self.deviation),
            self.steps.to_string(),
        ]
    }
}

fn load_policies(dir: &Path) -> Result<Vec<TabularPolicy>> {
    let mut out = Vec::new();
    while let Ok(f) = fs::File::open(dir.join(format!("policy_{}.bin", out.len()))) {
        out.push(read_policy(std::io::BufReader::new(f))?);
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!("no policy_0.bin in {}", dir.display())));
    }
    Ok(out)
}

pub fn rollout(mut cfg: PolicyCommand, opts: &CommonOptions) -> Result<()> {
    if let Some(s) = opts.seed {
        cfg.pipeline.seed = s;
    }
    prepare_out(opts)?;
    let prep = prepare(&cfg.pipeline)?;
    let policies = match &cfg.policies {
        Some(dir) => load_policies(dir)?,
        None => with_jobs(opts.jobs, || solve_policies(&cfg, &prep))??.1,
    };
    let starts = initial_states(&prep.system, cfg.pipeline.starts, cfg.pipeline.start_fraction, cfg.pipeline.seed);
    fs::create_dir_all(opts.out.join("trajectories"))?;
    let mut rows = Vec::new();
    for (k, x0) in starts.iter().enumerate() {
        let (r, dev) = rollout_from(&prep, cfg.representation, &policies, x0, &cfg.pipeline.rollout)
            .map_err(|e| e.in_phase("rollout"))?;
        write_trajectory_csv(fs::File::create(opts.out.join(format!("trajectories/start_{k}.csv")))?, &r)?;
        rows.push(RolloutRow {
            start: k,
            x0: x0.clone(),
            converged: r.converged,
            escaped: r.escaped,
            cost: r.cost,
            deviation: dev,
            steps: r.inputs.len(),
        });
    }
    write_json(&opts.out.join("record.json"), &serde_json::json!({ "config": cfg, "map": prep.map }))?;
    write_rows(&opts.out, &rows, opts.format)?;
    fs::write(
        opts.out.join("summary.md"),
        format!(
            "# Rollouts: {} ({:?} coordinates)\n\n{}/{} converged.\n",
            cfg.pipeline.system,
            cfg.representation,
            rows.iter().filter(|r| r.converged).count(),
            rows.len()
        ),
    )?;
    Ok(())
}
