use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::Row;
use super::{wilson_interval, PhaseTimings, Proportion};
use crate::care::PlantSpec;
use crate::decomposition::{
    best_decomposition_exhaustive_with, count_decompositions, ExhaustiveConfig, LqrEvaluator,
};
use crate::error::{Error, Result};
use crate::ga::{ga_search_with, GAConfig};
use crate::representation::{balanced_map, sparse_svd_map, transform_plant, StiefelL1Config};
use crate::serde_util::{self, fmt_real};
use crate::zoo::{derive_seed, sample, SampleConfig, Strategy};

/// Strict improvement threshold on the best value-error.
pub const IMPROVEMENT_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub m: usize,
    pub n: usize,
    pub strategy: Strategy,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("({},{})-{}", self.m, self.n, self.strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Table1Config {
    pub cells: Vec<Cell>,
    pub samples: usize,
    pub seed: u64,
    /// Cells with more decompositions than this are searched with the GA.
    pub enumeration_budget: u128,
    pub ga: GAConfig,
    pub stiefel: StiefelL1Config,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            cells: vec![
                Cell { m: 2, n: 4, strategy: Strategy::I },
                Cell { m: 3, n: 3, strategy: Strategy::I },
                Cell { m: 3, n: 3, strategy: Strategy::II },
            ],
            samples: 30,
            seed: 0,
            enumeration_budget: 100_000,
            ga: GAConfig::default(),
            stiefel: StiefelL1Config::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub cell: String,
    pub sample: usize,
    pub seed: u64,
    /// `ok`, or the error that excluded the sample.
    pub status: String,
    pub svd_case: String,
    #[serde(with = "serde_util::extended_real")]
    pub err_original: f64,
    #[serde(with = "serde_util::extended_real")]
    pub err_svd: f64,
    /// NaN (written `null`) when the balanced map could not be built.
    #[serde(with = "serde_util::extended_real")]
    pub err_balanced: f64,
    pub improved_svd: bool,
    pub improved_balanced: bool,
    pub balanced_skipped: bool,
    /// `exhaustive`, or `ga` for an approximate search.
    pub method: String,
}

impl SampleRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

impl Row for SampleRow {
    fn header() -> Vec<&'static str> {
        vec![
            "cell", "sample", "seed", "status", "svd_case", "err_original", "err_svd", "err_balanced",
            "improved_svd", "improved_balanced", "balanced_skipped", "method",
        ]
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.cell.clone(),
            self.sample.to_string(),
            self.seed.to_string(),
            self.status.clone(),
            self.svd_case.clone(),
            fmt_real(self.err_original),
            fmt_real(self.err_svd),
            fmt_real(self.err_balanced),
            self.improved_svd.to_string(),
            self.improved_balanced.to_string(),
            self.balanced_skipped.to_string(),
            self.method.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub completed: usize,
    pub failed: usize,
    pub svd: Proportion,
    pub balanced: Proportion,
    pub balanced_skipped: usize,
    pub approximate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Record {
    pub config: Table1Config,
    pub rows: Vec<SampleRow>,
    pub cells: Vec<CellSummary>,
    pub failed: usize,
    pub timings: PhaseTimings,
}

impl Table1Record {
    /// Markdown table of the per-cell fractions.
    pub fn summary_markdown(&self) -> String {
        let mut s = String::from(
            "| cell | samples | SVD improved | 95% CI | balanced improved | 95% CI | skipped | search |\n|---|---|---|---|---|---|---|---|\n",
        );
        for c in &self.cells {
            s.push_str(&format!(
                "| {} | {} | {}/{} ({:.2}) | [{:.2}, {:.2}] | {}/{} ({:.2}) | [{:.2}, {:.2}] | {} | {} |\n",
                c.cell,
                c.completed,
                c.svd.successes,
                c.svd.trials,
                c.svd.fraction,
                c.svd.lower,
                c.svd.upper,
                c.balanced.successes,
                c.balanced.trials,
                c.balanced.fraction,
                c.balanced.lower,
                c.balanced.upper,
                c.balanced_skipped,
                if c.approximate { "GA (approximate)" } else { "exhaustive" },
            ));
        }
        if self.failed > 0 {
            s.push_str(&format!("\n{} sample(s) failed and were excluded.\n", self.failed));
        }
        s
    }
}

/// Least value-error over all decompositions; infinite when every
/// decomposition is unstable.
fn best_err(plant: &PlantSpec, cfg: &Table1Config, seed: u64) -> Result<(f64, &'static str)> {
    let (m, n) = (plant.m(), plant.n());
    let evaluator = LqrEvaluator::new(plant)?;
    if count_decompositions(m, n, m.min(n)) <= cfg.enumeration_budget {
        let ex = ExhaustiveConfig { budget: cfg.enumeration_budget, ..Default::default() };
        match best_decomposition_exhaustive_with(&evaluator, &ex) {
            Ok((_, e)) => Ok((e.err_lqr, "exhaustive")),
            Err(Error::AllUnstable) => Ok((f64::INFINITY, "exhaustive")),
            Err(e) => Err(e),
        }
    } else {
        let ga = GAConfig { seed, ..cfg.ga.clone() };
        let out = ga_search_with(&evaluator, &ga)?;
        Ok((out.best().map_or(f64::INFINITY, |b| b.evaluation.err_lqr), "ga"))
    }
}

fn run_sample(cell: &Cell, label: &str, index: usize, seed: u64, cfg: &Table1Config) -> SampleRow {
    let mut row = SampleRow {
        cell: label.to_string(),
        sample: index,
        seed,
        status: "ok".into(),
        svd_case: String::new(),
        err_original: f64::NAN,
        err_svd: f64::NAN,
        err_balanced: f64::NAN,
        improved_svd: false,
        improved_balanced: false,
        balanced_skipped: false,
        method: String::new(),
    };
    let result = (|| -> Result<()> {
        let plant = sample(&SampleConfig::new(cell.strategy, cell.m, cell.n, seed))?.plant;
        let (orig, method) = best_err(&plant, cfg, seed)?;
        row.err_original = orig;
        row.method = method.into();
        let map = sparse_svd_map(&plant, &cfg.stiefel)?;
        row.svd_case = map.classification.as_ref().map_or("", |c| c.case_label()).to_string();
        row.err_svd = best_err(&transform_plant(&plant, &map)?, cfg, seed)?.0;
        row.improved_svd = row.err_svd < orig - IMPROVEMENT_MARGIN;
        match balanced_map(&plant) {
            Ok(b) => {
                row.err_balanced = best_err(&transform_plant(&plant, &b)?, cfg, seed)?.0;
                row.improved_balanced = row.err_balanced < orig - IMPROVEMENT_MARGIN;
            }
            Err(Error::GramianSingular(why)) => {
                log::warn!("{label} sample {index}: balanced map skipped ({why})");
                row.balanced_skipped = true;
            }
            Err(e) => return Err(e),
        }
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("{label} sample {index} failed: {e}");
        row.status = e.to_string();
    }
    row
}

fn summarize(cell: &Cell, label: &str, rows: &[SampleRow], cfg: &Table1Config) -> CellSummary {
    let ok: Vec<&SampleRow> = rows.iter().filter(|r| r.ok()).collect();
    let bal: Vec<&&SampleRow> = ok.iter().filter(|r| !r.balanced_skipped).collect();
    CellSummary {
        cell: label.to_string(),
        completed: ok.len(),
        failed: rows.len() - ok.len(),
        svd: wilson_interval(ok.iter().filter(|r| r.improved_svd).count(), ok.len()),
        balanced: wilson_interval(bal.iter().filter(|r| r.improved_balanced).count(), bal.len()),
        balanced_skipped: ok.len() - bal.len(),
        approximate: count_decompositions(cell.m, cell.n, cell.m.min(cell.n)) > cfg.enumeration_budget,
    }
}

/// Compares the best decomposition value-error of sampled plants in their
/// original coordinates against the sparse SVD map and the balanced map.
pub fn run_table1(cfg: &Table1Config) -> Result<Table1Record> {
    for c in &cfg.cells {
        SampleConfig::new(c.strategy, c.m, c.n, 0).validate()?;
        if c.m < 2 || c.n < 2 {
            return Err(Error::InvalidConfig(format!("cell {} cannot be decomposed", c.label())));
        }
    }
    let mut timings = PhaseTimings::default();
    let jobs: Vec<(usize, usize)> =
        (0..cfg.cells.len()).flat_map(|c| (0..cfg.samples).map(move |i| (c, i))).collect();
    let rows: Vec<SampleRow> = timings.time("samples", || {
        jobs.par_iter()
            .map(|&(c, i)| {
                let cell = &cfg.cells[c];
                let seed = derive_seed(derive_seed(cfg.seed, c as u64), i as u64);
                run_sample(cell, &cell.label(), i, seed, cfg)
            })
            .collect()
    });
    let cells = cfg
        .cells
        .iter()
        .map(|c| {
            let label = c.label();
            let own: Vec<SampleRow> = rows.iter().filter(|r| r.cell == label).cloned().collect();
            summarize(c, &label, &own, cfg)
        })
        .collect();
    let failed = rows.iter().filter(|r| !r.ok()).count();
    Ok(Table1Record { config: cfg.clone(), rows, cells, failed, timings })
}
