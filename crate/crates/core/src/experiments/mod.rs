//! Experiment drivers: the representation comparison over sampled linear
//! plants, the end-to-end pipeline on nonlinear benchmarks, and the file
//! outputs shared by the command-line tool.

pub mod commands;
mod pipeline;
mod report;
mod table1;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use pipeline::{
    choose_decomposition, initial_states, prepare, rollout_from, run_pipeline, solve_decomposition, Choice, MeanStd,
    PipelineConfig, PipelineReport, PipelineRow, Prepared, Representation, RepresentationRun,
};
pub use report::{bar_chart_svg, write_rows, OutputFormat, Row};
pub use table1::{run_table1, Cell, CellSummary, SampleRow, Table1Config, Table1Record};

use crate::error::{Error, Result};

/// Fraction with a Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: usize,
    pub trials: usize,
    pub fraction: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Wilson score interval at 95% confidence. Zero trials give `[0, 1]`.
pub fn wilson_interval(successes: usize, trials: usize) -> Proportion {
    const Z: f64 = 1.959_963_984_540_054;
    if trials == 0 {
        return Proportion { successes, trials, fraction: 0.0, lower: 0.0, upper: 1.0 };
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Proportion { successes, trials, fraction: p, lower: (center - half).max(0.0), upper: (center + half).min(1.0) }
}

/// Wall-clock seconds per named phase. Kept out of row outputs so those
/// stay byte-identical across runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings(pub Vec<(String, f64)>);

impl PhaseTimings {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push((phase.to_string(), start.elapsed().as_secs_f64()));
        out
    }
}

/// Runs `f` inside a rayon pool with `jobs` workers (`0` = rayon default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
