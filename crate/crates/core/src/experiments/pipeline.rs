use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::Row;
use super::PhaseTimings;
use crate::care::PlantSpec;
use crate::decomposition::{Decomposition, LqrEvaluator};
use crate::error::{Error, Result};
use crate::ga::{ga_search_with, GAConfig};
use crate::representation::{sparse_svd_map, transform_plant, RepresentationMap, StiefelL1Config};
use crate::serde_util::{self, fmt_real};
use crate::tabular::{
    compose_and_rollout, linearize, normalized_value_error, policy_iteration, DpConfig, NonlinearSystem, Rollout,
    RolloutConfig, Subsystem, TabularPolicy,
};
use crate::zoo::{benchmark_by_name, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub system: String,
    pub seed: u64,
    /// Number of rollout initial states.
    pub starts: usize,
    /// Initial states are uniform in `x_goal ± start_fraction · halfwidth`.
    pub start_fraction: f64,
    pub dp: DpConfig,
    pub rollout: RolloutConfig,
    pub ga: GAConfig,
    pub stiefel: StiefelL1Config,
    /// Skip the search in original coordinates and use this decomposition.
    pub original_decomposition: Option<Decomposition>,
    /// Skip the search in mapped coordinates and use this decomposition.
    pub transformed_decomposition: Option<Decomposition>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            system: "planar_quadrotor".into(),
            seed: 0,
            starts: 20,
            start_fraction: 0.5,
            dp: DpConfig { grid_points: 41, action_levels: 21, ..Default::default() },
            rollout: RolloutConfig::default(),
            ga: GAConfig { population: 32, generations: 30, max_domain_dim: Some(2), ..Default::default() },
            stiefel: StiefelL1Config::default(),
            original_decomposition: None,
            transformed_decomposition: None,
        }
    }
}

/// Which coordinates a decomposition lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Original,
    Transformed,
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Representation::Original),
            "transformed" | "svd" => Ok(Representation::Transformed),
            other => Err(Error::InvalidConfig(format!("unknown representation `{other}`"))),
        }
    }
}

/// The benchmark in both coordinate systems.
pub struct Prepared {
    pub system: NonlinearSystem,
    pub plant: PlantSpec,
    pub map: RepresentationMap,
    pub mapped_system: NonlinearSystem,
    pub mapped_plant: PlantSpec,
}

impl Prepared {
    pub fn system_for(&self, rep: Representation) -> &NonlinearSystem {
        match rep {
            Representation::Original => &self.system,
            Representation::Transformed => &self.mapped_system,
        }
    }

    pub fn plant_for(&self, rep: Representation) -> &PlantSpec {
        match rep {
            Representation::Original => &self.plant,
            Representation::Transformed => &self.mapped_plant,
        }
    }

    /// Initial state in the coordinates of `rep`.
    pub fn to_coordinates(&self, rep: Representation, x: &[f64]) -> Vec<f64> {
        match rep {
            Representation::Original => x.to_vec(),
            Representation::Transformed => {
                let dx = DVector::from_column_slice(x) - &self.system.x_goal;
                (&self.map.t_y * dx).iter().copied().collect()
            }
        }
    }

    /// Maps a state of `rep` back to original coordinates.
    pub fn to_original(&self, rep: Representation, y: &[f64]) -> Result<Vec<f64>> {
        match rep {
            Representation::Original => Ok(y.to_vec()),
            Representation::Transformed => {
                let inv = self.map.t_y.clone().try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
                Ok((inv * DVector::from_column_slice(y) + &self.system.x_goal).iter().copied().collect())
            }
        }
    }
}

/// Linearizes the named benchmark and builds its sparse SVD coordinates.
pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let system = benchmark_by_name(&cfg.system).map_err(|e| e.in_phase("system"))?;
    let plant = linearize(&system).map_err(|e| e.in_phase("linearize"))?;
    let map = sparse_svd_map(&plant, &cfg.stiefel).map_err(|e| e.in_phase("map"))?;
    let mapped_plant = transform_plant(&plant, &map).map_err(|e| e.in_phase("map"))?;
    let mapped_system = system
        .transformed(&map.t_y, &map.t_v, &format!("{}_svd", system.name))
        .map_err(|e| e.in_phase("map"))?;
    Ok(Prepared { system, plant, map, mapped_system, mapped_plant })
}

/// Decomposition chosen for one representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub decomposition: Decomposition,
    #[serde(with = "serde_util::extended_real")]
    pub err_lqr: f64,
    /// `search`, `search (no stable candidate)` or `configured`.
    pub source: String,
}

/// GA search (or the configured override) for one representation.
pub fn choose_decomposition(prep: &Prepared, rep: Representation, cfg: &PipelineConfig) -> Result<Choice> {
    let plant = prep.plant_for(rep);
    let evaluator = LqrEvaluator::new(plant).map_err(|e| e.in_phase("search"))?;
    let fixed = match rep {
        Representation::Original => &cfg.original_decomposition,
        Representation::Transformed => &cfg.transformed_decomposition,
    };
    if let Some(d) = fixed {
        let e = evaluator.evaluate(d).map_err(|e| e.in_phase("search"))?;
        return Ok(Choice { decomposition: d.clone(), err_lqr: e.err_lqr, source: "configured".into() });
    }
    let seed = derive_seed(cfg.seed, rep as u64);
    let out = ga_search_with(&evaluator, &GAConfig { seed, ..cfg.ga.clone() }).map_err(|e| e.in_phase("search"))?;
    let top = out.ranked.first().ok_or_else(|| Error::AllUnstable.in_phase("search"))?;
    let source = if top.evaluation.err_lqr.is_finite() { "search" } else { "search (no stable candidate)" };
    Ok(Choice { decomposition: top.decomposition.clone(), err_lqr: top.evaluation.err_lqr, source: source.into() })
}

/// Policy iteration for every group, children before parents. The returned
/// policies are in group order.
pub fn solve_decomposition(sys: &NonlinearSystem, d: &Decomposition, dp: &DpConfig) -> Result<Vec<TabularPolicy>> {
    d.validate(sys.m(), sys.n())?;
    let order = d.bottom_up_order().expect("validated forest");
    let mut solved: Vec<Option<TabularPolicy>> = vec![None; d.num_groups()];
    for g in order {
        let fixed: Vec<TabularPolicy> = d
            .descendants(g)
            .into_iter()
            .map(|c| solved[c].clone().expect("children are solved first"))
            .collect();
        let sub = Subsystem { states: d.policy_domain(g), inputs: d.groups[g].inputs.clone() };
        solved[g] = Some(policy_iteration(sys, &sub, &fixed, dp)?);
    }
    Ok(solved.into_iter().map(|p| p.expect("every group solved")).collect())
}

/// Seeded initial states in original coordinates.
pub fn initial_states(sys: &NonlinearSystem, count: usize, fraction: f64, seed: u64) -> Vec<Vec<f64>> {
    let s = sys.state_halfwidths();
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1_000 + k as u64));
            (0..sys.n())
                .map(|i| sys.x_goal[i] + fraction * s[i] * rng.random_range(-1.0..=1.0))
                .collect()
        })
        .collect()
}

/// Largest goal deviation normalized by the original state box.
fn original_deviation(prep: &Prepared, x: &[f64]) -> f64 {
    let s = prep.system.state_halfwidths();
    x.iter()
        .enumerate()
        .map(|(i, &v)| ((v - prep.system.x_goal[i]) / s[i]).abs())
        .fold(0.0, f64::max)
}

/// Rolls out `policies` from an original-coordinate start; convergence is
/// judged in original coordinates for both representations.
pub fn rollout_from(
    prep: &Prepared,
    rep: Representation,
    policies: &[TabularPolicy],
    x0: &[f64],
    cfg: &RolloutConfig,
) -> Result<(Rollout, f64)> {
    let sys = prep.system_for(rep);
    let mut r = compose_and_rollout(sys, policies, &prep.to_coordinates(rep, x0), cfg)?;
    let final_x = prep.to_original(rep, r.final_state())?;
    let dev = original_deviation(prep, &final_x);
    r.converged = !r.escaped && dev <= cfg.goal_ball;
    Ok((r, dev))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub states: Vec<usize>,
    pub inputs: Vec<usize>,
    pub policy_iterations: usize,
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationRun {
    pub choice: Choice,
    pub policies: Vec<PolicySummary>,
    pub converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRow {
    pub start: usize,
    pub x0: Vec<f64>,
    pub original_converged: bool,
    pub original_cost: f64,
    pub original_deviation: f64,
    pub transformed_converged: bool,
    pub transformed_cost: f64,
    pub transformed_deviation: f64,
    /// `(V_original − V_transformed) / V_original` from rollout costs.
    #[serde(with = "serde_util::extended_real")]
    pub normalized_error: f64,
}

impl Row for PipelineRow {
    fn header() -> Vec<&'static str> {
        vec![
            "start", "x0", "original_converged", "original_cost", "original_deviation", "transformed_converged",
            "transformed_cost", "transformed_deviation", "normalized_error",
        ]
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.start.to_string(),
            self.x0.iter().map(|&v| fmt_real(v)).collect::<Vec<_>>().join(" "),
            self.original_converged.to_string(),
            fmt_real(self.original_cost),
            fmt_real(self.original_deviation),
            self.transformed_converged.to_string(),
            fmt_real(self.transformed_cost),
            fmt_real(self.transformed_deviation),
            fmt_real(self.normalized_error),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub count: usize,
    #[serde(with = "serde_util::extended_real")]
    pub mean: f64,
    #[serde(with = "serde_util::extended_real")]
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return MeanStd { count: 0, mean: f64::NAN, std: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        MeanStd { count: v.len(), mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub map: RepresentationMap,
    pub original: RepresentationRun,
    pub transformed: RepresentationRun,
    pub rows: Vec<PipelineRow>,
    /// Over starts where both rollouts converged.
    pub normalized_error_converged: MeanStd,
    /// Over all starts.
    pub normalized_error_all: MeanStd,
    pub timings: PhaseTimings,
}

impl PipelineReport {
    pub fn summary_markdown(&self) -> String {
        let fmt_ms = |m: &MeanStd| {
            if m.count == 0 {
                "n/a".to_string()
            } else {
                format!("{:.4} ± {:.4} (n = {})", m.mean, m.std, m.count)
            }
        };
        let n = self.rows.len();
        format!(
            "# Pipeline: {}\n\n| representation | decomposition | LQR value-error | converged |\n|---|---|---|---|\n\
             | original | {} | {} | {}/{n} |\n| transformed | {} | {} | {}/{n} |\n\n\
             Normalized value error (original relative to transformed), converged pairs: {}\n\n\
             Normalized value error, all starts: {}\n",
            self.config.system,
            self.original.choice.decomposition.label(),
            fmt_real(self.original.choice.err_lqr),
            self.original.converged,
            self.transformed.choice.decomposition.label(),
            fmt_real(self.transformed.choice.err_lqr),
            self.transformed.converged,
            fmt_ms(&self.normalized_error_converged),
            fmt_ms(&self.normalized_error_all),
        )
    }
}

fn summaries(policies: &[TabularPolicy]) -> Vec<PolicySummary> {
    policies
        .iter()
        .map(|p| PolicySummary {
            states: p.states.clone(),
            inputs: p.inputs.clone(),
            policy_iterations: p.policy_iterations,
            sweeps: p.sweeps,
        })
        .collect()
}

/// Linearize, map, search both representations, solve the chosen
/// decompositions by policy iteration and compare rollouts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let mut timings = PhaseTimings::default();
    let prep = timings.time("prepare", || prepare(cfg))?;
    let mut runs = Vec::new();
    let mut policies = Vec::new();
    for rep in [Representation::Original, Representation::Transformed] {
        let choice = timings.time("search", || choose_decomposition(&prep, rep, cfg))?;
        log::info!("{rep:?}: {} (err {})", choice.decomposition.label(), fmt_real(choice.err_lqr));
        let pols = timings
            .time("policy_iteration", || solve_decomposition(prep.system_for(rep), &choice.decomposition, &cfg.dp))
            .map_err(|e| e.in_phase("policy_iteration"))?;
        runs.push(RepresentationRun { choice, policies: summaries(&pols), converged: 0 });
        policies.push(pols);
    }
    let starts = initial_states(&prep.system, cfg.starts, cfg.start_fraction, cfg.seed);
    let rows = timings
        .time("rollout", || -> Result<Vec<PipelineRow>> {
            starts
                .iter()
                .enumerate()
                .map(|(k, x0)| {
                    let (ro, dev_o) = rollout_from(&prep, Representation::Original, &policies[0], x0, &cfg.rollout)?;
                    let (rt, dev_t) = rollout_from(&prep, Representation::Transformed, &policies[1], x0, &cfg.rollout)?;
                    Ok(PipelineRow {
                        start: k,
                        x0: x0.clone(),
                        original_converged: ro.converged,
                        original_cost: ro.cost,
                        original_deviation: dev_o,
                        transformed_converged: rt.converged,
                        transformed_cost: rt.cost,
                        transformed_deviation: dev_t,
                        normalized_error: normalized_value_error(ro.cost, rt.cost).unwrap_or(f64::NAN),
                    })
                })
                .collect()
        })
        .map_err(|e| e.in_phase("rollout"))?;
    runs[0].converged = rows.iter().filter(|r| r.original_converged).count();
    runs[1].converged = rows.iter().filter(|r| r.transformed_converged).count();
    let transformed = runs.pop().expect("two runs");
    let original = runs.pop().expect("two runs");
    Ok(PipelineReport {
        config: cfg.clone(),
        map: prep.map.clone(),
        original,
        transformed,
        normalized_error_converged: MeanStd::of(
            rows.iter().filter(|r| r.original_converged && r.transformed_converged).map(|r| r.normalized_error),
        ),
        normalized_error_all: MeanStd::of(rows.iter().map(|r| r.normalized_error)),
        rows,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intro_system_transformed_split_converges() {
        let cfg = PipelineConfig {
            system: "intro".into(),
            starts: 5,
            dp: DpConfig { grid_points: 41, action_levels: 21, ..Default::default() },
            ..Default::default()
        };
        let rep = run_pipeline(&cfg).unwrap();
        assert!(rep.transformed.choice.err_lqr.abs() <= 1e-9);
        assert!(rep.original.choice.err_lqr > 0.01);
        assert_eq!(rep.transformed.converged, 5);
        assert!(rep.normalized_error_all.mean >= 0.0, "{:?}", rep.normalized_error_all);
    }

    #[test]
    fn unknown_system_is_tagged_with_its_phase() {
        let cfg = PipelineConfig { system: "nope".into(), ..Default::default() };
        let msg = run_pipeline(&cfg).err().unwrap().to_string();
        assert!(msg.starts_with("[system]"), "{msg}");
    }

    #[test]
    fn starts_are_reproducible_and_inside_the_box() {
        let sys = benchmark_by_name("planar_quadrotor").unwrap();
        let a = initial_states(&sys, 10, 0.5, 4);
        assert_eq!(a, initial_states(&sys, 10, 0.5, 4));
        let s = sys.state_halfwidths();
        for x in &a {
            for i in 0..4 {
                assert!((x[i] - sys.x_goal[i]).abs() <= 0.5 * s[i]);
            }
        }
    }
}
