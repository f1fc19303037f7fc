use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{ActionLattice, Grid};
use super::system::NonlinearSystem;
use crate::error::{Error, Result};
use crate::linalg::submatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    /// Grid points per state dimension.
    pub grid_points: usize,
    /// Action levels per input dimension (before anchoring at the goal input).
    pub action_levels: usize,
    /// Time step of the discretized dynamics, seconds.
    pub h: f64,
    pub max_policy_iterations: usize,
    pub max_eval_sweeps: usize,
    /// Sweeps stop once `max |ΔV| ≤ eval_tolerance · max(1, max |V|)`.
    pub eval_tolerance: f64,
    pub value_guard: f64,
    /// Relative margin an action must beat the current one by to replace it.
    pub improvement_margin: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            grid_points: 21,
            action_levels: 11,
            h: 0.01,
            max_policy_iterations: 100,
            max_eval_sweeps: 20_000,
            eval_tolerance: 1e-7,
            value_guard: 1e10,
            improvement_margin: 1e-9,
        }
    }
}

/// State and input index sets of one subproblem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsystem {
    pub states: Vec<usize>,
    pub inputs: Vec<usize>,
}

/// Gridded sub-policy over a subset of states, acting on a subset of inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub states: Vec<usize>,
    pub inputs: Vec<usize>,
    pub grid: Grid,
    pub lattice: ActionLattice,
    /// Node-major: `actions[node * inputs.len() + k]`.
    pub actions: Vec<f64>,
    pub values: Vec<f64>,
    pub policy_iterations: usize,
    pub sweeps: usize,
}

impl TabularPolicy {
    fn project(&self, x_full: &[f64], out: &mut [f64]) {
        for (k, &s) in self.states.iter().enumerate() {
            out[k] = x_full[s];
        }
    }

    /// Writes this policy's inputs into `u_full` using the action at the
    /// grid node nearest to `x_full` restricted to this policy's states.
    pub fn act(&self, x_full: &[f64], u_full: &mut [f64]) {
        let d = self.states.len();
        let mut buf = [0.0; 16];
        let mut heap;
        let xs: &mut [f64] = if d <= buf.len() {
            &mut buf[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        self.project(x_full, xs);
        let node = self.grid.nearest(xs);
        let k = self.inputs.len();
        for (j, &u) in self.inputs.iter().enumerate() {
            u_full[u] = self.actions[node * k + j];
        }
    }

    /// Like [`TabularPolicy::act`], but blends the actions of the
    /// surrounding nodes with multilinear weights.
    pub fn act_interpolated(&self, x_full: &[f64], u_full: &mut [f64]) {
        let mut xs = vec![0.0; self.states.len()];
        self.project(x_full, &mut xs);
        let (mut idx, mut w) = (Vec::new(), Vec::new());
        self.grid.stencil(&xs, &mut idx, &mut w);
        let k = self.inputs.len();
        for (j, &u) in self.inputs.iter().enumerate() {
            u_full[u] = idx.iter().zip(&w).map(|(&i, &wi)| self.actions[i * k + j] * wi).sum();
        }
    }

    /// Multilinearly interpolated value at `x_full`.
    pub fn value(&self, x_full: &[f64]) -> f64 {
        let mut xs = vec![0.0; self.states.len()];
        self.project(x_full, &mut xs);
        self.grid.interpolate(&self.values, &xs)
    }
}

struct Model<'a> {
    sys: &'a NonlinearSystem,
    states: &'a [usize],
    inputs: &'a [usize],
    fixed: &'a [TabularPolicy],
    cost_inputs: Vec<usize>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    gamma: f64,
    h: f64,
}

impl<'a> Model<'a> {
    fn new(sys: &'a NonlinearSystem, sub: &'a Subsystem, fixed: &'a [TabularPolicy], cfg: &DpConfig) -> Result<Self> {
        let (n, m) = (sys.n(), sys.m());
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if sub.states.is_empty() || sub.inputs.is_empty() {
            return bad("subsystem needs states and inputs".into());
        }
        if sub.states.iter().any(|&s| s >= n) || sub.inputs.iter().any(|&u| u >= m) {
            return bad("subsystem index out of range".into());
        }
        let mut cost_inputs = sub.inputs.clone();
        for p in fixed {
            if p.states.iter().any(|s| !sub.states.contains(s)) {
                return bad("fixed sub-policy reads states outside the subsystem".into());
            }
            if p.inputs.iter().any(|u| cost_inputs.contains(u)) {
                return bad("fixed sub-policy inputs overlap".into());
            }
            cost_inputs.extend(p.inputs.iter().copied());
        }
        cost_inputs.sort_unstable();
        if !(cfg.h > 0.0) || cfg.grid_points < 2 {
            return bad("need h > 0 and at least 2 grid points".into());
        }
        Ok(Model {
            sys,
            states: &sub.states,
            inputs: &sub.inputs,
            fixed,
            q: submatrix(&sys.q, &sub.states, &sub.states),
            r: submatrix(&sys.r, &cost_inputs, &cost_inputs),
            cost_inputs,
            gamma: (-sys.lambda_discount * cfg.h).exp(),
            h: cfg.h,
        })
    }

    /// Stage cost times `h` and the successor state (subset coordinates).
    /// Complement states sit at the goal; complement inputs that are neither
    /// own nor supplied by a fixed sub-policy are zero.
    fn step(&self, xs: &[f64], action: &[f64], scratch: &mut Scratch, next: &mut [f64]) -> f64 {
        let sys = self.sys;
        scratch.x.copy_from_slice(sys.x_goal.as_slice());
        for (k, &s) in self.states.iter().enumerate() {
            scratch.x[s] = xs[k];
        }
        scratch.u.iter_mut().for_each(|v| *v = 0.0);
        for p in self.fixed {
            p.act(&scratch.x, &mut scratch.u);
        }
        for (k, &i) in self.inputs.iter().enumerate() {
            scratch.u[i] = action[k];
        }
        sys.saturate(&mut scratch.u);
        sys.eval(&scratch.x, &scratch.u, &mut scratch.dx);
        for (k, &s) in self.states.iter().enumerate() {
            next[k] = xs[k] + self.h * scratch.dx[s];
        }
        let mut cost = 0.0;
        for (a, &i) in self.states.iter().enumerate() {
            let di = xs[a] - sys.x_goal[i];
            for (b, &j) in self.states.iter().enumerate() {
                cost += self.q[(a, b)] * di * (xs[b] - sys.x_goal[j]);
            }
        }
        for (a, &i) in self.cost_inputs.iter().enumerate() {
            let di = scratch.u[i] - sys.u_goal[i];
            for (b, &j) in self.cost_inputs.iter().enumerate() {
                cost += self.r[(a, b)] * di * (scratch.u[j] - sys.u_goal[j]);
            }
        }
        cost * self.h
    }
}

struct Scratch {
    x: Vec<f64>,
    u: Vec<f64>,
    dx: Vec<f64>,
    next: Vec<f64>,
    action: Vec<f64>,
    idx: Vec<usize>,
    w: Vec<f64>,
}

impl Scratch {
    fn new(sys: &NonlinearSystem, d: usize, k: usize) -> Self {
        Scratch {
            x: vec![0.0; sys.n()],
            u: vec![0.0; sys.m()],
            dx: vec![0.0; sys.n()],
            next: vec![0.0; d],
            action: vec![0.0; k],
            idx: Vec::new(),
            w: Vec::new(),
        }
    }
}

/// Interpolation stencil of one node's successor under a fixed action.
struct Transition {
    cost: f64,
    idx: Vec<usize>,
    w: Vec<f64>,
}

fn node_coords(grid: &Grid) -> Vec<f64> {
    let d = grid.dims();
    let mut out = vec![0.0; grid.len() * d];
    for i in 0..grid.len() {
        grid.node(i, &mut out[i * d..(i + 1) * d]);
    }
    out
}

fn transitions(model: &Model, grid: &Grid, coords: &[f64], actions: &[usize], lattice: &ActionLattice) -> Vec<Transition> {
    let d = grid.dims();
    let k = model.inputs.len();
    (0..grid.len())
        .into_par_iter()
        .map_init(
            || Scratch::new(model.sys, d, k),
            |s, i| {
                lattice.action(actions[i], &mut s.action);
                let mut next = std::mem::take(&mut s.next);
                let action = s.action.clone();
                let cost = model.step(&coords[i * d..(i + 1) * d], &action, s, &mut next);
                let mut idx = Vec::with_capacity(1 << d);
                let mut w = Vec::with_capacity(1 << d);
                grid.stencil(&next, &mut idx, &mut w);
                s.next = next;
                Transition { cost, idx, w }
            },
        )
        .collect()
}

/// Jacobi sweeps for a fixed policy; returns the sweep residual trace.
fn evaluate(trans: &[Transition], gamma: f64, values: &mut Vec<f64>, cfg: &DpConfig) -> Result<Vec<f64>> {
    let mut trace = Vec::new();
    let mut next = vec![0.0; values.len()];
    for _ in 0..cfg.max_eval_sweeps {
        let v = &*values;
        next.par_iter_mut().zip(trans.par_iter()).for_each(|(out, t)| {
            let mut acc = 0.0;
            for (&i, &w) in t.idx.iter().zip(&t.w) {
                acc += w * v[i];
            }
            *out = t.cost + gamma * acc;
        });
        let (resid, vmax) = next
            .iter()
            .zip(values.iter())
            .fold((0.0_f64, 0.0_f64), |(r, m), (a, b)| (r.max((a - b).abs()), m.max(a.abs())));
        std::mem::swap(values, &mut next);
        if !vmax.is_finite() || vmax > cfg.value_guard {
            return Err(Error::DivergedValue(cfg.value_guard));
        }
        trace.push(resid);
        if resid <= cfg.eval_tolerance * vmax.max(1.0) {
            break;
        }
    }
    Ok(trace)
}

/// Runs policy evaluation for the actions stored in `policy`, starting from
/// its value table. Returns the evaluated values and the residual per sweep.
pub fn evaluate_policy(
    sys: &NonlinearSystem,
    policy: &TabularPolicy,
    fixed: &[TabularPolicy],
    cfg: &DpConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sub = Subsystem { states: policy.states.clone(), inputs: policy.inputs.clone() };
    let model = Model::new(sys, &sub, fixed, cfg)?;
    let coords = node_coords(&policy.grid);
    let k = policy.inputs.len();
    let idx: Vec<usize> = (0..policy.grid.len())
        .map(|i| lattice_index(&policy.lattice, &policy.actions[i * k..(i + 1) * k]))
        .collect();
    let trans = transitions(&model, &policy.grid, &coords, &idx, &policy.lattice);
    let mut values = policy.values.clone();
    let trace = evaluate(&trans, model.gamma, &mut values, cfg)?;
    Ok((values, trace))
}

fn lattice_index(lattice: &ActionLattice, a: &[f64]) -> usize {
    let mut idx = 0;
    for (d, levels) in lattice.levels.iter().enumerate() {
        let j = levels
            .iter()
            .enumerate()
            .min_by(|x, y| (x.1 - a[d]).abs().total_cmp(&(y.1 - a[d]).abs()))
            .map_or(0, |(j, _)| j);
        idx = idx * levels.len() + j;
    }
    idx
}

/// Greedy action per node for the given value table. With `current`, an
/// action replaces the current one only if it is better by the margin.
fn improve(
    model: &Model,
    grid: &Grid,
    coords: &[f64],
    lattice: &ActionLattice,
    values: &[f64],
    current: Option<&[usize]>,
    margin: f64,
) -> Vec<usize> {
    let d = grid.dims();
    let k = model.inputs.len();
    let na = lattice.len();
    (0..grid.len())
        .into_par_iter()
        .map_init(
            || Scratch::new(model.sys, d, k),
            |s, i| {
                let xs = &coords[i * d..(i + 1) * d];
                let q_of = |a: usize, s: &mut Scratch| {
                    lattice.action(a, &mut s.action);
                    let action = s.action.clone();
                    let mut next = std::mem::take(&mut s.next);
                    let c = model.step(xs, &action, s, &mut next);
                    grid.stencil(&next, &mut s.idx, &mut s.w);
                    let v: f64 = s.idx.iter().zip(&s.w).map(|(&j, &w)| w * values[j]).sum();
                    s.next = next;
                    c + model.gamma * v
                };
                let mut best = 0;
                let mut best_q = f64::INFINITY;
                for a in 0..na {
                    let q = q_of(a, s);
                    if q < best_q {
                        best_q = q;
                        best = a;
                    }
                }
                match current {
                    Some(cur) => {
                        let cur_q = q_of(cur[i], s);
                        if best_q < cur_q - margin * cur_q.abs().max(1.0) {
                            best
                        } else {
                            cur[i]
                        }
                    }
                    None => best,
                }
            },
        )
        .collect()
}

/// Policy iteration on a uniform grid over `sub.states`, choosing
/// `sub.inputs` from an action lattice, with `fixed` sub-policies supplying
/// their inputs.
pub fn policy_iteration(
    sys: &NonlinearSystem,
    sub: &Subsystem,
    fixed: &[TabularPolicy],
    cfg: &DpConfig,
) -> Result<TabularPolicy> {
    let model = Model::new(sys, sub, fixed, cfg)?;
    let lower: Vec<f64> = sub.states.iter().map(|&s| sys.state_lower[s]).collect();
    let upper: Vec<f64> = sub.states.iter().map(|&s| sys.state_upper[s]).collect();
    let grid = Grid::new(lower, upper, vec![cfg.grid_points; sub.states.len()]);
    let in_lo: Vec<f64> = sub.inputs.iter().map(|&u| sys.input_lower[u]).collect();
    let in_hi: Vec<f64> = sub.inputs.iter().map(|&u| sys.input_upper[u]).collect();
    let goal: Vec<f64> = sub.inputs.iter().map(|&u| sys.u_goal[u]).collect();
    let lattice = ActionLattice::anchored(&in_lo, &in_hi, &goal, cfg.action_levels);
    let coords = node_coords(&grid);

    let zeros = vec![0.0; grid.len()];
    let mut actions = improve(&model, &grid, &coords, &lattice, &zeros, None, cfg.improvement_margin);
    let mut values = zeros;
    let mut sweeps = 0;
    for it in 1..=cfg.max_policy_iterations {
        let trans = transitions(&model, &grid, &coords, &actions, &lattice);
        let trace = evaluate(&trans, model.gamma, &mut values, cfg)?;
        sweeps += trace.len();
        let new_actions = improve(&model, &grid, &coords, &lattice, &values, Some(&actions), cfg.improvement_margin);
        let changed = new_actions.iter().zip(&actions).filter(|(a, b)| a != b).count();
        log::debug!(
            "policy iteration {it}: {} sweeps (residual {:.2e}), {changed} actions changed",
            trace.len(),
            trace.last().copied().unwrap_or(0.0)
        );
        actions = new_actions;
        if changed == 0 {
            let k = sub.inputs.len();
            let mut table = vec![0.0; grid.len() * k];
            for (i, &a) in actions.iter().enumerate() {
                lattice.action(a, &mut table[i * k..(i + 1) * k]);
            }
            return Ok(TabularPolicy {
                states: sub.states.clone(),
                inputs: sub.inputs.clone(),
                grid,
                lattice,
                actions: table,
                values,
                policy_iterations: it,
                sweeps,
            });
        }
    }
    Err(Error::NonConvergence(cfg.max_policy_iterations))
}
