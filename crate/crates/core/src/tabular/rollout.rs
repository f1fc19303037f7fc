use std::io::Write;

use serde::{Deserialize, Serialize};

use super::pi::TabularPolicy;
use super::system::NonlinearSystem;
use crate::error::{Error, Result};
use crate::serde_util::fmt_real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Seconds.
    pub horizon: f64,
    /// Integration and zero-order-hold step, seconds.
    pub h: f64,
    /// Converged when `max_i |x_i − x_goal_i| / halfwidth_i` ends below this.
    pub goal_ball: f64,
    /// The rollout stops early once the normalized deviation exceeds this.
    pub escape_factor: f64,
    /// Blend node actions multilinearly instead of taking the nearest node.
    pub interpolate_actions: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { horizon: 10.0, h: 0.01, goal_ball: 0.05, escape_factor: 20.0, interpolate_actions: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Applied input over `[times[k], times[k+1])`.
    pub inputs: Vec<Vec<f64>>,
    /// Discounted cost accumulated up to `times[k]`.
    pub running_cost: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
    /// Some state left the state box at some point.
    pub out_of_bounds: bool,
    pub escaped: bool,
}

impl Rollout {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("rollouts record the initial state")
    }
}

fn normalized_deviation(sys: &NonlinearSystem, x: &[f64]) -> f64 {
    let s = sys.state_halfwidths();
    x.iter()
        .enumerate()
        .map(|(i, &xi)| ((xi - sys.x_goal[i]) / s[i]).abs())
        .fold(0.0, f64::max)
}

/// Simulates `sys` under the composition of `policies` (whose input sets
/// must partition the inputs) with classical RK4 and zero-order hold.
pub fn compose_and_rollout(
    sys: &NonlinearSystem,
    policies: &[TabularPolicy],
    x0: &[f64],
    cfg: &RolloutConfig,
) -> Result<Rollout> {
    let (n, m) = (sys.n(), sys.m());
    let mut owner = vec![usize::MAX; m];
    for (k, p) in policies.iter().enumerate() {
        for &u in &p.inputs {
            if u >= m || owner[u] != usize::MAX {
                return Err(Error::InvalidConfig(format!("input {u} is claimed twice or out of range")));
            }
            owner[u] = k;
        }
    }
    if owner.contains(&usize::MAX) {
        return Err(Error::InvalidConfig("policies do not cover every input".into()));
    }
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!("x0 has {} entries, system has {n}", x0.len())));
    }
    if !(cfg.h > 0.0 && cfg.horizon >= 0.0) {
        return Err(Error::InvalidConfig("rollout needs h > 0 and horizon >= 0".into()));
    }
    let steps = (cfg.horizon / cfg.h).round() as usize;
    let mut x = x0.to_vec();
    let mut u = vec![0.0; m];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut out = Rollout {
        times: vec![0.0],
        states: vec![x.clone()],
        inputs: Vec::with_capacity(steps),
        running_cost: vec![0.0],
        cost: 0.0,
        converged: false,
        out_of_bounds: false,
        escaped: false,
    };
    let in_box = |x: &[f64]| (0..n).all(|i| x[i] >= sys.state_lower[i] && x[i] <= sys.state_upper[i]);
    out.out_of_bounds = !in_box(&x);
    let h = cfg.h;
    for step in 0..steps {
        let t = step as f64 * h;
        u.iter_mut().for_each(|v| *v = 0.0);
        for p in policies {
            if cfg.interpolate_actions {
                p.act_interpolated(&x, &mut u);
            } else {
                p.act(&x, &mut u);
            }
        }
        sys.saturate(&mut u);
        out.cost += (-sys.lambda_discount * t).exp() * sys.stage_cost(&x, &u) * h;
        sys.eval(&x, &u, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        sys.eval(&tmp, &u, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        sys.eval(&tmp, &u, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        sys.eval(&tmp, &u, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t_next = (step + 1) as f64 * h;
        if x.iter().any(|v| !v.is_finite()) || !out.cost.is_finite() {
            return Err(Error::NonFinite(t_next));
        }
        out.inputs.push(u.clone());
        out.times.push(t_next);
        out.states.push(x.clone());
        out.running_cost.push(out.cost);
        if !in_box(&x) {
            out.out_of_bounds = true;
        }
        if normalized_deviation(sys, &x) > cfg.escape_factor {
            out.escaped = true;
            break;
        }
    }
    out.converged = !out.escaped && normalized_deviation(sys, out.final_state()) <= cfg.goal_ball;
    Ok(out)
}

/// Writes `t, x…, u…, running_cost` rows; the last row repeats the final input.
pub fn write_trajectory_csv<W: Write>(w: W, r: &Rollout) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let n = r.states.first().map_or(0, |x| x.len());
    let m = r.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.push("running_cost".into());
    wr.write_record(&header)?;
    for k in 0..r.times.len() {
        let u = r.inputs.get(k).or(r.inputs.last());
        let mut row = vec![fmt_real(r.times[k])];
        row.extend(r.states[k].iter().map(|&v| fmt_real(v)));
        if let Some(u) = u {
            row.extend(u.iter().map(|&v| fmt_real(v)));
        }
        row.push(fmt_real(r.running_cost[k]));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}
