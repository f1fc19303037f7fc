//! Policy decompositions: input groups with assigned state subsets arranged
//! in a cascade forest, their enumeration, and the LQR value-error estimate.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::care::{care_core, mean_value_gap, solve_care, value_of_linear_policy, PlantSpec, PolicyValue, QuadraticValue};
use crate::error::{Error, Result};
use crate::linalg::submatrix;
use crate::serde_util;

/// Default cap on the number of decompositions an enumeration may produce.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InputGroup {
    pub inputs: Vec<usize>,
    pub states: Vec<usize>,
}

/// A forest of input groups. `cascade_parent[g] = Some(p)` means the policy of
/// group `g` is substituted into the subproblem of group `p`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Decomposition {
    pub groups: Vec<InputGroup>,
    pub cascade_parent: Vec<Option<usize>>,
}

impl Decomposition {
    pub fn new(groups: Vec<InputGroup>, cascade_parent: Vec<Option<usize>>) -> Self {
        Decomposition { groups, cascade_parent }
    }

    /// Fully decoupled decomposition from (inputs, states) pairs.
    pub fn decoupled(groups: Vec<(Vec<usize>, Vec<usize>)>) -> Self {
        let k = groups.len();
        Decomposition {
            groups: groups
                .into_iter()
                .map(|(inputs, states)| InputGroup { inputs, states })
                .collect(),
            cascade_parent: vec![None; k],
        }
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Checks every structural invariant against an `m`-input, `n`-state plant.
    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDecomposition(msg));
        let k = self.groups.len();
        if k < 2 {
            return bad(format!("need at least 2 groups, got {k}"));
        }
        if self.cascade_parent.len() != k {
            return bad("parent array length differs from group count".into());
        }
        for (what, size, sets) in [
            ("inputs", m, self.groups.iter().map(|g| &g.inputs).collect::<Vec<_>>()),
            ("states", n, self.groups.iter().map(|g| &g.states).collect::<Vec<_>>()),
        ] {
            let mut seen = vec![false; size];
            for s in sets {
                if s.is_empty() {
                    return bad(format!("a group has no {what}"));
                }
                for &i in s {
                    if i >= size {
                        return bad(format!("{what} index {i} out of range {size}"));
                    }
                    if seen[i] {
                        return bad(format!("{what} index {i} assigned twice"));
                    }
                    seen[i] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return bad(format!("{what} are not covered"));
            }
        }
        for (g, p) in self.cascade_parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= k || p == g {
                    return bad(format!("group {g} has invalid parent {p}"));
                }
            }
        }
        if self.bottom_up_order().is_none() {
            return bad("cascade links contain a cycle".into());
        }
        Ok(())
    }

    pub fn children(&self, g: usize) -> Vec<usize> {
        (0..self.groups.len())
            .filter(|&c| self.cascade_parent[c] == Some(g))
            .collect()
    }

    /// All groups below `g` in the cascade forest (excluding `g`).
    pub fn descendants(&self, g: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = self.children(g);
        while let Some(c) = stack.pop() {
            out.push(c);
            stack.extend(self.children(c));
        }
        out.sort_unstable();
        out
    }

    /// States seen by the policy of group `g`: its own plus those of all
    /// cascade descendants. Sorted ascending.
    pub fn policy_domain(&self, g: usize) -> Vec<usize> {
        let mut set: BTreeSet<usize> = self.groups[g].states.iter().copied().collect();
        for c in self.descendants(g) {
            set.extend(self.groups[c].states.iter().copied());
        }
        set.into_iter().collect()
    }

    /// Groups ordered so that every child precedes its parent; `None` if the
    /// parent links are cyclic.
    pub fn bottom_up_order(&self) -> Option<Vec<usize>> {
        let k = self.groups.len();
        let mut pending: Vec<usize> = (0..k).map(|g| self.children(g).len()).collect();
        let mut done = vec![false; k];
        let mut order = Vec::with_capacity(k);
        while order.len() < k {
            let next = (0..k).find(|&g| !done[g] && pending[g] == 0)?;
            done[next] = true;
            order.push(next);
            if let Some(p) = self.cascade_parent[next] {
                if p < k {
                    pending[p] -= 1;
                }
            }
        }
        Some(order)
    }

    /// Same structure with sorted index sets and groups ordered by their
    /// smallest input. Structurally equal decompositions have equal canonical forms.
    pub fn canonical(&self) -> Decomposition {
        let k = self.groups.len();
        let mut groups: Vec<InputGroup> = self
            .groups
            .iter()
            .map(|g| {
                let mut inputs = g.inputs.clone();
                let mut states = g.states.clone();
                inputs.sort_unstable();
                states.sort_unstable();
                InputGroup { inputs, states }
            })
            .collect();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.sort_by_key(|&g| groups[g].inputs.first().copied().unwrap_or(usize::MAX));
        let mut new_index = vec![0; k];
        for (new, &old) in perm.iter().enumerate() {
            new_index[old] = new;
        }
        let parents = perm
            .iter()
            .map(|&old| self.cascade_parent[old].map(|p| new_index[p]))
            .collect();
        let mut sorted = Vec::with_capacity(k);
        for &old in &perm {
            sorted.push(std::mem::take(&mut groups[old]));
        }
        Decomposition { groups: sorted, cascade_parent: parents }
    }

    /// Canonical JSON text form.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&self.canonical()).expect("decomposition serializes")
    }

    /// Compact human-readable label, e.g. `u0:x0,x1 | u1:x2<-0`.
    pub fn label(&self) -> String {
        let join = |v: &[usize], p: char| v.iter().map(|i| format!("{p}{i}")).collect::<Vec<_>>().join(",");
        self.groups
            .iter()
            .zip(&self.cascade_parent)
            .enumerate()
            .map(|(g, (grp, parent))| {
                let mut s = format!("g{g}[{}:{}]", join(&grp.inputs, 'u'), join(&grp.states, 'x'));
                if let Some(p) = parent {
                    s.push_str(&format!("->g{p}"));
                }
                s
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Grid resolution used by the compute-cost surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub grid_points: u32,
    pub action_levels: u32,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { grid_points: 21, action_levels: 11 }
    }
}

/// `Σ_g grid_points^|domain(g)| · action_levels^|inputs(g)|`.
pub fn compute_surrogate(d: &Decomposition, cfg: &SurrogateConfig) -> f64 {
    (0..d.num_groups())
        .map(|g| {
            (cfg.grid_points as f64).powi(d.policy_domain(g).len() as i32)
                * (cfg.action_levels as f64).powi(d.groups[g].inputs.len() as i32)
        })
        .sum()
}

/// Surrogate of the undecomposed problem.
pub fn full_surrogate(m: usize, n: usize, cfg: &SurrogateConfig) -> f64 {
    (cfg.grid_points as f64).powi(n as i32) * (cfg.action_levels as f64).powi(m as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionEvaluation {
    /// Infinite when the assembled policy does not stabilize the plant.
    #[serde(with = "serde_util::extended_real")]
    pub err_lqr: f64,
    #[serde(with = "serde_util::matrix")]
    pub k_delta: DMatrix<f64>,
    pub stable: bool,
    pub compute_surrogate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Evaluates decompositions of one plant, reusing its optimal value.
#[derive(Debug, Clone)]
pub struct LqrEvaluator {
    plant: PlantSpec,
    a_tilde: DMatrix<f64>,
    optimal: QuadraticValue,
    k_star: DMatrix<f64>,
    surrogate: SurrogateConfig,
}

impl LqrEvaluator {
    pub fn new(plant: &PlantSpec) -> Result<Self> {
        Self::with_surrogate(plant, SurrogateConfig::default())
    }

    pub fn with_surrogate(plant: &PlantSpec, surrogate: SurrogateConfig) -> Result<Self> {
        let (optimal, k_star) = solve_care(plant)?;
        Ok(LqrEvaluator {
            a_tilde: plant.discounted_a(),
            plant: plant.clone(),
            optimal,
            k_star,
            surrogate,
        })
    }

    pub fn plant(&self) -> &PlantSpec {
        &self.plant
    }

    pub fn optimal(&self) -> &QuadraticValue {
        &self.optimal
    }

    pub fn k_star(&self) -> &DMatrix<f64> {
        &self.k_star
    }

    pub fn surrogate_config(&self) -> &SurrogateConfig {
        &self.surrogate
    }

    /// LQR value-error estimate of `d`. Subproblem failures and unstable
    /// closed loops yield an infinite error rather than an `Err`.
    pub fn evaluate(&self, d: &Decomposition) -> Result<DecompositionEvaluation> {
        let (m, n) = (self.plant.m(), self.plant.n());
        d.validate(m, n)?;
        let d = d.canonical();
        let surrogate = compute_surrogate(&d, &self.surrogate);
        let mut k_delta = DMatrix::<f64>::zeros(m, n);
        let unstable = |k_delta: DMatrix<f64>, why: String| DecompositionEvaluation {
            err_lqr: f64::INFINITY,
            k_delta,
            stable: false,
            compute_surrogate: surrogate,
            diagnostic: Some(why),
        };
        let order = d.bottom_up_order().expect("validated forest");
        for g in order {
            let dom = d.policy_domain(g);
            let own = &d.groups[g].inputs;
            let mut a_g = submatrix(&self.a_tilde, &dom, &dom);
            for c in d.descendants(g) {
                let uc = &d.groups[c].inputs;
                a_g -= submatrix(&self.plant.b, &dom, uc) * submatrix(&k_delta, uc, &dom);
            }
            let b_g = submatrix(&self.plant.b, &dom, own);
            let q_g = submatrix(&self.plant.q, &dom, &dom);
            let r_g = submatrix(&self.plant.r, own, own);
            match care_core(&a_g, &b_g, &q_g, &r_g) {
                Ok((_, k_g)) => {
                    for (i, &u) in own.iter().enumerate() {
                        for (j, &x) in dom.iter().enumerate() {
                            k_delta[(u, x)] = k_g[(i, j)];
                        }
                    }
                }
                Err(e) => {
                    log::debug!("subproblem of group {g} failed: {e}");
                    return Ok(unstable(k_delta, format!("subproblem {g}: {e}")));
                }
            }
        }
        match value_of_linear_policy(&self.plant, &k_delta)? {
            PolicyValue::Unstable => Ok(unstable(k_delta, "closed loop not Hurwitz".into())),
            PolicyValue::Stable(v) => {
                let err = mean_value_gap(&v, &self.optimal, &self.plant.region_halfwidths)?;
                Ok(DecompositionEvaluation {
                    err_lqr: err,
                    k_delta,
                    stable: true,
                    compute_surrogate: surrogate,
                    diagnostic: None,
                })
            }
        }
    }
}

/// One-shot evaluation of a decomposition on a plant.
pub fn evaluate_lqr(plant: &PlantSpec, d: &Decomposition) -> Result<DecompositionEvaluation> {
    LqrEvaluator::new(plant)?.evaluate(d)
}

fn stirling2(n: usize, k: usize) -> u128 {
    let mut s = vec![vec![0u128; k + 1]; n + 1];
    s[0][0] = 1;
    for i in 1..=n {
        for j in 1..=k.min(i) {
            s[i][j] = j as u128 * s[i - 1][j] + s[i - 1][j - 1];
        }
    }
    s[n][k]
}

/// Number of decompositions of an `m`-input, `n`-state plant with at most
/// `max_groups` groups: `Σ_G S(m,G)·G!·S(n,G)·(G+1)^(G−1)`.
pub fn count_decompositions(m: usize, n: usize, max_groups: usize) -> u128 {
    let gmax = m.min(n).min(max_groups);
    (2..=gmax)
        .map(|g| {
            let fact: u128 = (1..=g as u128).product();
            let forests = (g as u128 + 1).pow(g as u32 - 1);
            stirling2(m, g) * fact * stirling2(n, g) * forests
        })
        .sum()
}

/// Lazily yields every decomposition exactly once, in a fixed order: input
/// partitions (restricted growth strings), then surjective state labelings,
/// then acyclic parent arrays, each in lexicographic order.
#[derive(Debug, Clone)]
pub struct DecompositionIter {
    m: usize,
    n: usize,
    gmax: usize,
    rgs: Vec<usize>,
    labels: Vec<usize>,
    parents: Vec<usize>,
    groups: usize,
    done: bool,
}

impl DecompositionIter {
    fn new(m: usize, n: usize, max_groups: usize) -> Self {
        let gmax = m.min(n).min(max_groups);
        let mut it = DecompositionIter {
            m,
            n,
            gmax,
            rgs: vec![0; m],
            labels: vec![0; n],
            parents: Vec::new(),
            groups: 1,
            done: gmax < 2,
        };
        if !it.done && !it.seek_partition(false) {
            it.done = true;
        }
        it
    }

    /// Advances (or validates, if `advance` is false) the input partition
    /// until it has at least two blocks, then resets the inner counters.
    fn seek_partition(&mut self, advance: bool) -> bool {
        let mut need_step = advance;
        loop {
            if need_step && !next_rgs(&mut self.rgs, self.gmax) {
                return false;
            }
            need_step = true;
            let g = self.rgs.iter().max().map_or(0, |x| x + 1);
            if g >= 2 {
                self.groups = g;
                self.labels = vec![0; self.n];
                if !self.seek_labels(false) {
                    continue;
                }
                return true;
            }
        }
    }

    fn seek_labels(&mut self, advance: bool) -> bool {
        let g = self.groups;
        let mut need_step = advance;
        loop {
            if need_step && !odometer(&mut self.labels, g) {
                return false;
            }
            need_step = true;
            let mut seen = vec![false; g];
            self.labels.iter().for_each(|&l| seen[l] = true);
            if seen.iter().all(|&s| s) {
                self.parents = vec![0; g];
                if self.seek_parents(false) {
                    return true;
                }
            }
        }
    }

    /// Parent digit `g` encodes "no parent".
    fn seek_parents(&mut self, advance: bool) -> bool {
        let g = self.groups;
        let mut need_step = advance;
        loop {
            if need_step && !odometer(&mut self.parents, g + 1) {
                return false;
            }
            need_step = true;
            if parents_valid(&self.parents, g) {
                return true;
            }
        }
    }

    fn current(&self) -> Decomposition {
        let g = self.groups;
        let mut groups = vec![InputGroup { inputs: Vec::new(), states: Vec::new() }; g];
        for (i, &l) in self.rgs.iter().enumerate() {
            groups[l].inputs.push(i);
        }
        for (x, &l) in self.labels.iter().enumerate() {
            groups[l].states.push(x);
        }
        let cascade_parent = self.parents.iter().map(|&p| (p < g).then_some(p)).collect();
        Decomposition { groups, cascade_parent }
    }

    fn advance(&mut self) {
        if self.seek_parents(true) {
            return;
        }
        if self.seek_labels(true) {
            return;
        }
        if !self.seek_partition(true) {
            self.done = true;
        }
    }
}

impl Iterator for DecompositionIter {
    type Item = Decomposition;

    fn next(&mut self) -> Option<Decomposition> {
        if self.done {
            return None;
        }
        let d = self.current();
        self.advance();
        debug_assert!(self.m > 0);
        Some(d)
    }
}

fn odometer(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Next restricted growth string with labels below `cap`.
fn next_rgs(a: &mut [usize], cap: usize) -> bool {
    let len = a.len();
    for i in (1..len).rev() {
        let prefix_max = a[..i].iter().copied().max().unwrap_or(0);
        if a[i] <= prefix_max && a[i] + 1 < cap {
            a[i] += 1;
            for x in a[i + 1..].iter_mut() {
                *x = 0;
            }
            return true;
        }
    }
    false
}

fn parents_valid(parents: &[usize], g: usize) -> bool {
    for (i, &p) in parents.iter().enumerate() {
        if p == i {
            return false;
        }
    }
    // follow each chain; a cycle revisits within g steps
    (0..g).all(|start| {
        let mut cur = start;
        for _ in 0..=g {
            let p = parents[cur];
            if p >= g {
                return true;
            }
            cur = p;
        }
        false
    })
}

/// Streams every decomposition with at most `max_groups` groups, or fails
/// with `BudgetExceeded` when there are more than `budget`.
pub fn enumerate_decompositions_with_budget(
    m: usize,
    n: usize,
    max_groups: usize,
    budget: u128,
) -> Result<DecompositionIter> {
    let count = count_decompositions(m, n, max_groups);
    if count > budget {
        return Err(Error::BudgetExceeded { count, budget });
    }
    Ok(DecompositionIter::new(m, n, max_groups))
}

pub fn enumerate_decompositions(m: usize, n: usize, max_groups: usize) -> Result<DecompositionIter> {
    enumerate_decompositions_with_budget(m, n, max_groups, DEFAULT_ENUMERATION_BUDGET)
}

/// Exhaustive search options.
#[derive(Debug, Clone)]
pub struct ExhaustiveConfig {
    pub max_groups: usize,
    pub budget: u128,
    /// Skip decompositions whose largest policy domain exceeds this size.
    pub max_domain_dim: Option<usize>,
}

impl Default for ExhaustiveConfig {
    fn default() -> Self {
        ExhaustiveConfig { max_groups: usize::MAX, budget: DEFAULT_ENUMERATION_BUDGET, max_domain_dim: None }
    }
}

pub(crate) fn largest_domain(d: &Decomposition) -> usize {
    (0..d.num_groups()).map(|g| d.policy_domain(g).len()).max().unwrap_or(0)
}

/// Orders evaluations by error, then surrogate, then enumeration index.
pub(crate) fn rank_key(e: &DecompositionEvaluation) -> (f64, f64) {
    (e.err_lqr, e.compute_surrogate)
}

/// Errors closer than this (relative to max(1, |err|)) count as ties, so
/// round-off in near-zero errors does not override the surrogate.
pub const ERR_TIE_TOLERANCE: f64 = 1e-12;

pub(crate) fn err_cmp(a: f64, b: f64) -> std::cmp::Ordering {
    if a.is_finite() && b.is_finite() && (a - b).abs() <= ERR_TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0) {
        std::cmp::Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

pub(crate) fn better(a: (f64, f64, usize), b: (f64, f64, usize)) -> bool {
    err_cmp(a.0, b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
}

/// Least value-error decomposition by full enumeration.
pub fn best_decomposition_exhaustive(
    plant: &PlantSpec,
    max_groups: usize,
) -> Result<(Decomposition, DecompositionEvaluation)> {
    best_decomposition_exhaustive_with(
        &LqrEvaluator::new(plant)?,
        &ExhaustiveConfig { max_groups, ..Default::default() },
    )
}

pub fn best_decomposition_exhaustive_with(
    evaluator: &LqrEvaluator,
    cfg: &ExhaustiveConfig,
) -> Result<(Decomposition, DecompositionEvaluation)> {
    let (m, n) = (evaluator.plant().m(), evaluator.plant().n());
    let all: Vec<Decomposition> = enumerate_decompositions_with_budget(m, n, cfg.max_groups, cfg.budget)?
        .filter(|d| cfg.max_domain_dim.is_none_or(|k| largest_domain(d) <= k))
        .collect();
    let evals: Vec<DecompositionEvaluation> = all
        .par_iter()
        .map(|d| evaluator.evaluate(d))
        .collect::<Result<_>>()?;
    let mut best: Option<usize> = None;
    for (i, e) in evals.iter().enumerate() {
        if !e.err_lqr.is_finite() {
            continue;
        }
        let key = |j: usize| {
            let (a, b) = rank_key(&evals[j]);
            (a, b, j)
        };
        if best.is_none_or(|b| better(key(i), key(b))) {
            best = Some(i);
        }
    }
    match best {
        Some(i) => Ok((all[i].clone(), evals[i].clone())),
        None => Err(Error::AllUnstable),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use std::collections::HashSet;

    fn plant(a: DMatrix<f64>, b: DMatrix<f64>) -> PlantSpec {
        let (n, m) = (a.nrows(), b.ncols());
        PlantSpec::new(a, b, DMatrix::identity(n, n), DMatrix::identity(m, m)).unwrap()
    }

    fn split2() -> Decomposition {
        Decomposition::decoupled(vec![(vec![0], vec![0]), (vec![1], vec![1])])
    }

    #[test]
    fn domains_follow_cascades() {
        let d = Decomposition::decoupled(vec![(vec![0], vec![0, 1]), (vec![1], vec![2, 3])]);
        assert_eq!(d.policy_domain(0), vec![0, 1]);
        assert_eq!(d.policy_domain(1), vec![2, 3]);
        let mut c = d.clone();
        c.cascade_parent = vec![None, Some(0)];
        assert_eq!(c.policy_domain(0), vec![0, 1, 2, 3]);
        let chain = Decomposition::new(
            vec![
                InputGroup { inputs: vec![0], states: vec![0] },
                InputGroup { inputs: vec![1], states: vec![1] },
                InputGroup { inputs: vec![2], states: vec![2] },
            ],
            vec![None, Some(0), Some(1)],
        );
        assert_eq!(chain.policy_domain(0), vec![0, 1, 2]);
        assert_eq!(chain.bottom_up_order().unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn invalid_structures_are_rejected() {
        let mut d = split2();
        d.cascade_parent = vec![Some(1), Some(0)];
        assert!(d.validate(2, 2).is_err());
        let single = Decomposition::decoupled(vec![(vec![0, 1], vec![0, 1])]);
        assert!(single.validate(2, 2).is_err());
        let overlap = Decomposition::decoupled(vec![(vec![0], vec![0, 1]), (vec![1], vec![1])]);
        assert!(overlap.validate(2, 2).is_err());
        assert!(split2().validate(2, 3).is_err());
    }

    #[test]
    fn intro_system_original_is_suboptimal_and_transformed_is_exact() {
        let orig = plant(dmatrix![0.0, 1.0; 1.0, 0.0], DMatrix::identity(2, 2));
        // the decoupled split leaves a zero closed-loop eigenvalue
        let e = evaluate_lqr(&orig, &split2()).unwrap();
        assert!(!e.stable && e.err_lqr.is_infinite());
        let mut cascade = split2();
        cascade.cascade_parent = vec![None, Some(0)];
        let e = evaluate_lqr(&orig, &cascade).unwrap();
        assert!(e.stable && e.err_lqr > 0.01);
        let diag = plant(dmatrix![1.0, 0.0; 0.0, -1.0], DMatrix::identity(2, 2));
        let e = evaluate_lqr(&diag, &split2()).unwrap();
        assert!(e.err_lqr.abs() <= 1e-9);
    }

    #[test]
    fn decoupled_plant_has_diagonal_gain() {
        let p = plant(dmatrix![-1.0, 0.0; 0.0, -2.0], DMatrix::identity(2, 2));
        let e = evaluate_lqr(&p, &split2()).unwrap();
        assert!(e.err_lqr.abs() <= 1e-9);
        assert_eq!(e.k_delta[(0, 1)], 0.0);
        assert_eq!(e.k_delta[(1, 0)], 0.0);
    }

    #[test]
    fn surrogate_counts_domains() {
        let d = split2();
        assert_eq!(compute_surrogate(&d, &SurrogateConfig::default()), 2.0 * 21.0 * 11.0);
        let mut c = d.clone();
        c.cascade_parent = vec![None, Some(0)];
        assert_eq!(compute_surrogate(&c, &SurrogateConfig::default()), 21.0 * 21.0 * 11.0 + 21.0 * 11.0);
    }

    #[test]
    fn enumeration_counts() {
        for (m, n, expected) in [(2, 2, 6), (2, 3, 18), (3, 3, 150), (2, 4, 42), (1, 3, 0)] {
            assert_eq!(count_decompositions(m, n, usize::MAX), expected);
            assert_eq!(enumerate_decompositions(m, n, usize::MAX).unwrap().count() as u128, expected, "({m},{n})");
        }
        assert!(matches!(
            enumerate_decompositions_with_budget(3, 3, 3, 10),
            Err(Error::BudgetExceeded { count: 150, budget: 10 })
        ));
    }

    /// Independent generator: assign each input and each state a group label
    /// freely, each group a parent freely, then keep the valid ones and dedupe
    /// by canonical form.
    fn brute_force(m: usize, n: usize) -> HashSet<Decomposition> {
        let mut out = HashSet::new();
        let gmax = m.min(n);
        for g in 2..=gmax {
            let total_in = g.pow(m as u32);
            let total_st = g.pow(n as u32);
            let total_par = (g + 1).pow(g as u32);
            for a in 0..total_in {
                for b in 0..total_st {
                    for c in 0..total_par {
                        let digit = |mut v: usize, base: usize, k: usize| {
                            for _ in 0..k {
                                v /= base;
                            }
                            v % base
                        };
                        let mut groups = vec![InputGroup { inputs: vec![], states: vec![] }; g];
                        for i in 0..m {
                            groups[digit(a, g, i)].inputs.push(i);
                        }
                        for x in 0..n {
                            groups[digit(b, g, x)].states.push(x);
                        }
                        let parents: Vec<Option<usize>> = (0..g)
                            .map(|k| {
                                let p = digit(c, g + 1, k);
                                (p < g).then_some(p)
                            })
                            .collect();
                        let d = Decomposition::new(groups, parents);
                        if d.validate(m, n).is_ok() {
                            out.insert(d.canonical());
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn enumeration_matches_brute_force() {
        for (m, n) in [(2, 2), (2, 3), (3, 3), (2, 4)] {
            let listed: Vec<Decomposition> = enumerate_decompositions(m, n, usize::MAX).unwrap().collect();
            let canon: HashSet<Decomposition> = listed.iter().map(|d| d.canonical()).collect();
            assert_eq!(canon.len(), listed.len(), "duplicates at ({m},{n})");
            assert_eq!(canon, brute_force(m, n), "({m},{n})");
            for d in &listed {
                d.validate(m, n).unwrap();
            }
        }
    }

    #[test]
    fn max_groups_limits_enumeration() {
        let all: Vec<_> = enumerate_decompositions(3, 3, 2).unwrap().collect();
        assert!(all.iter().all(|d| d.num_groups() == 2));
        assert_eq!(all.len() as u128, count_decompositions(3, 3, 2));
    }

    #[test]
    fn exhaustive_finds_block_split() {
        let a = dmatrix![
            0.1, 1.0, 0.0, 0.0;
            -1.0, 0.2, 0.0, 0.0;
            0.0, 0.0, 0.3, 2.0;
            0.0, 0.0, 0.5, -0.4
        ];
        let b = dmatrix![0.0, 0.0; 1.0, 0.0; 0.0, 0.0; 0.0, 1.0];
        let p = plant(a, b);
        let (d, e) = best_decomposition_exhaustive(&p, 4).unwrap();
        assert!(e.err_lqr.abs() <= 1e-9);
        let d = d.canonical();
        assert_eq!(d.groups[0].states, vec![0, 1]);
        assert_eq!(d.groups[1].states, vec![2, 3]);
        // full re-scan: the best is no worse than anything enumerated
        let ev = LqrEvaluator::new(&p).unwrap();
        for d in enumerate_decompositions(2, 4, 4).unwrap() {
            assert!(ev.evaluate(&d).unwrap().err_lqr >= e.err_lqr - 1e-12);
        }
    }

    #[test]
    fn relabeling_groups_preserves_error() {
        let p = plant(dmatrix![0.3, 1.0, 0.2; -0.5, 0.1, 0.4; 0.7, 0.0, -0.2], dmatrix![1.0, 0.2; 0.0, 1.0; 0.5, 0.3]);
        let d = Decomposition::new(
            vec![
                InputGroup { inputs: vec![0], states: vec![0, 2] },
                InputGroup { inputs: vec![1], states: vec![1] },
            ],
            vec![Some(1), None],
        );
        let swapped = Decomposition::new(vec![d.groups[1].clone(), d.groups[0].clone()], vec![None, Some(0)]);
        let ev = LqrEvaluator::new(&p).unwrap();
        let a = ev.evaluate(&d).unwrap();
        let b = ev.evaluate(&swapped).unwrap();
        assert_eq!(a.err_lqr.to_bits(), b.err_lqr.to_bits());
    }

    #[test]
    fn gain_sparsity_matches_domains() {
        let p = plant(dmatrix![0.3, 1.0, 0.2; -0.5, 0.1, 0.4; 0.7, 0.0, -0.2], dmatrix![1.0, 0.2; 0.0, 1.0; 0.5, 0.3]);
        let ev = LqrEvaluator::new(&p).unwrap();
        for d in enumerate_decompositions(2, 3, 2).unwrap() {
            let e = ev.evaluate(&d).unwrap();
            if !e.stable {
                assert!(e.err_lqr.is_infinite());
                continue;
            }
            assert!(e.err_lqr >= -1e-9);
            for g in 0..d.num_groups() {
                let dom = d.policy_domain(g);
                for &u in &d.groups[g].inputs {
                    for x in 0..3 {
                        if !dom.contains(&x) {
                            assert_eq!(e.k_delta[(u, x)], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn canonical_json_is_stable() {
        let d = Decomposition::new(
            vec![
                InputGroup { inputs: vec![1], states: vec![2, 0] },
                InputGroup { inputs: vec![0], states: vec![1] },
            ],
            vec![Some(1), None],
        );
        assert_eq!(
            d.to_canonical_json(),
            r#"{"groups":[{"inputs":[0],"states":[1]},{"inputs":[1],"states":[0,2]}],"cascade_parent":[null,0]}"#
        );
    }
}
