//! Genetic search over decompositions for plants too large to enumerate.
//!
//! A genome labels every input and state with a group and gives each group an
//! optional cascade parent. Variation operators may produce invalid label
//! patterns; [`Genome::repair`] maps any genome to a valid, compacted one.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::care::PlantSpec;
use crate::decomposition::{
    err_cmp, largest_domain, Decomposition, DecompositionEvaluation, InputGroup, LqrEvaluator,
};
use crate::error::{Error, Result};
use crate::serde_util::{self, fmt_real};
use crate::zoo::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub input_group: Vec<usize>,
    pub state_group: Vec<usize>,
    /// Indexed by group label; entries for unused labels are ignored.
    pub parent: Vec<Option<usize>>,
}

impl Genome {
    /// Largest number of groups a genome can express.
    pub fn max_labels(&self) -> usize {
        self.parent.len()
    }

    pub fn random(m: usize, n: usize, labels: usize, rng: &mut impl Rng) -> Genome {
        let mut g = Genome {
            input_group: (0..m).map(|_| rng.random_range(0..labels)).collect(),
            state_group: (0..n).map(|_| rng.random_range(0..labels)).collect(),
            parent: (0..labels)
                .map(|_| if rng.random_bool(0.5) { None } else { Some(rng.random_range(0..labels)) })
                .collect(),
        };
        g.repair();
        g
    }

    /// Encodes a valid decomposition (at most `labels` groups).
    pub fn from_decomposition(d: &Decomposition, m: usize, n: usize, labels: usize) -> Genome {
        let mut g = Genome { input_group: vec![0; m], state_group: vec![0; n], parent: vec![None; labels] };
        for (k, grp) in d.groups.iter().enumerate() {
            for &i in &grp.inputs {
                g.input_group[i] = k;
            }
            for &s in &grp.states {
                g.state_group[s] = k;
            }
            g.parent[k] = d.cascade_parent[k];
        }
        g.repair();
        g
    }

    /// Deterministically turns any genome into one that decodes to a valid
    /// decomposition, then relabels groups in order of first input. Valid,
    /// compacted genomes are fixed points.
    pub fn repair(&mut self) {
        let labels = self.parent.len().max(1);
        let (m, n) = (self.input_group.len(), self.state_group.len());
        for l in self.input_group.iter_mut().chain(self.state_group.iter_mut()) {
            *l %= labels;
        }
        for p in self.parent.iter_mut() {
            if let Some(q) = *p {
                *p = Some(q % labels);
            }
        }
        // at least two groups
        let mut used = self.used_labels();
        if used.len() < 2 && m >= 2 && labels >= 2 {
            let free = (0..labels).find(|l| !used.contains(l)).expect("labels >= 2");
            self.input_group[m - 1] = free;
            used = self.used_labels();
        }
        // states whose label owns no input join a live group
        for s in 0..n {
            if !used.contains(&self.state_group[s]) {
                self.state_group[s] = used[self.state_group[s] % used.len()];
            }
        }
        // input groups without states take one from the largest donor; if no
        // donor exists the group is folded into another
        for &l in &used.clone() {
            if self.state_group.contains(&l) {
                continue;
            }
            let donor = used
                .iter()
                .copied()
                .filter(|&d| self.state_group.iter().filter(|&&x| x == d).count() >= 2)
                .max_by_key(|&d| (self.state_group.iter().filter(|&&x| x == d).count(), std::cmp::Reverse(d)));
            match donor {
                Some(d) => {
                    let s = (0..n).rev().find(|&s| self.state_group[s] == d).expect("donor has states");
                    self.state_group[s] = l;
                }
                None => {
                    let target = *used.iter().find(|&&d| d != l).expect("two groups");
                    for x in self.input_group.iter_mut().filter(|x| **x == l) {
                        *x = target;
                    }
                }
            }
        }
        let used = self.used_labels();
        // compaction: order by first input
        let mut map = vec![usize::MAX; labels];
        let mut next = 0;
        for &l in &self.input_group {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
        }
        let mut parent = vec![None; labels];
        for &l in &used {
            parent[map[l]] = match self.parent[l] {
                Some(p) if p != l && map[p] != usize::MAX => Some(map[p]),
                _ => None,
            };
        }
        for l in self.input_group.iter_mut().chain(self.state_group.iter_mut()) {
            *l = map[*l];
        }
        // break cycles at their largest label
        let k = next;
        for start in 0..k {
            let mut path = vec![start];
            let mut cur = start;
            while let Some(p) = parent[cur] {
                if let Some(pos) = path.iter().position(|&x| x == p) {
                    let worst = *path[pos..].iter().max().expect("nonempty cycle");
                    parent[worst] = None;
                    break;
                }
                path.push(p);
                cur = p;
            }
        }
        self.parent = parent;
    }

    fn used_labels(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self.input_group.clone();
        used.sort_unstable();
        used.dedup();
        used
    }

    pub fn num_groups(&self) -> usize {
        self.used_labels().len()
    }

    /// Decodes a repaired genome.
    pub fn decode(&self) -> Decomposition {
        let k = self.num_groups();
        let groups = (0..k)
            .map(|l| InputGroup {
                inputs: (0..self.input_group.len()).filter(|&i| self.input_group[i] == l).collect(),
                states: (0..self.state_group.len()).filter(|&s| self.state_group[s] == l).collect(),
            })
            .collect();
        Decomposition::new(groups, self.parent[..k].to_vec())
    }
}

/// Per-gene mutation: relabel inputs and states, toggle cascade edges, and
/// with the same probability split or merge a group. Followed by repair.
pub fn mutate(g: &Genome, rate: f64, rng: &mut impl Rng) -> Genome {
    let mut out = g.clone();
    if rate <= 0.0 {
        out.repair();
        return out;
    }
    let labels = out.max_labels();
    for l in out.input_group.iter_mut().chain(out.state_group.iter_mut()) {
        if rng.random_bool(rate) {
            *l = rng.random_range(0..labels);
        }
    }
    for p in out.parent.iter_mut() {
        if rng.random_bool(rate) {
            *p = match p {
                Some(_) => None,
                None => Some(rng.random_range(0..labels)),
            };
        }
    }
    if rng.random_bool(rate) {
        let k = out.num_groups();
        if k < labels && rng.random_bool(0.5) {
            // split: move a random half of one group to a fresh label
            let src = rng.random_range(0..k);
            for l in out.input_group.iter_mut().chain(out.state_group.iter_mut()) {
                if *l == src && rng.random_bool(0.5) {
                    *l = k;
                }
            }
            out.parent[k] = None;
        } else if k > 2 {
            let a = rng.random_range(0..k);
            let b = (a + 1 + rng.random_range(0..k - 1)) % k;
            for l in out.input_group.iter_mut().chain(out.state_group.iter_mut()) {
                if *l == b {
                    *l = a;
                }
            }
        }
    }
    out.repair();
    out
}

/// Uniform per-gene crossover followed by repair.
pub fn crossover(a: &Genome, b: &Genome, rng: &mut impl Rng) -> Genome {
    let pick = |x: usize, y: usize, r: &mut dyn FnMut() -> bool| if r() { x } else { y };
    let mut coin = || rng.random_bool(0.5);
    let mut out = Genome {
        input_group: a.input_group.iter().zip(&b.input_group).map(|(&x, &y)| pick(x, y, &mut coin)).collect(),
        state_group: a.state_group.iter().zip(&b.state_group).map(|(&x, &y)| pick(x, y, &mut coin)).collect(),
        parent: a.parent.iter().zip(&b.parent).map(|(&x, &y)| if coin() { x } else { y }).collect(),
    };
    out.repair();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GAConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub seed: u64,
    pub elitism: usize,
    /// Weight on the normalized compute surrogate in the fitness.
    pub fitness_blend: f64,
    /// Upper bound on the number of groups; `None` means `min(m, n)`.
    pub max_groups: Option<usize>,
    /// Individuals whose largest policy domain exceeds this are infeasible.
    pub max_domain_dim: Option<usize>,
}

impl Default for GAConfig {
    fn default() -> Self {
        GAConfig {
            population: 64,
            generations: 100,
            tournament_size: 3,
            crossover_rate: 0.7,
            mutation_rate: 0.1,
            seed: 0,
            elitism: 2,
            fitness_blend: 0.0,
            max_groups: None,
            max_domain_dim: None,
        }
    }
}

impl GAConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidConfig(s.to_string()));
        for (name, p) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
            ("fitness_blend", self.fitness_blend),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.population == 0 || self.tournament_size == 0 {
            return bad("population and tournament_size must be positive");
        }
        if self.population < self.tournament_size {
            return bad("population must be at least tournament_size");
        }
        if self.elitism > self.population {
            return bad("elitism exceeds population");
        }
        if self.max_groups.is_some_and(|g| g < 2) {
            return bad("max_groups must be at least 2");
        }
        Ok(())
    }
}

/// Statistics of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    #[serde(with = "serde_util::extended_real")]
    pub best_err: f64,
    #[serde(with = "serde_util::extended_real")]
    pub mean_finite_err: f64,
    pub unstable: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedDecomposition {
    pub decomposition: Decomposition,
    pub evaluation: DecompositionEvaluation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaOutcome {
    /// Every distinct decomposition evaluated, best first.
    pub ranked: Vec<RankedDecomposition>,
    pub trace: Vec<GenerationStats>,
}

impl GaOutcome {
    /// Best finite-error result.
    pub fn best(&self) -> Option<&RankedDecomposition> {
        self.ranked.first().filter(|r| r.evaluation.err_lqr.is_finite())
    }

    pub fn finite_count(&self) -> usize {
        self.ranked.iter().filter(|r| r.evaluation.err_lqr.is_finite()).count()
    }
}

/// Writes the per-generation trace as CSV.
pub fn write_trace_csv(trace: &[GenerationStats], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["generation", "best_err", "mean_finite_err", "unstable"])?;
    for t in trace {
        out.write_record([
            t.generation.to_string(),
            fmt_real(t.best_err),
            fmt_real(t.mean_finite_err),
            t.unstable.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone)]
struct Scored {
    genome: Genome,
    fitness: f64,
    err: f64,
    surrogate: f64,
}

fn fitter(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    err_cmp(a.fitness, b.fitness)
        .then(a.surrogate.total_cmp(&b.surrogate))
        .then_with(|| a.genome.decode().cmp(&b.genome.decode()))
}

fn rank_cmp(a: &RankedDecomposition, b: &RankedDecomposition) -> std::cmp::Ordering {
    err_cmp(a.evaluation.err_lqr, b.evaluation.err_lqr)
        .then(a.evaluation.compute_surrogate.total_cmp(&b.evaluation.compute_surrogate))
        .then_with(|| a.decomposition.cmp(&b.decomposition))
}

/// GA search with the LQR value-error as fitness.
pub fn ga_search(plant: &PlantSpec, cfg: &GAConfig) -> Result<GaOutcome> {
    ga_search_with(&LqrEvaluator::new(plant)?, cfg)
}

pub fn ga_search_with(evaluator: &LqrEvaluator, cfg: &GAConfig) -> Result<GaOutcome> {
    cfg.validate()?;
    let (m, n) = (evaluator.plant().m(), evaluator.plant().n());
    if m < 2 || n < 2 {
        return Err(Error::InvalidPlant(format!("decomposition search needs m, n >= 2 (got m={m}, n={n})")));
    }
    let labels = m.min(n).min(cfg.max_groups.unwrap_or(usize::MAX));
    let full = crate::decomposition::full_surrogate(m, n, evaluator.surrogate_config());
    let mut cache: HashMap<Decomposition, DecompositionEvaluation> = HashMap::new();

    let stream = |generation: u64, idx: u64| {
        ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, generation), idx))
    };

    let score = |pop: Vec<Genome>, cache: &mut HashMap<Decomposition, DecompositionEvaluation>| -> Result<Vec<Scored>> {
        let decoded: Vec<Decomposition> = pop.iter().map(|g| g.decode().canonical()).collect();
        let mut fresh: Vec<Decomposition> = decoded.iter().filter(|d| !cache.contains_key(*d)).cloned().collect();
        fresh.sort();
        fresh.dedup();
        let evals: Vec<DecompositionEvaluation> = fresh
            .par_iter()
            .map(|d| {
                let mut e = evaluator.evaluate(d)?;
                if cfg.max_domain_dim.is_some_and(|k| largest_domain(d) > k) {
                    e.err_lqr = f64::INFINITY;
                    e.diagnostic = Some("policy domain exceeds max_domain_dim".into());
                }
                Ok(e)
            })
            .collect::<Result<_>>()?;
        cache.extend(fresh.into_iter().zip(evals));
        Ok(pop
            .into_iter()
            .zip(&decoded)
            .map(|(genome, d)| {
                let e = &cache[d];
                let surrogate = e.compute_surrogate / full;
                let fitness = (1.0 - cfg.fitness_blend) * e.err_lqr + cfg.fitness_blend * surrogate;
                Scored { genome, fitness, err: e.err_lqr, surrogate }
            })
            .collect())
    };

    let initial: Vec<Genome> = (0..cfg.population as u64)
        .map(|i| Genome::random(m, n, labels, &mut stream(0, i)))
        .collect();
    let mut pop = score(initial, &mut cache)?;
    let mut trace = Vec::with_capacity(cfg.generations + 1);
    let stats = |generation: usize, pop: &[Scored]| {
        let finite: Vec<f64> = pop.iter().map(|s| s.err).filter(|e| e.is_finite()).collect();
        GenerationStats {
            generation,
            // the elite individual; errors within the tie tolerance rank by surrogate
            best_err: pop.first().map_or(f64::INFINITY, |s| s.err),
            mean_finite_err: if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 },
            unstable: pop.len() - finite.len(),
        }
    };
    pop.sort_by(fitter);
    trace.push(stats(0, &pop));

    for generation in 1..=cfg.generations {
        let mut next: Vec<Genome> = pop.iter().take(cfg.elitism).map(|s| s.genome.clone()).collect();
        let mut idx = 0u64;
        while next.len() < cfg.population {
            let mut rng = stream(generation as u64, idx);
            idx += 1;
            let tournament = |rng: &mut ChaCha8Rng| {
                (0..cfg.tournament_size)
                    .map(|_| rng.random_range(0..pop.len()))
                    .min()
                    .expect("tournament_size > 0")
            };
            // population is sorted, so the smallest index wins
            let a = tournament(&mut rng);
            let child = if rng.random_bool(cfg.crossover_rate) {
                let b = tournament(&mut rng);
                crossover(&pop[a].genome, &pop[b].genome, &mut rng)
            } else {
                pop[a].genome.clone()
            };
            next.push(mutate(&child, cfg.mutation_rate, &mut rng));
        }
        pop = score(next, &mut cache)?;
        pop.sort_by(fitter);
        trace.push(stats(generation, &pop));
    }

    let mut ranked: Vec<RankedDecomposition> = cache
        .into_iter()
        .map(|(decomposition, evaluation)| RankedDecomposition { decomposition, evaluation })
        .collect();
    ranked.sort_by(rank_cmp);
    if ranked.iter().all(|r| !r.evaluation.err_lqr.is_finite()) {
        log::warn!("GA found no decomposition with finite value-error");
    }
    Ok(GaOutcome { ranked, trace })
}
