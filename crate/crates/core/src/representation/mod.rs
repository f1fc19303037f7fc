//! Linear state/input maps `y = T_y (x − x_goal)`, `v = T_v (u − u_goal)`:
//! the sparse SVD map that diagonalizes the LQR gain, the balanced
//! realization baseline, and plant transformation.

mod balanced;
mod stiefel;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use balanced::balanced_map;
pub use stiefel::{l1_objective, regularized_orthogonal_basis, OptimizerOutcome};

use crate::care::{check_condition, solve_care, PlantSpec};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, orthonormal_complement, symmetric_orthonormalize, symmetrize};
use crate::serde_util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Identity,
    SvdSparse,
    Balanced,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Identity => "identity",
            Provenance::SvdSparse => "svd_sparse",
            Provenance::Balanced => "balanced",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StiefelL1Config {
    pub lambda_orth: f64,
    pub max_iters: usize,
    pub step_tolerance: f64,
    /// Relative gap below which adjacent singular values count as repeated.
    pub repeated_sv_tolerance: f64,
    /// Singular values below this fraction of the largest count as zero.
    pub zero_sv_tolerance: f64,
}

impl Default for StiefelL1Config {
    fn default() -> Self {
        StiefelL1Config {
            lambda_orth: 2000.0,
            max_iters: 5000,
            step_tolerance: 1e-10,
            repeated_sv_tolerance: 1e-6,
            zero_sv_tolerance: 1e-9,
        }
    }
}

/// How the singular values of the optimal gain were classified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvClassification {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub zero_count: usize,
    /// Index groups (into `singular_values`) of repeated nonzero values.
    pub repeated_clusters: Vec<Vec<usize>>,
}

impl SvClassification {
    /// `unique`, `zero`, `repeated` or `zero+repeated`.
    pub fn case_label(&self) -> &'static str {
        match (self.zero_count > 0, !self.repeated_clusters.is_empty()) {
            (false, false) => "unique",
            (true, false) => "zero",
            (false, true) => "repeated",
            (true, true) => "zero+repeated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMap {
    #[serde(with = "serde_util::matrix")]
    pub t_y: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub t_v: DMatrix<f64>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<SvClassification>,
    /// The sparse optimizer failed and the plain SVD basis was used.
    #[serde(default)]
    pub fallback: bool,
}

impl RepresentationMap {
    pub fn identity(n: usize, m: usize) -> Self {
        RepresentationMap {
            t_y: DMatrix::identity(n, n),
            t_v: DMatrix::identity(m, m),
            provenance: Provenance::Identity,
            classification: None,
            fallback: false,
        }
    }

    /// `T_v K T_y⁻¹`.
    pub fn mapped_gain(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let ty_inv = self.t_y.clone().try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
        Ok(&self.t_v * k * ty_inv)
    }
}

/// Largest off-diagonal magnitude of a rectangular matrix.
pub fn max_offdiag(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

/// The plant in mapped coordinates. The goal moves to the origin and the
/// averaging box becomes the bounding box of the image of the old one.
pub fn transform_plant(plant: &PlantSpec, map: &RepresentationMap) -> Result<PlantSpec> {
    let (n, m) = (plant.n(), plant.m());
    if map.t_y.shape() != (n, n) || map.t_v.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "map is {:?}/{:?}, plant has n={n}, m={m}",
            map.t_y.shape(),
            map.t_v.shape()
        )));
    }
    check_condition(&map.t_y)?;
    check_condition(&map.t_v)?;
    let ty_inv = map.t_y.clone().try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
    let tv_inv = map.t_v.clone().try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
    let out = PlantSpec {
        a: &map.t_y * &plant.a * &ty_inv,
        b: &map.t_y * &plant.b * &tv_inv,
        q: symmetrize(&(ty_inv.transpose() * &plant.q * &ty_inv)),
        r: symmetrize(&(tv_inv.transpose() * &plant.r * &tv_inv)),
        lambda_discount: plant.lambda_discount,
        x_goal: DVector::zeros(n),
        u_goal: DVector::zeros(m),
        region_halfwidths: map.t_y.abs() * &plant.region_halfwidths,
    };
    out.validate()?;
    Ok(out)
}

/// Makes the largest-magnitude entry of column `j` positive; returns whether it flipped.
fn canonical_sign(m: &mut DMatrix<f64>, j: usize) -> bool {
    let col = m.column(j);
    let (mut best, mut val) = (0.0_f64, 0.0);
    for &v in col.iter() {
        // first entry wins ties so the choice is reproducible
        if v.abs() > best * (1.0 + 1e-12) {
            best = v.abs();
            val = v;
        }
    }
    if val < 0.0 {
        m.column_mut(j).neg_mut();
        true
    } else {
        false
    }
}

/// Sorted singular value decomposition `K = U diag(σ) V_rᵀ` of an `m × n`
/// gain with `m ≤ n`: `U` is `m × m`, `V_r` is `n × m`.
fn sorted_svd(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let m = k.nrows();
    let svd = k.clone().svd(true, true);
    let u = svd.u.ok_or(Error::IllConditioned(f64::INFINITY))?;
    let vt = svd.v_t.ok_or(Error::IllConditioned(f64::INFINITY))?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u_sorted = DMatrix::from_fn(m, m, |r, c| u[(r, order[c])]);
    let v_sorted = DMatrix::from_fn(k.ncols(), m, |r, c| vt[(order[c], r)]);
    Ok((u_sorted, sigma, v_sorted))
}

fn classify(sigma: &[f64], cfg: &StiefelL1Config) -> SvClassification {
    let smax = sigma.first().copied().unwrap_or(0.0);
    let nonzero = sigma.iter().take_while(|&&s| s > cfg.zero_sv_tolerance * smax && s > 0.0).count();
    let mut clusters = Vec::new();
    let mut start = 0;
    for i in 1..=nonzero {
        if i == nonzero || sigma[i - 1] - sigma[i] > cfg.repeated_sv_tolerance * smax {
            if i - start > 1 {
                clusters.push((start..i).collect());
            }
            start = i;
        }
    }
    SvClassification { singular_values: sigma.to_vec(), zero_count: sigma.len() - nonzero, repeated_clusters: clusters }
}

fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

fn set_columns(m: &mut DMatrix<f64>, idx: &[usize], src: &DMatrix<f64>) {
    for (c, &j) in idx.iter().enumerate() {
        m.column_mut(j).copy_from(&src.column(c));
    }
}

/// Replaces the columns `idx` of orthogonal `u` by a sparse orthonormal
/// basis of the same span.
fn sparsify_block(u: &mut DMatrix<f64>, idx: &[usize], cfg: &StiefelL1Config) -> Result<()> {
    let others: Vec<usize> = (0..u.ncols()).filter(|j| !idx.contains(j)).collect();
    let fixed = columns(u, &others);
    let r = regularized_orthogonal_basis(&fixed, idx.len(), cfg)?;
    if !r.converged {
        log::debug!("sparse basis optimizer hit its iteration cap");
    }
    set_columns(u, idx, &r.x);
    Ok(())
}

fn assemble(
    k: &DMatrix<f64>,
    mut u: DMatrix<f64>,
    sigma: &[f64],
    class: &SvClassification,
    cfg: &StiefelL1Config,
    sparse: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (m, n) = (k.nrows(), k.ncols());
    let r = m - class.zero_count;
    if sparse {
        for cluster in &class.repeated_clusters {
            sparsify_block(&mut u, cluster, cfg)?;
        }
        if class.zero_count > 0 {
            let zero: Vec<usize> = (r..m).collect();
            sparsify_block(&mut u, &zero, cfg)?;
        }
    }
    u = symmetric_orthonormalize(&u).ok_or(Error::Singular(f64::INFINITY))?;
    let mut v_r = DMatrix::zeros(n, r);
    for i in 0..r {
        let col = k.transpose() * u.column(i) / sigma[i];
        v_r.column_mut(i).copy_from(&col);
    }
    let v_r = symmetric_orthonormalize(&v_r).ok_or(Error::Singular(f64::INFINITY))?;
    let v_null = if sparse {
        regularized_orthogonal_basis(&v_r, n - r, cfg)?.x
    } else {
        orthonormal_complement(&v_r, n)?
    };
    let mut v = DMatrix::zeros(n, n);
    v.columns_mut(0, r).copy_from(&v_r);
    v.columns_mut(r, n - r).copy_from(&v_null);
    for i in 0..r {
        if canonical_sign(&mut u, i) {
            v.column_mut(i).neg_mut();
        }
    }
    for i in r..m {
        canonical_sign(&mut u, i);
    }
    for i in r..n {
        canonical_sign(&mut v, i);
    }
    Ok((u, v))
}

fn check_map(k: &DMatrix<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> Option<String> {
    let (m, n) = (u.nrows(), v.nrows());
    let ou = max_abs(&(u * u.transpose() - DMatrix::identity(m, m)));
    let ov = max_abs(&(v * v.transpose() - DMatrix::identity(n, n)));
    if ou > 1e-8 || ov > 1e-8 {
        return Some(format!("orthogonality defect {:.2e}", ou.max(ov)));
    }
    let off = max_offdiag(&(u.transpose() * k * v));
    if off > 1e-6 {
        return Some(format!("off-diagonal residue {off:.2e}"));
    }
    None
}

/// SVD map of the optimal gain with sparse bases chosen for every
/// non-unique block: repeated singular values, zero singular values and the
/// null space. `T_y = Vᵀ`, `T_v = Uᵀ`.
pub fn sparse_svd_map(plant: &PlantSpec, cfg: &StiefelL1Config) -> Result<RepresentationMap> {
    let (_, k) = solve_care(plant)?;
    svd_map_of_gain(&k, cfg)
}

/// [`sparse_svd_map`] for a given gain.
pub fn svd_map_of_gain(k: &DMatrix<f64>, cfg: &StiefelL1Config) -> Result<RepresentationMap> {
    let (u, sigma, _) = sorted_svd(k)?;
    let class = classify(&sigma, cfg);
    let build = |sparse: bool| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (u, v) = assemble(k, u.clone(), &sigma, &class, cfg, sparse)?;
        match check_map(k, &u, &v) {
            None => Ok((u, v)),
            Some(why) => Err(Error::InfeasibleInit(why)),
        }
    };
    let (u, v, fallback) = match build(true) {
        Ok((u, v)) => (u, v, false),
        Err(e) => {
            log::warn!("sparse SVD basis rejected ({e}); using the plain SVD basis");
            let (u, v) = build(false)?;
            (u, v, true)
        }
    };
    Ok(RepresentationMap {
        t_y: v.transpose(),
        t_v: u.transpose(),
        provenance: Provenance::SvdSparse,
        classification: Some(class),
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::care::solve_care;
    use crate::decomposition::{best_decomposition_exhaustive, evaluate_lqr, Decomposition};
    use crate::zoo::{intro_plant, sample, SampleConfig, Strategy};
    use nalgebra::dmatrix;

    fn check(map: &RepresentationMap, k: &DMatrix<f64>) {
        let (n, m) = (map.t_y.nrows(), map.t_v.nrows());
        assert!(max_abs(&(&map.t_y * map.t_y.transpose() - DMatrix::identity(n, n))) <= 1e-8);
        assert!(max_abs(&(&map.t_v * map.t_v.transpose() - DMatrix::identity(m, m))) <= 1e-8);
        assert!(max_offdiag(&map.mapped_gain(k).unwrap()) <= 1e-6);
    }

    #[test]
    fn intro_system_rotates_by_45_degrees() {
        let plant = intro_plant();
        let map = sparse_svd_map(&plant, &StiefelL1Config::default()).unwrap();
        let s = 0.5f64.sqrt();
        for i in 0..2 {
            assert!((map.t_y[(i, 0)].abs() - s).abs() < 1e-9);
            assert!((map.t_y[(i, 1)].abs() - s).abs() < 1e-9);
        }
        let t = transform_plant(&plant, &map).unwrap();
        assert!(max_offdiag(&t.a) < 1e-9);
        assert!(max_offdiag(&t.b) < 1e-9);
        let split = Decomposition::decoupled(vec![(vec![0], vec![0]), (vec![1], vec![1])]);
        assert!(evaluate_lqr(&t, &split).unwrap().err_lqr.abs() <= 1e-9);
        let (_, best) = best_decomposition_exhaustive(&t, 2).unwrap();
        assert!(best.err_lqr <= 1e-9);
    }

    #[test]
    fn transformed_intro_plant_matches_rotation() {
        let s = 0.5f64.sqrt();
        let t = dmatrix![s, s; s, -s];
        let map = RepresentationMap { t_y: t.clone(), t_v: t, provenance: Provenance::SvdSparse, classification: None, fallback: false };
        let p = transform_plant(&intro_plant(), &map).unwrap();
        assert!((p.a - dmatrix![1.0, 0.0; 0.0, -1.0]).amax() < 1e-12);
        assert!((p.b - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn identity_map_leaves_plant_unchanged() {
        let p = intro_plant();
        assert_eq!(transform_plant(&p, &RepresentationMap::identity(2, 2)).unwrap(), p);
    }

    #[test]
    fn optimal_value_transforms_congruently() {
        let s = sample(&SampleConfig::new(Strategy::I, 2, 4, 3)).unwrap().plant;
        let map = balanced_map(&s).unwrap();
        let t = transform_plant(&s, &map).unwrap();
        let (p, _) = solve_care(&s).unwrap();
        let (pt, _) = solve_care(&t).unwrap();
        let ty_inv = map.t_y.clone().try_inverse().unwrap();
        let expected = ty_inv.transpose() * p.p * &ty_inv;
        assert!(max_abs(&(pt.p - &expected)) <= 1e-7 * expected.norm().max(1.0));
    }

    #[test]
    fn diagonal_gain_gives_signed_permutations() {
        let k = dmatrix![0.0, 0.0, -2.0; 0.5, 0.0, 0.0];
        let map = svd_map_of_gain(&k, &StiefelL1Config::default()).unwrap();
        for t in [&map.t_y, &map.t_v] {
            for v in t.iter() {
                assert!(v.abs() < 1e-9 || (v.abs() - 1.0).abs() < 1e-9);
            }
        }
        check(&map, &k);
    }

    #[test]
    fn all_singular_value_cases_diagonalize() {
        for seed in 0..5 {
            let p1 = sample(&SampleConfig::new(Strategy::I, 2, 4, seed)).unwrap().plant;
            let (_, k) = solve_care(&p1).unwrap();
            let map = sparse_svd_map(&p1, &StiefelL1Config::default()).unwrap();
            assert_eq!(map.classification.as_ref().unwrap().case_label(), "unique");
            check(&map, &k);

            let p2 = sample(&SampleConfig::new(Strategy::II, 3, 3, seed)).unwrap();
            let map = sparse_svd_map(&p2.plant, &StiefelL1Config::default()).unwrap();
            assert_eq!(map.classification.as_ref().unwrap().case_label(), "repeated");
            let theta = map.mapped_gain(p2.k_star_expected.as_ref().unwrap()).unwrap();
            assert!((theta - DMatrix::identity(3, 3)).amax() <= 1e-6);

            let mut cfg = SampleConfig::new(Strategy::II, 3, 3, seed);
            cfg.zero_sv_count = 1;
            let p3 = sample(&cfg).unwrap().plant;
            let (_, k) = solve_care(&p3).unwrap();
            let map = sparse_svd_map(&p3, &StiefelL1Config::default()).unwrap();
            assert_eq!(map.classification.as_ref().unwrap().zero_count, 1);
            check(&map, &k);
        }
    }

    #[test]
    fn map_json_round_trip() {
        let map = sparse_svd_map(&intro_plant(), &StiefelL1Config::default()).unwrap();
        let text = serde_json::to_string(&map).unwrap();
        assert!(text.contains("\"provenance\":\"svd_sparse\""));
        let back: RepresentationMap = serde_json::from_str(&text).unwrap();
        assert!((back.t_y - map.t_y).amax() == 0.0);
    }
}
