use nalgebra::DMatrix;

use super::{Provenance, RepresentationMap};
use crate::care::{check_condition, solve_care, solve_lyapunov, PlantSpec};
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, symmetrize};

/// Balanced realization of the LQR-stabilized triple
/// `(Ã − B K*, B, Q^{1/2})`: a state map under which the controllability and
/// observability Gramians are equal and diagonal. Inputs are left alone.
pub fn balanced_map(plant: &PlantSpec) -> Result<RepresentationMap> {
    let (_, k) = solve_care(plant)?;
    let a_cl = plant.discounted_a() - &plant.b * &k;
    let c = psd_sqrt(&plant.q);
    let wc = solve_lyapunov(&a_cl.transpose(), &symmetrize(&(&plant.b * plant.b.transpose())))?;
    let wo = solve_lyapunov(&a_cl, &symmetrize(&(c.transpose() * &c)))?;
    let l = wc
        .clone()
        .cholesky()
        .ok_or_else(|| Error::GramianSingular("controllability Gramian is not positive definite".into()))?
        .l();
    let eig = symmetrize(&(l.transpose() * &wo * &l)).symmetric_eigen();
    let n = plant.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let smax = eig.eigenvalues.max();
    if eig.eigenvalues.iter().any(|&s| !(s > 1e-14 * smax.max(1e-300))) {
        return Err(Error::GramianSingular("observability Gramian is rank deficient".into()));
    }
    // Hankel singular values in descending order
    let w = DMatrix::from_fn(n, n, |r, col| eig.eigenvectors[(r, order[col])]);
    let hankel: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].sqrt()).collect();
    let l_inv = l.try_inverse().ok_or_else(|| Error::GramianSingular("Cholesky factor is singular".into()))?;
    let scale = DMatrix::from_fn(n, n, |r, col| if r == col { hankel[r].sqrt() } else { 0.0 });
    let mut t_y = scale * w.transpose() * l_inv;
    // sign convention: largest entry of each row positive
    for r in 0..n {
        let row = t_y.row(r);
        let (mut best, mut val) = (0.0_f64, 0.0);
        for &v in row.iter() {
            if v.abs() > best * (1.0 + 1e-12) {
                best = v.abs();
                val = v;
            }
        }
        if val < 0.0 {
            t_y.row_mut(r).neg_mut();
        }
    }
    check_condition(&t_y).map_err(|e| Error::GramianSingular(format!("balancing transform: {e}")))?;
    Ok(RepresentationMap {
        t_y,
        t_v: DMatrix::identity(plant.m(), plant.m()),
        provenance: Provenance::Balanced,
        classification: None,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::representation::{max_offdiag, transform_plant};
    use crate::zoo::{sample, SampleConfig, Strategy};
    use nalgebra::dmatrix;

    fn gramians(p: &PlantSpec) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, k) = solve_care(p).unwrap();
        let a_cl = p.discounted_a() - &p.b * &k;
        let c = psd_sqrt(&p.q);
        (
            solve_lyapunov(&a_cl.transpose(), &(&p.b * p.b.transpose())).unwrap(),
            solve_lyapunov(&a_cl, &(c.transpose() * &c)).unwrap(),
        )
    }

    #[test]
    fn symmetric_system_gets_positive_diagonal_map() {
        let p = PlantSpec::new(-DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let map = balanced_map(&p).unwrap();
        assert!(max_offdiag(&map.t_y) < 1e-10);
        assert!(map.t_y.diagonal().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn transformed_gramians_are_equal_and_diagonal() {
        for seed in 0..5 {
            let p = sample(&SampleConfig::new(Strategy::I, 2, 4, seed)).unwrap().plant;
            let map = balanced_map(&p).unwrap();
            let t = transform_plant(&p, &map).unwrap();
            let (wc, wo) = gramians(&t);
            let scale = wc.norm().max(1.0);
            assert!(max_offdiag(&wc) <= 1e-6 * scale);
            assert!(max_abs(&(&wc - &wo)) <= 1e-6 * scale);
        }
    }

    #[test]
    fn unstable_plant_is_balanced_after_stabilization() {
        let p = PlantSpec::new(dmatrix![1.0, 2.0; 0.0, 0.5], DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let map = balanced_map(&p).unwrap();
        let t = transform_plant(&p, &map).unwrap();
        let (wc, wo) = gramians(&t);
        assert!(max_abs(&(&wc - &wo)) <= 1e-6 * wc.norm().max(1.0));
    }

    #[test]
    fn singular_observability_gramian_is_reported() {
        let p = PlantSpec::new(-DMatrix::identity(2, 2), DMatrix::identity(2, 2), dmatrix![1.0, 0.0; 0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(balanced_map(&p), Err(Error::GramianSingular(_))));
    }
}
