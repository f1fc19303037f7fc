//! Dense linear-algebra helpers shared by the solvers.
//!
//! Everything here works on `DMatrix<f64>` / `DMatrix<Complex64>`; sizes in
//! this crate are small (tens of rows), so clarity wins over blocking.

use nalgebra::{linalg::Schur, DMatrix};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Largest real part over the spectrum of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    match eigenvalues(m) {
        Ok(ev) => ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max),
        Err(_) => f64::NAN,
    }
}

/// Eigenvalues of a real square matrix, in Schur order.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let (_, t) = complex_schur(m)?;
    Ok(t.diagonal().iter().copied().collect())
}

pub fn is_hurwitz(m: &DMatrix<f64>, margin: f64) -> bool {
    let a = spectral_abscissa(m);
    a.is_finite() && a < -margin
}

/// 2-norm condition number via singular values; `inf` for singular input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Symmetric positive-semidefinite square root (negative eigenvalues clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Orthonormal basis of the orthogonal complement of the column span of `y`
/// (n×k, full column rank), from a Householder QR of `[y | I]`.
pub fn orthonormal_complement(y: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let k = y.ncols();
    if k > n {
        return Err(Error::InfeasibleInit(format!(
            "{k} fixed vectors exceed dimension {n}"
        )));
    }
    if k == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let mut stacked = DMatrix::zeros(n, k + n);
    stacked.view_mut((0, 0), (n, k)).copy_from(y);
    stacked
        .view_mut((0, k), (n, n))
        .copy_from(&DMatrix::<f64>::identity(n, n));
    let qr = stacked.qr();
    let r = qr.r();
    // rank check on the fixed block
    let diag_min = (0..k).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if diag_min < 1e-10 {
        return Err(Error::InfeasibleInit(
            "fixed block is rank deficient".to_string(),
        ));
    }
    let q = qr.q();
    let comp = q.columns(k, n - k).into_owned();
    let leak = max_abs(&(y.transpose() * &comp));
    if leak > 1e-8 {
        return Err(Error::InfeasibleInit(format!(
            "complement not orthogonal to fixed block ({leak:.2e})"
        )));
    }
    Ok(comp)
}

/// Symmetric (Löwdin) orthonormalization `X (XᵀX)^{-1/2}`: the closest
/// matrix with orthonormal columns in Frobenius norm.
pub fn symmetric_orthonormalize(x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if x.ncols() == 0 {
        return Some(x.clone());
    }
    let g = symmetrize(&(x.transpose() * x));
    let eig = g.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 1e-14) {
        return None;
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let inv_sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    Some(x * inv_sqrt)
}

pub(crate) fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Complex Schur form `M = Z T Zᴴ` with `T` upper triangular.
///
/// The shifted QR iteration can stall on spectra symmetric about the
/// imaginary axis (Hamiltonians). When it does, the iteration is rerun on
/// `QᵀMQ` for a few fixed pseudo-random orthogonal `Q` and `Z` is mapped back.
pub(crate) fn complex_schur(m: &DMatrix<f64>) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    const RETRIES: u64 = 4;
    let n = m.nrows();
    let max_iter = 100 * n.max(10);
    let mut found = Schur::try_new(to_complex(m), f64::EPSILON, max_iter).map(|s| s.unpack());
    for attempt in 0..RETRIES {
        if found.is_some() {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(attempt);
        let q = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let rotated = q.transpose() * m * &q;
        found = Schur::try_new(to_complex(&rotated), f64::EPSILON, max_iter)
            .map(|s| s.unpack())
            .map(|(z, t)| (to_complex(&q) * z, t));
    }
    let (z, mut t) = found.ok_or(Error::IllConditioned(f64::INFINITY))?;
    for j in 0..n {
        for i in (j + 1)..n {
            t[(i, j)] = Complex64::new(0.0, 0.0);
        }
    }
    Ok((z, t))
}

/// Swaps the adjacent diagonal entries `k`, `k+1` of the upper-triangular
/// `t`, updating the unitary factor `z` so that `Z T Zᴴ` is preserved.
fn swap_adjacent(t: &mut DMatrix<Complex64>, z: &mut DMatrix<Complex64>, k: usize) {
    let n = t.nrows();
    let t11 = t[(k, k)];
    let t22 = t[(k + 1, k + 1)];
    let t12 = t[(k, k + 1)];
    // eigenvector of the 2x2 block for t22
    let a = t12;
    let b = t22 - t11;
    let norm = (a.norm_sqr() + b.norm_sqr()).sqrt();
    if norm == 0.0 {
        return;
    }
    let (a, b) = (a / norm, b / norm);
    // Q = [[a, -conj(b)], [b, conj(a)]]
    let q = [[a, -b.conj()], [b, a.conj()]];
    // T <- Qᴴ T on rows k, k+1
    for j in 0..n {
        let x = t[(k, j)];
        let y = t[(k + 1, j)];
        t[(k, j)] = q[0][0].conj() * x + q[1][0].conj() * y;
        t[(k + 1, j)] = q[0][1].conj() * x + q[1][1].conj() * y;
    }
    // T <- T Q and Z <- Z Q on columns k, k+1
    for mat in [&mut *t, &mut *z] {
        for i in 0..n {
            let x = mat[(i, k)];
            let y = mat[(i, k + 1)];
            mat[(i, k)] = x * q[0][0] + y * q[1][0];
            mat[(i, k + 1)] = x * q[0][1] + y * q[1][1];
        }
    }
    t[(k + 1, k)] = Complex64::new(0.0, 0.0);
}

/// Reorders a complex Schur form so that diagonal entries satisfying
/// `select` come first. Returns the number of selected eigenvalues.
pub(crate) fn reorder_schur(
    t: &mut DMatrix<Complex64>,
    z: &mut DMatrix<Complex64>,
    select: impl Fn(Complex64) -> bool,
) -> usize {
    let n = t.nrows();
    let mut placed = 0;
    for i in 0..n {
        if select(t[(i, i)]) {
            let mut j = i;
            while j > placed {
                swap_adjacent(t, z, j - 1);
                j -= 1;
            }
            placed += 1;
        }
    }
    placed
}

/// Solves `Aᵀ X + X A + M = 0` for Hurwitz `A` by complex Bartels–Stewart.
/// No Hurwitz check is done here; callers validate the spectrum first.
pub(crate) fn lyapunov_core(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (z, t) = complex_schur(a)?;
    let zh = z.adjoint();
    // Tᴴ Y + Y T = C with C = -Zᴴ M Z
    let c = -(&zh * to_complex(m) * &z);
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let mut rhs = c[(i, j)];
            for k in 0..i {
                rhs -= t[(k, i)].conj() * y[(k, j)];
            }
            for k in 0..j {
                rhs -= y[(i, k)] * t[(k, j)];
            }
            let denom = t[(i, i)].conj() + t[(j, j)];
            if denom.norm() < 1e-300 {
                return Err(Error::IllConditioned(f64::INFINITY));
            }
            y[(i, j)] = rhs / denom;
        }
    }
    let x = &z * y * &zh;
    let xr = x.map(|v| v.re);
    Ok(symmetrize(&xr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_schur_is_triangular_and_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, -1.0, 0.5, 0.0, 3.0, 0.0, -2.0]);
        let (z, t) = complex_schur(&a).unwrap();
        let back = &z * &t * z.adjoint();
        for (x, y) in back.iter().zip(to_complex(&a).iter()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn schur_recovers_from_stalled_iteration() {
        // Hamiltonian on which the unrotated complex QR iteration stalls
        let h = DMatrix::from_row_slice(6, 6, &[
            -0.9859063979203703, -0.42549910622300335, 0.8893389634609814, -1.7214106423349205, -0.0018741634494163495, 0.39209625700810435, //
            0.3829984590227403, -1.5633978761623117, 0.2021605254266603, -0.0018741634494163495, -2.0226281536698827, 0.18475556732396073, //
            0.30769455193415596, 0.3192228845468783, 0.19400283284029343, 0.39209625700810435, 0.18475556732396073, -0.46898469617905697, //
            -1.7214106423349138, -0.03331329995407245, 0.4749644945264546, 0.9859063979203703, -0.3829984590227403, -0.30769455193415596, //
            -0.03331329995407245, -2.022628153669883, 0.17262949210989684, 0.42549910622300335, 1.5633978761623117, -0.3192228845468783, //
            0.4749644945264546, 0.17262949210989684, -0.4689846961790569, -0.8893389634609814, -0.2021605254266603, -0.19400283284029343,
        ]);
        let (z, t) = complex_schur(&h).unwrap();
        let back = &z * &t * z.adjoint();
        for (x, y) in back.iter().zip(to_complex(&h).iter()) {
            assert!((x - y).norm() < 1e-10);
        }
        let zz = z.adjoint() * &z;
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((zz[(i, j)] - Complex64::new(e, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn reordering_moves_stable_eigenvalues_first() {
        let a = DMatrix::from_row_slice(4, 4, &[
            1.0, 2.0, 0.0, 0.5, //
            0.0, -3.0, 1.0, 0.0, //
            0.3, 0.0, 2.0, 1.0, //
            0.0, 1.0, 0.0, -0.5,
        ]);
        let (mut z, mut t) = complex_schur(&a).unwrap();
        let k = reorder_schur(&mut t, &mut z, |l| l.re < 0.0);
        let stable = eigenvalues(&a).unwrap().iter().filter(|l| l.re < 0.0).count();
        assert_eq!(k, stable);
        for i in 0..4 {
            assert_eq!(t[(i, i)].re < 0.0, i < k);
        }
        let back = &z * &t * z.adjoint();
        for (x, y) in back.iter().zip(to_complex(&a).iter()) {
            assert!((x - y).norm() < 1e-10);
        }
    }

    #[test]
    fn complement_of_empty_block_is_identity() {
        let y = DMatrix::<f64>::zeros(3, 0);
        assert_eq!(orthonormal_complement(&y, 3).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn complement_is_orthonormal() {
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]) / 3f64.sqrt();
        let c = orthonormal_complement(&y, 3).unwrap();
        assert_eq!(c.ncols(), 2);
        assert!(max_abs(&(c.transpose() * &c - DMatrix::identity(2, 2))) < 1e-12);
        assert!(max_abs(&(y.transpose() * &c)) < 1e-12);
    }
}
