//! Continuous-time LQR building blocks: discounted Riccati solves, Lyapunov
//! solves, values of fixed linear policies and box-averaged value gaps.
//!
//! Discounting with rate λ is handled by solving the undiscounted problem for
//! `Ã = A − (λ/2)·I`, which is exact for the cost `∫ e^{−λt} c(x, u) dt`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    complex_schur, condition_number, eigenvalues, is_hurwitz, lyapunov_core, max_abs, min_sym_eigenvalue,
    reorder_schur, spectral_abscissa, symmetrize,
};
use crate::serde_util;

/// Hurwitz margin: eigenvalues with real part ≥ −HURWITZ_MARGIN count as unstable.
pub const HURWITZ_MARGIN: f64 = 1e-10;
/// Relative CARE residual the solver guarantees.
pub const CARE_TOLERANCE: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e12;

/// A linear(ized) infinite-horizon optimal control problem with quadratic cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    #[serde(with = "serde_util::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub r: DMatrix<f64>,
    pub lambda_discount: f64,
    #[serde(with = "serde_util::vector")]
    pub x_goal: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub u_goal: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub region_halfwidths: DVector<f64>,
}

impl PlantSpec {
    /// Builds a validated plant with goal at the origin, no discount and the
    /// unit box as averaging region.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let (n, m) = (a.nrows(), b.ncols());
        let plant = PlantSpec {
            a,
            b,
            q,
            r,
            lambda_discount: 0.0,
            x_goal: DVector::zeros(n),
            u_goal: DVector::zeros(m),
            region_halfwidths: DVector::from_element(n, 1.0),
        };
        plant.validate()?;
        Ok(plant)
    }

    pub fn with_discount(mut self, lambda: f64) -> Result<Self> {
        self.lambda_discount = lambda;
        self.validate()?;
        Ok(self)
    }

    pub fn with_region(mut self, halfwidths: DVector<f64>) -> Result<Self> {
        self.region_halfwidths = halfwidths;
        self.validate()?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `A − (λ/2)·I`.
    pub fn discounted_a(&self) -> DMatrix<f64> {
        let n = self.n();
        &self.a - DMatrix::<f64>::identity(n, n) * (0.5 * self.lambda_discount)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let bad = |msg: String| Err(Error::InvalidPlant(msg));
        if self.a.ncols() != n || n == 0 {
            return bad(format!("A must be square and nonempty, got {}x{}", n, self.a.ncols()));
        }
        if self.b.nrows() != n {
            return bad(format!("B must have {n} rows, got {}", self.b.nrows()));
        }
        if m == 0 || m > n {
            return bad(format!("need 1 <= m <= n, got m={m}, n={n}"));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return bad("Q or R has the wrong shape".to_string());
        }
        if self.x_goal.len() != n || self.u_goal.len() != m || self.region_halfwidths.len() != n {
            return bad("goal or region has the wrong length".to_string());
        }
        if !(self.lambda_discount >= 0.0 && self.lambda_discount.is_finite()) {
            return bad(format!("discount must be >= 0, got {}", self.lambda_discount));
        }
        if self.region_halfwidths.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("region half-widths must be strictly positive".to_string());
        }
        let all = [&self.a, &self.b, &self.q, &self.r];
        if all.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
            return bad("non-finite matrix entry".to_string());
        }
        let qs = max_abs(&(&self.q - self.q.transpose())) * 0.5;
        let rs = max_abs(&(&self.r - self.r.transpose())) * 0.5;
        if qs > 1e-10 || rs > 1e-10 {
            return bad(format!("Q/R not symmetric (deviation {:.2e})", qs.max(rs)));
        }
        let q_scale = max_abs(&self.q).max(1.0);
        if min_sym_eigenvalue(&self.q) < -1e-10 * q_scale {
            return bad("Q is not positive semidefinite".to_string());
        }
        if min_sym_eigenvalue(&self.r) <= 0.0 {
            return bad("R is not positive definite".to_string());
        }
        Ok(())
    }
}

/// Quadratic value function `V(x) = (x − c)ᵀ P (x − c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticValue {
    #[serde(with = "serde_util::matrix")]
    pub p: DMatrix<f64>,
    #[serde(with = "serde_util::vector")]
    pub center: DVector<f64>,
}

impl QuadraticValue {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        (d.transpose() * &self.p * &d)[(0, 0)]
    }
}

/// Outcome of evaluating a fixed linear feedback `u = −K x`.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyValue {
    Stable(QuadraticValue),
    /// Closed loop not Hurwitz: the value (and value-error) is infinite.
    Unstable,
}

impl PolicyValue {
    pub fn stable(&self) -> Option<&QuadraticValue> {
        match self {
            PolicyValue::Stable(v) => Some(v),
            PolicyValue::Unstable => None,
        }
    }
}

/// `ÃᵀP + PÃ + Q − P B R⁻¹ Bᵀ P`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let r_inv_bt = r
        .clone()
        .cholesky()
        .map(|c| c.solve(&b.transpose()))
        .unwrap_or_else(|| DMatrix::from_element(b.ncols(), b.nrows(), f64::NAN));
    a.transpose() * p + p * a + q - p * b * r_inv_bt * p
}

/// Popov–Belevitch–Hautus test: `[A − μI, B]` has full row rank for every
/// eigenvalue `μ` of `A` with nonnegative real part.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let scale = max_abs(a).max(max_abs(b)).max(1.0);
    let Ok(spectrum) = eigenvalues(a) else {
        return false;
    };
    spectrum.iter().all(|&mu| {
        if mu.re < -HURWITZ_MARGIN {
            return true;
        }
        let mut pbh = DMatrix::<Complex64>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                pbh[(i, j)] = Complex64::new(a[(i, j)], 0.0);
            }
            pbh[(i, i)] -= mu;
            for j in 0..b.ncols() {
                pbh[(i, n + j)] = Complex64::new(b[(i, j)], 0.0);
            }
        }
        let smin = pbh.singular_values().iter().cloned().fold(f64::INFINITY, f64::min);
        smin > 1e-10 * scale
    })
}

/// Solves the (already discounted) CARE `AᵀP + PA + Q − PBR⁻¹BᵀP = 0` for the
/// stabilizing solution. Returns `(P, K)` with `K = R⁻¹BᵀP`.
pub(crate) fn care_core(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let m = b.ncols();
    if m == 0 {
        // nothing to control: stabilizing solution exists iff A is Hurwitz
        if !is_hurwitz(a, HURWITZ_MARGIN) {
            return Err(Error::NotStabilizable("no inputs and A not Hurwitz".into()));
        }
        let p = lyapunov_core(a, q)?;
        return Ok((p, DMatrix::zeros(0, n)));
    }
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidPlant("R is not positive definite".into()))?;
    let r_inv_bt = chol.solve(&b.transpose());
    let g = symmetrize(&(b * &r_inv_bt));

    // Hamiltonian [[A, -G], [-Q, -Aᵀ]]
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let (mut z, mut t) = complex_schur(&h)?;
    let scale = max_abs(&h).max(1.0);
    let imag_tol = 1e-10 * scale;
    if (0..2 * n).any(|i| t[(i, i)].re.abs() <= imag_tol) {
        return Err(Error::NotStabilizable(
            "Hamiltonian has eigenvalues on the imaginary axis".into(),
        ));
    }
    let stable = reorder_schur(&mut t, &mut z, |l| l.re < 0.0);
    if stable != n {
        return Err(Error::NotStabilizable(format!(
            "expected {n} stable Hamiltonian eigenvalues, found {stable}"
        )));
    }
    let z11 = z.view((0, 0), (n, n)).into_owned();
    let z21 = z.view((n, 0), (n, n)).into_owned();
    let cond = {
        let sv = z11.clone().singular_values();
        let max = sv.iter().cloned().fold(0.0_f64, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    };
    if cond > MAX_CONDITION {
        if !is_stabilizable(a, b) {
            return Err(Error::NotStabilizable("PBH rank test fails".into()));
        }
        return Err(Error::IllConditioned(cond));
    }
    // stable subspace is range [I; P]
    let z11_inv = z11
        .try_inverse()
        .ok_or(Error::IllConditioned(f64::INFINITY))?;
    let p_c = z21 * z11_inv;
    let mut p = symmetrize(&p_c.map(|c| c.re));

    // Newton–Kleinman refinement
    let resid_of = |p: &DMatrix<f64>| max_abs(&care_residual(a, b, q, r, p)) * (n as f64);
    let mut best = resid_of(&p);
    for _ in 0..20 {
        let p_norm = p.norm().max(1.0);
        if best <= 0.01 * CARE_TOLERANCE * p_norm {
            break;
        }
        let k = chol.solve(&(b.transpose() * &p));
        let a_cl = a - b * &k;
        if !is_hurwitz(&a_cl, HURWITZ_MARGIN) {
            break;
        }
        let rhs = q + k.transpose() * r * &k;
        let p_new = match lyapunov_core(&a_cl, &rhs) {
            Ok(x) => x,
            Err(_) => break,
        };
        let res_new = resid_of(&p_new);
        if res_new < best {
            p = p_new;
            best = res_new;
        } else {
            break;
        }
    }
    let k = chol.solve(&(b.transpose() * &p));
    let a_cl = a - b * &k;
    if !is_hurwitz(&a_cl, HURWITZ_MARGIN) {
        return Err(Error::NotStabilizable(format!(
            "closed loop not Hurwitz (abscissa {:.3e})",
            spectral_abscissa(&a_cl)
        )));
    }
    let resid = care_residual(a, b, q, r, &p).norm();
    if !(resid <= CARE_TOLERANCE * p.norm().max(1.0)) {
        return Err(Error::IllConditioned(resid));
    }
    Ok((p, k))
}

/// Optimal value and gain of the discounted LQR problem described by `plant`.
pub fn solve_care(plant: &PlantSpec) -> Result<(QuadraticValue, DMatrix<f64>)> {
    plant.validate()?;
    let (p, k) = care_core(&plant.discounted_a(), &plant.b, &plant.q, &plant.r)?;
    Ok((
        QuadraticValue {
            p,
            center: plant.x_goal.clone(),
        },
        k,
    ))
}

/// Solves `A_clᵀ X + X A_cl + M = 0` for Hurwitz `A_cl`.
pub fn solve_lyapunov(a_cl: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a_cl.is_square() || m.shape() != a_cl.shape() {
        return Err(Error::DimensionMismatch(format!(
            "A_cl is {:?}, M is {:?}",
            a_cl.shape(),
            m.shape()
        )));
    }
    let abscissa = spectral_abscissa(a_cl);
    if !(abscissa < -HURWITZ_MARGIN) {
        return Err(Error::NotHurwitz(abscissa));
    }
    lyapunov_core(a_cl, m)
}

/// Value of the linear policy `u − u_goal = −K (x − x_goal)` on the
/// discounted plant, or [`PolicyValue::Unstable`].
pub fn value_of_linear_policy(plant: &PlantSpec, k: &DMatrix<f64>) -> Result<PolicyValue> {
    if k.shape() != (plant.m(), plant.n()) {
        return Err(Error::DimensionMismatch(format!(
            "gain is {:?}, expected ({}, {})",
            k.shape(),
            plant.m(),
            plant.n()
        )));
    }
    let a_cl = plant.discounted_a() - &plant.b * k;
    if !is_hurwitz(&a_cl, HURWITZ_MARGIN) {
        return Ok(PolicyValue::Unstable);
    }
    let m = &plant.q + k.transpose() * &plant.r * k;
    let p = match lyapunov_core(&a_cl, &m) {
        Ok(p) => p,
        Err(_) => return Ok(PolicyValue::Unstable),
    };
    // a barely-Hurwitz loop can return garbage; a value must be finite and PSD
    let scale = p.norm().max(1.0);
    if p.iter().any(|x| !x.is_finite()) || min_sym_eigenvalue(&p) < -1e-8 * scale {
        return Ok(PolicyValue::Unstable);
    }
    let resid = (a_cl.transpose() * &p + &p * &a_cl + &m).norm();
    if resid > 1e-6 * scale {
        return Ok(PolicyValue::Unstable);
    }
    Ok(PolicyValue::Stable(QuadraticValue {
        p,
        center: plant.x_goal.clone(),
    }))
}

/// Average of `V_a − V_b` over the box centred at the shared centre with the
/// given half-widths: `Σᵢ (P_a − P_b)ᵢᵢ sᵢ² / 3`.
pub fn mean_value_gap(
    pa: &QuadraticValue,
    pb: &QuadraticValue,
    region_halfwidths: &DVector<f64>,
) -> Result<f64> {
    let n = region_halfwidths.len();
    if pa.p.shape() != (n, n) || pb.p.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "values are {:?} and {:?}, region has {} entries",
            pa.p.shape(),
            pb.p.shape(),
            n
        )));
    }
    if pa.center.len() != n || (&pa.center - &pb.center).amax() > 1e-12 {
        return Err(Error::DimensionMismatch("value centres differ".into()));
    }
    Ok((0..n)
        .map(|i| (pa.p[(i, i)] - pb.p[(i, i)]) * region_halfwidths[i].powi(2) / 3.0)
        .sum())
}

/// Condition number guard shared with the representation module.
pub(crate) fn check_condition(m: &DMatrix<f64>) -> Result<f64> {
    let c = condition_number(m);
    if c > MAX_CONDITION || !c.is_finite() {
        Err(Error::Singular(c))
    } else {
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn double_integrator() -> PlantSpec {
        PlantSpec::new(
            dmatrix![0.0, 1.0; 0.0, 0.0],
            dmatrix![0.0; 1.0],
            DMatrix::identity(2, 2),
            dmatrix![1.0],
        )
        .unwrap()
    }

    #[test]
    fn double_integrator_analytic_solution() {
        let (v, k) = solve_care(&double_integrator()).unwrap();
        let s3 = 3f64.sqrt();
        let expected = dmatrix![s3, 1.0; 1.0, s3];
        assert!((v.p - expected).amax() < 1e-10);
        assert!((k - dmatrix![1.0, s3]).amax() < 1e-10);
    }

    #[test]
    fn zero_cost_gives_zero_value() {
        let plant = PlantSpec::new(
            -DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let (v, k) = solve_care(&plant).unwrap();
        assert!(v.p.amax() < 1e-12);
        assert!(k.amax() < 1e-12);
    }

    #[test]
    fn uncontrollable_unstable_mode_is_rejected() {
        let plant = PlantSpec::new(
            dmatrix![1.0, 0.0; 0.0, -1.0],
            dmatrix![0.0; 1.0],
            DMatrix::identity(2, 2),
            dmatrix![1.0],
        )
        .unwrap();
        assert!(matches!(solve_care(&plant), Err(Error::NotStabilizable(_))));
    }

    #[test]
    fn discount_shifts_the_spectrum() {
        // with a large enough discount the open loop is "stable" and K = 0 has finite value
        let plant = PlantSpec::new(
            dmatrix![0.5, 0.0; 0.0, 0.2],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap()
        .with_discount(2.0)
        .unwrap();
        let v = value_of_linear_policy(&plant, &DMatrix::zeros(2, 2)).unwrap();
        let p = v.stable().unwrap().p.clone();
        // scalar: 2 (a - λ/2) p + 1 = 0
        assert!((p[(0, 0)] - 1.0 / (2.0 * 0.5)).abs() < 1e-12);
        assert!((p[(1, 1)] - 1.0 / (2.0 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_diagonal_case() {
        let x = solve_lyapunov(&(-DMatrix::identity(2, 2)), &DMatrix::identity(2, 2)).unwrap();
        assert!((x - DMatrix::identity(2, 2) * 0.5).amax() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_marginal_matrix() {
        let r = solve_lyapunov(&dmatrix![0.0, 1.0; 0.0, 0.0], &DMatrix::identity(2, 2));
        assert!(matches!(r, Err(Error::NotHurwitz(_))));
    }

    #[test]
    fn lyapunov_dimension_mismatch() {
        let r = solve_lyapunov(&(-DMatrix::identity(2, 2)), &DMatrix::identity(3, 3));
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn optimal_gain_reproduces_optimal_value() {
        let plant = double_integrator();
        let (v, k) = solve_care(&plant).unwrap();
        let pk = value_of_linear_policy(&plant, &k).unwrap();
        assert!((&pk.stable().unwrap().p - &v.p).amax() < 1e-8);
    }

    #[test]
    fn open_loop_stable_zero_gain() {
        let plant = PlantSpec::new(
            -DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let v = value_of_linear_policy(&plant, &DMatrix::zeros(2, 2)).unwrap();
        assert!((&v.stable().unwrap().p - DMatrix::identity(2, 2) * 0.5).amax() < 1e-14);
    }

    #[test]
    fn coupled_intro_system_is_unstable_without_control() {
        let plant = PlantSpec::new(
            dmatrix![0.0, 1.0; 1.0, 0.0],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_eq!(
            value_of_linear_policy(&plant, &DMatrix::zeros(2, 2)).unwrap(),
            PolicyValue::Unstable
        );
    }

    #[test]
    fn mean_gap_closed_form() {
        let c = DVector::zeros(2);
        let a = QuadraticValue { p: DMatrix::identity(2, 2) * 2.0, center: c.clone() };
        let b = QuadraticValue { p: DMatrix::identity(2, 2), center: c.clone() };
        let s = DVector::from_element(2, 1.0);
        assert_eq!(mean_value_gap(&a, &a, &s).unwrap(), 0.0);
        assert!((mean_value_gap(&a, &b, &s).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let bad = DVector::from_element(3, 1.0);
        assert!(matches!(mean_value_gap(&a, &b, &bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn invalid_plants_are_rejected() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::identity(2, 2);
        let q = DMatrix::identity(2, 2);
        assert!(PlantSpec::new(a.clone(), b.clone(), q.clone(), -DMatrix::identity(2, 2)).is_err());
        assert!(PlantSpec::new(a.clone(), b.clone(), dmatrix![1.0, 2.0; 0.0, 1.0], q.clone()).is_err());
        assert!(PlantSpec::new(a.clone(), DMatrix::identity(2, 3).transpose(), q.clone(), q.clone()).is_err());
        let p = PlantSpec::new(a, b, q.clone(), q).unwrap();
        assert!(p.clone().with_region(DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(p.with_discount(-1.0).is_err());
    }
}
