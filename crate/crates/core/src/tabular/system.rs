use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::care::PlantSpec;
use crate::error::{Error, Result};

/// `f(x, u, ẋ)`: writes the state derivative into the last argument.
pub type Dynamics = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Maps a commanded input to the input actually applied (in place).
pub type Saturation = Arc<dyn Fn(&mut [f64]) + Send + Sync>;

/// Tolerance on `|f(x_goal, u_goal)|∞` for the goal to count as an equilibrium.
pub const EQUILIBRIUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone)]
pub struct NonlinearSystem {
    pub name: String,
    pub dynamics: Dynamics,
    pub x_goal: DVector<f64>,
    pub u_goal: DVector<f64>,
    pub state_lower: DVector<f64>,
    pub state_upper: DVector<f64>,
    pub input_lower: DVector<f64>,
    pub input_upper: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub lambda_discount: f64,
    /// Applied-input map; `None` clamps to the input bounds.
    pub saturation: Option<Saturation>,
}

impl std::fmt::Debug for NonlinearSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NonlinearSystem")
            .field("name", &self.name)
            .field("n", &self.n())
            .field("m", &self.m())
            .field("x_goal", &self.x_goal.as_slice())
            .field("u_goal", &self.u_goal.as_slice())
            .field("lambda_discount", &self.lambda_discount)
            .finish()
    }
}

impl NonlinearSystem {
    /// `ẋ = A x + B u` with goal at the origin and symmetric bounds.
    #[allow(clippy::too_many_arguments)]
    pub fn from_linear(
        name: &str,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        lambda_discount: f64,
        state_halfwidths: DVector<f64>,
        input_halfwidths: DVector<f64>,
    ) -> Self {
        let (a, b) = (a.clone(), b.clone());
        let (n, m) = (a.nrows(), b.ncols());
        let f = move |x: &[f64], u: &[f64], dx: &mut [f64]| {
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += a[(i, j)] * x[j];
                }
                for j in 0..m {
                    s += b[(i, j)] * u[j];
                }
                dx[i] = s;
            }
        };
        NonlinearSystem {
            name: name.to_string(),
            dynamics: Arc::new(f),
            x_goal: DVector::zeros(n),
            u_goal: DVector::zeros(m),
            state_lower: -&state_halfwidths,
            state_upper: state_halfwidths,
            input_lower: -&input_halfwidths,
            input_upper: input_halfwidths,
            q,
            r,
            lambda_discount,
            saturation: None,
        }
    }

    pub fn n(&self) -> usize {
        self.x_goal.len()
    }

    pub fn m(&self) -> usize {
        self.u_goal.len()
    }

    pub fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        (self.dynamics)(x, u, dx)
    }

    /// Replaces a commanded input by the applied one.
    pub fn saturate(&self, u: &mut [f64]) {
        match &self.saturation {
            Some(s) => s(u),
            None => {
                for (i, ui) in u.iter_mut().enumerate() {
                    *ui = ui.clamp(self.input_lower[i], self.input_upper[i]);
                }
            }
        }
    }

    /// Half of the state box extent per dimension.
    pub fn state_halfwidths(&self) -> DVector<f64> {
        (&self.state_upper - &self.state_lower) * 0.5
    }

    /// `|f(x_goal, u_goal)|∞`.
    pub fn equilibrium_residual(&self) -> f64 {
        let mut dx = vec![0.0; self.n()];
        self.eval(self.x_goal.as_slice(), self.u_goal.as_slice(), &mut dx);
        dx.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        let shapes_ok = self.state_lower.len() == n
            && self.state_upper.len() == n
            && self.input_lower.len() == m
            && self.input_upper.len() == m
            && self.q.shape() == (n, n)
            && self.r.shape() == (m, m);
        if !shapes_ok {
            return Err(Error::DimensionMismatch(format!("system `{}` has inconsistent shapes", self.name)));
        }
        for i in 0..n {
            if !(self.state_lower[i] <= self.x_goal[i] && self.x_goal[i] <= self.state_upper[i])
                || self.state_lower[i] >= self.state_upper[i]
            {
                return Err(Error::InvalidConfig(format!("state bounds of dimension {i} do not contain the goal")));
            }
        }
        for i in 0..m {
            if !(self.input_lower[i] <= self.u_goal[i] && self.u_goal[i] <= self.input_upper[i]) {
                return Err(Error::InvalidConfig(format!("input bounds of input {i} do not contain the goal")));
            }
        }
        let res = self.equilibrium_residual();
        if !(res <= EQUILIBRIUM_TOLERANCE) {
            return Err(Error::NonEquilibriumGoal(res));
        }
        Ok(())
    }

    /// Quadratic stage cost over all states and inputs.
    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        quad_form(&self.q, x, self.x_goal.as_slice()) + quad_form(&self.r, u, self.u_goal.as_slice())
    }

    /// The same system in coordinates `y = T_y (x − x_goal)`,
    /// `v = T_v (u − u_goal)`. Costs are carried over exactly; the new state
    /// box is the bounding box of the image of the old one, and inputs are
    /// saturated in the original coordinates.
    pub fn transformed(&self, t_y: &DMatrix<f64>, t_v: &DMatrix<f64>, name: &str) -> Result<NonlinearSystem> {
        let (n, m) = (self.n(), self.m());
        let ty_inv = t_y.clone().try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
        let tv_inv = t_v.clone().try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
        let base = self.clone();
        let (ty, tyi, tvi) = (t_y.clone(), ty_inv.clone(), tv_inv.clone());
        let f = move |y: &[f64], v: &[f64], dy: &mut [f64]| {
            let mut x = vec![0.0; n];
            let mut u = vec![0.0; m];
            for i in 0..n {
                x[i] = base.x_goal[i] + (0..n).map(|j| tyi[(i, j)] * y[j]).sum::<f64>();
            }
            for i in 0..m {
                u[i] = base.u_goal[i] + (0..m).map(|j| tvi[(i, j)] * v[j]).sum::<f64>();
            }
            base.saturate(&mut u);
            let mut dx = vec![0.0; n];
            base.eval(&x, &u, &mut dx);
            for i in 0..n {
                dy[i] = (0..n).map(|j| ty[(i, j)] * dx[j]).sum();
            }
        };
        let base = self.clone();
        let (tv, tvi) = (t_v.clone(), tv_inv.clone());
        let sat = move |v: &mut [f64]| {
            let mut u: Vec<f64> = (0..m)
                .map(|i| base.u_goal[i] + (0..m).map(|j| tvi[(i, j)] * v[j]).sum::<f64>())
                .collect();
            base.saturate(&mut u);
            for i in 0..m {
                v[i] = (0..m).map(|j| tv[(i, j)] * (u[j] - base.u_goal[j])).sum();
            }
        };
        let s = self.state_halfwidths();
        let s_new = t_y.abs() * s;
        let (mut in_lo, mut in_hi) = (DVector::zeros(m), DVector::zeros(m));
        for i in 0..m {
            for j in 0..m {
                let a = t_v[(i, j)] * (self.input_lower[j] - self.u_goal[j]);
                let b = t_v[(i, j)] * (self.input_upper[j] - self.u_goal[j]);
                in_lo[i] += a.min(b);
                in_hi[i] += a.max(b);
            }
        }
        Ok(NonlinearSystem {
            name: name.to_string(),
            dynamics: Arc::new(f),
            x_goal: DVector::zeros(n),
            u_goal: DVector::zeros(m),
            state_lower: -&s_new,
            state_upper: s_new,
            input_lower: in_lo,
            input_upper: in_hi,
            q: ty_inv.transpose() * &self.q * &ty_inv,
            r: tv_inv.transpose() * &self.r * &tv_inv,
            lambda_discount: self.lambda_discount,
            saturation: Some(Arc::new(sat)),
        })
    }
}

pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64], c: &[f64]) -> f64 {
    let k = x.len();
    let mut s = 0.0;
    for i in 0..k {
        let di = x[i] - c[i];
        if di == 0.0 {
            continue;
        }
        for j in 0..k {
            s += m[(i, j)] * di * (x[j] - c[j]);
        }
    }
    s
}

/// Central-difference linearization about the goal. The region of the
/// resulting plant is half the state box.
pub fn linearize(sys: &NonlinearSystem) -> Result<PlantSpec> {
    let res = sys.equilibrium_residual();
    if !(res <= EQUILIBRIUM_TOLERANCE) {
        return Err(Error::NonEquilibriumGoal(res));
    }
    let (n, m) = (sys.n(), sys.m());
    let x0: Vec<f64> = sys.x_goal.iter().copied().collect();
    let u0: Vec<f64> = sys.u_goal.iter().copied().collect();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * x0[j].abs().max(1.0);
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[j] += h;
        xm[j] -= h;
        sys.eval(&xp, &u0, &mut fp);
        sys.eval(&xm, &u0, &mut fm);
        for i in 0..n {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut b = DMatrix::zeros(n, m);
    for j in 0..m {
        let h = 1e-6 * u0[j].abs().max(1.0);
        let mut up = u0.clone();
        let mut um = u0.clone();
        up[j] += h;
        um[j] -= h;
        sys.eval(&x0, &up, &mut fp);
        sys.eval(&x0, &um, &mut fm);
        for i in 0..n {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let plant = PlantSpec {
        a,
        b,
        q: sys.q.clone(),
        r: sys.r.clone(),
        lambda_discount: sys.lambda_discount,
        x_goal: sys.x_goal.clone(),
        u_goal: sys.u_goal.clone(),
        region_halfwidths: sys.state_halfwidths(),
    };
    plant.validate()?;
    Ok(plant)
}

/// `(V_ref − V_other) / V_ref`.
pub fn normalized_value_error(v_ref: f64, v_other: f64) -> Result<f64> {
    if !(v_ref > 0.0) {
        return Err(Error::NonPositiveReference(v_ref));
    }
    Ok((v_ref - v_other) / v_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn linearizing_a_linear_system_recovers_it() {
        let a = dmatrix![0.1, 2.0, 0.0; -1.0, 0.0, 0.5; 0.3, 0.0, -0.2];
        let b = dmatrix![1.0, 0.0; 0.0, 0.2; 0.4, 1.0];
        let sys = NonlinearSystem::from_linear(
            "lin",
            &a,
            &b,
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 2),
            0.0,
            DVector::from_element(3, 1.0),
            DVector::from_element(2, 1.0),
        );
        let p = linearize(&sys).unwrap();
        assert!((p.a - a).amax() < 1e-6);
        assert!((p.b - b).amax() < 1e-6);
    }

    #[test]
    fn pendulum_upright() {
        let f = |x: &[f64], u: &[f64], dx: &mut [f64]| {
            dx[0] = x[1];
            dx[1] = x[0].sin() + u[0];
        };
        let sys = NonlinearSystem {
            name: "pendulum".into(),
            dynamics: Arc::new(f),
            x_goal: DVector::zeros(2),
            u_goal: DVector::zeros(1),
            state_lower: DVector::from_element(2, -1.0),
            state_upper: DVector::from_element(2, 1.0),
            input_lower: DVector::from_element(1, -1.0),
            input_upper: DVector::from_element(1, 1.0),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            lambda_discount: 0.0,
            saturation: None,
        };
        let p = linearize(&sys).unwrap();
        assert!((p.a - dmatrix![0.0, 1.0; 1.0, 0.0]).amax() < 1e-6);
        assert!((p.b - dmatrix![0.0; 1.0]).amax() < 1e-6);
    }

    #[test]
    fn normalized_error_values() {
        assert_eq!(normalized_value_error(10.0, 10.0).unwrap(), 0.0);
        assert!((normalized_value_error(10.0, 13.0).unwrap() + 0.3).abs() < 1e-15);
        assert!((normalized_value_error(10.0, 5.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(normalized_value_error(0.0, 1.0), Err(Error::NonPositiveReference(_))));
    }

    #[test]
    fn transformed_system_matches_coordinates() {
        let a = dmatrix![0.0, 1.0; 1.0, 0.0];
        let sys = NonlinearSystem::from_linear(
            "intro",
            &a,
            &DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            0.0,
            DVector::from_element(2, 1.0),
            DVector::from_element(2, 10.0),
        );
        let s = 0.5f64.sqrt();
        let t = dmatrix![s, s; s, -s];
        let tsys = sys.transformed(&t, &t, "rot").unwrap();
        let p = linearize(&tsys).unwrap();
        assert!((p.a - dmatrix![1.0, 0.0; 0.0, -1.0]).amax() < 1e-6);
        assert!((p.b - DMatrix::identity(2, 2)).amax() < 1e-6);
        assert!((tsys.state_halfwidths() - DVector::from_element(2, 2.0 * s)).amax() < 1e-12);
        // stage cost is preserved
        let x = [0.3, -0.2];
        let u = [0.1, 0.4];
        let y: Vec<f64> = (0..2).map(|i| t[(i, 0)] * x[0] + t[(i, 1)] * x[1]).collect();
        let v: Vec<f64> = (0..2).map(|i| t[(i, 0)] * u[0] + t[(i, 1)] * u[1]).collect();
        assert!((sys.stage_cost(&x, &u) - tsys.stage_cost(&y, &v)).abs() < 1e-12);
    }
}
