//! Plant generators: randomized linear families and small nonlinear
//! benchmark systems.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::care::{solve_care, PlantSpec};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, min_sym_eigenvalue, symmetrize};
use crate::serde_util;
use crate::tabular::NonlinearSystem;

/// Diagonal jitter added to sampled Gram matrices.
pub const GRAM_JITTER: f64 = 1e-9;
/// Resampling attempts before giving up.
pub const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::I => "I",
            Strategy::II => "II",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "1" => Ok(Strategy::I),
            "II" | "ii" | "2" => Ok(Strategy::II),
            _ => Err(Error::InvalidConfig(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub strategy: Strategy,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    /// Singular value of the constructed gain (strategy II).
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Number of zero singular values in the constructed gain (strategy II).
    #[serde(default)]
    pub zero_sv_count: usize,
}

fn default_scale() -> f64 {
    1.0
}

impl SampleConfig {
    pub fn new(strategy: Strategy, m: usize, n: usize, seed: u64) -> Self {
        SampleConfig { strategy, m, n, seed, scale: 1.0, zero_sv_count: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m == 0 || self.m > self.n {
            return bad(format!("need 1 <= m <= n, got m={}, n={}", self.m, self.n));
        }
        if self.strategy == Strategy::II {
            if self.m != self.n {
                return bad("strategy II requires m = n".into());
            }
            if self.zero_sv_count >= self.m {
                return bad("zero_sv_count must be below m".into());
            }
            if !(self.scale > 0.0 && self.scale.is_finite()) {
                return bad("scale must be positive".into());
            }
        }
        Ok(())
    }
}

/// A sampled plant together with how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledPlant {
    pub config: SampleConfig,
    pub plant: PlantSpec,
    /// Draws rejected before this one.
    pub retries: usize,
    #[serde(default, with = "optional_matrix", skip_serializing_if = "Option::is_none")]
    pub k_star_expected: Option<DMatrix<f64>>,
}

mod optional_matrix {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "serde_util::matrix")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(|m| Wrap(m.clone())).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DMatrix<f64>>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian with sign correction.
pub fn haar_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, n, n).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Strategy I: every entry of A, B, Q_s, R_s uniform on [0, 1];
/// `Q = Q_s Q_sᵀ + εI`, `R = R_s R_sᵀ + εI`. Non-stabilizable draws are redrawn.
pub fn sample_strategy_1(cfg: &SampleConfig) -> Result<SampledPlant> {
    cfg.validate()?;
    let (m, n) = (cfg.m, cfg.n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for attempt in 0..=MAX_RETRIES {
        let a = uniform_matrix(&mut rng, n, n);
        let b = uniform_matrix(&mut rng, n, m);
        let qs = uniform_matrix(&mut rng, n, n);
        let rs = uniform_matrix(&mut rng, m, m);
        let q = symmetrize(&(&qs * qs.transpose())) + DMatrix::identity(n, n) * GRAM_JITTER;
        let r = symmetrize(&(&rs * rs.transpose())) + DMatrix::identity(m, m) * GRAM_JITTER;
        let plant = match PlantSpec::new(a, b, q, r) {
            Ok(p) => p,
            Err(e) => {
                log::info!("strategy I seed {} draw {attempt} rejected: {e}", cfg.seed);
                continue;
            }
        };
        match solve_care(&plant) {
            Ok(_) => {
                if attempt > 0 {
                    log::info!("strategy I seed {} accepted after {attempt} redraws", cfg.seed);
                }
                return Ok(SampledPlant { config: cfg.clone(), plant, retries: attempt, k_star_expected: None });
            }
            Err(e) => log::info!("strategy I seed {} draw {attempt} rejected: {e}", cfg.seed),
        }
    }
    Err(Error::ExhaustedRetries(MAX_RETRIES))
}

/// Strategy II: inverse LQR with a prescribed square gain
/// `K* = U diag(σ) Vᵀ`, all nonzero σ equal to `scale`. Uses `P = cI`,
/// `R = I`, `B = V diag(σ) Uᵀ / c`, and `Q = V diag(σ)² Vᵀ − c(A + Aᵀ)` with
/// the symmetric part of `A` shifted so that `Q ⪰ εI`, `ε = 0.1 c²`.
pub fn sample_strategy_2(cfg: &SampleConfig) -> Result<SampledPlant> {
    cfg.validate()?;
    if cfg.strategy != Strategy::II {
        return Err(Error::InvalidConfig("strategy II sampler called with strategy I".into()));
    }
    let n = cfg.n;
    let c = cfg.scale;
    let eps = 0.1 * c * c;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma = DVector::from_fn(n, |i, _| if i < n - cfg.zero_sv_count { c } else { 0.0 });
    for attempt in 0..=MAX_RETRIES {
        let u = haar_orthogonal(&mut rng, n);
        let v = haar_orthogonal(&mut rng, n);
        let g = gaussian_matrix(&mut rng, n, n);
        let skew = (&g - g.transpose()) * 0.5;
        let sym = (&g + g.transpose()) * 0.5;
        let s2 = &v * DMatrix::from_diagonal(&sigma.map(|s| s * s)) * v.transpose();
        let lmin = min_sym_eigenvalue(&(&s2 - &sym * (2.0 * c)));
        let alpha = ((eps - lmin) / (2.0 * c)).max(0.0);
        let a = &skew + &sym - DMatrix::identity(n, n) * alpha;
        let q = symmetrize(&(&s2 - (&a + a.transpose()) * c));
        let b = &v * DMatrix::from_diagonal(&sigma) * u.transpose() / c;
        let k_expected = &u * DMatrix::from_diagonal(&sigma) * v.transpose();
        let plant = PlantSpec::new(a, b, q, DMatrix::identity(n, n))?;
        match solve_care(&plant) {
            Ok((_, k)) if max_abs(&(&k - &k_expected)) <= 1e-8 => {
                return Ok(SampledPlant {
                    config: cfg.clone(),
                    plant,
                    retries: attempt,
                    k_star_expected: Some(k_expected),
                });
            }
            Ok((_, k)) => log::info!(
                "strategy II seed {} draw {attempt}: round-trip error {:.2e}, redrawing",
                cfg.seed,
                max_abs(&(&k - &k_expected))
            ),
            Err(e) => log::info!("strategy II seed {} draw {attempt} rejected: {e}", cfg.seed),
        }
    }
    Err(Error::ExhaustedRetries(MAX_RETRIES))
}

pub fn sample(cfg: &SampleConfig) -> Result<SampledPlant> {
    match cfg.strategy {
        Strategy::I => sample_strategy_1(cfg),
        Strategy::II => sample_strategy_2(cfg),
    }
}

/// Seed of sample `index` in a batch rooted at `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Coupled two-state linear system that decouples under a 45° rotation.
pub fn intro_plant() -> PlantSpec {
    PlantSpec::new(
        dmatrix![0.0, 1.0; 1.0, 0.0],
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
    )
    .expect("valid plant")
}

/// Parameters of the planar quadrotor benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    /// kg
    pub mass: f64,
    /// m, motor arm
    pub arm: f64,
    /// kg m²
    pub inertia: f64,
    /// m/s²
    pub gravity: f64,
    /// Maximum thrust per motor divided by the hover thrust of the whole vehicle.
    pub motor_limit_ratio: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        QuadrotorParams { mass: 0.5, arm: 0.2, inertia: 0.01, gravity: 9.81, motor_limit_ratio: 0.75 }
    }
}

/// Planar quadrotor with state `[z, θ, ż, θ̇]` and motor thrusts `[F1, F2]`:
/// `z̈ = (F1 + F2) cos θ / m − g`, `θ̈ = l (F2 − F1) / I`. Each motor is
/// limited to `[0, motor_limit_ratio·mg]`, so one motor alone cannot hover.
pub fn planar_quadrotor(p: QuadrotorParams) -> NonlinearSystem {
    let hover = 0.5 * p.mass * p.gravity;
    let fmax = p.motor_limit_ratio * p.mass * p.gravity;
    let f = move |x: &[f64], u: &[f64], dx: &mut [f64]| {
        dx[0] = x[2];
        dx[1] = x[3];
        dx[2] = (u[0] + u[1]) * x[1].cos() / p.mass - p.gravity;
        dx[3] = p.arm * (u[1] - u[0]) / p.inertia;
    };
    NonlinearSystem {
        name: "planar_quadrotor".into(),
        dynamics: Arc::new(f),
        x_goal: DVector::zeros(4),
        u_goal: DVector::from_element(2, hover),
        state_lower: DVector::from_vec(vec![-1.0, -PI / 4.0, -2.0, -4.0]),
        state_upper: DVector::from_vec(vec![1.0, PI / 4.0, 2.0, 4.0]),
        input_lower: DVector::zeros(2),
        input_upper: DVector::from_element(2, fmax),
        q: DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 10.0, 1.0, 1.0])),
        r: DMatrix::identity(2, 2) * 0.1,
        lambda_discount: 0.5,
        saturation: None,
    }
}

/// Parameters of the two-link manipulator benchmark (point masses at link tips).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManipulatorParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub gravity: f64,
    /// Joint-angle goal measured from upright.
    pub q_goal: [f64; 2],
    pub torque_limit: f64,
}

impl Default for ManipulatorParams {
    fn default() -> Self {
        ManipulatorParams { m1: 1.0, m2: 1.0, l1: 1.0, l2: 1.0, gravity: 9.81, q_goal: [0.2, 0.3], torque_limit: 40.0 }
    }
}

/// Gravity torques of the manipulator at joint angles `q` (angles from upright).
pub fn manipulator_gravity(p: &ManipulatorParams, q: [f64; 2]) -> [f64; 2] {
    let s1 = q[0].sin();
    let s12 = (q[0] + q[1]).sin();
    // potential energy g (m1 l1 cos q1 + m2 (l1 cos q1 + l2 cos q12)), G = dV/dq
    let g1 = -p.gravity * ((p.m1 + p.m2) * p.l1 * s1 + p.m2 * p.l2 * s12);
    let g2 = -p.gravity * p.m2 * p.l2 * s12;
    [g1, g2]
}

/// Two-link manipulator `M(q) q̈ + C(q, q̇) q̇ + G(q) = τ` with state
/// `[q1, q2, q̇1, q̇2]`, stabilized at an off-vertical pose. With
/// `gravity_compensation` false the goal torque is zero, which is not an
/// equilibrium.
pub fn two_link_manipulator(p: ManipulatorParams, gravity_compensation: bool) -> NonlinearSystem {
    let f = move |x: &[f64], u: &[f64], dx: &mut [f64]| {
        let (q1, q2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let c2 = q2.cos();
        let s2 = q2.sin();
        let m11 = (p.m1 + p.m2) * p.l1 * p.l1 + p.m2 * p.l2 * p.l2 + 2.0 * p.m2 * p.l1 * p.l2 * c2;
        let m12 = p.m2 * p.l2 * p.l2 + p.m2 * p.l1 * p.l2 * c2;
        let m22 = p.m2 * p.l2 * p.l2;
        let h = p.m2 * p.l1 * p.l2 * s2;
        let c1 = -h * (2.0 * w1 * w2 + w2 * w2);
        let c2t = h * w1 * w1;
        let g = manipulator_gravity(&p, [q1, q2]);
        let r1 = u[0] - c1 - g[0];
        let r2 = u[1] - c2t - g[1];
        let det = m11 * m22 - m12 * m12;
        dx[0] = w1;
        dx[1] = w2;
        dx[2] = (m22 * r1 - m12 * r2) / det;
        dx[3] = (m11 * r2 - m12 * r1) / det;
    };
    let u_goal = if gravity_compensation {
        let g = manipulator_gravity(&p, p.q_goal);
        DVector::from_vec(g.to_vec())
    } else {
        DVector::zeros(2)
    };
    let (q1, q2) = (p.q_goal[0], p.q_goal[1]);
    NonlinearSystem {
        name: "two_link_manipulator".into(),
        dynamics: Arc::new(f),
        x_goal: DVector::from_vec(vec![q1, q2, 0.0, 0.0]),
        u_goal,
        state_lower: DVector::from_vec(vec![q1 - 0.5, q2 - 0.5, -2.0, -2.0]),
        state_upper: DVector::from_vec(vec![q1 + 0.5, q2 + 0.5, 2.0, 2.0]),
        input_lower: DVector::from_element(2, -p.torque_limit),
        input_upper: DVector::from_element(2, p.torque_limit),
        q: DMatrix::identity(4, 4),
        r: DMatrix::identity(2, 2) * 0.01,
        lambda_discount: 0.5,
        saturation: None,
    }
}

/// Double integrator `ẍ = u` on `[−1, 1]²` with `|u| ≤ 3`.
pub fn double_integrator() -> NonlinearSystem {
    NonlinearSystem::from_linear(
        "double_integrator",
        &dmatrix![0.0, 1.0; 0.0, 0.0],
        &dmatrix![0.0; 1.0],
        DMatrix::identity(2, 2),
        dmatrix![1.0],
        0.1,
        DVector::from_element(2, 1.0),
        DVector::from_element(1, 3.0),
    )
}

/// The coupled two-state linear system wrapped for tabular methods.
pub fn intro_system() -> NonlinearSystem {
    let p = intro_plant();
    NonlinearSystem::from_linear(
        "intro",
        &p.a,
        &p.b,
        p.q.clone(),
        p.r.clone(),
        0.0,
        DVector::from_element(2, 1.0),
        DVector::from_element(2, 5.0),
    )
}

/// Catalog of benchmark systems, keyed by name.
pub fn benchmark_systems() -> Vec<NonlinearSystem> {
    vec![
        intro_system(),
        double_integrator(),
        planar_quadrotor(QuadrotorParams::default()),
        two_link_manipulator(ManipulatorParams::default(), true),
    ]
}

pub fn benchmark_by_name(name: &str) -> Result<NonlinearSystem> {
    benchmark_systems()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownSystem(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::linearize;

    #[test]
    fn strategy_1_is_reproducible() {
        let cfg = SampleConfig::new(Strategy::I, 2, 4, 42);
        let a = sample_strategy_1(&cfg).unwrap();
        let b = sample_strategy_1(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(min_sym_eigenvalue(&a.plant.r) > 0.0);
        assert!(a.plant.a.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn strategy_1_mostly_stabilizable_first_draw() {
        let first = (0..100)
            .filter(|&s| sample_strategy_1(&SampleConfig::new(Strategy::I, 2, 4, s)).unwrap().retries == 0)
            .count();
        assert!(first >= 95, "{first}");
    }

    #[test]
    fn strategy_2_round_trip() {
        for seed in 0..20 {
            let s = sample_strategy_2(&SampleConfig::new(Strategy::II, 3, 3, seed)).unwrap();
            let (_, k) = solve_care(&s.plant).unwrap();
            assert!(max_abs(&(k - s.k_star_expected.unwrap())) <= 1e-8);
        }
    }

    #[test]
    fn strategy_2_zero_singular_values() {
        let mut cfg = SampleConfig::new(Strategy::II, 3, 3, 7);
        cfg.zero_sv_count = 1;
        let s = sample_strategy_2(&cfg).unwrap();
        let (_, k) = solve_care(&s.plant).unwrap();
        let mut sv: Vec<f64> = k.singular_values().iter().copied().collect();
        sv.sort_by(f64::total_cmp);
        assert!(sv[0] < 1e-9 * sv[2]);
    }

    #[test]
    fn strategy_2_requires_square() {
        let cfg = SampleConfig::new(Strategy::II, 2, 3, 0);
        assert!(matches!(sample_strategy_2(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn haar_matrix_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = haar_orthogonal(&mut rng, 4);
        assert!(max_abs(&(q.transpose() * &q - DMatrix::identity(4, 4))) < 1e-12);
    }

    #[test]
    fn quadrotor_hover_is_equilibrium_and_b_is_symmetric() {
        let sys = planar_quadrotor(QuadrotorParams::default());
        let mut dx = [0.0; 4];
        sys.eval(sys.x_goal.as_slice(), sys.u_goal.as_slice(), &mut dx);
        assert!(dx.iter().all(|v| v.abs() < 1e-12));
        let plant = linearize(&sys).unwrap();
        let p = QuadrotorParams::default();
        assert!((plant.b[(2, 0)] - 1.0 / p.mass).abs() < 1e-6);
        assert!((plant.b[(2, 0)] - plant.b[(2, 1)]).abs() < 1e-6);
        assert!((plant.b[(3, 0)] + plant.b[(3, 1)]).abs() < 1e-6);
        assert!((plant.b[(3, 1)] - p.arm / p.inertia).abs() < 1e-4);
        // one motor at its limit cannot hover
        assert!(sys.input_upper[0] < p.mass * p.gravity);
    }

    #[test]
    fn manipulator_needs_gravity_compensation() {
        let p = ManipulatorParams::default();
        assert!(matches!(linearize(&two_link_manipulator(p, false)), Err(Error::NonEquilibriumGoal(_))));
        let plant = linearize(&two_link_manipulator(p, true)).unwrap();
        assert!(solve_care(&plant).is_ok());
    }

    #[test]
    fn catalog_systems_are_equilibria() {
        for sys in benchmark_systems() {
            sys.validate().unwrap();
        }
        assert!(matches!(benchmark_by_name("nope"), Err(Error::UnknownSystem(_))));
    }
}
