//! Fixed structure of the generative model: constant-velocity dynamics driven
//! by acceleration commands, the position-only observation projection, the
//! reference trajectory, and the quadratic stage costs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::cholesky_jittered;

/// State ordering is `[l_x, l_y, v_x, v_y]`.
pub const STATE_DIM: usize = 4;
pub const OBS_DIM: usize = 2;
pub const CONTROL_DIM: usize = 2;

pub fn state(lx: f64, ly: f64, vx: f64, vy: f64) -> DVector<f64> {
    DVector::from_vec(vec![lx, ly, vx, vy])
}

pub fn vec2(x: f64, y: f64) -> DVector<f64> {
    DVector::from_vec(vec![x, y])
}

/// `C = [I₂ | 0₂ₓ₂]`: extracts position from the state.
pub fn observation_matrix() -> DMatrix<f64> {
    DMatrix::from_fn(OBS_DIM, STATE_DIM, |i, j| if i == j { 1.0 } else { 0.0 })
}

pub fn position_of(s: &DVector<f64>) -> DVector<f64> {
    s.rows(0, OBS_DIM).into_owned()
}

/// Linear-Gaussian transition `s' = A s + B u + w`, `w ~ N(0, Q)`.
#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub dt: f64,
    noise_factor: Option<DMatrix<f64>>,
}

impl DynamicsModel {
    /// Constant-velocity model with isotropic process noise `Q = σ_w² I₄`.
    pub fn new(dt: f64, sigma_w: f64) -> Result<Self> {
        if !(sigma_w >= 0.0) || !sigma_w.is_finite() {
            return Err(Error::contract(format!("sigma_w must be >= 0, got {sigma_w}")));
        }
        Self::with_process_noise(dt, DMatrix::identity(STATE_DIM, STATE_DIM) * (sigma_w * sigma_w))
    }

    pub fn with_process_noise(dt: f64, q: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::contract(format!("dt must be positive, got {dt}")));
        }
        if q.shape() != (STATE_DIM, STATE_DIM) {
            return Err(Error::contract("process noise must be 4x4"));
        }
        let mut a = DMatrix::identity(STATE_DIM, STATE_DIM);
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let mut b = DMatrix::zeros(STATE_DIM, CONTROL_DIM);
        for i in 0..2 {
            b[(i, i)] = 0.5 * dt * dt;
            b[(i + 2, i)] = dt;
        }
        let q = crate::gaussian::symmetrize(&q);
        let noise_factor = if q.iter().all(|v| *v == 0.0) {
            None
        } else {
            Some(cholesky_jittered(&q)?.l())
        };
        Ok(Self { a, b, q, dt, noise_factor })
    }

    /// `A s + B u` without noise.
    pub fn mean_step(&self, s: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * s + &self.b * u
    }

    /// Samples the true next state.
    pub fn step_truth<R: Rng + ?Sized>(
        &self,
        s: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if s.len() != STATE_DIM || u.len() != CONTROL_DIM {
            return Err(Error::contract("state must be 4-D and control 2-D"));
        }
        let mut next = self.mean_step(s, u);
        if let Some(l) = &self.noise_factor {
            let z = DVector::from_fn(STATE_DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
            next += l * z;
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("true state became non-finite".into()));
        }
        Ok(next)
    }
}

/// Straight-line reference traversed at constant speed, hovering at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTrajectory {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub speed: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl ReferenceTrajectory {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0) || !(self.dt > 0.0) || self.n_steps == 0 {
            return Err(Error::contract(
                "reference trajectory needs speed > 0, dt > 0 and n_steps >= 1",
            ));
        }
        Ok(())
    }

    fn length(&self) -> f64 {
        (self.end[0] - self.start[0]).hypot(self.end[1] - self.start[1])
    }

    /// Desired 4-state at step `tau`.
    pub fn reference_at(&self, tau: usize) -> DVector<f64> {
        let len = self.length();
        if len == 0.0 {
            return state(self.start[0], self.start[1], 0.0, 0.0);
        }
        let ux = (self.end[0] - self.start[0]) / len;
        let uy = (self.end[1] - self.start[1]) / len;
        let travelled = tau.min(self.n_steps) as f64 * self.dt * self.speed;
        let arrived = tau >= self.n_steps || travelled >= len;
        let d = travelled.min(len);
        let v = if arrived { 0.0 } else { self.speed };
        state(self.start[0] + d * ux, self.start[1] + d * uy, v * ux, v * uy)
    }

    pub fn desired_position(&self, tau: usize) -> DVector<f64> {
        position_of(&self.reference_at(tau))
    }
}

/// Preference weights of the goal prior plus the trajectory they track.
#[derive(Debug, Clone)]
pub struct GoalPrior {
    pub q_goal: DMatrix<f64>,
    pub r_goal: DMatrix<f64>,
    pub alpha: f64,
    pub reference: ReferenceTrajectory,
}

impl GoalPrior {
    pub fn new(
        q_goal: DMatrix<f64>,
        r_goal: DMatrix<f64>,
        alpha: f64,
        reference: ReferenceTrajectory,
    ) -> Result<Self> {
        if q_goal.shape() != (2, 2) || r_goal.shape() != (2, 2) {
            return Err(Error::contract("Q_goal and R_goal must be 2x2"));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::contract(format!("alpha_goal must be >= 0, got {alpha}")));
        }
        reference.validate()?;
        let q_goal = crate::gaussian::symmetrize(&q_goal);
        let r_goal = crate::gaussian::symmetrize(&r_goal);
        for (name, m) in [("Q_goal", &q_goal), ("R_goal", &r_goal)] {
            if m.clone().symmetric_eigenvalues().iter().any(|e| *e < -1e-12) {
                return Err(Error::contract(format!("{name} is not positive semidefinite")));
            }
        }
        Ok(Self { q_goal, r_goal, alpha, reference })
    }

    /// Diagonal weights convenience constructor.
    pub fn diagonal(q: [f64; 2], r: [f64; 2], alpha: f64, reference: ReferenceTrajectory) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&vec2(q[0], q[1])),
            DMatrix::from_diagonal(&vec2(r[0], r[1])),
            alpha,
            reference,
        )
    }
}

/// Per-step costs `(J_est, J_ctrl, J_sens)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageCosts {
    pub est: f64,
    pub ctrl: f64,
    pub sens: f64,
}

pub fn estimation_cost(y: &DVector<f64>, y_desired: &DVector<f64>, q_goal: &DMatrix<f64>) -> f64 {
    let e = y - y_desired;
    0.5 * (e.transpose() * q_goal * &e)[(0, 0)]
}

pub fn control_cost(u: &DVector<f64>, r_goal: &DMatrix<f64>) -> f64 {
    0.5 * (u.transpose() * r_goal * u)[(0, 0)]
}

pub fn sensing_cost(k: u32, alpha: f64) -> f64 {
    let k = f64::from(k);
    0.5 * alpha * k * k
}

pub fn stage_costs(
    y: &DVector<f64>,
    u: &DVector<f64>,
    k: u32,
    goal: &GoalPrior,
    y_desired: &DVector<f64>,
) -> StageCosts {
    StageCosts {
        est: estimation_cost(y, y_desired, &goal.q_goal),
        ctrl: control_cost(u, &goal.r_goal),
        sens: sensing_cost(k, goal.alpha),
    }
}

/// Candidate subcarrier counts, strictly increasing and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct KSet(Vec<u32>);

impl KSet {
    pub fn new(values: Vec<u32>) -> Result<Self> {
        if values.is_empty() || values[0] == 0 || values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "k set must be non-empty, positive and strictly increasing: {values:?}"
            )));
        }
        Ok(Self(values))
    }

    /// `{step, 2·step, …, count·step}`.
    pub fn arithmetic(step: u32, count: u32) -> Self {
        Self((1..=count).map(|i| i * step).collect())
    }

    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, k: u32) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    pub fn min(&self) -> u32 {
        self.0[0]
    }

    /// Lower median.
    pub fn median(&self) -> u32 {
        self.0[(self.0.len() - 1) / 2]
    }

    pub fn require(&self, k: u32) -> Result<()> {
        if self.contains(k) {
            Ok(())
        } else {
            Err(Error::contract(format!("k={k} is not a candidate configuration")))
        }
    }
}

impl TryFrom<Vec<u32>> for KSet {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        KSet::new(v)
    }
}

impl From<KSet> for Vec<u32> {
    fn from(k: KSet) -> Self {
        k.0
    }
}
