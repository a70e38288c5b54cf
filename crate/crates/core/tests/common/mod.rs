#![allow(dead_code)]

use std::ops::AddAssign;
use std::path::PathBuf;

use aif_loop::ckm::{AnalyticCkm, CkmField, VarianceBump};
use aif_loop::gaussian::Gaussian;
use aif_loop::harness::ExperimentConfig;
use aif_loop::inference::Belief;
use aif_loop::model::{observation_matrix, DynamicsModel, GoalPrior, KSet, ReferenceTrajectory};
use aif_loop::sensing::Observation;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn reference_config() -> ExperimentConfig {
    ExperimentConfig::load(&repo_path("scenarios/reference.toml")).expect("reference scenario loads")
}

pub fn random_spd<R: Rng>(n: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) * scale);
    &a * a.transpose() + DMatrix::identity(n, n) * (0.05 * scale * scale)
}

/// Kalman gain form: `m + K(y − Cm)`, `(I − KC)P(I − KC)ᵀ + KΣKᵀ`.
pub fn gain_form_update(prior_mean: &DVector<f64>, prior_cov: &DMatrix<f64>, y: &DVector<f64>, sigma: &DMatrix<f64>)
    -> (DVector<f64>, DMatrix<f64>) {
    let c = observation_matrix();
    let s = &c * prior_cov * c.transpose() + sigma;
    let k = prior_cov * c.transpose() * s.lu().try_inverse().expect("innovation covariance invertible");
    let i_kc = DMatrix::identity(4, 4) - &k * &c;
    let mean = prior_mean + &k * (y - &c * prior_mean);
    let cov = &i_kc * prior_cov * i_kc.transpose() + &k * sigma * k.transpose();
    (mean, cov)
}

pub fn observation(y: DVector<f64>, sigma: DMatrix<f64>) -> Observation {
    Observation { y, sigma_hat: sigma, k_used: 200 }
}

/// A random but well-posed planning problem.
pub struct Problem {
    pub dynamics: DynamicsModel,
    pub goal: GoalPrior,
    pub field: AnalyticCkm,
    pub k_set: KSet,
    pub belief: Belief,
}

pub fn random_problem<R: Rng>(rng: &mut R) -> Problem {
    let dt = rng.random_range(0.05..0.5);
    let dynamics = DynamicsModel::new(dt, rng.random_range(0.005..0.1)).unwrap();
    let reference = ReferenceTrajectory {
        start: [rng.random_range(-50.0..0.0), rng.random_range(-5.0..5.0)],
        end: [rng.random_range(0.0..50.0), rng.random_range(-5.0..5.0)],
        speed: rng.random_range(0.5..2.0),
        dt,
        n_steps: 1000,
    };
    let alpha = [0.0, 1e-6, 1e-5][rng.random_range(0..3)];
    let goal = GoalPrior::diagonal(
        [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)],
        [rng.random_range(0.01..1.0), rng.random_range(0.01..1.0)],
        alpha,
        reference.clone(),
    )
    .unwrap();
    let field = AnalyticCkm {
        floor: [rng.random_range(0.01..0.2), rng.random_range(0.01..0.2)],
        bumps: vec![VarianceBump {
            center: [rng.random_range(-30.0..30.0), rng.random_range(-5.0..5.0)],
            amplitude: [rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)],
            width: rng.random_range(3.0..15.0),
        }],
        k_ref: 200,
        gamma: rng.random_range(0.5..2.5),
    };
    let t = rng.random_range(0..200);
    let mut mean = reference.reference_at(t);
    for v in mean.iter_mut() {
        *v += rng.random_range(-1.0..1.0);
    }
    let belief = Belief::new(Gaussian::new(mean, random_spd(4, 0.5, rng)).unwrap(), t).unwrap();
    Problem { dynamics, goal, field, k_set: KSet::arithmetic(50, 8), belief }
}

/// Observation preference on a future state, built directly from the
/// definition: position covariance `Σ_k w_k (Q_goal⁻¹ + Σ_ckm(k))` with
/// `w_k ∝ exp(−½ α k²)`, velocity variance `sigma2`.
pub fn preference(p: &Problem, tau: usize, sigma2: f64) -> (DVector<f64>, DMatrix<f64>) {
    let y_d = p.goal.reference.desired_position(tau);
    let raw: Vec<f64> = p
        .k_set
        .values()
        .iter()
        .map(|&k| -0.5 * p.goal.alpha * f64::from(k).powi(2))
        .collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let q_inv = p.goal.q_goal.clone().try_inverse().unwrap();
    let mut pos = DMatrix::zeros(2, 2);
    for (wk, &k) in w.iter().zip(p.k_set.values()) {
        pos += (&q_inv + p.field.variance_at(y_d[0], y_d[1], k).unwrap()) * (wk / z);
    }
    let mut cov = DMatrix::zeros(4, 4);
    cov.view_mut((0, 0), (2, 2)).copy_from(&pos);
    cov[(2, 2)] = sigma2;
    cov[(3, 3)] = sigma2;
    let mut mean = DVector::zeros(4);
    mean.rows_mut(0, 2).copy_from(&y_d);
    (mean, cov)
}

/// Solution of the dense joint Gaussian over
/// `[s_t, u_t, s_{t+1}, u_{t+1}, …, s_{t+T}]`.
pub struct DenseSolution {
    pub mean: DVector<f64>,
    pub horizon: usize,
}

impl DenseSolution {
    pub fn state(&self, i: usize) -> DVector<f64> {
        self.mean.rows(6 * i, 4).into_owned()
    }

    pub fn control(&self, i: usize) -> DVector<f64> {
        assert!(i < self.horizon);
        self.mean.rows(6 * i + 4, 2).into_owned()
    }
}

/// Assembles the joint precision matrix from every factor and solves it in
/// one dense linear system.
pub fn dense_joint(p: &Problem, horizon: usize, sigma_diffuse2: f64, sigma_terminal2: f64) -> DenseSolution {
    let n = 6 * horizon + 4;
    let s_idx = |i: usize| 6 * i;
    let u_idx = |i: usize| 6 * i + 4;
    let mut j = DMatrix::<f64>::zeros(n, n);
    let mut h = DVector::<f64>::zeros(n);
    let inv = |m: &DMatrix<f64>| m.clone().lu().try_inverse().unwrap();

    let p0 = inv(p.belief.cov());
    j.view_mut((0, 0), (4, 4)).add_assign(&p0);
    h.rows_mut(0, 4).add_assign(&(&p0 * p.belief.mean()));

    let q_inv = inv(&p.dynamics.q);
    for i in 0..horizon {
        // Residual s_{i+1} − A s_i − B u_i.
        let mut g = DMatrix::<f64>::zeros(4, n);
        g.view_mut((0, s_idx(i + 1)), (4, 4)).copy_from(&DMatrix::identity(4, 4));
        g.view_mut((0, s_idx(i)), (4, 4)).copy_from(&(-&p.dynamics.a));
        g.view_mut((0, u_idx(i)), (4, 2)).copy_from(&(-&p.dynamics.b));
        j += g.transpose() * &q_inv * &g;
        j.view_mut((u_idx(i), u_idx(i)), (2, 2)).add_assign(&p.goal.r_goal);

        let (mu, cov) = preference(p, p.belief.step + i + 1, sigma_diffuse2);
        let prec = inv(&cov);
        j.view_mut((s_idx(i + 1), s_idx(i + 1)), (4, 4)).add_assign(&prec);
        h.rows_mut(s_idx(i + 1), 4).add_assign(&(&prec * mu));
    }
    let last = s_idx(horizon);
    j.view_mut((last, last), (4, 4))
        .add_assign(&(DMatrix::<f64>::identity(4, 4) / sigma_terminal2));

    let mean = j.lu().solve(&h).expect("joint precision is non-singular");
    DenseSolution { mean, horizon }
}
