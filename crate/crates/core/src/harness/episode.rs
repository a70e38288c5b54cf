use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Policy, Scenario};
use super::policy::{policy_greedy_u, policy_prior_k};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::inference::{infer_step, update, Belief};
use crate::model::{estimation_cost, observation_matrix, stage_costs};
use crate::planner::Planner;

// Independent streams so that every policy sees the same noise draws.
const PROCESS_STREAM: u64 = 1;
const OBSERVATION_STREAM: u64 = 2;
const POLICY_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One closed-loop step. Matrices are flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub true_state: [f64; 4],
    /// Filtered belief after incorporating `y`.
    pub belief_mean: [f64; 4],
    pub belief_cov: [f64; 16],
    pub y: [f64; 2],
    pub sigma_hat: [f64; 4],
    /// Control applied from this step to the next.
    pub u: [f64; 2],
    /// Subcarriers used for `y`.
    pub k: u32,
    /// Subcarriers chosen for the next observation.
    pub k_next: u32,
    pub j_est: f64,
    pub j_ctrl: f64,
    pub j_sens: f64,
    /// `J_est` evaluated at the belief mean instead of `y`.
    pub j_est_belief: f64,
    /// Surrogate EFE of the plan computed at this step.
    pub efe: f64,
}

impl StepRecord {
    pub fn belief(&self) -> Result<Belief> {
        let g = Gaussian::new(
            DVector::from_row_slice(&self.belief_mean),
            DMatrix::from_row_slice(4, 4, &self.belief_cov),
        )?;
        Belief::new(g, self.step)
    }
}

fn array<const N: usize>(it: impl Iterator<Item = f64>) -> [f64; N] {
    let mut out = [0.0; N];
    for (o, v) in out.iter_mut().zip(it) {
        *o = v;
    }
    out
}

fn row_major<const N: usize>(m: &DMatrix<f64>) -> [f64; N] {
    array(m.transpose().iter().copied())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub sum_est: f64,
    pub sum_ctrl: f64,
    pub sum_sens: f64,
    pub sum_est_belief: f64,
    /// `Σ_τ (J_ctrl,τ + J_est,τ+1 + J_sens,τ+1)` over `τ = 0..N−2`.
    pub total_j: f64,
    /// Mean of the same sum over consecutive windows of `window` steps.
    pub window_j_mean: f64,
    pub mean_efe: f64,
    pub mean_k: f64,
}

impl Aggregates {
    /// Left-to-right sums over `records` in step order.
    pub fn from_records(records: &[StepRecord], window: usize) -> Self {
        let n = records.len();
        let mut agg = Aggregates {
            sum_est: 0.0,
            sum_ctrl: 0.0,
            sum_sens: 0.0,
            sum_est_belief: 0.0,
            total_j: 0.0,
            window_j_mean: 0.0,
            mean_efe: 0.0,
            mean_k: 0.0,
        };
        let mut sum_efe = 0.0;
        let mut sum_k = 0.0;
        for r in records {
            agg.sum_est += r.j_est;
            agg.sum_ctrl += r.j_ctrl;
            agg.sum_sens += r.j_sens;
            agg.sum_est_belief += r.j_est_belief;
            sum_efe += r.efe;
            sum_k += f64::from(r.k);
        }
        let mut windows = Vec::new();
        for tau in 0..n.saturating_sub(1) {
            let stage = records[tau].j_ctrl + records[tau + 1].j_est + records[tau + 1].j_sens;
            agg.total_j += stage;
            if tau % window == 0 {
                windows.push(0.0);
            }
            *windows.last_mut().expect("window opened") += stage;
        }
        if !windows.is_empty() {
            agg.window_j_mean = windows.iter().sum::<f64>() / windows.len() as f64;
        }
        if n > 0 {
            agg.mean_efe = sum_efe / n as f64;
            agg.mean_k = sum_k / n as f64;
        }
        agg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub aggregates: Aggregates,
}

pub fn run_episode(config: &ExperimentConfig, seed: u64) -> Result<EpisodeLog> {
    let scenario = Scenario::from_config(config)?;
    run_episode_in(&scenario, config, seed)
}

/// Closed loop for `n_steps` steps: observe with the current `k`, filter,
/// plan, act.
pub fn run_episode_in(scenario: &Scenario, config: &ExperimentConfig, seed: u64) -> Result<EpisodeLog> {
    let planner = Planner::new(&scenario.goal, scenario.planner_ckm.as_ref(), &scenario.dynamics, &scenario.params)?;
    let reference = &scenario.goal.reference;
    let c = observation_matrix();
    let mut process_rng = stream(seed, PROCESS_STREAM);
    let mut obs_rng = stream(seed, OBSERVATION_STREAM);
    let mut policy_rng = stream(seed, POLICY_STREAM);

    let mut truth = reference.reference_at(0);
    let mut belief = scenario.initial.clone();
    let mut k = scenario.params.k_set.median();
    let mut u_prev: Option<DVector<f64>> = None;
    let mut records = Vec::with_capacity(config.trajectory.n_steps);

    for t in 0..config.trajectory.n_steps {
        let at = |e: Error| Error::Episode { step: t, source: Box::new(e) };
        let obs = scenario.sensor.observe(&truth, k, &mut obs_rng).map_err(at)?;
        belief = match &u_prev {
            None => update(&belief, &obs),
            Some(u) => infer_step(&belief, u, &obs, &scenario.dynamics),
        }
        .map_err(at)?;
        let plan = planner.plan(&belief).map_err(at)?;
        let (u, k_next) = match config.policy {
            Policy::Aif => (plan.u_star[0].clone(), plan.k_star[0]),
            Policy::PriorKAifU => (
                plan.u_star[0].clone(),
                policy_prior_k(&scenario.params.k_set, scenario.goal.alpha, &mut policy_rng).map_err(at)?,
            ),
            Policy::AifKGreedyU => (
                policy_greedy_u(&belief, &reference.desired_position(t + 1), &scenario.dynamics),
                plan.k_star[0],
            ),
        };

        let y_d = reference.desired_position(t);
        let costs = stage_costs(&obs.y, &u, k, &scenario.goal, &y_d);
        records.push(StepRecord {
            step: t,
            true_state: array(truth.iter().copied()),
            belief_mean: array(belief.mean().iter().copied()),
            belief_cov: row_major(belief.cov()),
            y: array(obs.y.iter().copied()),
            sigma_hat: row_major(&obs.sigma_hat),
            u: array(u.iter().copied()),
            k,
            k_next,
            j_est: costs.est,
            j_ctrl: costs.ctrl,
            j_sens: costs.sens,
            j_est_belief: estimation_cost(&(&c * belief.mean()), &y_d, &scenario.goal.q_goal),
            efe: plan.efe,
        });

        truth = scenario.dynamics.step_truth(&truth, &u, &mut process_rng).map_err(at)?;
        u_prev = Some(u);
        k = k_next;
    }

    let aggregates = Aggregates::from_records(&records, config.window);
    Ok(EpisodeLog { config: config.clone(), seed, records, aggregates })
}
