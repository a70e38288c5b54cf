//! Receding-horizon planning by Gaussian message passing.
//!
//! A backward sweep folds the goal prior into per-step beliefs over future
//! states: at each step the observation preference (marginalized over the
//! predicted observation and, by moment matching, over the candidate
//! subcarrier counts) is fused with the belief propagated from the step after,
//! then pushed one step back through the dynamics with the control prior
//! marginalized out. The terminal belief is uninformative.
//!
//! A forward sweep then starts from the filtered belief. At each step the
//! control posterior comes from fusing the predicted state with the fused
//! backward belief; the subcarrier posterior is evaluated by enumeration over
//! the candidate set. Only the first action pair is meant to be executed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ckm::CkmField;
use crate::error::{Error, Result};
use crate::gaussian::{moment_match_mixture, spd_inverse, spd_log_det, Gaussian};
use crate::inference::Belief;
use crate::model::{
    control_cost, observation_matrix, position_of, sensing_cost, DynamicsModel, GoalPrior, KSet,
    OBS_DIM, STATE_DIM,
};

/// Where the map is queried for a future step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CkmEvalPoint {
    /// The reference position at that step.
    #[default]
    Desired,
    /// The predicted mean position (zero-control rollout during the backward
    /// sweep, the control-conditioned prediction during the forward sweep).
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerParams {
    pub horizon: usize,
    /// Velocity variance of the observation preference.
    pub sigma_diffuse2: f64,
    /// Variance of the uninformative terminal belief.
    pub sigma_terminal2: f64,
    pub k_set: KSet,
    pub ckm_eval_point: CkmEvalPoint,
    /// Fold the expected measurement precision into planned forward beliefs.
    pub forward_obs_update: bool,
}

impl PlannerParams {
    pub fn new(horizon: usize, k_set: KSet) -> Self {
        Self {
            horizon,
            sigma_diffuse2: 1e8,
            sigma_terminal2: 1e8,
            k_set,
            ckm_eval_point: CkmEvalPoint::Desired,
            forward_obs_update: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::contract("planning horizon must be >= 1"));
        }
        if !(self.sigma_diffuse2 >= 1e6) || !(self.sigma_terminal2 >= 1e6) {
            return Err(Error::contract("diffuse variances must be >= 1e6"));
        }
        Ok(())
    }
}

/// Beliefs at one future state from the backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardNode {
    pub step: usize,
    /// Belief propagated back from the step after (`m_bw`, `P_bw`).
    pub bw: Gaussian,
    /// `bw` fused with this step's observation preference (`m_tot`, `P_tot`).
    /// Absent at the planning origin, whose observation is already in the
    /// filtered belief.
    pub tot: Option<Gaussian>,
}

impl BackwardNode {
    fn tot(&self) -> Result<&Gaussian> {
        self.tot
            .as_ref()
            .ok_or_else(|| Error::contract("backward node at the planning origin has no fused belief"))
    }
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    /// Planning origin `t`.
    pub step: usize,
    /// `u*_τ` for `τ = t..t+T-1`.
    pub u_star: Vec<DVector<f64>>,
    /// `k*_{τ+1}` for `τ = t..t+T-1`.
    pub k_star: Vec<u32>,
    pub q_u: Vec<Gaussian>,
    pub q_k: Vec<Vec<f64>>,
    /// Backward nodes for `τ = t..t+T`.
    pub backward: Vec<BackwardNode>,
    /// Forward belief at `τ = t..t+T-1`.
    pub forward: Vec<Gaussian>,
    /// Prediction of `s_{τ+1}` given `u*_τ`.
    pub predicted: Vec<Gaussian>,
    pub y_desired: Vec<DVector<f64>>,
    /// Map query positions used by the forward sweep.
    pub eval_pos: Vec<DVector<f64>>,
    pub efe: f64,
}

impl PlanResult {
    pub fn first_action(&self) -> (&DVector<f64>, u32) {
        (&self.u_star[0], self.k_star[0])
    }
}

/// Normalized log prior over `k`: `log w_k`, `w_k ∝ exp(−½ α k²)`.
pub fn k_prior_log_weights(k_set: &KSet, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = k_set.values().iter().map(|&k| -sensing_cost(k, alpha)).collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + raw.iter().map(|r| (r - max).exp()).sum::<f64>().ln();
    raw.into_iter().map(|r| r - lse).collect()
}

pub fn k_prior_weights(k_set: &KSet, alpha: f64) -> Vec<f64> {
    k_prior_log_weights(k_set, alpha).into_iter().map(f64::exp).collect()
}

/// Softmax of log-scores and the argmax, ties resolved to the smallest `k`.
pub fn posterior_over_k(scores: &[f64], k_set: &KSet) -> (Vec<f64>, u32) {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let max = scores[best];
    let unnorm: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    (unnorm.into_iter().map(|p| p / z).collect(), k_set.values()[best])
}

fn block_diag(top: &DMatrix<f64>, bottom_var: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(STATE_DIM, STATE_DIM);
    m.view_mut((0, 0), (OBS_DIM, OBS_DIM)).copy_from(top);
    for i in OBS_DIM..STATE_DIM {
        m[(i, i)] = bottom_var;
    }
    m
}

fn at_tau<T>(tau: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Planning { tau, source: Box::new(e) })
}

/// Everything a plan depends on besides the current belief.
#[derive(Clone, Copy)]
pub struct Planner<'a> {
    pub goal: &'a GoalPrior,
    pub ckm: &'a dyn CkmField,
    pub dynamics: &'a DynamicsModel,
    pub params: &'a PlannerParams,
}

impl<'a> Planner<'a> {
    pub fn new(
        goal: &'a GoalPrior,
        ckm: &'a dyn CkmField,
        dynamics: &'a DynamicsModel,
        params: &'a PlannerParams,
    ) -> Result<Self> {
        params.validate()?;
        Ok(Self { goal, ckm, dynamics, params })
    }

    fn q_goal_inv(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.goal.q_goal)
    }

    fn map_cov(&self, pos: &DVector<f64>, k: u32) -> Result<DMatrix<f64>> {
        self.ckm.variance_at(pos[0], pos[1], k)
    }

    /// Observation preference on `s_{τ+1}` with `y` and `k` marginalized:
    /// `N([y_d; 0], blockdiag(Σ_k w_k (Q_goal⁻¹ + Σ_ckm(k)), σ² I₂))`.
    pub fn backward_obs_message(
        &self,
        y_desired: &DVector<f64>,
        eval_pos: &DVector<f64>,
    ) -> Result<Gaussian> {
        let q_inv = self.q_goal_inv()?;
        let weights = k_prior_weights(&self.params.k_set, self.goal.alpha);
        let components = self
            .params
            .k_set
            .values()
            .iter()
            .map(|&k| Gaussian::new(y_desired.clone(), &q_inv + self.map_cov(eval_pos, k)?))
            .collect::<Result<Vec<_>>>()?;
        let mixed = moment_match_mixture(&weights, &components)?;
        let mut mean = DVector::zeros(STATE_DIM);
        mean.rows_mut(0, OBS_DIM).copy_from(mixed.mean());
        Gaussian::new(mean, block_diag(mixed.cov(), self.params.sigma_diffuse2))
    }

    /// Map query positions for `τ = t+1..t+T` as seen by the backward sweep.
    fn backward_eval_positions(&self, belief: &Belief) -> Vec<DVector<f64>> {
        let t = belief.step;
        let reference = &self.goal.reference;
        match self.params.ckm_eval_point {
            CkmEvalPoint::Desired => (1..=self.params.horizon)
                .map(|i| reference.desired_position(t + i))
                .collect(),
            CkmEvalPoint::Predicted => {
                let mut s = belief.mean().clone();
                (1..=self.params.horizon)
                    .map(|_| {
                        s = &self.dynamics.a * &s;
                        position_of(&s)
                    })
                    .collect()
            }
        }
    }

    /// Backward nodes for `τ = t..t+T` (index `τ − t`).
    pub fn backward_pass(&self, belief: &Belief) -> Result<Vec<BackwardNode>> {
        let t = belief.step;
        let horizon = self.params.horizon;
        let dyn_ = self.dynamics;
        let eval = self.backward_eval_positions(belief);
        let r_inv = spd_inverse(&self.goal.r_goal)?;
        let control_spread = &dyn_.b * r_inv * dyn_.b.transpose();

        let fused = |i: usize, bw: &Gaussian| -> Result<Gaussian> {
            let y_d = self.goal.reference.desired_position(t + i);
            self.backward_obs_message(&y_d, &eval[i - 1])?.fuse(bw)
        };

        let terminal = Gaussian::isotropic(DVector::zeros(STATE_DIM), self.params.sigma_terminal2)?;
        let terminal_tot = at_tau(t + horizon, fused(horizon, &terminal))?;
        let mut nodes = vec![BackwardNode { step: t + horizon, bw: terminal, tot: Some(terminal_tot) }];

        for i in (0..horizon).rev() {
            let tau = t + i;
            let next_tot = nodes.last().expect("non-empty").tot()?;
            let node = at_tau(tau, (|| {
                let s = next_tot.cov() + &dyn_.q + &control_spread;
                let s_inv = spd_inverse(&s)?;
                let at_s_inv = dyn_.a.transpose() * s_inv;
                let cov = spd_inverse(&(&at_s_inv * &dyn_.a))?;
                let mean = &cov * at_s_inv * next_tot.mean();
                let bw = Gaussian::new(mean, cov)?;
                let tot = if i > 0 { Some(fused(i, &bw)?) } else { None };
                Ok(BackwardNode { step: tau, bw, tot })
            })())?;
            nodes.push(node);
        }
        nodes.reverse();
        Ok(nodes)
    }

    /// Control posterior at `τ` given the forward belief at `τ` and the
    /// backward node at `τ+1`. Returns `(q_u, P_pred)`.
    pub fn forward_control(
        &self,
        fwd: &Gaussian,
        node_next: &BackwardNode,
    ) -> Result<(Gaussian, DMatrix<f64>)> {
        let dyn_ = self.dynamics;
        let tot = node_next.tot()?;
        let p_pred = &dyn_.a * fwd.cov() * dyn_.a.transpose() + &dyn_.q;
        let d_inv = spd_inverse(&(&p_pred + tot.cov()))?;
        let bt_d_inv = dyn_.b.transpose() * d_inv;
        let p_u = spd_inverse(&(&bt_d_inv * &dyn_.b + &self.goal.r_goal))?;
        let m_u = &p_u * bt_d_inv * (tot.mean() - &dyn_.a * fwd.mean());
        Ok((Gaussian::new(m_u, p_u)?, p_pred))
    }

    /// Subcarrier posterior for `k_{τ+1}` given `u*_τ`. Returns `(q_k, k*)`.
    pub fn forward_sensing(
        &self,
        predicted: &Gaussian,
        node_next: &BackwardNode,
        y_desired: &DVector<f64>,
        eval_pos: &DVector<f64>,
    ) -> Result<(Vec<f64>, u32)> {
        let fused = predicted.fuse(&node_next.bw)?;
        let c = observation_matrix();
        let y_pred = &c * fused.mean();
        let base = self.q_goal_inv()? + &c * fused.cov() * c.transpose();
        let log_prior = k_prior_log_weights(&self.params.k_set, self.goal.alpha);
        let scores = self
            .params
            .k_set
            .values()
            .iter()
            .zip(&log_prior)
            .map(|(&k, lp)| {
                let v = &base + self.map_cov(eval_pos, k)?;
                Ok(lp + Gaussian::new(y_desired.clone(), v)?.log_density(&y_pred)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(posterior_over_k(&scores, &self.params.k_set))
    }

    pub fn plan(&self, belief: &Belief) -> Result<PlanResult> {
        if belief.g.dim() != STATE_DIM {
            return Err(Error::contract("planning needs a 4-D belief"));
        }
        let t = belief.step;
        let horizon = self.params.horizon;
        let backward = self.backward_pass(belief)?;
        let dyn_ = self.dynamics;
        let c = observation_matrix();

        let mut out = PlanResult {
            step: t,
            u_star: Vec::with_capacity(horizon),
            k_star: Vec::with_capacity(horizon),
            q_u: Vec::with_capacity(horizon),
            q_k: Vec::with_capacity(horizon),
            backward: Vec::new(),
            forward: Vec::with_capacity(horizon),
            predicted: Vec::with_capacity(horizon),
            y_desired: Vec::with_capacity(horizon),
            eval_pos: Vec::with_capacity(horizon),
            efe: 0.0,
        };

        let mut fwd = belief.g.clone();
        for i in 0..horizon {
            let tau = t + i;
            let node_next = &backward[i + 1];
            at_tau(tau, (|| {
                let (q_u, p_pred) = self.forward_control(&fwd, node_next)?;
                let u = q_u.mean().clone();
                let predicted = Gaussian::new(dyn_.mean_step(fwd.mean(), &u), p_pred)?;
                let y_d = self.goal.reference.desired_position(tau + 1);
                let eval = match self.params.ckm_eval_point {
                    CkmEvalPoint::Desired => y_d.clone(),
                    CkmEvalPoint::Predicted => position_of(predicted.mean()),
                };
                let (q_k, k) = self.forward_sensing(&predicted, node_next, &y_d, &eval)?;

                let next = if self.params.forward_obs_update {
                    let obs_precision = spd_inverse(&self.map_cov(&eval, k)?)?;
                    let info = predicted.precision()? + c.transpose() * obs_precision * &c;
                    Gaussian::new(predicted.mean().clone(), spd_inverse(&info)?)?
                } else {
                    predicted.clone()
                };

                out.u_star.push(u);
                out.k_star.push(k);
                out.q_u.push(q_u);
                out.q_k.push(q_k);
                out.forward.push(std::mem::replace(&mut fwd, next));
                out.predicted.push(predicted);
                out.y_desired.push(y_d);
                out.eval_pos.push(eval);
                Ok(())
            })())?;
        }
        out.backward = backward;
        out.efe = self.efe_report(&out)?;
        Ok(out)
    }

    /// Expected goal-prior energy minus predictive observation entropy,
    /// summed over the horizon:
    /// `Σ_τ E[J_est] + J_ctrl(u*_τ) + J_sens(k*_{τ+1}) − ½ log det(2πe (Σ_ckm + C P Cᵀ))`.
    /// The goal-prior normalizer is a constant and is omitted.
    pub fn efe_report(&self, plan: &PlanResult) -> Result<f64> {
        let c = observation_matrix();
        let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let mut total = 0.0;
        for i in 0..plan.u_star.len() {
            let k = plan.k_star[i];
            let pred = &plan.predicted[i];
            let y_cov = self.map_cov(&plan.eval_pos[i], k)? + &c * pred.cov() * c.transpose();
            let err = &c * pred.mean() - &plan.y_desired[i];
            let expected_est = 0.5
                * ((err.transpose() * &self.goal.q_goal * &err)[(0, 0)]
                    + (&self.goal.q_goal * &y_cov).trace());
            let entropy = 0.5 * (OBS_DIM as f64 * two_pi_e.ln() + spd_log_det(&y_cov)?);
            total += expected_est
                + control_cost(&plan.u_star[i], &self.goal.r_goal)
                + sensing_cost(k, self.goal.alpha)
                - entropy;
        }
        Ok(total)
    }
}
