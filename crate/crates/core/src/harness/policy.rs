//! The two ablation policies. The full policy executes the plan as is.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::inference::Belief;
use crate::model::{observation_matrix, DynamicsModel, KSet};
use crate::planner::k_prior_weights;

/// Draws `k` from the prior `w_k ∝ exp(−½ α k²)`.
pub fn policy_prior_k<R: Rng + ?Sized>(k_set: &KSet, alpha: f64, rng: &mut R) -> Result<u32> {
    let weights = k_prior_weights(k_set, alpha);
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::contract(format!("prior over k is not a distribution: {e}")))?;
    Ok(k_set.values()[dist.sample(rng)])
}

/// Least-squares control placing the predicted next position on
/// `y_desired_next`: `u = (C B)⁺ (y_desired_next − C A m)`.
pub fn policy_greedy_u(
    belief: &Belief,
    y_desired_next: &DVector<f64>,
    dynamics: &DynamicsModel,
) -> DVector<f64> {
    let c = observation_matrix();
    let cb = &c * &dynamics.b;
    let pinv = cb.pseudo_inverse(1e-15).expect("pseudo-inverse with non-negative eps");
    pinv * (y_desired_next - &c * &dynamics.a * belief.mean())
}
