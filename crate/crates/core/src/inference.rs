//! Filtering-stage belief update.
//!
//! The posterior is computed in information form,
//! `P = (P⁻¹_prior + Cᵀ Σ⁻¹ C)⁻¹`, `m = P (Cᵀ Σ⁻¹ y + P⁻¹_prior m_prior)`,
//! which is the free-energy minimizer under the linear-Gaussian model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{spd_inverse, Gaussian};
use crate::model::{observation_matrix, DynamicsModel, ReferenceTrajectory, STATE_DIM};
use crate::sensing::Observation;

/// Filtered marginal `q(s_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub g: Gaussian,
    pub step: usize,
}

impl Belief {
    pub fn new(g: Gaussian, step: usize) -> Result<Self> {
        if g.dim() != STATE_DIM {
            return Err(Error::contract(format!("belief must be 4-D, got {}", g.dim())));
        }
        Ok(Self { g, step })
    }

    /// Initial belief centred on the reference with `diag(1, 1, 0.1, 0.1)`.
    pub fn initial(reference: &ReferenceTrajectory) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.1, 0.1]));
        Self::new(Gaussian::new(reference.reference_at(0), cov)?, 0)
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.g.mean()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        self.g.cov()
    }
}

/// `m ↦ A m + B u`, `P ↦ A P Aᵀ + Q`.
pub fn predict(prev: &Belief, u: &DVector<f64>, dynamics: &DynamicsModel) -> Result<Belief> {
    let g = prev.g.push_affine(&dynamics.a, &(&dynamics.b * u), &dynamics.q)?;
    Belief::new(g, prev.step + 1)
}

pub fn update(prior: &Belief, obs: &Observation) -> Result<Belief> {
    let c = observation_matrix();
    let obs_precision = spd_inverse(&obs.sigma_hat)?;
    let prior_precision = prior.g.precision()?;
    let ct_sigma_inv = c.transpose() * obs_precision;
    let cov = spd_inverse(&(&prior_precision + &ct_sigma_inv * &c))
        .map_err(|e| Error::Degenerate(format!("posterior at step {}: {e}", prior.step)))?;
    let mean = &cov * (ct_sigma_inv * &obs.y + prior_precision * prior.mean());
    Belief::new(Gaussian::new(mean, cov)?, prior.step)
}

/// One full inference stage: predict with the previous control, then update.
pub fn infer_step(
    prev: &Belief,
    u_prev: &DVector<f64>,
    obs: &Observation,
    dynamics: &DynamicsModel,
) -> Result<Belief> {
    update(&predict(prev, u_prev, dynamics)?, obs)
}
