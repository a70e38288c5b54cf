//! Synthetic position fixes standing in for a learned localization model.
//!
//! The localizer is unbiased and reports the ground-truth field covariance,
//! optionally scaled by a miscalibration factor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ckm::{AnalyticCkm, CkmField};
use crate::error::{Error, Result};
use crate::model::{position_of, KSet, STATE_DIM};

/// One position fix and the covariance the localizer reports for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub k_used: u32,
}

#[derive(Debug, Clone)]
pub struct Sensor {
    truth: AnalyticCkm,
    k_set: KSet,
    miscalibration: f64,
}

impl Sensor {
    pub fn new(truth: AnalyticCkm, k_set: KSet, miscalibration: f64) -> Result<Self> {
        truth.validate()?;
        if !(miscalibration > 0.0) || !miscalibration.is_finite() {
            return Err(Error::contract(format!(
                "miscalibration must be positive, got {miscalibration}"
            )));
        }
        Ok(Self { truth, k_set, miscalibration })
    }

    pub fn truth_field(&self) -> &AnalyticCkm {
        &self.truth
    }

    /// Reported covariance at a position; depends only on `(l, k)`.
    pub fn reported_covariance(&self, lx: f64, ly: f64, k: u32) -> Result<DMatrix<f64>> {
        Ok(self.truth.variance_at(lx, ly, k)? * self.miscalibration)
    }

    pub fn observe<R: Rng + ?Sized>(
        &self,
        s_true: &DVector<f64>,
        k: u32,
        rng: &mut R,
    ) -> Result<Observation> {
        self.k_set.require(k)?;
        if s_true.len() != STATE_DIM {
            return Err(Error::contract("true state must be 4-D"));
        }
        let pos = position_of(s_true);
        let sigma = self.truth.variance_at(pos[0], pos[1], k)?;
        // The field is diagonal, so per-axis draws are exact.
        let noise = DVector::from_fn(2, |i, _| {
            sigma[(i, i)].sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Observation {
            y: pos + noise,
            sigma_hat: sigma * self.miscalibration,
            k_used: k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::state;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_sensor(var: f64, miscal: f64) -> Sensor {
        Sensor::new(AnalyticCkm::flat(var, 200, 2.0), KSet::arithmetic(50, 8), miscal).unwrap()
    }

    #[test]
    fn flat_field_reports_constant_covariance() {
        let s = flat_sensor(0.04, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pos in [(-40.0, 3.0), (0.0, 0.0), (25.0, -7.0)] {
            let obs = s.observe(&state(pos.0, pos.1, 1.0, 0.0), 200, &mut rng).unwrap();
            assert_eq!(obs.sigma_hat, DMatrix::from_row_slice(2, 2, &[0.04, 0.0, 0.0, 0.04]));
            assert_eq!(obs.k_used, 200);
        }
    }

    #[test]
    fn miscalibration_scales_report_only() {
        let s = flat_sensor(0.04, 2.0);
        let obs = s.observe(&state(0.0, 0.0, 0.0, 0.0), 200, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((obs.sigma_hat[(0, 0)] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn noiseless_limit() {
        let s = flat_sensor(1e-12, 1.0);
        let truth = state(3.0, -4.0, 0.0, 0.0);
        let obs = s.observe(&truth, 200, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((obs.y - DVector::from_vec(vec![3.0, -4.0])).amax() < 1e-5);
    }

    #[test]
    fn rejects_unknown_k_and_bad_miscalibration() {
        let s = flat_sensor(0.04, 1.0);
        let r = s.observe(&state(0.0, 0.0, 0.0, 0.0), 75, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(matches!(r, Err(Error::Contract(_))));
        assert!(Sensor::new(AnalyticCkm::flat(0.04, 200, 2.0), KSet::arithmetic(50, 8), 0.0).is_err());
    }

    #[test]
    fn monte_carlo_covariance_matches_field() {
        let field = AnalyticCkm {
            floor: [0.04, 0.09],
            bumps: vec![],
            k_ref: 200,
            gamma: 2.0,
        };
        let s = Sensor::new(field, KSet::arithmetic(50, 8), 1.0).unwrap();
        let truth = state(1.0, 2.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let ys: Vec<DVector<f64>> = (0..n).map(|_| s.observe(&truth, 100, &mut rng).unwrap().y).collect();
        let mean = ys.iter().fold(DVector::zeros(2), |acc, y| acc + y) / n as f64;
        let cov = ys
            .iter()
            .fold(DMatrix::zeros(2, 2), |acc, y| acc + (y - &mean) * (y - &mean).transpose())
            / (n - 1) as f64;
        let expected = [0.16, 0.36];
        for d in 0..2 {
            assert!((cov[(d, d)] / expected[d] - 1.0).abs() < 0.05, "{cov}");
        }
        assert!(cov[(0, 1)].abs() < 0.05 * 0.24);
    }
}
