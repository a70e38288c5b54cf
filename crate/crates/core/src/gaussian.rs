//! Multivariate Gaussians in moment form and the handful of exact operations
//! that every message in the engine reduces to.
//!
//! Covariances are symmetrized after every product. Inversions go through a
//! Cholesky factorization; if that fails, a jitter of
//! `1e-9 * (1 + trace/n)` is added to the diagonal and the factorization is
//! retried once before reporting [`Error::Degenerate`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const JITTER_SCALE: f64 = 1e-9;

/// `ε = 1e-9·(1 + trace/n)`.
pub fn jitter_for(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    JITTER_SCALE * (1.0 + m.trace().abs() / n)
}

/// `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric matrix, retrying once with jitter.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite entries in covariance".into()));
    }
    let sym = symmetrize(m);
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok(chol);
    }
    let eps = jitter_for(&sym);
    let n = sym.nrows();
    Cholesky::new(sym + DMatrix::identity(n, n) * eps).ok_or_else(|| {
        Error::Degenerate(format!(
            "{n}x{n} matrix is not positive definite after jitter {eps:e}"
        ))
    })
}

/// Inverse of a symmetric positive-(semi)definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = cholesky_jittered(m)?.inverse();
    Ok(symmetrize(&inv))
}

/// Natural logarithm of the determinant of an SPD matrix.
pub fn spd_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky_jittered(m)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// A multivariate normal `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    /// Builds a Gaussian, symmetrizing `cov`.
    ///
    /// `cov` may be singular (a point mass is a valid message) but it must
    /// factorize once jitter is added.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::contract("gaussian of dimension 0"));
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::contract(format!(
                "mean has dimension {n} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("non-finite mean".into()));
        }
        let cov = symmetrize(&cov);
        cholesky_jittered(&cov)?;
        Ok(Self { mean, cov })
    }

    /// `N(mean, variance·I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }

    /// Precision matrix `P⁻¹`, computed on demand.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.cov)
    }

    /// Precision-weighted product of two Gaussians over the same variable:
    /// `P = (Pa⁻¹ + Pb⁻¹)⁻¹`, `m = P (Pa⁻¹ ma + Pb⁻¹ mb)`.
    pub fn fuse(&self, other: &Gaussian) -> Result<Gaussian> {
        if self.dim() != other.dim() {
            return Err(Error::contract(format!(
                "cannot fuse gaussians of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let lambda_a = self.precision()?;
        let lambda_b = other.precision()?;
        let cov = spd_inverse(&(&lambda_a + &lambda_b))?;
        let mean = &cov * (lambda_a * &self.mean + lambda_b * &other.mean);
        Gaussian::new(mean, cov)
    }

    /// Push-forward through `x ↦ F x + c + w`, `w ~ N(0, W)`.
    pub fn push_affine(
        &self,
        f: &DMatrix<f64>,
        c: &DVector<f64>,
        w: &DMatrix<f64>,
    ) -> Result<Gaussian> {
        if f.ncols() != self.dim() || f.nrows() != c.len() {
            return Err(Error::contract(format!(
                "affine map {}x{} with offset of length {} applied to dimension {}",
                f.nrows(),
                f.ncols(),
                c.len(),
                self.dim()
            )));
        }
        if w.nrows() != c.len() || w.ncols() != c.len() {
            return Err(Error::contract(format!(
                "noise covariance is {}x{}, expected {n}x{n}",
                w.nrows(),
                w.ncols(),
                n = c.len()
            )));
        }
        let mean = f * &self.mean + c;
        let cov = f * &self.cov * f.transpose() + w;
        Gaussian::new(mean, cov)
    }

    /// `log N(x; m, P)` including the `-½ log det(2πP)` normalizer.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::contract(format!(
                "density of dimension {} evaluated at a point of dimension {}",
                self.dim(),
                x.len()
            )));
        }
        let chol = cholesky_jittered(&self.cov)?;
        let diff = x - &self.mean;
        let z = chol
            .l()
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::Degenerate("triangular solve failed".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let n = self.dim() as f64;
        Ok(-0.5 * (z.norm_squared() + log_det + n * (2.0 * std::f64::consts::PI).ln()))
    }
}

/// Moment-matches the mixture `Σ wᵢ N(mᵢ, Pᵢ)` with a single Gaussian.
pub fn moment_match_mixture(weights: &[f64], components: &[Gaussian]) -> Result<Gaussian> {
    if components.is_empty() {
        return Err(Error::contract("mixture with no components"));
    }
    if weights.len() != components.len() {
        return Err(Error::contract(format!(
            "{} weights for {} components",
            weights.len(),
            components.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::contract("mixture weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "mixture weights sum to {total}, expected 1"
        )));
    }
    let n = components[0].dim();
    if components.iter().any(|c| c.dim() != n) {
        return Err(Error::contract("mixture components differ in dimension"));
    }

    let mut mean = DVector::zeros(n);
    for (w, c) in weights.iter().zip(components) {
        mean += c.mean() * *w;
    }
    let mut cov = DMatrix::zeros(n, n);
    for (w, c) in weights.iter().zip(components) {
        let d = c.mean() - &mean;
        cov += (c.cov() + &d * d.transpose()) * *w;
    }
    Gaussian::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
            assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
        }};
    }

    fn g1(m: f64, v: f64) -> Gaussian {
        Gaussian::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v)).unwrap()
    }

    fn spd(n: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn arb_spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| spd(n, &v))
    }

    fn arb_gaussian(n: usize) -> impl Strategy<Value = Gaussian> {
        (prop::collection::vec(-5.0f64..5.0, n), arb_spd(n))
            .prop_map(|(m, p)| Gaussian::new(DVector::from_vec(m), p).unwrap())
    }

    // Independent dense route via LU, never touching the Cholesky path.
    fn lu_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
        m.clone().lu().try_inverse().unwrap()
    }

    #[test]
    fn fuse_equal_precision_averages() {
        let f = g1(0.0, 1.0).fuse(&g1(2.0, 1.0)).unwrap();
        assert_close!(f.mean()[0], 1.0, 1e-12);
        assert_close!(f.cov()[(0, 0)], 0.5, 1e-12);
    }

    #[test]
    fn fuse_with_diffuse_is_identity_like() {
        let p = spd(3, &[0.3, -0.2, 0.9, 0.1, 0.4]);
        let g = Gaussian::new(DVector::from_vec(vec![1.0, -2.0, 3.0]), p.clone()).unwrap();
        let diffuse = Gaussian::isotropic(DVector::zeros(3), 1e8).unwrap();
        let f = g.fuse(&diffuse).unwrap();
        assert!((f.mean() - g.mean()).amax() < 1e-6);
        assert!((f.cov() - &p).amax() < 1e-6 * p.norm());
    }

    #[test]
    fn fuse_matches_dense_solve() {
        let pa = spd(4, &[0.7, -0.1, 0.3, 1.2, 0.05, -0.8, 0.4]);
        let pb = spd(4, &[-0.4, 0.9, 0.2, 0.6, -1.1]);
        let ma = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let mb = DVector::from_vec(vec![-0.3, 0.0, 4.0, 1.5]);
        let a = Gaussian::new(ma.clone(), pa.clone()).unwrap();
        let b = Gaussian::new(mb.clone(), pb.clone()).unwrap();
        let f = a.fuse(&b).unwrap();

        let (la, lb) = (lu_inverse(&pa), lu_inverse(&pb));
        let info = &la + &lb;
        let cov = lu_inverse(&info);
        let mean = info.lu().solve(&(la * ma + lb * mb)).unwrap();
        assert!((f.cov() - cov).amax() < 1e-10);
        assert!((f.mean() - mean).amax() < 1e-10);
    }

    #[test]
    fn fuse_dimension_mismatch_is_contract_error() {
        let a = Gaussian::isotropic(DVector::zeros(2), 1.0).unwrap();
        let b = Gaussian::isotropic(DVector::zeros(3), 1.0).unwrap();
        assert!(matches!(a.fuse(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn push_identity_returns_input() {
        let p = spd(2, &[0.2, 0.5, -0.3]);
        let g = Gaussian::new(DVector::from_vec(vec![1.0, 2.0]), p.clone()).unwrap();
        let out = g
            .push_affine(&DMatrix::identity(2, 2), &DVector::zeros(2), &DMatrix::zeros(2, 2))
            .unwrap();
        assert_eq!(out.mean(), g.mean());
        assert!((out.cov() - p).amax() < 1e-12);
    }

    #[test]
    fn push_constant_velocity_state() {
        let dt = 0.1;
        let mut a = DMatrix::<f64>::identity(4, 4);
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let g = Gaussian::new(
            DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]),
            DMatrix::zeros(4, 4),
        )
        .unwrap();
        let out = g
            .push_affine(&a, &DVector::zeros(4), &DMatrix::zeros(4, 4))
            .unwrap();
        let expected = [0.1, 0.0, 1.0, 0.0];
        for (x, e) in out.mean().iter().zip(expected) {
            assert_close!(*x, e, 1e-15);
        }
    }

    #[test]
    fn push_covariance_matches_elementwise_products() {
        let p = spd(4, &[0.3, 0.1, -0.7, 0.2, 0.9]);
        let f = DMatrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.2);
        let w = spd(3, &[0.1, 0.2]);
        let g = Gaussian::new(DVector::from_vec(vec![1.0, 0.0, -1.0, 2.0]), p.clone()).unwrap();
        let out = g.push_affine(&f, &DVector::from_vec(vec![0.5, 0.5, 0.5]), &w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = w[(i, j)];
                for a in 0..4 {
                    for b in 0..4 {
                        acc += f[(i, a)] * p[(a, b)] * f[(j, b)];
                    }
                }
                assert_close!(out.cov()[(i, j)], acc, 1e-12);
            }
        }
    }

    #[test]
    fn push_shape_mismatch_is_contract_error() {
        let g = Gaussian::isotropic(DVector::zeros(4), 1.0).unwrap();
        let err = g.push_affine(&DMatrix::identity(2, 3), &DVector::zeros(2), &DMatrix::zeros(2, 2));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn mixture_common_mean_averages_covariances() {
        let mu = DVector::from_vec(vec![1.0, -1.0]);
        let l1 = spd(2, &[0.4, 0.1, 0.2]);
        let l2 = spd(2, &[-0.6, 0.3]);
        let comps = [
            Gaussian::new(mu.clone(), l1.clone()).unwrap(),
            Gaussian::new(mu.clone(), l2.clone()).unwrap(),
        ];
        let m = moment_match_mixture(&[0.5, 0.5], &comps).unwrap();
        assert_eq!(m.mean(), &mu);
        assert!((m.cov() - (l1 + l2) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn mixture_single_component_unchanged() {
        let g = Gaussian::new(DVector::from_vec(vec![3.0]), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let m = moment_match_mixture(&[1.0], std::slice::from_ref(&g)).unwrap();
        assert_eq!(m, g);
    }

    #[test]
    fn mixture_law_of_total_variance() {
        let m = moment_match_mixture(&[0.5, 0.5], &[g1(-1.0, 1.0), g1(1.0, 1.0)]).unwrap();
        assert_close!(m.mean()[0], 0.0, 1e-15);
        assert_close!(m.cov()[(0, 0)], 2.0, 1e-15);
    }

    #[test]
    fn mixture_contract_errors() {
        assert!(matches!(moment_match_mixture(&[], &[]), Err(Error::Contract(_))));
        assert!(matches!(
            moment_match_mixture(&[0.6, 0.6], &[g1(0.0, 1.0), g1(1.0, 1.0)]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_density_standard_normal() {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let g = g1(0.0, 1.0);
        assert_close!(g.log_density(&DVector::from_element(1, 0.0)).unwrap(), -half_log_2pi, 1e-15);
        assert_close!(
            g.log_density(&DVector::from_element(1, 1.0)).unwrap(),
            -0.5 - half_log_2pi,
            1e-15
        );
        assert_close!(-half_log_2pi, -0.9189, 1e-4);
    }

    #[test]
    fn log_density_2d_matches_cofactor_formula() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]);
        let m = DVector::from_vec(vec![0.3, -1.2]);
        let x = DVector::from_vec(vec![1.0, 0.4]);
        let g = Gaussian::new(m.clone(), p.clone()).unwrap();

        let det = p[(0, 0)] * p[(1, 1)] - p[(0, 1)] * p[(1, 0)];
        let inv = DMatrix::from_row_slice(2, 2, &[p[(1, 1)], -p[(0, 1)], -p[(1, 0)], p[(0, 0)]]) / det;
        let d = &x - &m;
        let quad = (d.transpose() * inv * &d)[(0, 0)];
        let expected = -0.5 * quad - 0.5 * ((2.0 * std::f64::consts::PI).powi(2) * det).ln();
        assert_close!(g.log_density(&x).unwrap(), expected, 1e-12);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            Gaussian::new(DVector::zeros(2), bad),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn construction_symmetrizes() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.4, 1.0]);
        let g = Gaussian::new(DVector::zeros(2), p).unwrap();
        assert_eq!(g.cov()[(0, 1)], g.cov()[(1, 0)]);
        assert_close!(g.cov()[(0, 1)], 0.3, 1e-15);
    }

    proptest! {
        #[test]
        fn fuse_is_commutative(a in arb_gaussian(4), b in arb_gaussian(4)) {
            let ab = a.fuse(&b).unwrap();
            let ba = b.fuse(&a).unwrap();
            prop_assert!((ab.mean() - ba.mean()).amax() < 1e-10);
            prop_assert!((ab.cov() - ba.cov()).amax() < 1e-10);
        }

        #[test]
        fn diffuse_fusion_barely_moves_mean(a in arb_gaussian(3)) {
            let diffuse = Gaussian::isotropic(DVector::zeros(3), 1e8).unwrap();
            let f = a.fuse(&diffuse).unwrap();
            let scale = a.mean().amax().max(1.0);
            prop_assert!((f.mean() - a.mean()).amax() < 1e-5 * scale);
        }

        #[test]
        fn push_composes(
            g in arb_gaussian(3),
            f1 in prop::collection::vec(-1.0f64..1.0, 9),
            f2 in prop::collection::vec(-1.0f64..1.0, 9),
            w1 in arb_spd(3),
            w2 in arb_spd(3),
        ) {
            let f1 = DMatrix::from_vec(3, 3, f1);
            let f2 = DMatrix::from_vec(3, 3, f2);
            let c1 = DVector::from_vec(vec![0.1, 0.2, 0.3]);
            let c2 = DVector::from_vec(vec![-1.0, 0.0, 1.0]);
            let twice = g.push_affine(&f1, &c1, &w1).unwrap().push_affine(&f2, &c2, &w2).unwrap();
            let once = g
                .push_affine(&(&f2 * &f1), &(&f2 * &c1 + &c2), &(&f2 * &w1 * f2.transpose() + &w2))
                .unwrap();
            prop_assert!((twice.mean() - once.mean()).amax() < 1e-9);
            prop_assert!((twice.cov() - once.cov()).amax() < 1e-9);
        }

        #[test]
        fn mixture_preserves_mean_and_inflates_trace(
            comps in prop::collection::vec(arb_gaussian(2), 1..5),
            raw in prop::collection::vec(0.01f64..1.0, 5),
        ) {
            let raw = &raw[..comps.len()];
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let m = moment_match_mixture(&weights, &comps).unwrap();
            let mut mean = DVector::zeros(2);
            let mut avg_trace = 0.0;
            for (w, c) in weights.iter().zip(&comps) {
                mean += c.mean() * *w;
                avg_trace += w * c.cov().trace();
            }
            prop_assert!((m.mean() - mean).amax() < 1e-12);
            prop_assert!(m.cov().trace() >= avg_trace - 1e-12);
            prop_assert!(Cholesky::new(m.cov().clone()).is_some());
        }
    }
}
