//! Occupancy GP with a squared-exponential kernel, reverted into Euclidean
//! distance.
//!
//! A [`LocalGpModel`] regresses the constant occupancy `1` on a set of surface
//! points. Because the SE kernel is a monotone function of distance, its
//! inverse maps the inferred occupancy back to metric distance:
//! `d = sqrt(-2 l² ln(o / σ²))`. For a single noiseless training point this
//! is exact; for dense surfaces it is an approximation whose quality improves
//! as the lengthscale shrinks relative to surface curvature.
//!
//! Gradients come from differentiating the kernel vector analytically. Since
//! occupancy decays away from the surface, the returned gradient is
//! `normalize(-∇o)`, the unit vector pointing away from the nearest surface.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Point3, Vector3};

/// Upper bound on training points per local model; larger sets must be partitioned.
pub const MAX_TRAINING_POINTS: usize = 1024;
/// Diagonal jitter used for the single factorization retry.
pub const FACTORIZATION_JITTER: f64 = 1e-6;
/// Below this norm an occupancy gradient is reported as undefined.
pub const GRADIENT_EPSILON: f64 = 1e-12;
/// Accepted `‖(K + σ_o² I)α − 1‖∞` after the solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("a local GP needs at least one training point")]
    Empty,
    #[error("{count} training points exceed the per-model limit of {max}; partition the cloud first")]
    TooManyPoints { count: usize, max: usize },
    #[error("non-finite training point at index {0}")]
    NonFinitePoint(usize),
    #[error(
        "covariance of {points} points is not positive definite (near-duplicate points?); \
         use a positive noise variance as jitter or deduplicate the cloud"
    )]
    Factorization { points: usize },
    #[error("solve residual {residual:e} exceeds {RESIDUAL_TOLERANCE:e}; the training set is ill-conditioned")]
    Residual { residual: f64 },
}

/// Squared-exponential kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    /// Lengthscale `l` in meters.
    pub lengthscale: f64,
    /// Signal variance `σ²`.
    pub signal_variance: f64,
    /// Observation noise variance `σ_o²`. Kept tiny: the reverted distance is
    /// `l·sqrt(2δ)` for an occupancy deficit `δ`, so the `σ_o² α` shortfall of a
    /// regularized fit shows up as centimeters of error on dense surfaces.
    pub noise_variance: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { lengthscale: 0.2, signal_variance: 1.0, noise_variance: 1e-8 }
    }
}

impl KernelParams {
    pub fn new(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self, GpError> {
        let p = Self { lengthscale, signal_variance, noise_variance };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.lengthscale.is_finite() && self.lengthscale > 0.0) {
            return Err(GpError::InvalidParams(format!("lengthscale must be > 0, got {}", self.lengthscale)));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(GpError::InvalidParams(format!("signal variance must be > 0, got {}", self.signal_variance)));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(GpError::InvalidParams(format!("noise variance must be >= 0, got {}", self.noise_variance)));
        }
        Ok(())
    }

    /// Distance reported when occupancy underflows: three lengthscales.
    pub fn max_distance(&self) -> f64 {
        3.0 * self.lengthscale
    }

    #[inline]
    fn inv_two_l2(&self) -> f64 {
        0.5 / (self.lengthscale * self.lengthscale)
    }
}

/// `σ² exp(-‖a − b‖² / 2l²)`
#[inline]
pub fn kernel_se(a: &Point3, b: &Point3, params: &KernelParams) -> f64 {
    params.signal_variance * (-(a - b).norm_squared() * params.inv_two_l2()).exp()
}

/// Result of a distance-field query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    /// Estimated distance to the nearest surface, meters.
    pub distance: f64,
    /// Unit vector pointing away from the nearest surface; zero when undefined.
    pub gradient: Vector3,
    pub gradient_defined: bool,
    /// Latent occupancy the distance was reverted from.
    pub occupancy: f64,
    pub variance: Option<f64>,
}

impl FieldSample {
    /// The "far from all training data" sentinel.
    pub fn far(params: &KernelParams) -> Self {
        Self {
            distance: params.max_distance(),
            gradient: Vector3::zeros(),
            gradient_defined: false,
            occupancy: 0.0,
            variance: None,
        }
    }

    pub fn is_far(&self, params: &KernelParams) -> bool {
        self.distance >= params.max_distance()
    }

    /// Builds a sample from an occupancy value and its (unnormalized) gradient.
    pub fn from_occupancy(occupancy: f64, occupancy_gradient: &Vector3, params: &KernelParams) -> Self {
        let distance = revert_distance(occupancy, params);
        let (gradient, gradient_defined) = outward_direction(occupancy, occupancy_gradient);
        Self { distance, gradient, gradient_defined, occupancy, variance: None }
    }
}

/// `normalize(-∇o)`, or `(0, false)` when occupancy is non-positive or the
/// gradient vanishes.
pub(crate) fn outward_direction(occupancy: f64, occupancy_gradient: &Vector3) -> (Vector3, bool) {
    if !(occupancy > 0.0) {
        return (Vector3::zeros(), false);
    }
    let n = occupancy_gradient.norm();
    if !(n >= GRADIENT_EPSILON) || !n.is_finite() {
        return (Vector3::zeros(), false);
    }
    (-occupancy_gradient / n, true)
}

/// Inverse of the SE kernel: maps occupancy to distance.
///
/// Occupancy at or above `σ²` reverts to zero; non-positive occupancy yields
/// the [`KernelParams::max_distance`] sentinel.
#[inline]
pub fn revert_distance(occupancy: f64, params: &KernelParams) -> f64 {
    if !(occupancy > 0.0) {
        return params.max_distance();
    }
    let ratio = (occupancy / params.signal_variance).min(1.0);
    let l = params.lengthscale;
    (-2.0 * l * l * ratio.ln()).max(0.0).sqrt()
}

/// A trained GP over one cluster of surface points.
#[derive(Debug, Clone)]
pub struct LocalGpModel {
    points: Vec<Point3>,
    alpha: Vec<f64>,
    factor: Cholesky<f64, Dyn>,
    params: KernelParams,
    bounds: Aabb,
    jitter: f64,
}

/// Trains a local model: solves `(K + σ_o² I) α = 1` by Cholesky.
///
/// When the noise variance is positive and the factorization fails, it is
/// retried once with [`FACTORIZATION_JITTER`] on the diagonal. A noiseless
/// model is never silently regularized.
pub fn build_local_gp(points: &[Point3], params: &KernelParams) -> Result<LocalGpModel, GpError> {
    params.validate()?;
    let n = points.len();
    if n == 0 {
        return Err(GpError::Empty);
    }
    if n > MAX_TRAINING_POINTS {
        return Err(GpError::TooManyPoints { count: n, max: MAX_TRAINING_POINTS });
    }
    if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(GpError::NonFinitePoint(i));
    }
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance + params.noise_variance;
        for j in 0..i {
            let v = kernel_se(&points[i], &points[j], params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let (factor, jitter) = match Cholesky::new(k.clone()) {
        Some(f) => (f, 0.0),
        None if params.noise_variance > 0.0 => {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += FACTORIZATION_JITTER;
            }
            let f = Cholesky::new(kj).ok_or(GpError::Factorization { points: n })?;
            (f, FACTORIZATION_JITTER)
        }
        None => return Err(GpError::Factorization { points: n }),
    };
    let ones = DVector::<f64>::from_element(n, 1.0);
    let alpha = factor.solve(&ones);
    if !alpha.iter().all(|a| a.is_finite()) {
        return Err(GpError::Factorization { points: n });
    }
    let residual = (&k * &alpha - &ones).amax();
    if !(residual < RESIDUAL_TOLERANCE.max(jitter * alpha.amax() * 2.0)) {
        return Err(GpError::Residual { residual });
    }
    Ok(LocalGpModel {
        points: points.to_vec(),
        alpha: alpha.iter().copied().collect(),
        factor,
        params: *params,
        bounds: Aabb::from_points(points),
        jitter,
    })
}

impl LocalGpModel {
    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Bounding box of the training points.
    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Diagonal jitter that had to be added during training (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `‖(K + σ_o² I) α − 1‖∞` against the requested (unjittered) system.
    pub fn residual(&self) -> f64 {
        let n = self.points.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let mut row = (self.params.signal_variance + self.params.noise_variance) * self.alpha[i];
            for j in 0..n {
                if i != j {
                    row += kernel_se(&self.points[i], &self.points[j], &self.params) * self.alpha[j];
                }
            }
            worst = worst.max((row - 1.0).abs());
        }
        worst
    }

    /// Occupancy `k(x, X)·α` and its gradient `∂k(x, X)/∂x · α`.
    #[inline]
    pub fn infer_occupancy(&self, x: &Point3) -> (f64, Vector3) {
        let s = self.params.inv_two_l2();
        let inv_l2 = 2.0 * s;
        let mut occ = 0.0;
        let mut grad = Vector3::zeros();
        for (p, a) in self.points.iter().zip(&self.alpha) {
            let d = x - p;
            let w = (-d.norm_squared() * s).exp() * a;
            occ += w;
            grad -= d * w;
        }
        let sv = self.params.signal_variance;
        (occ * sv, grad * (sv * inv_l2))
    }

    pub fn query(&self, x: &Point3) -> FieldSample {
        let (occ, grad) = self.infer_occupancy(x);
        FieldSample::from_occupancy(occ, &grad, &self.params)
    }

    /// Posterior variance `k(x,x) − k(x,X)(K + σ_o² I)⁻¹k(X,x)`.
    pub fn query_variance(&self, x: &Point3) -> f64 {
        let kx = DVector::from_iterator(self.points.len(), self.points.iter().map(|p| kernel_se(x, p, &self.params)));
        let solved = self.factor.solve(&kx);
        self.params.signal_variance - kx.dot(&solved)
    }

    /// Query including the posterior variance.
    pub fn query_with_variance(&self, x: &Point3) -> FieldSample {
        FieldSample { variance: Some(self.query_variance(x)), ..self.query(x) }
    }
}

/// Convenience free functions mirroring the model methods.
pub fn infer_occupancy(model: &LocalGpModel, x: &Point3) -> (f64, Vector3) {
    model.infer_occupancy(x)
}

pub fn query(model: &LocalGpModel, x: &Point3) -> FieldSample {
    model.query(x)
}

pub fn query_variance(model: &LocalGpModel, x: &Point3) -> f64 {
    model.query_variance(x)
}
