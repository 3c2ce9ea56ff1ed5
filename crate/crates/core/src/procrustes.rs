//! Closed-form weighted Sim(3) Procrustes alignment (Kabsch–Umeyama).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Sim3Transform, UnitQuaternion};
use crate::par::chunked_reduce;
use crate::scalar::{lit, to_f64, Real};

/// Minimum `σ₂/σ₁` of the cross-covariance for a unique rotation.
pub const RANK_RATIO_MIN: f64 = 1e-9;
/// Minimum weighted source variance for a unique scale.
pub const SOURCE_VARIANCE_MIN: f64 = 1e-12;

/// Paired source/target points with nonnegative weights.
#[derive(Clone, Debug)]
pub struct PairedPoints<T> {
    pub source: Vec<Vector3<T>>,
    pub target: Vec<Vector3<T>>,
    pub weights: Vec<T>,
}

impl<T: Real> PairedPoints<T> {
    pub fn new(source: Vec<Vector3<T>>, target: Vec<Vector3<T>>, weights: Vec<T>) -> Result<Self> {
        if source.len() != target.len() || source.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} source, {} target, {} weights",
                source.len(),
                target.len(),
                weights.len()
            )));
        }
        if source.len() < 3 {
            return Err(Error::DegenerateGeometry(format!("need at least 3 pairs, got {}", source.len())));
        }
        let mut sum = T::zero();
        for w in &weights {
            if !(*w >= T::zero()) || !w.is_finite() {
                return Err(Error::spec("weights", "must be finite and nonnegative"));
            }
            sum += *w;
        }
        if !(sum > T::zero()) {
            return Err(Error::spec("weights", "must have a positive sum"));
        }
        Ok(PairedPoints { source, target, weights })
    }

    /// Pairs with uniform weights `1/N`.
    pub fn uniform(source: Vec<Vector3<T>>, target: Vec<Vector3<T>>) -> Result<Self> {
        let n = source.len().max(1);
        let w = T::one() / lit::<T>(n as f64);
        let weights = vec![w; source.len()];
        Self::new(source, target, weights)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Which similarity parameters the closed form estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleMode {
    #[default]
    Similarity,
    /// Scale fixed at 1.
    Rigid,
}

pub(crate) fn weight_sum<T: Real>(weights: &[T]) -> T {
    chunked_reduce(weights.len(), T::zero(), |a, b| weights[a..b].iter().fold(T::zero(), |s, w| s + *w), |x, y| x + y)
}

pub(crate) fn centroids_with<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    weights: &[T],
) -> (Vector3<T>, Vector3<T>) {
    let zero = (Vector3::zeros(), Vector3::zeros(), T::zero());
    let (sp, sq, sw) = chunked_reduce(
        source.len(),
        zero,
        |a, b| {
            let mut acc = zero;
            for l in a..b {
                let w = weights[l];
                acc.0 += source[l] * w;
                acc.1 += target[l] * w;
                acc.2 += w;
            }
            acc
        },
        |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2),
    );
    (sp / sw, sq / sw)
}

/// Covariance `Σ w (p − p̄)(q − q̄)ᵀ / Σ w` and source variance `Σ w ‖p − p̄‖² / Σ w`.
pub(crate) fn moments_with<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    weights: &[T],
) -> (Vector3<T>, Vector3<T>, Matrix3<T>, T) {
    let (pbar, qbar) = centroids_with(source, target, weights);
    let zero = (Matrix3::zeros(), T::zero(), T::zero());
    let (cov, var, sw) = chunked_reduce(
        source.len(),
        zero,
        |a, b| {
            let mut acc = zero;
            for l in a..b {
                let w = weights[l];
                let pc = source[l] - pbar;
                let qc = target[l] - qbar;
                acc.0 += pc * (qc.transpose() * w);
                acc.1 += pc.norm_squared() * w;
                acc.2 += w;
            }
            acc
        },
        |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2),
    );
    (pbar, qbar, cov / sw, var / sw)
}

/// Weight-normalized means of source and target.
pub fn weighted_centroids<T: Real>(pp: &PairedPoints<T>) -> (Vector3<T>, Vector3<T>) {
    centroids_with(&pp.source, &pp.target, &pp.weights)
}

/// Weighted cross-covariance `Σ w (p − p̄)(q − q̄)ᵀ / Σ w`.
pub fn cross_covariance<T: Real>(pp: &PairedPoints<T>) -> Matrix3<T> {
    moments_with(&pp.source, &pp.target, &pp.weights).2
}

/// Weighted sum of squared residuals `Σ w ‖s R p + t − q‖²`.
pub fn objective<T: Real>(pp: &PairedPoints<T>, theta: &Sim3Transform<T>) -> T {
    objective_with(&pp.source, &pp.target, &pp.weights, theta)
}

pub(crate) fn objective_with<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    weights: &[T],
    theta: &Sim3Transform<T>,
) -> T {
    let r = theta.rotation_matrix() * theta.scale;
    chunked_reduce(
        source.len(),
        T::zero(),
        |a, b| {
            (a..b).fold(T::zero(), |s, l| s + weights[l] * (r * source[l] + theta.translation - target[l]).norm_squared())
        },
        |x, y| x + y,
    )
}

/// Closed-form Sim(3) minimizing the weighted squared residuals.
pub fn solve_closed_form<T: Real>(pp: &PairedPoints<T>) -> Result<Sim3Transform<T>> {
    solve_closed_form_with(pp, ScaleMode::Similarity)
}

pub fn solve_closed_form_with<T: Real>(pp: &PairedPoints<T>, mode: ScaleMode) -> Result<Sim3Transform<T>> {
    solve_weighted(&pp.source, &pp.target, &pp.weights, mode)
}

pub(crate) fn solve_weighted<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    weights: &[T],
    mode: ScaleMode,
) -> Result<Sim3Transform<T>> {
    if !(weight_sum(weights) > T::zero()) {
        return Err(Error::DegenerateGeometry("all correspondence weights are zero".into()));
    }
    let (pbar, qbar, cov, var_p) = moments_with(source, target, weights);
    if !(var_p >= lit(SOURCE_VARIANCE_MIN)) {
        return Err(Error::DegenerateGeometry(format!("source variance {:e} too small", to_f64(var_p))));
    }

    let svd = cov.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::DegenerateGeometry("SVD of cross-covariance failed".into()));
    };
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap_or(std::cmp::Ordering::Equal));
    let (s1, s2) = (sv[order[0]], sv[order[1]]);
    if !(s1 > T::zero()) || !(s2 > s1 * lit(RANK_RATIO_MIN)) {
        return Err(Error::DegenerateGeometry(format!(
            "cross-covariance rank < 2 (singular values {:e}, {:e})",
            to_f64(s1),
            to_f64(s2)
        )));
    }

    // Σ = U Λ Vᵀ pairs source rows with target columns, so the rotation is V D Uᵀ.
    let v = v_t.transpose();
    let mut d = Vector3::repeat(T::one());
    if (v * u.transpose()).determinant() < T::zero() {
        d[order[2]] = -T::one();
    }
    let rot = v * Matrix3::from_diagonal(&d) * u.transpose();
    let scale = match mode {
        ScaleMode::Similarity => sv.component_mul(&d).sum() / var_p,
        ScaleMode::Rigid => T::one(),
    };
    if !(scale > T::zero()) {
        return Err(Error::DegenerateGeometry("non-positive scale".into()));
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&rot);
    let translation = qbar - rotation.rotate(&pbar) * scale;
    Sim3Transform::new(scale, rotation, translation)
}
