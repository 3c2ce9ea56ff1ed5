//! Probabilistic Procrustes mapping.
//!
//! Alternates between soft correspondence weights with a capacity-bounded
//! dustbin and gradient updates of the similarity `θ = (s, R, t)`, starting
//! from the closed-form solution.
//!
//! Each pair `l` is softly assigned either to its target (score
//! `exp(−r²/ε)`) or to the dustbin (score `exp(−τ²/ε)`), so `γ_l` and the
//! dustbin mass sum to one per pair. When the mean dustbin mass exceeds the
//! capacity `η`, the dustbin cost `τ²` is raised by bisection until the
//! capacity holds with equality.

use nalgebra::{Vector3, Vector4};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_point_jacobian, tangent_component, Sim3Transform, UnitQuaternion};
use crate::par::chunked_reduce;
use crate::procrustes::{self, PairedPoints, ScaleMode};
use crate::scalar::{lit, to_f64, Real};

/// Soft correspondences between two clouds.
#[derive(Clone, Debug)]
pub struct CorrespondenceSet<T> {
    pub source_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
    /// Squared residuals `‖s R p + t − q‖²` at the last weight update.
    pub residuals: Vec<T>,
    pub match_weight: Vec<T>,
    pub dustbin_weight: Vec<T>,
    /// Dustbin cost `τ²` in effect at the last weight update.
    pub dustbin_cost: T,
}

impl<T: Real> CorrespondenceSet<T> {
    /// Pairs `l ↔ l` for `l < n`, fully matched.
    pub fn identity(n: usize) -> Self {
        CorrespondenceSet {
            source_idx: (0..n).collect(),
            target_idx: (0..n).collect(),
            residuals: vec![T::zero(); n],
            match_weight: vec![T::one(); n],
            dustbin_weight: vec![T::zero(); n],
            dustbin_cost: T::zero(),
        }
    }

    pub fn len(&self) -> usize {
        self.source_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_idx.is_empty()
    }

    pub fn mean_dustbin(&self) -> T {
        mean(&self.dustbin_weight)
    }
}

fn mean<T: Real>(v: &[T]) -> T {
    if v.is_empty() {
        return T::zero();
    }
    procrustes::weight_sum(v) / lit(v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct PpmConfig<T> {
    /// Entropy temperature in squared target units; `None` uses the median
    /// of the initial squared residuals.
    pub epsilon: Option<T>,
    /// Dustbin capacity: maximum mean dustbin mass.
    pub eta: T,
    /// Dustbin marginal weight; the default dustbin cost is `−ε ln(δ/(1−δ))`.
    pub delta: T,
    /// Fraction of the curvature-normalized gradient step taken per round.
    pub lr_theta: T,
    pub max_iters: usize,
    pub tol_rotation: T,
    /// `None` uses `1e-6 ×` the target diameter.
    pub tol_translation: Option<T>,
    pub tol_scale: T,
    /// Re-solve the γ-weighted closed form each round instead of a gradient step.
    pub reweight_closed_form: bool,
    pub anneal_factor: T,
    pub anneal_every: usize,
    /// Lower bound on ε as a fraction of the initial ε.
    pub anneal_floor: T,
}

impl<T: Real> Default for PpmConfig<T> {
    fn default() -> Self {
        PpmConfig {
            epsilon: None,
            eta: lit(0.2),
            delta: lit(0.2),
            lr_theta: T::one(),
            max_iters: 50,
            tol_rotation: lit(1e-5),
            tol_translation: None,
            tol_scale: lit(1e-6),
            reweight_closed_form: false,
            anneal_factor: lit(0.5),
            anneal_every: 5,
            anneal_floor: lit(1e-3),
        }
    }
}

impl<T: Real> PpmConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if let Some(eps) = self.epsilon {
            if !(eps > T::zero()) {
                return Err(Error::spec("ppm.epsilon", "must be > 0"));
            }
        }
        if !(self.eta >= T::zero() && self.eta < T::one()) {
            return Err(Error::spec("ppm.eta", "must be in [0, 1)"));
        }
        if !(self.delta > T::zero() && self.delta < T::one()) {
            return Err(Error::spec("ppm.delta", "must be in (0, 1)"));
        }
        if !(self.lr_theta > T::zero()) {
            return Err(Error::spec("ppm.lr_theta", "must be > 0"));
        }
        if self.max_iters < 1 {
            return Err(Error::spec("ppm.max_iters", "must be >= 1"));
        }
        if !(self.anneal_factor > T::zero() && self.anneal_factor <= T::one()) {
            return Err(Error::spec("ppm.anneal_factor", "must be in (0, 1]"));
        }
        if !(self.anneal_floor > T::zero() && self.anneal_floor <= T::one()) {
            return Err(Error::spec("ppm.anneal_floor", "must be in (0, 1]"));
        }
        Ok(())
    }
}

fn squared_residuals<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> Vec<T> {
    let r = theta.rotation_matrix() * theta.scale;
    corr.source_idx
        .iter()
        .zip(&corr.target_idx)
        .map(|(&i, &j)| (r * source[i] + theta.translation - target[j]).norm_squared())
        .collect()
}

fn median<T: Real>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * lit(0.5)
    }
}

/// Numerically stable `1 / (1 + exp(x))`.
fn logistic_complement<T: Real>(x: T) -> T {
    if x >= T::zero() {
        let e = (-x).exp();
        e / (T::one() + e)
    } else {
        T::one() / (T::one() + x.exp())
    }
}

fn mean_dustbin_at<T: Real>(log_match: &[T], log_dustbin: T) -> T {
    let n = log_match.len();
    let total = chunked_reduce(
        n,
        T::zero(),
        |a, b| (a..b).fold(T::zero(), |s, l| s + logistic_complement(log_match[l] - log_dustbin)),
        |x, y| x + y,
    );
    total / lit(n.max(1) as f64)
}

/// Recomputes residuals and soft weights for the current `θ`.
///
/// Uses `cfg.epsilon` as the temperature, or the median squared residual when
/// unset. The returned set satisfies `γ + dustbin = 1` per pair and
/// `mean(dustbin) ≤ η`.
pub fn update_weights<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    cfg: &PpmConfig<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> CorrespondenceSet<T> {
    let residuals = squared_residuals(corr, theta, source, target);
    let epsilon = match cfg.epsilon {
        Some(e) => e,
        None => median(&residuals).max(T::min_value().unwrap_or(T::default_epsilon())),
    };
    let log_match: Vec<T> = residuals.iter().map(|r| -*r / epsilon).collect();
    // exp(−τ²/ε) = δ/(1−δ) for the default dustbin cost.
    let default_log_dustbin = (cfg.delta / (T::one() - cfg.delta)).ln();

    let mut log_dustbin = default_log_dustbin;
    if !log_match.is_empty() && mean_dustbin_at(&log_match, log_dustbin) > cfg.eta {
        let floor = log_match.iter().fold(T::zero(), |m, v| m.min(*v));
        let mut lo = floor.min(default_log_dustbin) - lit(40.0);
        let mut hi = default_log_dustbin;
        // Invariant: mean_dustbin_at(lo) <= η < mean_dustbin_at(hi).
        for _ in 0..200 {
            let mid = (lo + hi) * lit(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            if mean_dustbin_at(&log_match, mid) > cfg.eta {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        log_dustbin = lo;
    }

    let dustbin_weight: Vec<T> = log_match.iter().map(|lm| logistic_complement(*lm - log_dustbin)).collect();
    let match_weight = dustbin_weight.iter().map(|d| T::one() - *d).collect();
    CorrespondenceSet {
        source_idx: corr.source_idx.clone(),
        target_idx: corr.target_idx.clone(),
        residuals,
        match_weight,
        dustbin_weight,
        dustbin_cost: -epsilon * log_dustbin,
    }
}

/// Weighted objective `Σ γ_l ‖s R p_l + t − q_l‖²`.
pub fn objective<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> T {
    let r = theta.rotation_matrix() * theta.scale;
    chunked_reduce(
        corr.len(),
        T::zero(),
        |a, b| {
            (a..b).fold(T::zero(), |s, l| {
                let d = r * source[corr.source_idx[l]] + theta.translation - target[corr.target_idx[l]];
                s + corr.match_weight[l] * d.norm_squared()
            })
        },
        |x, y| x + y,
    )
}

#[derive(Clone, Copy, Debug)]
struct Gradients<T: Real> {
    translation: Vector3<T>,
    scale: T,
    rotation: Vector4<T>,
}

impl<T: Real> Gradients<T> {
    fn zero() -> Self {
        Gradients {
            translation: Vector3::zeros(),
            scale: T::zero(),
            rotation: Vector4::zeros(),
        }
    }

    fn add(self, o: Self) -> Self {
        Gradients {
            translation: self.translation + o.translation,
            scale: self.scale + o.scale,
            rotation: self.rotation + o.rotation,
        }
    }
}

/// All three gradients with both clouds shifted by the given offsets.
fn gradients_about<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    source_offset: &Vector3<T>,
    target_offset: &Vector3<T>,
) -> Gradients<T> {
    let two = lit::<T>(2.0);
    let s = theta.scale;
    let rot = theta.rotation_matrix();
    let g = chunked_reduce(
        corr.len(),
        Gradients::zero(),
        |a, b| {
            let mut acc = Gradients::zero();
            for l in a..b {
                let gamma = corr.match_weight[l];
                if gamma == T::zero() {
                    continue;
                }
                let p = source[corr.source_idx[l]] - source_offset;
                let q = target[corr.target_idx[l]] - target_offset;
                let rp = rot * p;
                let r = rp * s + theta.translation - q;
                acc.translation += r * gamma;
                acc.scale += r.dot(&rp) * gamma;
                acc.rotation += quat_point_jacobian(&theta.rotation, &p).transpose() * r * (gamma * s);
            }
            acc
        },
        Gradients::add,
    );
    Gradients {
        translation: g.translation * two,
        scale: g.scale * two,
        rotation: g.rotation * two,
    }
}

/// `∇_t = 2 Σ γ (s R p + t − q)`.
pub fn grad_translation<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> Vector3<T> {
    gradients_about(corr, theta, source, target, &Vector3::zeros(), &Vector3::zeros()).translation
}

/// `∇_s = 2 Σ γ (s R p + t − q)ᵀ (R p)`.
pub fn grad_scale<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> T {
    gradients_about(corr, theta, source, target, &Vector3::zeros(), &Vector3::zeros()).scale
}

/// `∇_q = 2 Σ γ s (s R p + t − q)ᵀ ∂(R(q) p)/∂q`, ordered `(w, x, y, z)`.
pub fn grad_rotation<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> Vector4<T> {
    gradients_about(corr, theta, source, target, &Vector3::zeros(), &Vector3::zeros()).rotation
}

/// One gradient round on `θ` under fixed weights.
///
/// The gradients are evaluated with both clouds centered on their γ-weighted
/// centroids, which decouples translation from scale and rotation. Each block
/// is scaled by its Gauss–Newton curvature (`2Σγ` for `t`, `2s²Σγ‖p‖²` for
/// `ln s`, `8s²Σγ‖p‖²` for the quaternion), and the step is halved until the
/// objective does not increase.
fn gradient_step<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    lr: T,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> Sim3Transform<T> {
    let weights: Vec<T> = corr.match_weight.clone();
    let wsum = procrustes::weight_sum(&weights);
    if !(wsum > T::zero()) {
        return *theta;
    }
    let (pbar, qbar) = weighted_centroids_indexed(corr, source, target);
    let spread = chunked_reduce(
        corr.len(),
        T::zero(),
        |a, b| (a..b).fold(T::zero(), |s, l| s + corr.match_weight[l] * (source[corr.source_idx[l]] - pbar).norm_squared()),
        |x, y| x + y,
    );
    if !(spread > T::zero()) {
        return *theta;
    }

    let s = theta.scale;
    let centered = Sim3Transform {
        scale: s,
        rotation: theta.rotation,
        translation: theta.rotation.rotate(&pbar) * s + theta.translation - qbar,
    };
    let g = gradients_about(corr, &centered, source, target, &pbar, &qbar);
    let two = lit::<T>(2.0);
    let h_t = two * wsum;
    let h_s = two * s * s * spread;
    let h_q = lit::<T>(8.0) * s * s * spread;
    let g_q = tangent_component(&theta.rotation, &g.rotation);

    let before = objective(corr, theta, source, target);
    let mut step = lr;
    for _ in 0..40 {
        let t_c = centered.translation - g.translation * (step / h_t);
        let scale = s * (-(step * s * g.scale / h_s)).exp();
        let rotation = UnitQuaternion::from_vector(&(theta.rotation.as_vector() - g_q * (step / h_q)))
            .unwrap_or(theta.rotation);
        let candidate = Sim3Transform {
            scale,
            rotation,
            translation: t_c + qbar - rotation.rotate(&pbar) * scale,
        };
        if objective(corr, &candidate, source, target) <= before {
            return candidate;
        }
        step *= lit(0.5);
    }
    *theta
}

fn weighted_centroids_indexed<T: Real>(
    corr: &CorrespondenceSet<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> (Vector3<T>, Vector3<T>) {
    let zero = (Vector3::zeros(), Vector3::zeros(), T::zero());
    let (sp, sq, sw) = chunked_reduce(
        corr.len(),
        zero,
        |a, b| {
            let mut acc = zero;
            for l in a..b {
                let w = corr.match_weight[l];
                acc.0 += source[corr.source_idx[l]] * w;
                acc.1 += target[corr.target_idx[l]] * w;
                acc.2 += w;
            }
            acc
        },
        |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2),
    );
    (sp / sw, sq / sw)
}

fn reweighted_closed_form<T: Real>(
    corr: &CorrespondenceSet<T>,
    theta: &Sim3Transform<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> Sim3Transform<T> {
    let half = lit::<T>(0.5);
    let src: Vec<_> = corr.source_idx.iter().map(|&i| source[i]).collect();
    let dst: Vec<_> = corr.target_idx.iter().map(|&j| target[j]).collect();
    let w: Vec<T> = corr.match_weight.iter().map(|&g| if g >= half { g } else { T::zero() }).collect();
    procrustes::solve_weighted(&src, &dst, &w, ScaleMode::Similarity).unwrap_or(*theta)
}

/// Bounding-box diagonal of a point set.
pub fn diameter<T: Real>(points: &[Vector3<T>]) -> T {
    let Some(first) = points.first() else {
        return T::zero();
    };
    let (lo, hi) = points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    (hi - lo).norm()
}

#[derive(Clone, Debug)]
pub struct PpmOutcome<T> {
    pub theta: Sim3Transform<T>,
    pub correspondences: CorrespondenceSet<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each θ update, under that round's weights.
    pub objective_trace: Vec<T>,
    /// Mean dustbin mass after each weight update.
    pub dustbin_trace: Vec<T>,
}

/// Refines `theta0` on the pairs of `pp` by alternating weight and θ updates.
pub fn refine<T: Real>(pp: &PairedPoints<T>, theta0: &Sim3Transform<T>, cfg: &PpmConfig<T>) -> Result<PpmOutcome<T>> {
    cfg.validate()?;
    let source = &pp.source;
    let target = &pp.target;
    let n = pp.len();
    let diam = diameter(target);
    let tol_t = cfg.tol_translation.unwrap_or(diam * lit(1e-6));

    let mut corr = CorrespondenceSet::identity(n);
    let eps0 = match cfg.epsilon {
        Some(e) => e,
        None => {
            let m = median(&squared_residuals(&corr, theta0, source, target));
            let floor = (diam * diam * lit(1e-12)).max(T::min_value().unwrap_or(T::default_epsilon()));
            m.max(floor)
        }
    };

    let mut theta = *theta0;
    let mut round_cfg = cfg.clone();
    let mut objective_trace = Vec::new();
    let mut dustbin_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        let steps = (iter / cfg.anneal_every.max(1)) as i32;
        let eps = (eps0 * cfg.anneal_factor.powi(steps)).max(eps0 * cfg.anneal_floor);
        round_cfg.epsilon = Some(eps);

        corr = update_weights(&corr, &theta, &round_cfg, source, target);
        dustbin_trace.push(corr.mean_dustbin());

        let next = if cfg.reweight_closed_form {
            reweighted_closed_form(&corr, &theta, source, target)
        } else {
            gradient_step(&corr, &theta, cfg.lr_theta, source, target)
        };
        objective_trace.push(objective(&corr, &next, source, target));

        let d_rot = theta.rotation.angle_to(&next.rotation);
        let d_t = (next.translation - theta.translation).norm();
        let d_s = ((next.scale - theta.scale) / theta.scale).abs();
        theta = next;
        if d_rot < cfg.tol_rotation && d_t < tol_t && d_s < cfg.tol_scale {
            converged = true;
            break;
        }
    }
    corr = update_weights(&corr, &theta, &round_cfg, source, target);
    dustbin_trace.push(corr.mean_dustbin());
    log::debug!(
        "ppm: {} rounds, converged={}, s={:.6}, mean dustbin={:.4}",
        iterations,
        converged,
        to_f64(theta.scale),
        to_f64(corr.mean_dustbin())
    );
    Ok(PpmOutcome {
        theta,
        correspondences: corr,
        iterations,
        converged,
        objective_trace,
        dustbin_trace,
    })
}

/// Closed-form initialization followed by [`refine`].
pub fn align<T: Real>(pp: &PairedPoints<T>, cfg: &PpmConfig<T>) -> Result<PpmOutcome<T>> {
    let theta0 = procrustes::solve_closed_form(pp)?;
    refine(pp, &theta0, cfg)
}
