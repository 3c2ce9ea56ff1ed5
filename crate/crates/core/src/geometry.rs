//! Quaternion, SE(3) and Sim(3) algebra.
//!
//! Poses are camera-from-world throughout the crate: a pose `T = (R, t)` maps a
//! world point `X` to camera coordinates `R X + t`. The camera center is
//! `-Rᵀ t` and the world-from-camera orientation is `Rᵀ`.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

/// Norm below which a quaternion is treated as collapsed.
pub const MIN_QUATERNION_NORM: f64 = 1e-8;

/// Unit quaternion `q = (w, x, y, z)` with the sign fixed so that `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> UnitQuaternion<T> {
    pub fn identity() -> Self {
        UnitQuaternion {
            w: T::one(),
            x: T::zero(),
            y: T::zero(),
            z: T::zero(),
        }
    }

    /// Normalizes `(w, x, y, z)`; fails when the norm is below [`MIN_QUATERNION_NORM`].
    pub fn try_new(w: T, x: T, y: T, z: T) -> Result<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !(norm >= lit(MIN_QUATERNION_NORM)) {
            return Err(Error::DegenerateStep { norm: to_f64(norm) });
        }
        let s = if w < T::zero() { -norm } else { norm };
        Ok(UnitQuaternion {
            w: w / s,
            x: x / s,
            y: y / s,
            z: z / s,
        })
    }

    /// Like [`try_new`](Self::try_new) but panics on a collapsed input.
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self::try_new(w, x, y, z).expect("non-degenerate quaternion")
    }

    pub fn from_vector(v: &Vector4<T>) -> Result<Self> {
        Self::try_new(v[0], v[1], v[2], v[3])
    }

    /// Components as `(w, x, y, z)`.
    pub fn as_vector(&self) -> Vector4<T> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn vector_part(&self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        let n = axis.norm();
        if n == T::zero() {
            return Self::identity();
        }
        let half = angle * lit(0.5);
        let v = axis * (half.sin() / n);
        Self::new(half.cos(), v.x, v.y, v.z)
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: &Matrix3<T>) -> Self {
        let one = T::one();
        let quarter = lit::<T>(0.25);
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
            let s = (one + trace).sqrt() * lit(2.0);
            w = quarter * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (one + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * lit(2.0);
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = quarter * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (one + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * lit(2.0);
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = quarter * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (one + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * lit(2.0);
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = quarter * s;
        }
        Self::new(w, x, y, z)
    }

    pub fn norm(&self) -> T {
        self.as_vector().norm()
    }

    pub fn conjugate(&self) -> Self {
        UnitQuaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// Hamilton product `self ⊗ rhs`, renormalized.
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        rotation_matrix(self)
    }

    /// `R(q) p` via `(w² − ‖v‖²) p + 2 v (vᵀp) + 2 w (v × p)`.
    pub fn rotate(&self, p: &Vector3<T>) -> Vector3<T> {
        let v = self.vector_part();
        let two = lit::<T>(2.0);
        p * (self.w * self.w - v.norm_squared()) + v * (two * v.dot(p)) + v.cross(p) * (two * self.w)
    }

    /// Rotation angle in radians of `self⁻¹ ⊗ other`, in `[0, π]`.
    pub fn angle_to(&self, other: &Self) -> T {
        let d = self.conjugate().mul(other);
        lit::<T>(2.0) * d.vector_part().norm().atan2(d.w.abs())
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> T {
        lit::<T>(2.0) * self.vector_part().norm().atan2(self.w.abs())
    }

    pub fn cast<U: Real>(&self) -> UnitQuaternion<U> {
        UnitQuaternion {
            w: lit(to_f64(self.w)),
            x: lit(to_f64(self.x)),
            y: lit(to_f64(self.y)),
            z: lit(to_f64(self.z)),
        }
    }
}

/// Rotation matrix `(w² − ‖v‖²) I + 2 v vᵀ + 2 w [v]×`.
///
/// For a unit quaternion this is the usual orthogonal matrix; for a
/// non-unit input it is the polynomial whose derivatives
/// [`quat_point_jacobian`] and [`rotation_matrix_derivatives`] return.
pub fn rotation_matrix<T: Real>(q: &UnitQuaternion<T>) -> Matrix3<T> {
    rotation_matrix_raw(&q.as_vector())
}

pub(crate) fn rotation_matrix_raw<T: Real>(q: &Vector4<T>) -> Matrix3<T> {
    let (w, v) = (q[0], Vector3::new(q[1], q[2], q[3]));
    let two = lit::<T>(2.0);
    Matrix3::identity() * (w * w - v.norm_squared()) + v * v.transpose() * two + skew(&v) * (two * w)
}

/// Skew-symmetric matrix with `skew(p) u = p × u`.
pub fn skew<T: Real>(p: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -p.z, p.y, p.z, z, -p.x, -p.y, p.x, z)
}

/// Jacobian `∂(R(q) p)/∂q` with columns ordered `(w, x, y, z)`.
pub fn quat_point_jacobian<T: Real>(q: &UnitQuaternion<T>, p: &Vector3<T>) -> Matrix3x4<T> {
    quat_point_jacobian_raw(&q.as_vector(), p)
}

pub(crate) fn quat_point_jacobian_raw<T: Real>(q: &Vector4<T>, p: &Vector3<T>) -> Matrix3x4<T> {
    let w = q[0];
    let v = Vector3::new(q[1], q[2], q[3]);
    let two = lit::<T>(2.0);
    let dw = p * (two * w) + v.cross(p) * two;
    // ∂(2w v×p)/∂v = −2w[p]×, since v×p = −p×v.
    let dv = -(p * v.transpose()) * two + Matrix3::identity() * (two * v.dot(p)) + v * p.transpose() * two
        - skew(p) * (two * w);
    let mut jac = Matrix3x4::zeros();
    jac.set_column(0, &dw);
    jac.fixed_view_mut::<3, 3>(0, 1).copy_from(&dv);
    jac
}

/// `∂R/∂q_k` for `k = w, x, y, z` of the polynomial rotation matrix.
pub fn rotation_matrix_derivatives<T: Real>(q: &UnitQuaternion<T>) -> [Matrix3<T>; 4] {
    let w = q.w;
    let v = q.vector_part();
    let two = lit::<T>(2.0);
    let dw = Matrix3::identity() * (two * w) + skew(&v) * two;
    let axis = |k: usize| {
        let mut e = Vector3::zeros();
        e[k] = T::one();
        Matrix3::identity() * (-two * v[k]) + (e * v.transpose() + v * e.transpose()) * two + skew(&e) * (two * w)
    };
    [dw, axis(0), axis(1), axis(2)]
}

/// Contracts a matrix cotangent `G = ∂L/∂R` into `∂L/∂q`.
pub fn rotation_cotangent_to_quat<T: Real>(q: &UnitQuaternion<T>, grad_r: &Matrix3<T>) -> Vector4<T> {
    let d = rotation_matrix_derivatives(q);
    Vector4::new(
        grad_r.component_mul(&d[0]).sum(),
        grad_r.component_mul(&d[1]).sum(),
        grad_r.component_mul(&d[2]).sum(),
        grad_r.component_mul(&d[3]).sum(),
    )
}

/// Removes the component of `grad` along `q`, leaving the part tangent to the unit sphere.
pub fn tangent_component<T: Real>(q: &UnitQuaternion<T>, grad: &Vector4<T>) -> Vector4<T> {
    let qv = q.as_vector();
    grad - qv * qv.dot(grad)
}

/// Projected gradient step `(q − lr·g)/‖q − lr·g‖`.
pub fn project_step<T: Real>(q: &UnitQuaternion<T>, grad: &Vector4<T>, lr: T) -> Result<UnitQuaternion<T>> {
    UnitQuaternion::from_vector(&(q.as_vector() - grad * lr))
}

/// Rigid camera-from-world pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Se3Pose<T> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Se3Pose<T> {
    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Se3Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Se3Pose::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Pose of a camera at `center` whose world-from-camera orientation is `orientation`.
    pub fn from_center(orientation: &UnitQuaternion<T>, center: &Vector3<T>) -> Self {
        let rotation = orientation.inverse();
        let translation = -rotation.rotate(center);
        Se3Pose { rotation, translation }
    }

    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Se3Pose {
            rotation: self.rotation.mul(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Se3Pose {
            rotation,
            translation: -rotation.rotate(&self.translation),
        }
    }

    /// Camera center in world coordinates, `−Rᵀ t`.
    pub fn center(&self) -> Vector3<T> {
        -self.rotation.inverse().rotate(&self.translation)
    }

    /// World-from-camera orientation.
    pub fn orientation(&self) -> UnitQuaternion<T> {
        self.rotation.inverse()
    }
}

/// Similarity transform `p ↦ s R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Sim3Transform<T> {
    pub scale: T,
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Sim3Transform<T> {
    pub fn new(scale: T, rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Result<Self> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::spec("scale", format!("must be positive and finite, got {}", to_f64(scale))));
        }
        Ok(Sim3Transform {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Sim3Transform {
            scale: T::one(),
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        apply_sim3(self, p)
    }

    pub fn compose(&self, other: &Self) -> Self {
        compose_sim3(self, other)
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        let scale = T::one() / self.scale;
        Sim3Transform {
            scale,
            rotation,
            translation: -rotation.rotate(&self.translation) * scale,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.rotation.rotation_matrix()
    }

    pub fn cast<U: Real>(&self) -> Sim3Transform<U> {
        Sim3Transform {
            scale: lit(to_f64(self.scale)),
            rotation: self.rotation.cast(),
            translation: self.translation.map(|v| lit(to_f64(v))),
        }
    }
}

pub fn apply_sim3<T: Real>(theta: &Sim3Transform<T>, p: &Vector3<T>) -> Vector3<T> {
    theta.rotation.rotate(p) * theta.scale + theta.translation
}

/// `a ∘ b`: apply `b` first.
pub fn compose_sim3<T: Real>(a: &Sim3Transform<T>, b: &Sim3Transform<T>) -> Sim3Transform<T> {
    Sim3Transform {
        scale: a.scale * b.scale,
        rotation: a.rotation.mul(&b.rotation),
        translation: a.rotation.rotate(&b.translation) * a.scale + a.translation,
    }
}

/// Re-expresses a camera pose after the world is mapped by `theta`.
///
/// The camera center moves to `theta(c)` and the world-from-camera
/// orientation is left-multiplied by `R_θ`. Camera-frame coordinates of a
/// transformed point equal `s` times the original ones, so projections are
/// unchanged.
pub fn transform_pose<T: Real>(theta: &Sim3Transform<T>, pose: &Se3Pose<T>) -> Se3Pose<T> {
    let center = apply_sim3(theta, &pose.center());
    let orientation = theta.rotation.mul(&pose.orientation());
    Se3Pose::from_center(&orientation, &center)
}
