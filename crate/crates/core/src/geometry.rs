//! Rigid-body geometry: SO(3)/SE(3) values, their exponential and logarithm
//! maps, and closed-form least-squares alignment of corresponded point sets.
//!
//! Tangent vectors are ordered rotation first, translation second:
//! `δ = (ω, ρ)`. The SE(3) exponential used here is the true group
//! exponential (translation passes through the left Jacobian `V(ω)`).

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

/// Relative tolerance on the second singular value of the centered
/// cross-covariance below which an alignment is rejected as degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-10;

/// Element of SO(3), stored as a unit quaternion.
#[derive(Clone, Copy, PartialEq, Default)]
pub struct Rotation(UnitQuaternion<f64>);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.0.quaternion();
        write!(f, "Rotation(x: {}, y: {}, z: {}, w: {})", q.i, q.j, q.k, q.w)
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds a rotation from quaternion components in `(x, y, z, w)` order.
    /// The input is normalized.
    pub fn from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(q)
    }

    /// Projects an (approximately) orthonormal matrix onto SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_eps(m, 1e-15, 100, nalgebra::Rotation3::identity());
        Self(UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    pub fn about_z(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// Components as `[x, y, z, w]`.
    pub fn xyzw(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        let mut q = self.0 * other.0;
        q.renormalize_fast();
        Self(q)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.inverse_transform_vector(v)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    /// SO(3) exponential of an axis-angle vector.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        Self(UnitQuaternion::from_scaled_axis(*omega))
    }

    /// SO(3) logarithm; the returned angle lies in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        // Hemisphere with w >= 0 keeps the angle in [0, π].
        let q = self.0.quaternion();
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.vector().into_owned())
        } else {
            (q.w, q.vector().into_owned())
        };
        let s = v.norm();
        if s < 1e-12 {
            // second order: 2 v / w
            return v * (2.0 / w);
        }
        let angle = 2.0 * s.atan2(w);
        v * (angle / s)
    }
}

/// Cross-product (hat) matrix of a 3-vector.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of the SO(3) right Jacobian evaluated at `phi`.
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let coeff = if theta2 < 1e-8 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Left Jacobian `V(ω)` of SO(3), which maps the translational tangent
/// component to the SE(3) translation.
fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (a, b) = if theta2 < 1e-4 {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + a * k + b * k * k
}

fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let c = if theta2 < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - 0.5 * k + c * k * k
}

/// A 6-vector in the tangent space of SE(3): `(ω, ρ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector(pub Vector6<f64>);

impl TangentVector {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self(Vector6::new(
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ))
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }
}

/// An SE(3) element mapping points `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform {
            rotation: inv,
            translation: -inv.rotate(&self.translation),
        }
    }

    /// `R p + t`.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// `Rᵀ (p − t)`, i.e. `p` expressed in this transform's local frame.
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_rotate(&(p - self.translation))
    }

    pub fn exp(delta: &TangentVector) -> RigidTransform {
        let omega = delta.rotation();
        RigidTransform {
            rotation: Rotation::exp(&omega),
            translation: so3_left_jacobian(&omega) * delta.translation(),
        }
    }

    /// SE(3) logarithm. Unique while the rotation angle is below π; see
    /// [`RigidTransform::log_is_unique`].
    pub fn log(&self) -> TangentVector {
        let omega = self.rotation.log();
        TangentVector::new(omega, so3_left_jacobian_inv(&omega) * self.translation)
    }

    /// False when the rotation angle is (numerically) π, where the logarithm
    /// has two valid representatives.
    pub fn log_is_unique(&self) -> bool {
        self.rotation.angle() < PI - 1e-9
    }

    /// `self ∘ Exp(δ)`.
    pub fn retract(&self, delta: &TangentVector) -> RigidTransform {
        self.compose(&RigidTransform::exp(delta))
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn apply_to_point(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.apply(p)
}

/// Sum of squared residuals `Σ ‖a_j − T b_j‖²`.
pub fn alignment_cost(points_a: &[Vector3<f64>], points_b: &[Vector3<f64>], t: &RigidTransform) -> f64 {
    points_a
        .iter()
        .zip(points_b)
        .map(|(a, b)| (a - t.apply(b)).norm_squared())
        .sum()
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares rigid transform `T` minimizing `Σ ‖a_j − T b_j‖²`
/// (Kabsch, with the reflection fixed by flipping the weakest singular
/// direction).
pub fn procrustes_align(points_a: &[Vector3<f64>], points_b: &[Vector3<f64>]) -> Result<RigidTransform> {
    if points_a.len() != points_b.len() {
        return Err(Error::InvalidArgument(format!(
            "alignment point counts differ ({} vs {})",
            points_a.len(),
            points_b.len()
        )));
    }
    if points_a.len() < 3 {
        return Err(Error::UnderdeterminedAlignment(points_a.len()));
    }
    let ca = centroid(points_a);
    let cb = centroid(points_b);
    let mut h = Matrix3::zeros();
    for (a, b) in points_a.iter().zip(points_b) {
        h += (b - cb) * (a - ca).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    if sv[0] <= 0.0 || sv[1] < DEGENERACY_RATIO * sv[0] {
        return Err(Error::DegenerateConfiguration);
    }
    let u = svd.u.expect("svd u requested");
    let v_t = svd.v_t.expect("svd v_t requested");
    let v = v_t.transpose();
    // nalgebra does not order singular values; flip the column paired with the smallest one.
    let min_idx = svd.singular_values.imin();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(min_idx, min_idx)] = -1.0;
    }
    let r = v * d * u.transpose();
    let rotation = Rotation::from_matrix(&r);
    let translation = ca - rotation.rotate(&cb);
    Ok(RigidTransform::new(rotation, translation))
}
