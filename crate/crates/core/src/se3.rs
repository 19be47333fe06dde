//! Rigid motions in 3D: the SE(3) exponential and logarithm, composition,
//! application to point sets, error metrics and random sampling.
//!
//! Twists are ordered `(v1, v2, v3, t1, t2, t3)`: three rotation parameters
//! (axis-angle) followed by three translation parameters. The exponential is
//! the coupled se(3) map, i.e. the translation block of a twist is multiplied
//! by the left Jacobian `V` of SO(3):
//!
//! ```text
//! exp(v, t) = ( R(v), V(v) t )
//! R(v) = I + A [v]x + B [v]x^2        A = sin(th)/th, B = (1 - cos(th))/th^2
//! V(v) = I + B [v]x + C [v]x^2        C = (th - sin(th))/th^3
//! ```

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use rand::Rng;
use thiserror::Error;

use crate::cloud::{Point, PointCloud};

/// Below this rotation magnitude the Rodrigues and `V` coefficients are
/// evaluated by their second-order Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// The logarithm rejects rotation angles within this distance of pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Maximum Frobenius norm of `R^T R - I` accepted for a rotation matrix.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("rotation angle {angle} rad is within 1e-6 of pi, the logarithm is ambiguous")]
    AngleNearPi { angle: f64 },
    #[error("matrix is not a proper rotation (|R^T R - I| = {orthonormality:e}, det = {det})")]
    NotARotation { orthonormality: f64, det: f64 },
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
}

/// Six motion parameters: rotation `(v1, v2, v3)` in radians, then translation `(t1, t2, t3)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(Vector3::new(a[0], a[1], a[2]), Vector3::new(a[3], a[4], a[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (r, t) = (&self.rotation, &self.translation);
        [r.x, r.y, r.z, t.x, t.y, t.z]
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::from_array([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::from(self.to_array())
    }

    /// The `i`-th unit twist (`i < 6`).
    pub fn basis(i: usize) -> Self {
        assert!(i < 6, "twist basis index {i} out of range");
        let mut a = [0.0; 6];
        a[i] = 1.0;
        Self::from_array(a)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.rotation * s, self.translation * s)
    }

    /// Euclidean norm of the 6-vector.
    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// A proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is orthonormal with positive determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, Se3Error> {
        if !rotation.iter().all(|x| x.is_finite()) || !translation.iter().all(|x| x.is_finite()) {
            return Err(Se3Error::NonFinite("rigid transform"));
        }
        let orthonormality = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if orthonormality >= ORTHONORMAL_TOLERANCE || det <= 0.0 {
            return Err(Se3Error::NotARotation {
                orthonormality,
                det,
            });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform without validation. Callers guarantee a proper rotation.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation_vector: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(&rotation_vector),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// The SE(3) exponential of a twist.
    pub fn exp(twist: &Twist) -> Self {
        let (a, b, c) = rodrigues_coefficients(twist.rotation.norm());
        let w = hat(&twist.rotation);
        let w2 = w * w;
        let rotation = Matrix3::identity() + w * a + w2 * b;
        let v = Matrix3::identity() + w * b + w2 * c;
        Self {
            rotation,
            translation: v * twist.translation,
        }
    }

    /// The SE(3) logarithm, the inverse of [`RigidTransform::exp`] for rotation angles below pi.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let rotation = so3_log(&self.rotation)?;
        let theta = rotation.norm();
        let w = hat(&rotation);
        let d = if theta < 1e-3 {
            let t2 = theta * theta;
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        } else {
            let (a, b, _) = rodrigues_coefficients(theta);
            (1.0 - a / (2.0 * b)) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w * w * d;
        Ok(Twist::new(rotation, v_inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    /// Applies the motion to every point, preserving count and order.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_points_unchecked(self.apply_points(cloud.points()))
    }

    pub(crate) fn apply_points(&self, points: &[Point]) -> Vec<Point> {
        points.iter().map(|p| self.transform_point(p)).collect()
    }

    /// Row-major `[R | t]`.
    pub fn to_matrix3x4(&self) -> [[f64; 4]; 3] {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, entry) in row.iter_mut().take(3).enumerate() {
                *entry = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        m
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in `[0, pi]`, defined for every rotation including half turns.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// `|R^T R - I|_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }
}

/// Skew-symmetric cross-product matrix: `hat(a) * b = a x b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] for the antisymmetric part of `m`.
fn vee_antisymmetric(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// `(sin(th)/th, (1-cos(th))/th^2, (th-sin(th))/th^3)`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        let half = 0.5 * theta;
        let sinc_half = half.sin() / half;
        // (th - sin th)/th^3 cancels badly for small th; its series is exact to rounding there
        let c = if theta < 1e-2 {
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        } else {
            (theta - theta.sin()) / (t2 * theta)
        };
        (theta.sin() / theta, 0.5 * sinc_half * sinc_half, c)
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn so3_exp(v: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = rodrigues_coefficients(v.norm());
    let w = hat(v);
    Matrix3::identity() + w * a + w * w * b
}

fn rotation_sin_cos(r: &Matrix3<f64>) -> (Vector3<f64>, f64, f64) {
    let axis2sin = vee_antisymmetric(r);
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = (0.5 * axis2sin.norm()).min(1.0);
    (axis2sin, sin, cos)
}

/// Rotation angle in `[0, pi]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let (_, sin, cos) = rotation_sin_cos(r);
    sin.atan2(cos)
}

/// Axis-angle vector of a rotation matrix with angle below `pi - 1e-6`.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, Se3Error> {
    let (axis2sin, sin, cos) = rotation_sin_cos(r);
    let theta = sin.atan2(cos);
    if PI - theta < NEAR_PI_MARGIN {
        return Err(Se3Error::AngleNearPi { angle: theta });
    }
    if theta < SMALL_ANGLE {
        return Ok(axis2sin * (0.5 * (1.0 + theta * theta / 6.0)));
    }
    if PI - theta > 1e-3 {
        return Ok(axis2sin * (theta / (2.0 * sin)));
    }
    // Close to a half turn the antisymmetric part vanishes; recover the axis
    // from the symmetric part (1 - cos) a a^T and take its sign from the
    // antisymmetric part.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .expect("three diagonal entries");
    let mut axis: Vector3<f64> = sym.column(k).into_owned() / sym[(k, k)].max(0.0).sqrt();
    axis.normalize_mut();
    if axis.dot(&axis2sin) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Left Jacobian of SE(3) in the `(rotation, translation)` twist ordering:
/// `exp(xi + d) ≈ exp(J(xi) d) ∘ exp(xi)` for small `d`.
pub fn se3_left_jacobian(twist: &Twist) -> Matrix6<f64> {
    let phi = &twist.rotation;
    let rho = &twist.translation;
    let theta = phi.norm();
    let t2 = theta * theta;
    // b = (1-cos)/th^2, c1 = (th-sin)/th^3, c2 = (th^2+2cos-2)/(2 th^4),
    // c3 = (2th - 3sin + th cos)/(2 th^5)
    let (b, c1, c2, c3) = if theta < 1e-2 {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (1.0 - c) / t2,
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pp = p * p;
    let prp = p * r * p;
    let jl = Matrix3::identity() + p * b + pp * c1;
    let q = r * 0.5
        + (p * r + r * p + prp) * c1
        + (pp * r + r * pp - prp * 3.0) * c2
        + (prp * p + p * prp) * c3;
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    j
}

/// Geodesic rotation distance `|log(R_est^T R_gt)|` in radians.
pub fn angular_error(est: &RigidTransform, gt: &RigidTransform) -> Result<f64, Se3Error> {
    let relative = est.rotation.transpose() * gt.rotation;
    Ok(so3_log(&relative)?.norm())
}

/// Like [`angular_error`] but total: half turns report pi instead of failing.
pub fn rotation_distance(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    rotation_angle(&(est.rotation.transpose() * gt.rotation))
}

/// `|t_est - t_gt|`.
pub fn translation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (est.translation - gt.translation).norm()
}

/// Root-mean-square over the 12 entries of the `[R | t]` difference.
pub fn transform_rmse(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let a = est.to_matrix3x4();
    let b = gt.to_matrix3x4();
    let sum: f64 = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (sum / 12.0).sqrt()
}

/// A direction drawn uniformly from the unit sphere.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..(2.0 * PI));
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Rotation by exactly `angle` about a uniformly random axis, translation with
/// uniform direction and norm uniform in `[0, trans_max]`.
pub fn random_transform_with_angle<R: Rng + ?Sized>(
    angle: f64,
    trans_max: f64,
    rng: &mut R,
) -> RigidTransform {
    let axis = random_unit_vector(rng);
    let direction = random_unit_vector(rng);
    let norm = rng.random::<f64>() * trans_max;
    RigidTransform::from_parts_unchecked(so3_exp(&(axis * angle)), direction * norm)
}

/// Rotation angle uniform in `[0, rot_max]` about a uniformly random axis,
/// translation with uniform direction and norm uniform in `[0, trans_max]`.
pub fn random_transform<R: Rng + ?Sized>(rot_max: f64, trans_max: f64, rng: &mut R) -> RigidTransform {
    let angle = rng.random::<f64>() * rot_max;
    random_transform_with_angle(angle, trans_max, rng)
}
