//! Pinhole cameras, rigid transforms, rays and two-view epipolar algebra.
//!
//! Poses map world points into the camera frame (`x_cam = R x_world + t`).
//! Epipolar quantities always take normalized image coordinates (`K⁻¹ p`);
//! pixel coordinates only appear at the projection boundary.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `‖RᵀR − I‖_F` and `det(R) − 1` accepted for a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive camera depth {0}")]
    NonPositiveDepth(f64),
    #[error("relative translation is zero")]
    ZeroTranslation,
    #[error("sampson denominator {0:e} is degenerate")]
    DegenerateDenominator(f64),
    #[error("matrix is not essential, singular values {0:?}")]
    NotEssential([f64; 3]),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a rotation: {0}")]
    InvalidRotation(String),
}

/// Pinhole calibration `K = [[fx, skew, cx], [0, fy, cy], [0, 0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, skew };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, zero skew.
    pub fn simple(focal: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::new(focal, focal, cx, cy, 0.0)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.skew]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite field".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// `K⁻¹ p̄`, returned as the inhomogeneous normalized point.
    pub fn normalize(&self, p: Pixel) -> Vec2 {
        let y = (p.v - self.cy) / self.fy;
        let x = (p.u - self.cx - self.skew * y) / self.fx;
        Vec2::new(x, y)
    }

    pub fn denormalize(&self, x: &Vec2) -> Pixel {
        Pixel::new(
            self.fx * x.x + self.skew * x.y + self.cx,
            self.fy * x.y + self.cy,
        )
    }
}

/// Continuous image coordinates in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self::from_rotation(&q.to_rotation_matrix(), translation)
    }

    /// Builds a pose from an almost-orthonormal matrix by projecting it onto SO(3).
    pub fn from_approximate_rotation(m: &Mat3, translation: Vec3) -> Self {
        Self {
            rotation: nearest_rotation(m),
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn transform(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3Pose) -> Self {
        Self {
            rotation: nearest_rotation(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Transform taking camera `from`'s frame into camera `to`'s frame.
    pub fn relative(from: &Se3Pose, to: &Se3Pose) -> Self {
        to.compose(&from.inverse())
    }

    pub fn center(&self) -> Vec3 {
        camera_center(self)
    }

    pub fn with_translation(&self, translation: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }
}

fn check_rotation(r: &Mat3) -> Result<(), GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::InvalidRotation("non-finite entry".into()));
    }
    let ortho = (r.transpose() * r - Mat3::identity()).norm();
    if ortho >= ROTATION_TOLERANCE {
        return Err(GeometryError::InvalidRotation(format!(
            "‖RᵀR − I‖ = {ortho:e}"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() >= ROTATION_TOLERANCE {
        return Err(GeometryError::InvalidRotation(format!("det(R) = {det}")));
    }
    Ok(())
}

/// Closest rotation in Frobenius norm.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Cross-product matrix `[v]ₓ`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix `exp([ω]ₓ)`.
pub fn so3_exp(omega: &Vec3) -> Mat3 {
    *Rotation3::new(*omega).matrix()
}

/// Left Jacobian of SO(3): `exp(ω + δ) ≈ exp(J_l(ω) δ) exp(ω)`.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    if theta2 < 1e-10 {
        return Mat3::identity() + 0.5 * w + (1.0 / 6.0) * w * w;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Mat3::identity() + a * w + b * w * w
}

/// Geodesic angle of a rotation matrix, radians in `[0, π]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = 0.5
        * Vec3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    s.atan2(c)
}

/// Half-line with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    origin: Vec3,
    direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`; returns `None` for a zero or non-finite direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Option<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return None;
        }
        Some(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn origin(&self) -> &Vec3 {
        &self.origin
    }

    pub fn direction(&self) -> &Vec3 {
        &self.direction
    }

    /// Point at Euclidean distance `s` from the origin.
    pub fn point_at(&self, s: f64) -> Vec3 {
        self.origin + self.direction * s
    }

    /// Distance along the ray of the orthogonal projection of `x`.
    pub fn parameter_of(&self, x: &Vec3) -> f64 {
        (x - self.origin).dot(&self.direction)
    }
}

/// Unconstrained closest-approach parameters `(s, t)` of two lines
/// `o1 + s·d1` and `o2 + t·d2`. `None` when the lines are parallel.
pub fn closest_approach(o1: &Vec3, d1: &Vec3, o2: &Vec3, d2: &Vec3) -> Option<(f64, f64)> {
    let w = o1 - o2;
    let a = d1.dot(d1);
    let b = d1.dot(d2);
    let c = d2.dot(d2);
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    let denom = a * c - b * b;
    if denom <= 1e-14 * a * c {
        return None;
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    Some((s, t))
}

/// Perspective projection of a world point.
pub fn project(pose: &Se3Pose, k: &CameraIntrinsics, x: &Vec3) -> Result<Pixel, GeometryError> {
    let xc = pose.transform(x);
    if xc.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(xc.z));
    }
    Ok(k.denormalize(&Vec2::new(xc.x / xc.z, xc.y / xc.z)))
}

pub fn camera_center(pose: &Se3Pose) -> Vec3 {
    -(pose.rotation.transpose() * pose.translation)
}

/// World-to-camera pose of a camera at `center` whose optical axis points at
/// `target`, with image "down" roughly opposite to `up`.
pub fn look_at(center: &Vec3, target: &Vec3, up: &Vec3) -> Option<Se3Pose> {
    let z = (target - center).try_normalize(1e-12)?;
    let x = (-up).cross(&z).try_normalize(1e-12)?;
    let y = z.cross(&x);
    let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Some(Se3Pose {
        rotation: r,
        translation: -(r * center),
    })
}

/// World-frame ray from the camera center through `p`.
pub fn ray_through_pixel(pose: &Se3Pose, k: &CameraIntrinsics, p: Pixel) -> Ray {
    let x = k.normalize(p);
    let dir_cam = Vec3::new(x.x, x.y, 1.0);
    Ray::new(camera_center(pose), pose.rotation.transpose() * dir_cam)
        .expect("homogeneous direction has unit z")
}

/// `E = [t]ₓ R` for the relative pose mapping camera-1 coordinates to camera-2.
pub fn essential_from_pose(rel: &Se3Pose) -> Result<Mat3, GeometryError> {
    if rel.translation.norm() == 0.0 {
        return Err(GeometryError::ZeroTranslation);
    }
    Ok(skew(&rel.translation) * rel.rotation)
}

/// First-order geometric error of a normalized correspondence under `e`.
pub fn sampson_error(e: &Mat3, x1: &Vec2, x2: &Vec2) -> Result<f64, GeometryError> {
    let h1 = Vec3::new(x1.x, x1.y, 1.0);
    let h2 = Vec3::new(x2.x, x2.y, 1.0);
    let ex1 = e * h1;
    let etx2 = e.transpose() * h2;
    let num = h2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den < 1e-18 {
        return Err(GeometryError::DegenerateDenominator(den));
    }
    Ok(num * num / den)
}

/// SVD of a 3×3 matrix with singular values sorted in descending order.
pub(crate) fn sorted_svd3(m: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut us = Mat3::zeros();
    let mut vs = Mat3::zeros();
    let mut ss = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &v.column(src));
        ss[dst] = s[src];
    }
    (us, ss, vs)
}

/// Ratio bounds accepted by [`decompose_essential`].
pub const ESSENTIAL_MIN_SECOND_RATIO: f64 = 0.9;
pub const ESSENTIAL_MAX_THIRD_RATIO: f64 = 0.1;

/// The four `(R, t̂)` factorizations of an essential matrix, in the order
/// `(R₁, t̂), (R₁, −t̂), (R₂, t̂), (R₂, −t̂)`.
pub fn decompose_essential(e: &Mat3) -> Result<[Se3Pose; 4], GeometryError> {
    let (mut u, s, mut v) = sorted_svd3(e);
    if !(s[0] > 0.0)
        || s[1] / s[0] < ESSENTIAL_MIN_SECOND_RATIO
        || s[2] / s[0] > ESSENTIAL_MAX_THIRD_RATIO
    {
        return Err(GeometryError::NotEssential(s));
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = nearest_rotation(&(u * w * v.transpose()));
    let r2 = nearest_rotation(&(u * w.transpose() * v.transpose()));
    let t: Vec3 = u.column(2).into_owned().normalize();
    Ok([
        Se3Pose { rotation: r1, translation: t },
        Se3Pose { rotation: r1, translation: -t },
        Se3Pose { rotation: r2, translation: t },
        Se3Pose { rotation: r2, translation: -t },
    ])
}
