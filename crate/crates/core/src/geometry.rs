//! Camera model and rigid-body primitives.
//!
//! Cameras follow the OpenCV convention: world-to-camera rotation `R` and
//! translation `t`, x right, y down, z forward. Lens distortion is the
//! 5-coefficient Brown model `(k1, k2, p1, p2, k3)` applied to normalized
//! coordinates before the intrinsic matrix.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, Unit, Vector2, Vector3};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Point2 = nalgebra::Point2<f64>;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind camera {camera} (depth {depth})")]
    BehindCamera { camera: u32, depth: f64 },
    #[error("invalid camera {camera}: {reason}")]
    InvalidCamera { camera: u32, reason: String },
    #[error("rotation is not orthonormal with determinant +1")]
    InvalidRotation,
}

fn is_rotation(r: &Matrix3<f64>) -> bool {
    let should_be_identity = r.transpose() * r;
    r.iter().all(|v| v.is_finite())
        && (should_be_identity - Matrix3::identity()).abs().max() <= ORTHO_TOL
        && (r.determinant() - 1.0).abs() <= ORTHO_TOL
}

/// An element of SE(3) acting as `p -> R p + t`.
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

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform from parts already known to be a proper rotation
    /// (e.g. the output of an SVD with the determinant fixed).
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

    /// Rotation of `angle` radians about `axis` followed by `translation`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Applies a rigid transform to a point.
pub fn apply_transform(transform: &RigidTransform, p: &Point3) -> Point3 {
    transform.apply(p)
}

/// Brown distortion coefficients in OpenCV order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl Distortion {
    pub fn from_array(c: [f64; 5]) -> Self {
        Self {
            k1: c[0],
            k2: c[1],
            p1: c[2],
            p2: c[3],
            k3: c[4],
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.k1, self.k2, self.p1, self.p2, self.k3]
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|c| *c == 0.0)
    }

    #[inline]
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    /// Jacobian of [`Self::distort`] with respect to `(x, y)`.
    fn jacobian(&self, x: f64, y: f64) -> nalgebra::Matrix2<f64> {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dradial_dr2 = self.k1 + r2 * (2.0 * self.k2 + 3.0 * self.k3 * r2);
        let drad_dx = dradial_dr2 * 2.0 * x;
        let drad_dy = dradial_dr2 * 2.0 * y;
        nalgebra::Matrix2::new(
            radial + x * drad_dx + 2.0 * self.p1 * y + 6.0 * self.p2 * x,
            x * drad_dy + 2.0 * self.p1 * x + 2.0 * self.p2 * y,
            y * drad_dx + 2.0 * self.p1 * x + 2.0 * self.p2 * y,
            radial + y * drad_dy + 6.0 * self.p1 * y + 2.0 * self.p2 * x,
        )
    }

    /// Inverts the distortion by fixed-point iteration.
    pub fn undistort(&self, xd: f64, yd: f64) -> (f64, f64) {
        if self.is_zero() {
            return (xd, yd);
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..30 {
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            x = (xd - dx) / radial;
            y = (yd - dy) / radial;
        }
        (x, y)
    }
}

/// A calibrated pinhole camera with Brown distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    id: u32,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    distortion: Distortion,
    width: u32,
    height: u32,
}

impl Camera {
    pub fn new(
        id: u32,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        distortion: Distortion,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let invalid = |reason: &str| GeometryError::InvalidCamera {
            camera: id,
            reason: reason.to_string(),
        };
        if !is_rotation(&rotation) {
            return Err(invalid("rotation is not orthonormal with determinant +1"));
        }
        if !(intrinsics[(0, 0)] > 0.0 && intrinsics[(1, 1)] > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if intrinsics[(1, 0)] != 0.0
            || intrinsics[(2, 0)] != 0.0
            || intrinsics[(2, 1)] != 0.0
            || intrinsics[(2, 2)] != 1.0
        {
            return Err(invalid("intrinsic matrix must be upper triangular with K[2][2] = 1"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image size must be positive"));
        }
        let finite = intrinsics.iter().all(|v| v.is_finite())
            && translation.iter().all(|v| v.is_finite())
            && distortion.to_array().iter().all(|v| v.is_finite());
        if !finite {
            return Err(invalid("non-finite parameter"));
        }
        Ok(Self {
            id,
            intrinsics,
            rotation,
            translation,
            distortion,
            width,
            height,
        })
    }

    /// Camera centred at `eye` looking at `target`, image y axis pointing
    /// away from `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: u32,
        eye: &Point3,
        target: &Point3,
        up: &Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
        distortion: Distortion,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        let intrinsics = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(id, intrinsics, rotation, translation, distortion, width, height)
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn distortion(&self) -> &Distortion {
        &self.distortion
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Optical centre in world coordinates.
    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera_frame(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    /// Depth of `p` along the optical axis.
    pub fn depth(&self, p: &Point3) -> f64 {
        self.to_camera_frame(p).z
    }

    #[inline]
    fn pixel_from_normalized(&self, x: f64, y: f64) -> Point2 {
        let (xd, yd) = self.distortion.distort(x, y);
        let k = &self.intrinsics;
        Point2::new(
            k[(0, 0)] * xd + k[(0, 1)] * yd + k[(0, 2)],
            k[(1, 1)] * yd + k[(1, 2)],
        )
    }

    /// Projects a world point to pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Point3) -> Result<Point2, GeometryError> {
        let pc = self.to_camera_frame(p);
        if pc.z <= 0.0 {
            return Err(GeometryError::BehindCamera {
                camera: self.id,
                depth: pc.z,
            });
        }
        Ok(self.pixel_from_normalized(pc.x / pc.z, pc.y / pc.z))
    }

    /// Projection returning `None` for points behind the camera or outside
    /// the image.
    #[inline]
    pub fn project_visible(&self, p: &Point3) -> Option<Point2> {
        let pc = self.to_camera_frame(p);
        if pc.z <= 0.0 {
            return None;
        }
        let px = self.pixel_from_normalized(pc.x / pc.z, pc.y / pc.z);
        self.in_bounds(&px).then_some(px)
    }

    pub fn in_bounds(&self, px: &Point2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Frustum membership: positive depth and projection inside the image.
    /// Occlusion is not modelled.
    pub fn is_visible(&self, p: &Point3) -> bool {
        self.project_visible(p).is_some()
    }

    /// Jacobian of the pixel projection with respect to the world point.
    pub fn projection_jacobian(&self, p: &Point3) -> Result<Matrix2x3<f64>, GeometryError> {
        let pc = self.to_camera_frame(p);
        if pc.z <= 0.0 {
            return Err(GeometryError::BehindCamera {
                camera: self.id,
                depth: pc.z,
            });
        }
        let inv_z = 1.0 / pc.z;
        let (x, y) = (pc.x * inv_z, pc.y * inv_z);
        let d_norm = Matrix2x3::new(inv_z, 0.0, -x * inv_z, 0.0, inv_z, -y * inv_z);
        let d_dist = self.distortion.jacobian(x, y);
        let k = &self.intrinsics;
        let d_pix = nalgebra::Matrix2::new(k[(0, 0)], k[(0, 1)], 0.0, k[(1, 1)]);
        Ok(d_pix * d_dist * d_norm * self.rotation)
    }

    /// World point seen at pixel `px` with optical-axis depth `depth`.
    pub fn back_project(&self, px: &Point2, depth: f64) -> Point3 {
        let k = &self.intrinsics;
        let yd = (px.y - k[(1, 2)]) / k[(1, 1)];
        let xd = (px.x - k[(0, 2)] - k[(0, 1)] * yd) / k[(0, 0)];
        let (x, y) = self.distortion.undistort(xd, yd);
        let pc = Vector3::new(x * depth, y * depth, depth);
        Point3::from(self.rotation.transpose() * (pc - self.translation))
    }

    /// The same physical camera after the world has been moved by `motion`:
    /// projecting `motion.apply(p)` through the result equals projecting `p`
    /// through `self`.
    pub fn transformed(&self, motion: &RigidTransform) -> Camera {
        let rotation = self.rotation * motion.rotation().transpose();
        let translation = self.translation - rotation * motion.translation();
        Camera {
            rotation,
            translation,
            ..self.clone()
        }
    }
}

/// Projects a world point into a camera.
pub fn project(camera: &Camera, p: &Point3) -> Result<Point2, GeometryError> {
    camera.project(p)
}

pub fn is_visible(camera: &Camera, p: &Point3) -> bool {
    camera.is_visible(p)
}

pub fn distance2(a: &Point2, b: &Point2) -> f64 {
    let d: Vector2<f64> = a - b;
    d.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn basic_camera(dist: Distortion) -> Camera {
        let k = Matrix3::new(100.0, 0.0, 320.0, 0.0, 100.0, 240.0, 0.0, 0.0, 1.0);
        Camera::new(0, k, Matrix3::identity(), Vector3::zeros(), dist, 640, 480).unwrap()
    }

    // Standalone evaluation of the Brown polynomial, written out term by term.
    fn reference_distorted_pixel(k1: f64, x: f64, y: f64) -> (f64, f64) {
        let r = (x * x + y * y).sqrt();
        let factor = 1.0 + k1 * r.powi(2);
        (100.0 * x * factor + 320.0, 100.0 * y * factor + 240.0)
    }

    #[test]
    fn principal_point_projection() {
        let cam = basic_camera(Distortion::default());
        let px = cam.project(&Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((px.x, px.y), (320.0, 240.0));
        let px = cam.project(&Point3::new(0.1, 0.0, 1.0)).unwrap();
        assert_eq!((px.x, px.y), (330.0, 240.0));
    }

    #[test]
    fn radial_distortion_matches_polynomial() {
        let cam = basic_camera(Distortion {
            k1: 0.1,
            ..Default::default()
        });
        let px = cam.project(&Point3::new(0.1, 0.0, 1.0)).unwrap();
        let (u, v) = reference_distorted_pixel(0.1, 0.1, 0.0);
        assert_abs_diff_eq!(px.x, u, epsilon = 1e-12);
        assert_abs_diff_eq!(px.y, v, epsilon = 1e-12);
        assert_abs_diff_eq!(px.x, 330.01, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = basic_camera(Distortion::default());
        assert!(matches!(
            cam.project(&Point3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::BehindCamera { .. })
        ));
        assert!(cam.project(&Point3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn visibility() {
        let cam = basic_camera(Distortion::default());
        assert!(cam.is_visible(&Point3::new(0.0, 0.0, 1.0)));
        assert!(!cam.is_visible(&Point3::new(0.0, 0.0, -1.0)));
        // (-0.05·100/0.15 + 320, ...) lands at x = -5 px.
        let p = Point3::new(-325.0 / 100.0, -140.0 / 100.0, 1.0);
        let px = cam.project(&p).unwrap();
        assert_abs_diff_eq!(px.x, -5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(px.y, 100.0, epsilon = 1e-9);
        assert!(!cam.is_visible(&p));
    }

    #[test]
    fn invalid_cameras_rejected() {
        let k = Matrix3::new(100.0, 0.0, 320.0, 0.0, 100.0, 240.0, 0.0, 0.0, 1.0);
        let bad_r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Camera::new(1, k, bad_r, Vector3::zeros(), Distortion::default(), 640, 480).is_err());
        let bad_k = Matrix3::new(-1.0, 0.0, 320.0, 0.0, 100.0, 240.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(1, bad_k, Matrix3::identity(), Vector3::zeros(), Distortion::default(), 640, 480).is_err());
        assert!(Camera::new(1, k, Matrix3::identity(), Vector3::zeros(), Distortion::default(), 0, 480).is_err());
    }

    #[test]
    fn transform_examples() {
        let p = Point3::new(0.3, -1.2, 4.0);
        assert_eq!(apply_transform(&RigidTransform::identity(), &p), p);
        let shift = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(shift.apply(&Point3::origin()), Point3::new(1.0, 0.0, 0.0));
        let rot = RigidTransform::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let q = rot.apply(&Point3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(q.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn look_at_centres_target() {
        let eye = Point3::new(2.0, 1.0, 1.5);
        let target = Point3::new(0.0, 0.0, 1.0);
        let cam = Camera::look_at(3, &eye, &target, &Vector3::z(), 400.0, 640, 480, Distortion::default()).unwrap();
        let px = cam.project(&target).unwrap();
        assert_abs_diff_eq!(px.x, 320.0, epsilon = 1e-9);
        assert_abs_diff_eq!(px.y, 240.0, epsilon = 1e-9);
        assert_abs_diff_eq!((cam.center() - eye).norm(), 0.0, epsilon = 1e-12);
        // Straight down still yields a valid camera.
        let top = Camera::look_at(4, &Point3::new(0.0, 0.0, 3.0), &target, &Vector3::z(), 400.0, 640, 480, Distortion::default());
        assert!(top.is_ok());
    }

    #[test]
    fn back_projection_inverts_projection() {
        let cam = Camera::look_at(
            0,
            &Point3::new(2.0, -1.0, 2.0),
            &Point3::new(0.0, 0.0, 1.0),
            &Vector3::z(),
            500.0,
            640,
            480,
            Distortion::from_array([0.05, -0.01, 0.001, -0.002, 0.001]),
        )
        .unwrap();
        let p = Point3::new(0.2, 0.1, 0.9);
        let px = cam.project(&p).unwrap();
        let q = cam.back_project(&px, cam.depth(&p));
        assert_abs_diff_eq!((p - q).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = Camera::look_at(
            0,
            &Point3::new(2.0, -1.0, 2.0),
            &Point3::new(0.0, 0.0, 1.0),
            &Vector3::z(),
            500.0,
            640,
            480,
            Distortion::from_array([0.05, -0.01, 0.001, -0.002, 0.001]),
        )
        .unwrap();
        let p = Point3::new(0.2, 0.1, 0.9);
        let jac = cam.projection_jacobian(&p).unwrap();
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = Vector3::zeros();
            dp[axis] = h;
            let a = cam.project(&(p + dp)).unwrap();
            let b = cam.project(&(p - dp)).unwrap();
            let fd = (a - b) / (2.0 * h);
            assert_abs_diff_eq!(jac[(0, axis)], fd.x, epsilon = 1e-4);
            assert_abs_diff_eq!(jac[(1, axis)], fd.y, epsilon = 1e-4);
        }
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.1f64..3.1,
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_filter("axis must be non-zero", |(a, _, _)| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|(a, angle, t)| {
                RigidTransform::from_axis_angle(&Vector3::from(a), angle, Vector3::from(t))
            })
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(t in arb_transform(), p in prop::array::uniform3(-5.0f64..5.0)) {
            let p = Point3::from(Vector3::from(p));
            let back = t.inverse().apply(&t.apply(&p));
            prop_assert!((back - p).norm() <= 1e-9);
            let id = t.compose(&t.inverse());
            prop_assert!((id.rotation() - Matrix3::identity()).abs().max() <= 1e-9);
            prop_assert!(id.translation().norm() <= 1e-9);
        }

        #[test]
        fn composition_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.rotation() - right.rotation()).abs().max() <= 1e-9);
            prop_assert!((left.translation() - right.translation()).norm() <= 1e-9);
        }

        #[test]
        fn projection_invariant_under_shared_motion(m in arb_transform(), p in prop::array::uniform3(-0.5f64..0.5)) {
            let cam = Camera::look_at(
                0,
                &Point3::new(2.5, 0.5, 1.2),
                &Point3::new(0.0, 0.0, 1.0),
                &Vector3::z(),
                450.0,
                640,
                480,
                Distortion::from_array([0.02, -0.01, 0.0005, 0.0002, 0.0]),
            ).unwrap();
            let p = Point3::new(p[0], p[1], 1.0 + p[2]);
            let moved = cam.transformed(&m);
            let a = cam.project(&p).unwrap();
            let b = moved.project(&m.apply(&p)).unwrap();
            prop_assert!((a - b).norm() <= 1e-9);
        }

        #[test]
        fn visible_implies_projectable(p in prop::array::uniform3(-3.0f64..3.0)) {
            let cam = basic_camera(Distortion::default());
            let p = Point3::from(Vector3::from(p));
            if cam.is_visible(&p) {
                prop_assert!(cam.project(&p).is_ok());
            }
        }

        #[test]
        fn zero_distortion_is_bare_pinhole(p in prop::array::uniform3(-1.0f64..1.0)) {
            let cam = basic_camera(Distortion::default());
            let p = Point3::new(p[0], p[1], 2.0 + p[2]);
            let px = cam.project(&p).unwrap();
            prop_assert_eq!(px.x, p.x / p.z * 100.0 + 320.0);
            prop_assert_eq!(px.y, p.y / p.z * 100.0 + 240.0);
        }
    }
}
