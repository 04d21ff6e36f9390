//! Camera rays, poses, axis orthogonalization and oriented boxes.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Contract(format!(
                "intrinsics need finite fx, fy > 0 (got fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ (u, v, 1)ᵀ`, written out for zero skew.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Unit ray from the camera origin through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        self.unproject(u, v).normalize()
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(self.unproject(u, v) * depth)
    }

    /// Pixel coordinates of a camera-frame point with `z > 0`.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rotation, translation and full box extents of an object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub s: Vector3<f64>,
}

impl Pose {
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>, s: Vector3<f64>) -> Result<Self> {
        let pose = Pose { r, t, s };
        pose.validate(1e-9)?;
        Ok(pose)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if !is_rotation(&self.r, tol) {
            return Err(Error::Contract("pose rotation is not in SO(3)".into()));
        }
        if self.s.iter().any(|v| !(*v > 0.0)) || self.t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "pose needs positive extents and finite translation (s={:?})",
                self.s.as_slice()
            )));
        }
        Ok(())
    }

    pub fn to_object(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r.transpose() * (p - self.t)
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    pub fn volume(&self) -> f64 {
        self.s.x * self.s.y * self.s.z
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let q = self.to_object(p);
        (0..3).all(|i| q[i].abs() <= 0.5 * self.s[i])
    }
}

/// Two decoded axes with their confidences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisPair {
    pub a_x: Vector3<f64>,
    pub a_z: Vector3<f64>,
    pub c_x: f64,
    pub c_z: f64,
}

/// Result of [`orthogonalize_axes`]: the corrected axes and the signed
/// in-plane rotation applied to each (positive means toward the other axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orthogonalized {
    pub a_x: Vector3<f64>,
    pub a_z: Vector3<f64>,
    pub theta_x: f64,
    pub theta_z: f64,
}

const PARALLEL_TOL: f64 = 1e-9;

/// Rotates `a_x` and `a_z` inside their common plane until they are
/// perpendicular. The correction `θ − π/2` is split in inverse proportion to
/// confidence, so the more confident axis moves less.
pub fn orthogonalize_axes(pair: &AxisPair) -> Result<Orthogonalized> {
    let (c_x, c_z) = (pair.c_x, pair.c_z);
    if !(c_x > 0.0 && c_x <= 1.0 && c_z > 0.0 && c_z <= 1.0) {
        return Err(Error::Contract(format!(
            "confidences must lie in (0, 1], got ({c_x}, {c_z})"
        )));
    }
    let nx = pair.a_x.norm();
    let nz = pair.a_z.norm();
    if !(nx > 0.0 && nz > 0.0) {
        return Err(Error::DegenerateAxes(f64::NAN));
    }
    let dot = pair.a_x.dot(&pair.a_z);
    if dot.abs() < 1e-12 && (nx - 1.0).abs() < 1e-12 && (nz - 1.0).abs() < 1e-12 {
        return Ok(Orthogonalized {
            a_x: pair.a_x,
            a_z: pair.a_z,
            theta_x: 0.0,
            theta_z: 0.0,
        });
    }
    let ax = pair.a_x / nx;
    let az = pair.a_z / nz;
    let cos = ax.dot(&az);
    if cos.abs() >= 1.0 - PARALLEL_TOL {
        return Err(Error::DegenerateAxes(cos.abs()));
    }
    let cross = ax.cross(&az);
    let theta = cross.norm().atan2(cos);
    let n = cross.normalize();
    let delta = theta - std::f64::consts::FRAC_PI_2;
    let theta_x = c_z / (c_x + c_z) * delta;
    let theta_z = c_x / (c_x + c_z) * delta;
    // In-plane rotation about n: v ⊥ n, so Rot(n, φ)v = v cos φ + (n × v) sin φ.
    let a_x = (ax * theta_x.cos() + n.cross(&ax) * theta_x.sin()).normalize();
    let a_z = (az * theta_z.cos() - n.cross(&az) * theta_z.sin()).normalize();
    Ok(Orthogonalized {
        a_x,
        a_z,
        theta_x,
        theta_z,
    })
}

/// Smallest-perturbation replacement for an `a_x` that is (nearly) parallel
/// to `a_z`: the component of `a_x` orthogonal to `a_z` when it is usable,
/// otherwise the basis axis least aligned with `a_z` projected onto its
/// orthogonal plane.
pub fn perpendicular_fallback(a_x: &Vector3<f64>, a_z: &Vector3<f64>) -> Vector3<f64> {
    let z = a_z.normalize();
    let proj = a_x - z * a_x.dot(&z);
    if proj.norm() > 1e-6 {
        return proj.normalize();
    }
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    let e = basis
        .iter()
        .min_by(|a, b| a.dot(&z).abs().total_cmp(&b.dot(&z).abs()))
        .copied()
        .unwrap_or_else(Vector3::x);
    (e - z * e.dot(&z)).normalize()
}

/// Right-handed frame with columns `(a_x, a_z × a_x, a_z)`.
pub fn rotation_from_axes(a_x: &Vector3<f64>, a_z: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let tol = 1e-6;
    if (a_x.norm() - 1.0).abs() > tol || (a_z.norm() - 1.0).abs() > tol || a_x.dot(a_z).abs() > tol
    {
        return Err(Error::Contract(format!(
            "axes are not orthonormal: |a_x|={}, |a_z|={}, <a_x,a_z>={}",
            a_x.norm(),
            a_z.norm(),
            a_x.dot(a_z)
        )));
    }
    let a_y = a_z.cross(a_x);
    Ok(Matrix3::from_columns(&[*a_x, a_y, *a_z]))
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Sign pattern of the eight box corners: a Gray code over (x, y, z), so
/// consecutive corners differ in exactly one coordinate.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0],
];

pub fn box_corners(pose: &Pose) -> [Vector3<f64>; 8] {
    let half = pose.s * 0.5;
    CORNER_SIGNS.map(|sg| {
        let local = Vector3::new(sg[0] * half.x, sg[1] * half.y, sg[2] * half.z);
        pose.to_world(&local)
    })
}

/// Geodesic angle of `R₁ᵀR₂`, via atan2 of its skew part and trace so that
/// small angles keep full precision.
pub fn rotation_geodesic_degrees(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let m = r1.transpose() * r2;
    let sin = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
    let cos = (m.trace() - 1.0) / 2.0;
    sin.atan2(cos).to_degrees()
}

/// Rotation error that ignores spin about the z-axis for symmetric objects.
pub fn symmetric_rotation_error_degrees(
    r_est: &Matrix3<f64>,
    r_gt: &Matrix3<f64>,
    symmetric: bool,
) -> f64 {
    if symmetric {
        let ze = r_est.column(2).normalize();
        let zg = r_gt.column(2).normalize();
        ze.cross(&zg).norm().atan2(ze.dot(&zg)).to_degrees()
    } else {
        rotation_geodesic_degrees(r_est, r_gt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let r = k500().ray_direction(320.0, 240.0);
        assert!((r - Vector3::z()).norm() < 1e-12);
        let id = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap();
        assert_eq!(id.ray_direction(0.0, 0.0), Vector3::z());
    }

    #[test]
    fn off_axis_ray_and_backprojection() {
        let k = k500();
        let r = k.ray_direction(820.0, 240.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(r, Vector3::new(h, 0.0, h), epsilon = 1e-12);
        assert_eq!(k.backproject(820.0, 240.0, 2.0).unwrap(), Vector3::new(2.0, 0.0, 2.0));
        assert_eq!(k.backproject(320.0, 240.0, 2.0).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        let p1 = k.backproject(100.0, 50.0, 1.0).unwrap();
        let p3 = k.backproject(100.0, 50.0, 3.0).unwrap();
        assert_relative_eq!(p3, p1 * 3.0, epsilon = 1e-15);
    }

    #[test]
    fn non_positive_depth_is_rejected() {
        let k = k500();
        assert!(matches!(k.backproject(1.0, 1.0, 0.0), Err(Error::InvalidDepth(_))));
        assert!(matches!(k.backproject(1.0, 1.0, -2.0), Err(Error::InvalidDepth(_))));
        assert!(matches!(k.backproject(1.0, 1.0, f64::NAN), Err(Error::InvalidDepth(_))));
    }

    #[test]
    fn orthogonal_pair_is_untouched() {
        let pair = AxisPair {
            a_x: Vector3::x(),
            a_z: Vector3::z(),
            c_x: 0.3,
            c_z: 0.8,
        };
        let o = orthogonalize_axes(&pair).unwrap();
        assert_eq!(o.a_x, Vector3::x());
        assert_eq!(o.a_z, Vector3::z());
    }

    fn sixty_degree_pair(c_x: f64, c_z: f64) -> AxisPair {
        let t = 60f64.to_radians();
        AxisPair {
            a_x: Vector3::x(),
            a_z: Vector3::new(t.cos(), 0.0, t.sin()),
            c_x,
            c_z,
        }
    }

    #[test]
    fn equal_confidence_splits_correction_evenly() {
        let pair = sixty_degree_pair(0.5, 0.5);
        let o = orthogonalize_axes(&pair).unwrap();
        let ang = |a: &Vector3<f64>, b: &Vector3<f64>| a.dot(b).clamp(-1.0, 1.0).acos().to_degrees();
        assert!((ang(&pair.a_x, &o.a_x) - 15.0).abs() < 1e-9);
        assert!((ang(&pair.a_z, &o.a_z) - 15.0).abs() < 1e-9);
        assert!(o.a_x.dot(&o.a_z).abs() < 1e-12);
    }

    #[test]
    fn confident_axis_moves_less() {
        let pair = sixty_degree_pair(0.99, 0.01);
        let o = orthogonalize_axes(&pair).unwrap();
        let ang = |a: &Vector3<f64>, b: &Vector3<f64>| a.dot(b).clamp(-1.0, 1.0).acos().to_degrees();
        assert!((ang(&pair.a_x, &o.a_x) - 0.3).abs() < 1e-9);
        assert!((ang(&pair.a_z, &o.a_z) - 29.7).abs() < 1e-9);
        assert!(o.a_x.dot(&o.a_z).abs() < 1e-12);
    }

    #[test]
    fn obtuse_pair_is_pulled_together() {
        let t = 120f64.to_radians();
        let pair = AxisPair {
            a_x: Vector3::x(),
            a_z: Vector3::new(t.cos(), 0.0, t.sin()),
            c_x: 0.5,
            c_z: 0.5,
        };
        let o = orthogonalize_axes(&pair).unwrap();
        assert!(o.a_x.dot(&o.a_z).abs() < 1e-12);
        assert!((o.theta_x - 15f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn parallel_axes_are_degenerate() {
        let pair = AxisPair {
            a_x: Vector3::x(),
            a_z: Vector3::x() * 2.0,
            c_x: 0.5,
            c_z: 0.5,
        };
        assert!(matches!(orthogonalize_axes(&pair), Err(Error::DegenerateAxes(_))));
    }

    #[test]
    fn fallback_is_perpendicular() {
        let z = Vector3::new(0.0, 0.0, 1.0);
        let f = perpendicular_fallback(&z, &z);
        assert!(f.dot(&z).abs() < 1e-12 && (f.norm() - 1.0).abs() < 1e-12);
        let f = perpendicular_fallback(&Vector3::new(1.0, 0.0, 1.0), &z);
        assert_relative_eq!(f, Vector3::x(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_from_canonical_and_yawed_axes() {
        let r = rotation_from_axes(&Vector3::x(), &Vector3::z()).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r = rotation_from_axes(&Vector3::y(), &Vector3::z()).unwrap();
        assert_relative_eq!(r * Vector3::x(), Vector3::y(), epsilon = 1e-15);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!(matches!(
            rotation_from_axes(&Vector3::new(1.0, 0.1, 0.0), &Vector3::z()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn corners_of_cube_and_translation() {
        let pose = Pose::new(Matrix3::identity(), Vector3::zeros(), Vector3::new(2.0, 2.0, 2.0)).unwrap();
        let c = box_corners(&pose);
        for (corner, sg) in c.iter().zip(CORNER_SIGNS) {
            assert_eq!(corner, &Vector3::new(sg[0], sg[1], sg[2]));
        }
        for w in c.windows(2) {
            assert_eq!((w[0] - w[1]).iter().filter(|v| **v != 0.0).count(), 1);
        }
        let shifted = Pose { t: Vector3::x(), ..pose };
        for (a, b) in box_corners(&shifted).iter().zip(&c) {
            assert_eq!(a - b, Vector3::x());
        }
    }

    #[test]
    fn yawed_box_swaps_extents() {
        let r = axis_angle(&Vector3::z(), FRAC_PI_2);
        let pose = Pose::new(r, Vector3::zeros(), Vector3::new(2.0, 4.0, 2.0)).unwrap();
        let c = box_corners(&pose);
        let span = |i: usize| {
            let v: Vec<f64> = c.iter().map(|p| p[i]).collect();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!((span(0) - 4.0).abs() < 1e-12);
        assert!((span(1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn geodesic_reference_angles() {
        let i = Matrix3::identity();
        assert_eq!(rotation_geodesic_degrees(&i, &i), 0.0);
        let yaw = axis_angle(&Vector3::z(), FRAC_PI_2);
        assert!((rotation_geodesic_degrees(&i, &yaw) - 90.0).abs() < 1e-9);
        let roll = axis_angle(&Vector3::x(), PI);
        assert!((rotation_geodesic_degrees(&i, &roll) - 180.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_error_ignores_spin() {
        let gt = axis_angle(&Vector3::new(0.3, -0.2, 1.0), 0.7);
        let spun = gt * axis_angle(&Vector3::z(), 45f64.to_radians());
        assert!(symmetric_rotation_error_degrees(&spun, &gt, true) < 1e-6);
        let perp = gt.column(2).cross(&Vector3::x());
        let tilted = axis_angle(&perp, 10f64.to_radians()) * gt;
        assert!((symmetric_rotation_error_degrees(&tilted, &gt, true) - 10.0).abs() < 1e-9);
        assert_eq!(
            symmetric_rotation_error_degrees(&spun, &gt, false),
            rotation_geodesic_degrees(&spun, &gt)
        );
    }
}
