//! Frames, object extrinsics and the pinhole camera.
//!
//! World frame: ground plane z = 0, up +z. Camera frame: x right, y down,
//! z along the viewing direction, so a point at depth `d` on the ray with
//! normalized image coordinate `u` is `(d·u.x, d·u.y, d)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

pub type Vec3<T> = [T; 3];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn cross(a: Vec3<f64>, b: Vec3<f64>) -> Vec3<f64> {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3<f64>) -> Vec3<f64> {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Row-major 3×3 matrix.
pub type Mat3<T> = [[T; 3]; 3];

pub fn mat_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn transpose<T: Copy>(m: &Mat3<T>) -> Mat3<T> {
    [[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]]
}

pub fn is_rotation(m: &Mat3<f64>, tol: f64) -> bool {
    let mt = transpose(m);
    for i in 0..3 {
        for j in 0..3 {
            let e = dot(m[i], m[j]) - if i == j { 1.0 } else { 0.0 };
            if e.abs() > tol {
                return false;
            }
        }
    }
    let det = dot(mt[0], cross(mt[1], mt[2]));
    (det - 1.0).abs() <= tol
}

/// Homogeneous transform `[linear, translation; 0 0 0 1]`; the bottom row
/// is implicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform4<T> {
    pub linear: Mat3<T>,
    pub translation: Vec3<T>,
}

impl Transform4<f64> {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Inverse of a rigid transform (orthonormal linear part).
    pub fn rigid_inverse(&self) -> Self {
        let rt = transpose(&self.linear);
        let t = mat_vec(&rt, self.translation);
        Self { linear: rt, translation: [-t[0], -t[1], -t[2]] }
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let l = &self.linear;
        let t = &self.translation;
        [
            [l[0][0], l[0][1], l[0][2], t[0]],
            [l[1][0], l[1][1], l[1][2], t[1]],
            [l[2][0], l[2][1], l[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

impl<T: Real> Transform4<T> {
    pub fn apply(&self, x: Vec3<T>) -> Vec3<T> {
        add(mat_vec(&self.linear, x), self.translation)
    }

    pub fn apply_dir(&self, x: Vec3<T>) -> Vec3<T> {
        mat_vec(&self.linear, x)
    }

    /// `self ∘ rhs` where `rhs` holds constants.
    pub fn compose_const(&self, rhs: &Transform4<f64>) -> Transform4<T> {
        let mut linear = [[self.linear[0][0]; 3]; 3];
        for (i, row) in linear.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = self.linear[i][0] * rhs.linear[0][j]
                    + self.linear[i][1] * rhs.linear[1][j]
                    + self.linear[i][2] * rhs.linear[2][j];
            }
        }
        let t = self.apply([
            self.translation[0].constant_like(rhs.translation[0]),
            self.translation[0].constant_like(rhs.translation[1]),
            self.translation[0].constant_like(rhs.translation[2]),
        ]);
        Transform4 { linear, translation: t }
    }

    pub fn values(&self) -> Transform4<f64> {
        Transform4 {
            linear: self.linear.map(|r| r.map(|v| v.value())),
            translation: self.translation.map(|v| v.value()),
        }
    }
}

/// Angle encoded by an unnormalized (cos, sin) pair: `atan2(z_sin, z_cos)`.
pub fn angle_from_two_param(z_cos: f64, z_sin: f64) -> Result<f64> {
    if z_cos == 0.0 && z_sin == 0.0 {
        return Err(Error::DegenerateRotation);
    }
    Ok(z_sin.atan2(z_cos))
}

/// `s_min + (s_max − s_min)·σ(raw)`.
pub fn squash_scale<T: Real>(raw: T, s_min: f64, s_max: f64) -> Result<T> {
    if !(s_min < s_max) {
        return Err(Error::BoundOrder { min: s_min, max: s_max });
    }
    Ok(raw.sigmoid() * (s_max - s_min) + s_min)
}

/// Inverse of [`squash_scale`] for a scale strictly inside the bounds.
pub fn unsquash_scale(s: f64, s_min: f64, s_max: f64) -> Result<f64> {
    if !(s_min < s_max) {
        return Err(Error::BoundOrder { min: s_min, max: s_max });
    }
    let t = (s - s_min) / (s_max - s_min);
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "scale {s} not strictly inside [{s_min}, {s_max}]"
        )));
    }
    Ok((t / (1.0 - t)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for ScaleBounds {
    fn default() -> Self {
        Self { min: 0.625, max: 1.25 }
    }
}

impl ScaleBounds {
    pub fn validate(&self) -> Result<()> {
        if self.min < self.max && self.min > 0.0 {
            Ok(())
        } else {
            Err(Error::BoundOrder { min: self.min, max: self.max })
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Position, vertical-axis rotation pair and pre-squash scale of one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectExtrinsics<T> {
    pub position: Vec3<T>,
    pub z_cos: T,
    pub z_sin: T,
    pub raw_scale: T,
    pub bounds: ScaleBounds,
}

impl ObjectExtrinsics<f64> {
    pub fn from_pose(position: Vec3<f64>, theta: f64, scale: f64, bounds: ScaleBounds) -> Result<Self> {
        Ok(Self {
            position,
            z_cos: theta.cos(),
            z_sin: theta.sin(),
            raw_scale: unsquash_scale(scale, bounds.min, bounds.max)?,
            bounds,
        })
    }

    pub fn theta(&self) -> Result<f64> {
        angle_from_two_param(self.z_cos, self.z_sin)
    }
}

impl<T: Real> ObjectExtrinsics<T> {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.z_cos.value() == 0.0 && self.z_sin.value() == 0.0 {
            return Err(Error::DegenerateRotation);
        }
        let finite = self.position.iter().chain([&self.z_cos, &self.z_sin, &self.raw_scale])
            .all(|v| v.value().is_finite());
        if !finite {
            return Err(Error::InvalidConfig("non-finite extrinsics".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> T {
        self.raw_scale.sigmoid() * (self.bounds.max - self.bounds.min) + self.bounds.min
    }

    /// (cos θ, sin θ) from the normalized pair.
    pub fn cos_sin(&self) -> (T, T) {
        let n = (self.z_cos * self.z_cos + self.z_sin * self.z_sin).sqrt();
        (self.z_cos / n, self.z_sin / n)
    }

    /// Rotation about +z by θ.
    pub fn rotation(&self) -> Mat3<T> {
        let (c, s) = self.cos_sin();
        let zero = c.constant_like(0.0);
        let one = c.constant_like(1.0);
        [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    }

    /// World-from-object: `x_w = s·R·x_o + p`.
    pub fn object_to_world(&self) -> Transform4<T> {
        let s = self.scale();
        let r = self.rotation();
        Transform4 { linear: r.map(|row| row.map(|v| v * s)), translation: self.position }
    }

    /// Object-from-world: `x_o = Rᵀ(x_w − p)/s`.
    pub fn world_to_object(&self) -> Transform4<T> {
        let inv_s = self.scale().constant_like(1.0) / self.scale();
        let rt = transpose(&self.rotation());
        let linear = rt.map(|row| row.map(|v| v * inv_s));
        let t = mat_vec(&linear, self.position);
        Transform4 { linear, translation: [-t[0], -t[1], -t[2]] }
    }

    pub fn values(&self) -> ObjectExtrinsics<f64> {
        ObjectExtrinsics {
            position: self.position.map(|v| v.value()),
            z_cos: self.z_cos.value(),
            z_sin: self.z_sin.value(),
            raw_scale: self.raw_scale.value(),
            bounds: self.bounds,
        }
    }
}

pub fn extrinsics_to_world_to_object<T: Real>(e: &ObjectExtrinsics<T>) -> Transform4<T> {
    e.world_to_object()
}

/// Object-from-camera transform: world-to-object composed with the camera pose.
pub fn camera_to_object<T: Real>(e: &ObjectExtrinsics<T>, cam: &CameraModel) -> Transform4<T> {
    e.world_to_object().compose_const(&cam.world_from_camera)
}

/// Pinhole camera with a vertical field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub world_from_camera: Transform4<f64>,
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
}

impl CameraModel {
    pub fn new(world_from_camera: Transform4<f64>, width: usize, height: usize, fov_y: f64) -> Result<Self> {
        let cam = Self { world_from_camera, width, height, fov_y };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target` with world up `up`.
    pub fn look_at(eye: Vec3<f64>, target: Vec3<f64>, up: Vec3<f64>, width: usize, height: usize, fov_y: f64) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let right = cross(forward, up);
        if norm(right) < 1e-12 {
            return Err(Error::InvalidConfig("camera up parallel to view direction".into()));
        }
        let right = normalize(right);
        let down = cross(forward, right);
        // columns are the camera axes expressed in world coordinates
        let linear = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(Transform4 { linear, translation: eye }, width, height, fov_y)
    }

    /// The default scene camera: (0, −8, 6) looking at the origin, 45° vertical fov.
    pub fn default_scene(width: usize, height: usize) -> Self {
        Self::look_at([0.0, -8.0, 6.0], [0.0; 3], [0.0, 0.0, 1.0], width, height, 45f64.to_radians())
            .expect("default camera is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image dimensions must be positive".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidConfig(format!("fov {} outside (0, π)", self.fov_y)));
        }
        if !is_rotation(&self.world_from_camera.linear, 1e-9) {
            return Err(Error::InvalidConfig("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn camera_from_world(&self) -> Transform4<f64> {
        self.world_from_camera.rigid_inverse()
    }

    pub fn position(&self) -> Vec3<f64> {
        self.world_from_camera.translation
    }

    /// Normalized coordinate of a continuous image position; `(0, 0)` is
    /// the top-left image corner and pixel `(i, j)` has its center at
    /// `(i + 0.5, j + 0.5)`.
    pub fn pixel_to_ray(&self, px: f64, py: f64) -> Result<[f64; 2]> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..=w).contains(&px) || !(0.0..=h).contains(&py) {
            return Err(Error::PixelOutOfBounds { x: px, y: py });
        }
        Ok(self.normalized(px, py))
    }

    #[inline]
    fn normalized(&self, px: f64, py: f64) -> [f64; 2] {
        let f = self.focal();
        [(px - 0.5 * self.width as f64) / f, (py - 0.5 * self.height as f64) / f]
    }

    /// Normalized coordinate through the center of pixel (`col`, `row`).
    #[inline]
    pub fn pixel_center_ray(&self, col: usize, row: usize) -> [f64; 2] {
        self.normalized(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Camera-frame point at depth `d` along the ray `u`.
    pub fn point_at_depth<T: Real>(u: [f64; 2], d: T) -> Vec3<T> {
        [d * u[0], d * u[1], d]
    }

    /// Continuous pixel position and depth of a camera-frame point.
    pub fn project_camera<T: Real>(&self, x: Vec3<T>) -> (T, T, T) {
        let f = self.focal();
        let px = x[0] / x[2] * f + 0.5 * self.width as f64;
        let py = x[1] / x[2] * f + 0.5 * self.height as f64;
        (px, py, x[2])
    }

    pub fn world_to_camera_point<T: Real>(&self, x: Vec3<T>) -> Vec3<T> {
        let cw = self.camera_from_world();
        let r = cw.linear;
        let t = cw.translation;
        [
            x[0] * r[0][0] + x[1] * r[0][1] + x[2] * r[0][2] + t[0],
            x[0] * r[1][0] + x[1] * r[1][1] + x[2] * r[1][2] + t[1],
            x[0] * r[2][0] + x[1] * r[2][1] + x[2] * r[2][2] + t[2],
        ]
    }

    /// Depth of the ground plane z = 0 along each pixel ray, clipped at `far`.
    pub fn plane_depth(&self, far: f64) -> Vec<f64> {
        let o = self.position();
        let r = self.world_from_camera.linear;
        let mut out = Vec::with_capacity(self.width * self.height);
        for row in 0..self.height {
            for col in 0..self.width {
                let u = self.pixel_center_ray(col, row);
                // world z of the camera point (d·u, d) is o_z + d·(r₂·(u,1))
                let dz = r[2][0] * u[0] + r[2][1] * u[1] + r[2][2];
                let d = if dz < 0.0 { -o[2] / dz } else { f64::INFINITY };
                out.push(if d > 0.0 && d < far { d } else { far });
            }
        }
        out
    }
}

/// The ground plane z = 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroundPlane;

impl GroundPlane {
    pub fn height_of<T: Real>(&self, x: Vec3<T>) -> T {
        x[2]
    }

    pub fn project<T: Real>(&self, x: Vec3<T>) -> Vec3<T> {
        [x[0], x[1], x[2].constant_like(0.0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn ext(p: Vec3<f64>, theta: f64, s: f64) -> ObjectExtrinsics<f64> {
        // wide bounds so s = 1 and s = 2 are interior
        ObjectExtrinsics::from_pose(p, theta, s, ScaleBounds { min: 0.25, max: 4.0 }).unwrap()
    }

    fn close(a: Vec3<f64>, b: Vec3<f64>, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn angle_examples() {
        assert_eq!(angle_from_two_param(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(angle_from_two_param(0.0, 1.0).unwrap(), FRAC_PI_2);
        assert_eq!(angle_from_two_param(-1.0, 0.0).unwrap(), PI);
        assert!(matches!(angle_from_two_param(0.0, 0.0), Err(Error::DegenerateRotation)));
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash_scale(0.0, 0.625, 1.25).unwrap(), 0.9375);
        assert!((squash_scale(20.0, 0.625, 1.25).unwrap() - 1.25).abs() < 1e-6);
        assert!((squash_scale(-20.0, 0.625, 1.25).unwrap() - 0.625).abs() < 1e-6);
        assert!(matches!(squash_scale(0.0, 1.0, 1.0), Err(Error::BoundOrder { .. })));
        let raw = unsquash_scale(1.1, 0.625, 1.25).unwrap();
        assert!((squash_scale(raw, 0.625, 1.25).unwrap() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn identity_extrinsics_give_identity_transform() {
        let t = ext([0.0; 3], 0.0, 1.0).world_to_object();
        let id = Transform4::identity();
        for i in 0..3 {
            assert!(close(t.linear[i], id.linear[i], 1e-12));
        }
        assert!(close(t.translation, [0.0; 3], 1e-12));
    }

    #[test]
    fn position_maps_to_origin() {
        let t = ext([1.0, 2.0, 0.0], 0.0, 1.0).world_to_object();
        assert!(close(t.apply([1.0, 2.0, 0.0]), [0.0; 3], 1e-12));
    }

    #[test]
    fn rotated_scaled_transform_matches_matrix_product() {
        let (theta, s) = (FRAC_PI_2, 2.0);
        let t = ext([0.0; 3], theta, s).world_to_object();
        // oracle: inverse of [sR | 0] multiplied out entry by entry
        let (c, sn) = (theta.cos(), theta.sin());
        let m = [
            [c / s, sn / s, 0.0, 0.0],
            [-sn / s, c / s, 0.0, 0.0],
            [0.0, 0.0, 1.0 / s, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let x = [1.0, 0.0, 0.0, 1.0];
        let mut expect = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                expect[i] += m[i][j] * x[j];
            }
        }
        let got = t.apply([1.0, 0.0, 0.0]);
        assert!(close(got, [expect[0], expect[1], expect[2]], 1e-12), "{got:?} vs {expect:?}");
        assert!(close(got, [0.0, -0.5, 0.0], 1e-12));
        assert_eq!(t.to_matrix()[3], [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn principal_ray_and_edges() {
        let cam = CameraModel::default_scene(64, 64);
        assert_eq!(cam.pixel_to_ray(32.0, 32.0).unwrap(), [0.0, 0.0]);
        let u = cam.pixel_to_ray(32.0, 0.0).unwrap();
        assert!((u[1] + 22.5f64.to_radians().tan()).abs() < 1e-12);
        assert_eq!(u[0], 0.0);
        assert_eq!(CameraModel::point_at_depth([0.0, 0.0], 5.0), [0.0, 0.0, 5.0]);
        assert!(cam.pixel_to_ray(64.5, 3.0).is_err());
        assert!(cam.pixel_to_ray(3.0, -0.1).is_err());
    }

    #[test]
    fn look_at_axes() {
        let cam = CameraModel::default_scene(64, 64);
        assert!(is_rotation(&cam.world_from_camera.linear, 1e-12));
        let o = cam.world_to_camera_point([0.0, 0.0, 0.0]);
        assert!(close(o, [0.0, 0.0, 10.0], 1e-12));
        // world up projects toward the top of the image (negative camera y)
        let up = cam.world_to_camera_point([0.0, 0.0, 1.0]);
        assert!(up[1] < 0.0);
    }

    #[test]
    fn identity_camera_and_extrinsics_compose_to_identity() {
        let cam = CameraModel::new(Transform4::identity(), 8, 8, 1.0).unwrap();
        let t = camera_to_object(&ext([0.0; 3], 0.0, 1.0), &cam);
        let x = [0.3, -0.2, 1.7];
        assert!(close(t.apply(x), x, 1e-15));
    }

    #[test]
    fn camera_origin_distance_in_object_frame() {
        let cam = CameraModel::default_scene(64, 64);
        for s in [1.0, 2.0, 0.5] {
            let t = camera_to_object(&ext([0.0; 3], 0.3, s), &cam);
            let o = t.apply([0.0; 3]);
            // ‖(0, −8, 6)‖ = 10 in world units, divided by the object scale
            assert!((norm(o) - 10.0 / s).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_depth_hits_origin_on_principal_ray() {
        let cam = CameraModel::default_scene(65, 65);
        let d = cam.plane_depth(12.0);
        assert!((d[32 * 65 + 32] - 10.0).abs() < 1e-12);
        assert!(d.iter().all(|&v| v > 0.0 && v <= 12.0));
        // top rows look beyond the clip distance
        assert_eq!(d[0], 12.0);
    }

    #[test]
    fn vertical_axis_is_fixed_by_rotation() {
        let e = ext([0.5, 0.1, 0.2], 1.234, 1.0);
        let r = e.rotation();
        assert!(close(mat_vec(&r, [0.0, 0.0, 1.0]), [0.0, 0.0, 1.0], 1e-15));
        assert!(is_rotation(&r, 1e-9));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unit_scale_roundtrip(
                px in -3.0f64..3.0, py in -3.0f64..3.0, pz in -1.0f64..1.0,
                theta in -3.1f64..3.1,
                x in proptest::array::uniform3(-5.0f64..5.0),
            ) {
                let e = ext([px, py, pz], theta, 1.0);
                let fwd = e.world_to_object();
                let inv = e.object_to_world();
                // s = 1 up to the squash round trip
                let back = inv.apply(fwd.apply(x));
                prop_assert!(close(back, x, 1e-10));
            }

            #[test]
            fn angle_is_scale_invariant(zc in -5.0f64..5.0, zs in -5.0f64..5.0, k in 0.01f64..100.0) {
                prop_assume!(zc != 0.0 || zs != 0.0);
                let a = angle_from_two_param(zc, zs).unwrap();
                let b = angle_from_two_param(k * zc, k * zs).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn squash_is_monotone_and_bounded(a in -30.0f64..30.0, b in -30.0f64..30.0) {
                let (sa, sb) = (squash_scale(a, 0.625, 1.25).unwrap(), squash_scale(b, 0.625, 1.25).unwrap());
                prop_assert!((0.625..=1.25).contains(&sa));
                if a < b - 1e-9 && a.abs() < 30.0 && b.abs() < 30.0 {
                    prop_assert!(sa <= sb);
                }
            }

            #[test]
            fn composition_is_associative(
                theta in -3.1f64..3.1, s in 0.3f64..3.0,
                p in proptest::array::uniform3(-2.0f64..2.0),
                eye in proptest::array::uniform3(-10.0f64..10.0),
                x in proptest::array::uniform3(-3.0f64..3.0),
            ) {
                prop_assume!(norm(eye) > 1.0);
                prop_assume!(norm(cross(eye, [0.0, 0.0, 1.0])) > 0.1);
                let cam = CameraModel::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 16, 16, 0.8).unwrap();
                let e = ext(p, theta, s);
                let combined = camera_to_object(&e, &cam).apply(x);
                let chained = e.world_to_object().apply(cam.world_from_camera.apply(x));
                prop_assert!(close(combined, chained, 1e-12));
            }
        }
    }
}
