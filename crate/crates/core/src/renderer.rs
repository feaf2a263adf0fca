//! Per-object SDF raycasting and z-buffered scene composition.
//!
//! Each ray samples the signed distance at `steps` equidistant depths and
//! stops at the first pair with a sign change. The surface depth is then
//! linearly interpolated between the two bracketing samples. The sample
//! search runs on plain values; only the bracketing samples and the
//! interpolation are evaluated in the caller's scalar type, so on a tape
//! the depth is differentiable through the SDF values while the choice of
//! bracket is a recorded discrete decision.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::geometry::{camera_to_object, CameraModel, GroundPlane, ObjectExtrinsics, Transform4, Vec3};
use crate::shape_space::{eval_texture, FieldSet, ShapeParams, TextureParams};

/// Depths closer than this are clipped when marching.
pub const NEAR_CLIP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MarchInterval {
    /// March between the nearest and farthest corner depths of the
    /// object's projected bounding box.
    BoundingBox,
    /// March `[near, far]` for every object.
    Fixed { near: f64 },
    /// March each ray between its entry into and exit from the posed box
    /// around the zero level set; rays that miss it are not marched.
    RayBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayMarchConfig {
    pub steps: usize,
    /// Miss depth and depth clip.
    pub far: f64,
    pub interval: MarchInterval,
    /// Only march pixels inside the projected bounding box.
    pub cull_to_roi: bool,
}

impl Default for RayMarchConfig {
    fn default() -> Self {
        Self { steps: 12, far: 12.0, interval: MarchInterval::RayBox, cull_to_roi: true }
    }
}

impl RayMarchConfig {
    /// Fine marching used for ground-truth renders.
    pub fn ground_truth() -> Self {
        Self { steps: 96, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 ray steps, got {}", self.steps)));
        }
        if !(self.far > 0.0) {
            return Err(Error::InvalidConfig(format!("far depth must be positive, got {}", self.far)));
        }
        if let MarchInterval::Fixed { near } = self.interval {
            if !(near > 0.0 && near < self.far) {
                return Err(Error::InvalidConfig(format!("fixed near {near} outside (0, far)")));
            }
        }
        Ok(())
    }
}

/// Everything the renderer needs to know about one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectParams<T> {
    pub shape: ShapeParams<T>,
    pub texture: TextureParams<T>,
    pub extrinsics: ObjectExtrinsics<T>,
}

impl<T: Real> ObjectParams<T> {
    pub fn shape_values(&self) -> ShapeParams<f64> {
        match &self.shape {
            ShapeParams::Primitive(p) => ShapeParams::Primitive(*p),
            ShapeParams::Code(c) => ShapeParams::Code(c.iter().map(|v| v.value()).collect()),
        }
    }

    pub fn validate(&self, fields: &FieldSet) -> Result<()> {
        self.extrinsics.validate()?;
        fields.validate_shape(&self.shape)?;
        fields.validate_texture(&self.texture)
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` plus the depth interval to march.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi<T> {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub t_near: T,
    pub t_far: T,
}

impl<T> Roi<T> {
    pub fn contains(&self, col: usize, row: usize) -> bool {
        (self.x0..self.x1).contains(&col) && (self.y0..self.y1).contains(&row)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Projects the eight corners of the posed bounding cube.
///
/// Returns `None` when the box lies entirely behind the near clip or
/// projects outside the image.
pub fn project_bbox_roi<T: Real>(half: [T; 3], ext: &ObjectExtrinsics<T>, cam: &CameraModel, cfg: &RayMarchConfig) -> Option<Roi<T>> {
    let to_world = ext.object_to_world();
    let mut depths: Vec<T> = Vec::with_capacity(8);
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut any_behind = false;
    for corner in 0..8 {
        let sign = |bit: usize| if corner >> bit & 1 == 1 { 1.0 } else { -1.0 };
        let local = [half[0] * sign(0), half[1] * sign(1), half[2] * sign(2)];
        let pc = cam.world_to_camera_point(to_world.apply(local));
        let z = pc[2].value();
        if z <= NEAR_CLIP {
            any_behind = true;
        } else {
            let (px, py, _) = cam.project_camera(pc.map(|v| v.value()));
            xmin = xmin.min(px);
            xmax = xmax.max(px);
            ymin = ymin.min(py);
            ymax = ymax.max(py);
        }
        depths.push(pc[2]);
    }
    let mut t_near = depths[0];
    let mut t_far = depths[0];
    for &d in &depths[1..] {
        t_near = t_near.min(d);
        t_far = t_far.max(d);
    }
    if t_far.value() <= NEAR_CLIP {
        return None;
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    if any_behind {
        // a corner crosses the near clip: fall back to the whole image
        xmin = 0.0;
        ymin = 0.0;
        xmax = w;
        ymax = h;
        t_near = t_near.max(t_near.constant_like(NEAR_CLIP));
    }
    let (t_near, t_far) = match cfg.interval {
        MarchInterval::BoundingBox | MarchInterval::RayBox => (t_near, t_far.min(t_far.constant_like(cfg.far))),
        MarchInterval::Fixed { near } => (t_near.constant_like(near), t_near.constant_like(cfg.far)),
    };
    if t_near.value() >= t_far.value() {
        return None;
    }
    // pixel centers inside [min, max]
    let x0 = (xmin - 0.5).ceil().max(0.0);
    let x1 = ((xmax - 0.5).floor() + 1.0).min(w);
    let y0 = (ymin - 0.5).ceil().max(0.0);
    let y1 = ((ymax - 0.5).floor() + 1.0).min(h);
    if !(x0 < x1 && y0 < y1) {
        return None;
    }
    Some(Roi { x0: x0 as usize, y0: y0 as usize, x1: x1 as usize, y1: y1 as usize, t_near, t_far })
}

/// Depth interval where the camera ray `u` crosses the cube of half
/// extents `half` in object space, clipped to `[lo, hi]`.
fn ray_box_interval<T: Real>(to_obj: &Transform4<T>, u: [f64; 2], half: [T; 3], lo: T, hi: T) -> Option<(T, T)> {
    let origin = to_obj.translation;
    let dir = to_obj.apply_dir([lo.constant_like(u[0]), lo.constant_like(u[1]), lo.constant_like(1.0)]);
    let (mut enter, mut exit) = (lo, hi);
    for k in 0..3 {
        let (o, d, h) = (origin[k], dir[k], half[k]);
        if d.value().abs() < 1e-12 {
            if o.value().abs() > h.value() {
                return None;
            }
            continue;
        }
        let a = (-h - o) / d;
        let b = (h - o) / d;
        let (t0, t1) = if a.value() <= b.value() { (a, b) } else { (b, a) };
        enter = enter.max(t0);
        exit = exit.min(t1);
    }
    (enter.value() < exit.value()).then_some((enter, exit))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarchResult<T> {
    /// Surface at `depth`, bracketed by samples `bracket` and `bracket + 1`.
    Hit { depth: T, bracket: usize },
    Miss,
}

/// Finds the first sign change of the SDF along a ray.
///
/// `probe` evaluates φ at a depth on plain values for the search; `eval`
/// evaluates φ in the caller's scalar type for the two bracketing
/// samples. A ray whose first sample is already inside hits at `t_near`.
pub fn ray_march_zero_crossing<T: Real>(
    t_near: T,
    t_far: T,
    steps: usize,
    mut probe: impl FnMut(f64) -> f64,
    mut eval: impl FnMut(T) -> T,
) -> MarchResult<T> {
    debug_assert!(steps >= 2);
    let step = (t_far - t_near) / (steps - 1) as f64;
    let (near_v, step_v) = (t_near.value(), step.value());
    let depth_v = |j: usize| near_v + step_v * j as f64;
    let mut prev = probe(near_v);
    if prev <= 0.0 {
        return MarchResult::Hit { depth: t_near, bracket: 0 };
    }
    for j in 0..steps - 1 {
        let next = probe(depth_v(j + 1));
        if prev > 0.0 && next <= 0.0 {
            let d_j = t_near + step * j as f64;
            let d_k = t_near + step * (j + 1) as f64;
            let phi_j = eval(d_j);
            let phi_k = eval(d_k);
            let depth = d_j + step * (phi_j / (phi_j - phi_k));
            return MarchResult::Hit { depth, bracket: j };
        }
        prev = next;
    }
    MarchResult::Miss
}

/// Color, depth and occlusion mask of one object, row-major.
#[derive(Debug, Clone)]
pub struct ObjectRender<T> {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[T; 3]>,
    pub depth: Vec<T>,
    pub mask: Vec<bool>,
    pub roi: Option<Roi<T>>,
    /// Number of rays marched.
    pub marched: usize,
}

impl<T: Real> ObjectRender<T> {
    fn empty(width: usize, height: usize, like: T, far: f64) -> Self {
        let far = like.constant_like(far);
        let zero = like.constant_like(0.0);
        Self {
            width,
            height,
            color: vec![[zero; 3]; width * height],
            depth: vec![far; width * height],
            mask: vec![false; width * height],
            roi: None,
            marched: 0,
        }
    }

    pub fn depth_values(&self) -> Vec<f64> {
        self.depth.iter().map(|d| d.value()).collect()
    }
}

/// Raycasts one object: `(I_i, D_i, M_i) = f(z_i)`.
pub fn render_object<T: Real>(obj: &ObjectParams<T>, cam: &CameraModel, cfg: &RayMarchConfig, fields: &FieldSet) -> Result<ObjectRender<T>> {
    cfg.validate()?;
    obj.validate(fields)?;
    let like = obj.extrinsics.position[0];
    let (w, h) = (cam.width, cam.height);
    let mut out = ObjectRender::empty(w, h, like, cfg.far);

    let half = fields.bbox_half_extent(&obj.shape, like);
    let Some(roi) = project_bbox_roi(half, &obj.extrinsics, cam, cfg) else {
        like.note_decision(u64::MAX);
        return Ok(out);
    };
    let rect = if cfg.cull_to_roi { (roi.x0, roi.y0, roi.x1, roi.y1) } else { (0, 0, w, h) };
    like.note_decision(((rect.0 as u64) << 48) ^ ((rect.1 as u64) << 32) ^ ((rect.2 as u64) << 16) ^ rect.3 as u64);

    let to_obj = camera_to_object(&obj.extrinsics, cam);
    let to_obj_v = to_obj.values();
    let shape_v = obj.shape_values();
    let surface = fields.surface_half_extent(&obj.shape, like);
    for row in rect.1..rect.3 {
        for col in rect.0..rect.2 {
            let u = cam.pixel_center_ray(col, row);
            let (t_near, t_far) = match cfg.interval {
                MarchInterval::RayBox => match ray_box_interval(&to_obj, u, surface, roi.t_near, roi.t_far) {
                    Some(t) => t,
                    None => {
                        out.marched += 1;
                        like.note_decision(((row * w + col) as u64) << 8 | 0xfe);
                        continue;
                    }
                },
                _ => (roi.t_near, roi.t_far),
            };
            let hit = ray_march_zero_crossing(
                t_near,
                t_far,
                cfg.steps,
                |d| fields.sdf(&shape_v, to_obj_v.apply(CameraModel::point_at_depth(u, d))),
                |d| fields.sdf(&obj.shape, to_obj.apply(CameraModel::point_at_depth(u, d))),
            );
            out.marched += 1;
            let idx = row * w + col;
            match hit {
                MarchResult::Hit { depth, bracket } => {
                    like.note_decision(((idx as u64) << 8) | bracket as u64);
                    let x_obj = to_obj.apply(CameraModel::point_at_depth(u, depth));
                    out.color[idx] = eval_texture(&obj.texture, fields.texture(), x_obj)?;
                    out.depth[idx] = depth;
                    out.mask[idx] = true;
                }
                MarchResult::Miss => like.note_decision(((idx as u64) << 8) | 0xff),
            }
        }
    }
    out.roi = Some(roi);
    Ok(out)
}

/// Composed color, depth and visibility masks of a scene.
#[derive(Debug, Clone)]
pub struct SceneRender<T> {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[T; 3]>,
    pub depth: Vec<T>,
    /// Visible object per pixel; `None` is background.
    pub winner: Vec<Option<usize>>,
}

impl<T: Real> SceneRender<T> {
    pub fn object_count_hint(&self) -> usize {
        self.winner.iter().flatten().max().map_or(0, |m| m + 1)
    }

    /// Composed (visible) mask of object `i`.
    pub fn object_mask(&self, i: usize) -> Vec<bool> {
        self.winner.iter().map(|w| *w == Some(i)).collect()
    }

    pub fn background_mask(&self) -> Vec<bool> {
        self.winner.iter().map(|w| w.is_none()).collect()
    }

    pub fn color_values(&self) -> Vec<[f64; 3]> {
        self.color.iter().map(|c| c.map(|v| v.value())).collect()
    }

    pub fn depth_values(&self) -> Vec<f64> {
        self.depth.iter().map(|d| d.value()).collect()
    }

    /// Instance-id raster: 0 background, `i + 1` for object `i`.
    pub fn instance_ids(&self) -> Vec<u8> {
        self.winner.iter().map(|w| w.map_or(0, |i| (i + 1).min(255) as u8)).collect()
    }
}

/// Z-buffers object renders over the background plane.
///
/// Every pixel starts as background (color `background`, ground-plane
/// depth clipped at `far`). The object hit with the smallest depth below
/// the current value wins; ties go to the lowest object index.
pub fn compose_scene<T: Real>(renders: &[ObjectRender<T>], background: [T; 3], cam: &CameraModel, far: f64, _ground: GroundPlane) -> Result<SceneRender<T>> {
    let (w, h) = (cam.width, cam.height);
    for r in renders {
        if r.width != w || r.height != h {
            return Err(Error::DimensionMismatch { what: "object render size", expected: w * h, got: r.width * r.height });
        }
    }
    let plane = cam.plane_depth(far);
    let like = background[0];
    let mut color = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut winner = Vec::with_capacity(w * h);
    for (idx, &plane_d) in plane.iter().enumerate() {
        let mut best = plane_d;
        let mut who = None;
        for (i, r) in renders.iter().enumerate() {
            if r.mask[idx] {
                let d = r.depth[idx].value();
                if d < best {
                    best = d;
                    who = Some(i);
                }
            }
        }
        match who {
            Some(i) => {
                color.push(renders[i].color[idx]);
                depth.push(renders[i].depth[idx]);
                like.note_decision(((idx as u64) << 8) | i as u64);
            }
            None => {
                color.push(background);
                depth.push(like.constant_like(plane_d));
            }
        }
        winner.push(who);
    }
    Ok(SceneRender { width: w, height: h, color, depth, winner })
}

/// Renders every object and composes them.
pub fn render_scene<T: Real>(
    objects: &[ObjectParams<T>],
    background: [T; 3],
    cam: &CameraModel,
    cfg: &RayMarchConfig,
    fields: &FieldSet,
) -> Result<(Vec<ObjectRender<T>>, SceneRender<T>)> {
    let renders = objects.iter().map(|o| render_object(o, cam, cfg, fields)).collect::<Result<Vec<_>>>()?;
    let scene = compose_scene(&renders, background, cam, cfg.far, GroundPlane)?;
    Ok((renders, scene))
}

/// World-frame position of the camera-frame point at `depth` through pixel (`col`, `row`).
pub fn back_project(cam: &CameraModel, col: usize, row: usize, depth: f64) -> Vec3<f64> {
    let u = cam.pixel_center_ray(col, row);
    cam.world_from_camera.apply(CameraModel::point_at_depth(u, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::geometry::{ScaleBounds, Transform4};
    use crate::shape_space::{AnalyticShape, PrimitiveKind};

    fn forward_camera(size: usize) -> CameraModel {
        // camera at the origin looking down +z world axis
        CameraModel::new(Transform4::identity(), size, size, 45f64.to_radians()).unwrap()
    }

    fn sphere_at(p: [f64; 3]) -> ObjectParams<f64> {
        ObjectParams {
            shape: ShapeParams::Primitive(AnalyticShape::unit(PrimitiveKind::Sphere)),
            texture: TextureParams::Constant([0.2, 0.5, 0.9]),
            extrinsics: ObjectExtrinsics::from_pose(p, 0.0, 1.0, ScaleBounds { min: 0.5, max: 2.0 }).unwrap(),
        }
    }

    #[test]
    fn half_space_is_interpolated_exactly() {
        for steps in [2, 3, 12, 40] {
            for c in [1.3, 4.0, 7.77] {
                let r = ray_march_zero_crossing(0.5, 11.0, steps, |d| c - d, |d: f64| c - d);
                match r {
                    MarchResult::Hit { depth, .. } => assert!((depth - c).abs() < 1e-12, "{steps} {c} {depth}"),
                    MarchResult::Miss => panic!("missed"),
                }
            }
        }
    }

    #[test]
    fn start_inside_hits_at_near() {
        let r = ray_march_zero_crossing(2.0, 5.0, 12, |_| -1.0, |d: f64| d);
        assert_eq!(r, MarchResult::Hit { depth: 2.0, bracket: 0 });
    }

    #[test]
    fn principal_ray_sphere_hit() {
        let cam = forward_camera(65);
        let cfg = RayMarchConfig::default();
        let obj = sphere_at([0.0, 0.0, 5.0]);
        let r = render_object(&obj, &cam, &cfg, &FieldSet::default()).unwrap();
        let c = 32 * 65 + 32;
        assert!(r.mask[c]);
        assert!((r.depth[c] - 4.6).abs() < 0.01, "{}", r.depth[c]);
        assert!(!r.mask[0] && r.depth[0] == 12.0);
        for (i, m) in r.mask.iter().enumerate() {
            if *m {
                assert_eq!(r.color[i], [0.2, 0.5, 0.9]);
            }
        }
    }

    #[test]
    fn roi_is_centered_for_centered_object() {
        let cam = forward_camera(64);
        let obj = sphere_at([0.0, 0.0, 8.0]);
        let half = AnalyticShape::unit(PrimitiveKind::Sphere).bbox_half_extent();
        let roi = project_bbox_roi(half, &obj.extrinsics, &cam, &RayMarchConfig::default()).unwrap();
        assert_eq!(roi.x0 + roi.x1, 64);
        assert_eq!(roi.y0 + roi.y1, 64);
    }

    #[test]
    fn out_of_frustum_and_behind_camera_are_empty() {
        let cam = forward_camera(32);
        for p in [[50.0, 0.0, 5.0], [0.0, 0.0, -5.0]] {
            let r = render_object(&sphere_at(p), &cam, &RayMarchConfig::default(), &FieldSet::default()).unwrap();
            assert_eq!(r.marched, 0);
            assert!(r.mask.iter().all(|m| !m));
            assert!(r.depth.iter().all(|&d| d == 12.0));
        }
    }

    #[test]
    fn hit_depth_gradient_tracks_translation() {
        let cam = forward_camera(33);
        let cfg = RayMarchConfig::default();
        let tape = Tape::new();
        let p = tape.vars(&[0.0, 0.0, 5.0]);
        let base = sphere_at([0.0, 0.0, 5.0]).extrinsics;
        let obj = ObjectParams {
            shape: ShapeParams::Primitive(AnalyticShape::unit(PrimitiveKind::Sphere)),
            texture: TextureParams::Constant([tape.constant(0.5); 3]),
            extrinsics: ObjectExtrinsics {
                position: [p[0], p[1], p[2]],
                z_cos: tape.constant(1.0),
                z_sin: tape.constant(0.0),
                raw_scale: tape.constant(base.raw_scale),
                bounds: base.bounds,
            },
        };
        let r = render_object(&obj, &cam, &cfg, &FieldSet::default()).unwrap();
        let c = 16 * 33 + 16;
        let g = tape.gradient_of(r.depth[c], &p).unwrap();
        assert!((g[2] - 1.0).abs() < 1e-3, "{g:?}");
    }

    #[test]
    fn fixed_interval_agrees_near_surface() {
        let cam = forward_camera(33);
        let obj = sphere_at([0.0, 0.0, 5.0]);
        let cfg = RayMarchConfig { steps: 400, interval: MarchInterval::Fixed { near: 0.1 }, ..Default::default() };
        let r = render_object(&obj, &cam, &cfg, &FieldSet::default()).unwrap();
        assert!((r.depth[16 * 33 + 16] - 4.6).abs() < 1e-3);
    }

    #[test]
    fn compose_with_no_objects_is_background() {
        let cam = CameraModel::default_scene(16, 16);
        let s = compose_scene::<f64>(&[], [0.1, 0.2, 0.3], &cam, 12.0, GroundPlane).unwrap();
        assert!(s.color.iter().all(|c| *c == [0.1, 0.2, 0.3]));
        assert_eq!(s.depth, cam.plane_depth(12.0));
        assert!(s.background_mask().iter().all(|&b| b));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cam = forward_camera(8);
        let bad = RayMarchConfig { steps: 1, ..Default::default() };
        assert!(render_object(&sphere_at([0.0, 0.0, 5.0]), &cam, &bad, &FieldSet::default()).is_err());
    }
}
