//! Training objectives and their schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::fitting::SceneLatent;
use crate::geometry::{sub, CameraModel, Vec3};
use crate::renderer::{render_scene, ObjectParams, RayMarchConfig, NEAR_CLIP};
use crate::shape_space::{FieldSet, ShapeParams};

/// Value interpolated linearly from `start` to `end` over `steps`, then held.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl LinearSchedule {
    pub fn at(&self, t: u64) -> f64 {
        if self.steps == 0 || t >= self.steps {
            return self.end;
        }
        let f = t as f64 / self.steps as f64;
        self.start * (1.0 - f) + self.end * f
    }

    pub fn rescaled(&self, steps: u64) -> Self {
        Self { steps, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub image: f64,
    pub depth: f64,
    pub ground: f64,
    pub shape: LinearSchedule,
    pub in_view: f64,
    pub intersection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 1.0,
            depth: 0.1,
            ground: 0.01,
            shape: LinearSchedule { start: 0.025, end: 0.0025, steps: 500_000 },
            in_view: 0.005,
            intersection: 0.001,
        }
    }
}

impl LossWeights {
    /// Tabletop preset: lower depth weight and a stronger shape prior.
    pub fn tabletop() -> Self {
        Self { depth: 0.05, shape: LinearSchedule { start: 0.1, end: 0.01, steps: 500_000 }, ..Self::default() }
    }

    pub fn zero() -> Self {
        Self { image: 0.0, depth: 0.0, ground: 0.0, shape: LinearSchedule { start: 0.0, end: 0.0, steps: 1 }, in_view: 0.0, intersection: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.image, self.depth, self.ground, self.shape.start, self.shape.end, self.in_view, self.intersection];
        if all.iter().all(|&w| w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Coarse-to-fine Gaussian smoothing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurSchedule {
    pub kernel_len: usize,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub decay_steps: u64,
}

impl Default for BlurSchedule {
    fn default() -> Self {
        Self { kernel_len: 16, sigma_start: 16.0 / 3.0, sigma_end: 0.5, decay_steps: 250_000 }
    }
}

impl BlurSchedule {
    pub fn sigma(&self, t: u64) -> f64 {
        LinearSchedule { start: self.sigma_start, end: self.sigma_end, steps: self.decay_steps }.at(t)
    }
}

/// Sampled, normalized Gaussian taps.
///
/// Output pixel `i` reads input pixels `i + offset .. i + offset + len`
/// (clamped to the border). For even lengths the Gaussian is centered
/// between the two middle taps, which shifts the result by half a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub offset: isize,
    pub weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sigma: f64, len: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::NonPositiveSigma(sigma));
        }
        if len == 0 {
            return Err(Error::InvalidConfig("kernel length must be positive".into()));
        }
        let center = (len as f64 - 1.0) / 2.0;
        let mut weights: Vec<f64> = (0..len).map(|k| (-(k as f64 - center).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self { offset: -((len / 2) as isize), weights })
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable blur of one channel with replicate padding.
pub fn blur_plane<T: Real>(src: &[T], width: usize, height: usize, kernel: &GaussianKernel) -> Vec<T> {
    let mut terms: Vec<(f64, T)> = Vec::with_capacity(kernel.weights.len());
    let mut tmp = Vec::with_capacity(src.len());
    for row in 0..height {
        for col in 0..width {
            terms.clear();
            for (k, &w) in kernel.weights.iter().enumerate() {
                let c = clamp_index(col as isize + kernel.offset + k as isize, width);
                terms.push((w, src[row * width + c]));
            }
            tmp.push(T::linear_combination(&terms));
        }
    }
    let mut out = Vec::with_capacity(src.len());
    for row in 0..height {
        for col in 0..width {
            terms.clear();
            for (k, &w) in kernel.weights.iter().enumerate() {
                let r = clamp_index(row as isize + kernel.offset + k as isize, height);
                terms.push((w, tmp[r * width + col]));
            }
            out.push(T::linear_combination(&terms));
        }
    }
    out
}

/// Gaussian smoothing `G(·)` of a single-channel image.
pub fn gaussian_blur<T: Real>(src: &[T], width: usize, height: usize, sigma: f64, kernel_len: usize) -> Result<Vec<T>> {
    check_dim("blur input", width * height, src.len())?;
    let k = GaussianKernel::new(sigma, kernel_len)?;
    Ok(blur_plane(src, width, height, &k))
}

fn split_channels<T: Copy>(img: &[[T; 3]]) -> [Vec<T>; 3] {
    [0, 1, 2].map(|c| img.iter().map(|p| p[c]).collect())
}

/// Adjoint of [`blur_plane`]: scatters `grad` back through both passes.
pub fn blur_plane_adjoint(grad: &[f64], width: usize, height: usize, kernel: &GaussianKernel) -> Vec<f64> {
    let mut tmp = vec![0.0; grad.len()];
    for row in 0..height {
        for col in 0..width {
            let g = grad[row * width + col];
            for (k, &w) in kernel.weights.iter().enumerate() {
                let r = clamp_index(row as isize + kernel.offset + k as isize, height);
                tmp[r * width + col] += w * g;
            }
        }
    }
    let mut out = vec![0.0; grad.len()];
    for row in 0..height {
        for col in 0..width {
            let g = tmp[row * width + col];
            for (k, &w) in kernel.weights.iter().enumerate() {
                let c = clamp_index(col as isize + kernel.offset + k as isize, width);
                out[row * width + c] += w * g;
            }
        }
    }
    out
}

/// Mean over pixels of ‖G(Î) − G(I_gt)‖².
///
/// On a tape the whole term is one node whose partials come from the
/// blur adjoint; the value is computed exactly as on plain floats.
pub fn loss_image<T: Real>(pred: &[[T; 3]], gt: &[[f64; 3]], width: usize, height: usize, sigma: f64, kernel_len: usize) -> Result<T> {
    check_dim("image size", width * height, pred.len())?;
    check_dim("target image size", width * height, gt.len())?;
    let k = GaussianKernel::new(sigma, kernel_len)?;
    let n = (width * height) as f64;
    let g = split_channels(gt);
    if T::RECORDS {
        let values: Vec<[f64; 3]> = pred.iter().map(|p| p.map(|v| v.value())).collect();
        let p = split_channels(&values);
        let mut terms = Vec::with_capacity(3 * pred.len());
        let mut parents = Vec::with_capacity(3 * pred.len());
        let mut partials = Vec::with_capacity(3 * pred.len());
        for c in 0..3 {
            let bp = blur_plane(&p[c], width, height, &k);
            let bg = blur_plane(&g[c], width, height, &k);
            let diff: Vec<f64> = bp.iter().zip(&bg).map(|(a, b)| a - b).collect();
            terms.extend(diff.iter().map(|d| (1.0 / n, d * d)));
            let outer: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
            partials.extend(blur_plane_adjoint(&outer, width, height, &k));
            parents.extend(pred.iter().map(|px| px[c]));
        }
        return Ok(T::fused(f64::linear_combination(&terms), &parents, &partials));
    }
    let p = split_channels(pred);
    let mut terms = Vec::with_capacity(3 * pred.len());
    for c in 0..3 {
        let bp = blur_plane(&p[c], width, height, &k);
        let bg = blur_plane(&g[c], width, height, &k);
        for (a, b) in bp.into_iter().zip(bg) {
            terms.push((1.0 / n, (a - b).square()));
        }
    }
    Ok(T::linear_combination(&terms))
}

/// [`loss_image`] built from individual tape nodes; the reference for the
/// fused path.
pub fn loss_image_unfused<'t>(pred: &[[Var<'t>; 3]], gt: &[[f64; 3]], width: usize, height: usize, sigma: f64, kernel_len: usize) -> Result<Var<'t>> {
    check_dim("image size", width * height, pred.len())?;
    check_dim("target image size", width * height, gt.len())?;
    let k = GaussianKernel::new(sigma, kernel_len)?;
    let (p, g) = (split_channels(pred), split_channels(gt));
    let n = (width * height) as f64;
    let mut terms = Vec::with_capacity(3 * pred.len());
    for c in 0..3 {
        let bp = blur_plane(&p[c], width, height, &k);
        let bg = blur_plane(&g[c], width, height, &k);
        for (a, b) in bp.into_iter().zip(bg) {
            terms.push((1.0 / n, (a - b).square()));
        }
    }
    Ok(Var::linear_combination(&terms))
}

/// Mean over pixels of |G(D̂) − G(D_gt)|.
pub fn loss_depth<T: Real>(pred: &[T], gt: &[f64], width: usize, height: usize, sigma: f64, kernel_len: usize) -> Result<T> {
    check_dim("depth size", width * height, pred.len())?;
    check_dim("target depth size", width * height, gt.len())?;
    let k = GaussianKernel::new(sigma, kernel_len)?;
    let bg = blur_plane(gt, width, height, &k);
    let n = (width * height) as f64;
    if T::RECORDS {
        let values: Vec<f64> = pred.iter().map(|v| v.value()).collect();
        let bp = blur_plane(&values, width, height, &k);
        let mut sign_hash = 0u64;
        let mut terms = Vec::with_capacity(pred.len());
        let mut outer = Vec::with_capacity(pred.len());
        for (i, (a, b)) in bp.iter().zip(&bg).enumerate() {
            let d = a - b;
            let pos = d >= 0.0;
            if !pos {
                sign_hash = sign_hash.rotate_left(7) ^ (i as u64 + 1);
            }
            terms.push((1.0 / n, d.abs()));
            outer.push(if pos { 1.0 / n } else { -1.0 / n });
        }
        if let Some(first) = pred.first() {
            first.note_decision(sign_hash ^ 0xd3b7);
        }
        let partials = blur_plane_adjoint(&outer, width, height, &k);
        return Ok(T::fused(f64::linear_combination(&terms), pred, &partials));
    }
    let bp = blur_plane(pred, width, height, &k);
    let terms: Vec<(f64, T)> = bp.into_iter().zip(bg).map(|(a, b)| (1.0 / n, (a - b).abs())).collect();
    Ok(T::linear_combination(&terms))
}

fn zero_like<T: Real>(objects: &[ObjectParams<T>]) -> Option<T> {
    objects.first().map(|o| o.extrinsics.position[0].constant_like(0.0))
}

/// Sum of object-frame SDF values, evaluated at a world point.
fn sdf_world<T: Real>(obj: &ObjectParams<T>, fields: &FieldSet, x: Vec3<T>) -> T {
    let local = obj.extrinsics.world_to_object().apply(x);
    fields.sdf(&obj.shape, local)
}

/// Σᵢ max(0, −zᵢ) + max(0, −φᵢ(z′ᵢ)) with z′ᵢ the ground projection of the
/// object position.
pub fn loss_ground<T: Real>(objects: &[ObjectParams<T>], fields: &FieldSet) -> Option<T> {
    let mut acc = zero_like(objects)?;
    for obj in objects {
        let p = obj.extrinsics.position;
        let below = (-p[2]).max0();
        let foot = [p[0], p[1], p[2].constant_like(0.0)];
        let sunk = (-sdf_world(obj, fields, foot)).max0();
        acc = acc + below + sunk;
    }
    Some(acc)
}

/// Σᵢ ‖z_sh,i‖²; fixed primitives contribute nothing.
pub fn loss_shape_reg<T: Real>(objects: &[ObjectParams<T>]) -> Option<T> {
    let mut acc = zero_like(objects)?;
    for obj in objects {
        if let ShapeParams::Code(code) = &obj.shape {
            for &c in code {
                acc = acc + c * c;
            }
        }
    }
    Some(acc)
}

/// max(−min(x, w − x), 0) for a projected coordinate `x` in an extent `w`.
pub fn in_view_penalty<T: Real>(x: T, extent: f64) -> T {
    let inside = x.min(-x + extent);
    (-inside).max0()
}

/// Keeps projected object centers inside the image. Centers behind the
/// camera pay the full extent. With `both_axes` the same hinge is applied
/// to the vertical pixel coordinate.
pub fn loss_in_view<T: Real>(objects: &[ObjectParams<T>], cam: &CameraModel, both_axes: bool) -> Option<T> {
    let mut acc = zero_like(objects)?;
    let (w, h) = (cam.width as f64, cam.height as f64);
    for obj in objects {
        let pc = cam.world_to_camera_point(obj.extrinsics.position);
        if pc[2].value() <= NEAR_CLIP {
            pc[2].note_decision(0xbe41d);
            acc = acc + w;
            if both_axes {
                acc = acc + h;
            }
            continue;
        }
        let (px, py, _) = cam.project_camera(pc);
        acc = acc + in_view_penalty(px, w);
        if both_axes {
            acc = acc + in_view_penalty(py, h);
        }
    }
    Some(acc)
}

fn sorted_sum<T: Real>(mut terms: Vec<T>, like: T) -> T {
    if terms.is_empty() {
        return like.constant_like(0.0);
    }
    terms.sort_by(|a, b| a.value().total_cmp(&b.value()));
    let weighted: Vec<(f64, T)> = terms.into_iter().map(|t| (1.0, t)).collect();
    T::linear_combination(&weighted)
}

/// Σᵢ Σ_{j<i} (1/K) Σₖ max(−(φᵢ(xₖ) + φⱼ(xₖ)), 0) with `K` points evenly
/// spaced strictly between the two object centers.
///
/// Points and partial sums are arranged so that the value does not depend
/// on the order of `objects`.
pub fn loss_intersection<T: Real>(objects: &[ObjectParams<T>], fields: &FieldSet, samples: usize) -> Result<Option<T>> {
    if samples == 0 {
        return Err(Error::InvalidConfig("intersection loss needs at least one sample".into()));
    }
    let Some(like) = zero_like(objects) else { return Ok(None) };
    let denom = 2.0 * (samples + 1) as f64;
    let mut pair_terms = Vec::new();
    for i in 0..objects.len() {
        for j in 0..i {
            let (a, b) = (&objects[i], &objects[j]);
            let pa = a.extrinsics.position;
            let pb = b.extrinsics.position;
            let mid = [(pa[0] + pb[0]) * 0.5, (pa[1] + pb[1]) * 0.5, (pa[2] + pb[2]) * 0.5];
            let d = sub(pb, pa);
            let mut terms = Vec::with_capacity(samples);
            for k in 1..=samples {
                let c = (2 * k) as f64 - (samples + 1) as f64;
                let c = c / denom;
                let x = [mid[0] + d[0] * c, mid[1] + d[1] * c, mid[2] + d[2] * c];
                let phi = sdf_world(a, fields, x) + sdf_world(b, fields, x);
                terms.push((-phi).max0());
            }
            pair_terms.push(sorted_sum(terms, like) / samples as f64);
        }
    }
    Ok(Some(sorted_sum(pair_terms, like)))
}

/// RGB-D observation a scene is fitted against.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    /// Camera-frame depth, clipped at the far distance.
    pub depth: Vec<f64>,
}

impl Target {
    pub fn validate(&self, cam: &CameraModel) -> Result<()> {
        check_dim("target width", cam.width, self.width)?;
        check_dim("target height", cam.height, self.height)?;
        check_dim("target color", self.width * self.height, self.color.len())?;
        check_dim("target depth", self.width * self.height, self.depth.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub blur: BlurSchedule,
    pub march: RayMarchConfig,
    /// Apply the in-view hinge to the vertical axis as well.
    pub in_view_both_axes: bool,
    pub intersection_samples: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            blur: BlurSchedule::default(),
            march: RayMarchConfig::default(),
            in_view_both_axes: true,
            intersection_samples: 10,
        }
    }
}

impl LossConfig {
    /// Per-scene fitting: the shape prior scaled down so it stays below
    /// the image terms of a few small objects.
    pub fn fitting() -> Self {
        let mut cfg = Self::default();
        cfg.weights.shape = LinearSchedule { start: 2.5e-5, end: 2.5e-6, steps: cfg.weights.shape.steps };
        cfg
    }
}

/// Unweighted value of every loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub image: f64,
    pub depth: f64,
    pub ground: f64,
    pub shape: f64,
    pub in_view: f64,
    pub intersection: f64,
}

/// One evaluation of the weighted objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub terms: LossTerms,
    pub total: f64,
    pub sigma: f64,
    pub lambda_shape: f64,
    #[serde(skip)]
    pub gradient: Vec<f64>,
}

impl LossReport {
    /// One line of the loss log.
    pub fn log_line(&self) -> String {
        serde_json::to_string(self).expect("loss report serializes")
    }
}

/// Weighted objective of a decoded scene, generic over the scalar type.
/// Returns the total and the unweighted terms.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss<T: Real>(
    objects: &[ObjectParams<T>],
    background: [T; 3],
    target: &Target,
    cam: &CameraModel,
    fields: &FieldSet,
    cfg: &LossConfig,
    step: u64,
) -> Result<(T, LossTerms, f64, f64)> {
    cfg.weights.validate()?;
    target.validate(cam)?;
    let sigma = cfg.blur.sigma(step);
    let lambda_shape = cfg.weights.shape.at(step);
    let (_, scene) = render_scene(objects, background, cam, &cfg.march, fields)?;
    let (w, h) = (cam.width, cam.height);
    let image = loss_image(&scene.color, &target.color, w, h, sigma, cfg.blur.kernel_len)?;
    let depth = loss_depth(&scene.depth, &target.depth, w, h, sigma, cfg.blur.kernel_len)?;
    let zero = background[0].constant_like(0.0);
    let ground = loss_ground(objects, fields).unwrap_or(zero);
    let shape = loss_shape_reg(objects).unwrap_or(zero);
    let in_view = loss_in_view(objects, cam, cfg.in_view_both_axes).unwrap_or(zero);
    let intersection = loss_intersection(objects, fields, cfg.intersection_samples)?.unwrap_or(zero);
    let wts = &cfg.weights;
    let total = T::linear_combination(&[
        (wts.image, image),
        (wts.depth, depth),
        (wts.ground, ground),
        (lambda_shape, shape),
        (wts.in_view, in_view),
        (wts.intersection, intersection),
    ]);
    let terms = LossTerms {
        image: image.value(),
        depth: depth.value(),
        ground: ground.value(),
        shape: shape.value(),
        in_view: in_view.value(),
        intersection: intersection.value(),
    };
    Ok((total, terms, sigma, lambda_shape))
}

/// Renders the latent scene on a tape and returns every term with the
/// gradient of the weighted total w.r.t. the flat latent vector.
pub fn total_loss(latent: &SceneLatent, target: &Target, cam: &CameraModel, fields: &FieldSet, cfg: &LossConfig, step: u64) -> Result<LossReport> {
    let tape = Tape::new();
    let leaves = tape.vars(&latent.params);
    let (objects, background) = latent.decode(&leaves)?;
    let (total, terms, sigma, lambda_shape) = scene_loss(&objects, background, target, cam, fields, cfg, step)?;
    let gradient = tape.gradient_of(total, &leaves)?;
    Ok(LossReport { step, terms, total: total.value(), sigma, lambda_shape, gradient })
}

/// [`total_loss`] as a closure over a tape, for [`crate::autodiff::gradcheck`].
pub fn total_loss_on_tape<'t>(
    latent: &SceneLatent,
    leaves: &[Var<'t>],
    target: &Target,
    cam: &CameraModel,
    fields: &FieldSet,
    cfg: &LossConfig,
    step: u64,
) -> Result<Var<'t>> {
    let (objects, background) = latent.decode(leaves)?;
    Ok(scene_loss(&objects, background, target, cam, fields, cfg, step)?.0)
}

/// Value-only evaluation of the objective.
pub fn total_loss_value(latent: &SceneLatent, target: &Target, cam: &CameraModel, fields: &FieldSet, cfg: &LossConfig, step: u64) -> Result<(f64, LossTerms)> {
    let (objects, background) = latent.decode(&latent.params)?;
    let (total, terms, _, _) = scene_loss(&objects, background, target, cam, fields, cfg, step)?;
    Ok((total, terms))
}
