use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::latent::{logit, SceneLatent, ShapeSlot, SlotLayout, TextureSlot, EXTRINSIC_LEN};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, ObjectExtrinsics, ScaleBounds};
use crate::losses::{gaussian_blur, loss_ground, loss_intersection, total_loss, LossConfig, LossReport, Target};
use crate::renderer::{render_object, render_scene, ObjectParams, SceneRender};
use crate::shape_space::{AnalyticFamily, AnalyticShape, FieldSet, PrimitiveKind, ShapeModel, ShapeParams, DEFAULT_SHAPE_DIM, SHAPE_HALF_EXTENT};

/// Residual-guided slot seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitPolicy {
    /// Smoothing applied to the residual before taking its maximum.
    pub residual_sigma: f64,
    /// Weight of the absolute depth residual relative to the color residual.
    pub depth_weight: f64,
    /// Cap on the absolute depth residual, so silhouette edges do not
    /// outweigh object interiors.
    #[serde(default = "unbounded")]
    pub depth_cap: f64,
    /// Blurred residual below which the target counts as explained.
    pub min_residual: f64,
    /// Residual blobs with fewer pixels also count as explained.
    #[serde(default)]
    pub min_area: usize,
    /// Fraction of the local raw peak that bounds the residual blob.
    pub blob_fraction: f64,
    /// Largest target depth jump between neighbors inside one blob.
    #[serde(default = "unbounded")]
    pub depth_step: f64,
    /// Multiplier on the scale read off the blob extent.
    pub size_factor: f64,
    /// Half-width of the ground-position grid searched around the seed;
    /// zero disables the search.
    pub search_radius: f64,
    /// Grid points per axis; halved spacing on every further round.
    pub search_grid: usize,
    pub search_rounds: usize,
    /// Rotations tried over a quarter turn.
    pub search_angles: usize,
    /// Relative scale steps tried on each side of the current scale.
    pub search_scales: usize,
    /// Vertical axis scales tried per primitive in the analytic family.
    pub search_heights: Vec<f64>,
    /// Softmax weight of the chosen primitive in a searched family code.
    pub search_sharpness: f64,
}

fn unbounded() -> f64 {
    f64::INFINITY
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self { residual_sigma: 2.0, depth_weight: 1.0, depth_cap: 1.0, min_residual: 0.05, min_area: 10, blob_fraction: 0.3, depth_step: 0.3, size_factor: 1.0, search_radius: 0.3, search_grid: 5, search_rounds: 3, search_angles: 4, search_scales: 1, search_heights: vec![0.8, 1.0, 1.2], search_sharpness: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of object slots N.
    pub slots: usize,
    /// Optimization steps after each slot is seeded.
    pub steps_per_slot: u64,
    /// Steps of the final joint refinement, run at end-of-schedule weights.
    pub final_steps: u64,
    /// Step budget the blur and λ_sh schedules are stretched over; `None`
    /// uses all per-slot steps. A fixed budget keeps parked surplus slots
    /// from changing the fit of the active ones.
    pub schedule_steps: Option<u64>,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub shape_dim: usize,
    pub scale_bounds: ScaleBounds,
    pub init: InitPolicy,
    pub seed: u64,
    /// Keep a copy of the latents every this many optimization steps.
    #[serde(default)]
    pub snapshot_every: Option<u64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            slots: 3,
            steps_per_slot: 20,
            final_steps: 600,
            schedule_steps: Some(20),
            adam: AdamConfig::FIT,
            loss: LossConfig::fitting(),
            shape_dim: DEFAULT_SHAPE_DIM,
            scale_bounds: ScaleBounds::default(),
            init: InitPolicy::default(),
            seed: 0,
            snapshot_every: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::InvalidConfig("fit needs at least one slot".into()));
        }
        if self.steps_per_slot == 0 || self.schedule_steps == Some(0) {
            return Err(Error::InvalidConfig("fit step budgets must be at least 1".into()));
        }
        if !(self.init.residual_sigma > 0.0) {
            return Err(Error::NonPositiveSigma(self.init.residual_sigma));
        }
        self.scale_bounds.validate()?;
        self.loss.weights.validate()?;
        self.loss.march.validate()
    }

    fn schedule_budget(&self) -> u64 {
        self.schedule_steps.unwrap_or(self.slots as u64 * self.steps_per_slot)
    }

    /// Loss settings with both schedules stretched over the fit budget.
    pub fn scheduled_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        let budget = self.schedule_budget();
        loss.blur.decay_steps = budget;
        loss.weights.shape = loss.weights.shape.rescaled(budget);
        loss
    }
}

/// Where to put the next slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotSeed {
    pub extrinsics: ObjectExtrinsics<f64>,
    pub pixel: (usize, usize),
    pub color: [f64; 3],
    pub residual: f64,
    /// Pixels in the residual blob.
    pub area: usize,
}

/// Seeds the next slot at the strongest blurred residual between the
/// target and the current render.
///
/// The residual blob around the peak is grown over pixels whose raw
/// residual stays above `blob_fraction` of the local peak, without crossing
/// a target depth jump larger than `depth_step`. Its centroid is
/// back-projected with the median target depth, pushed back along the ray
/// by the object radius and dropped onto the plane. The scale follows the
/// blob's angular extent, clamped to the bounds; θ = 0. Blobs smaller than
/// `min_area` are skipped in favor of the next peak.
pub fn init_next_slot(target: &Target, current: &SceneRender<f64>, cam: &CameraModel, bounds: ScaleBounds, policy: &InitPolicy) -> Result<SlotSeed> {
    target.validate(cam)?;
    let (w, h) = (cam.width, cam.height);
    if current.width != w || current.height != h {
        return Err(Error::DimensionMismatch { what: "current render", expected: w * h, got: current.width * current.height });
    }
    let residual: Vec<f64> = (0..w * h)
        .map(|i| {
            let c = target.color[i];
            let p = current.color[i];
            let dc = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)).sqrt();
            dc + policy.depth_weight * (target.depth[i] - current.depth[i]).abs().min(policy.depth_cap)
        })
        .collect();
    let radius = (3.0 * policy.residual_sigma).ceil() as usize;
    let mut blurred = gaussian_blur(&residual, w, h, policy.residual_sigma, 2 * radius + 1)?;
    let (best, value, peak, blob) = loop {
        let (best, value) = blurred.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if !(value >= policy.min_residual) {
            return Err(Error::FullyExplained);
        }
        let (col, row) = (best % w, best / w);
        let window = |r: usize, c: usize| (row.saturating_sub(radius)..(row + radius + 1).min(h)).contains(&r) && (col.saturating_sub(radius)..(col + radius + 1).min(w)).contains(&c);
        let mut peak = best;
        for i in 0..w * h {
            if window(i / w, i % w) && residual[i] > residual[peak] {
                peak = i;
            }
        }
        let floor = policy.blob_fraction * residual[peak];
        let blob = grow_blob(w, h, peak, |from, to| residual[to] >= floor && (target.depth[to] - target.depth[from]).abs() <= policy.depth_step);
        if blob.len() >= policy.min_area {
            break (best, value, peak, blob);
        }
        // too small to be an object: rule it out and look again
        blurred[best] = f64::NEG_INFINITY;
        for &i in &blob {
            blurred[i] = f64::NEG_INFINITY;
        }
    };
    let (col, row) = (best % w, best / w);
    let (mut sc, mut sr) = (0.0, 0.0);
    for &i in &blob {
        sc += (i % w) as f64 + 0.5;
        sr += (i / w) as f64 + 0.5;
    }
    let n = blob.len() as f64;
    let mut depths: Vec<f64> = blob.iter().map(|&i| target.depth[i]).collect();
    depths.sort_by(f64::total_cmp);
    let depth = depths[depths.len() / 2];
    let u = cam.pixel_to_ray(sc / n, sr / n)?;
    let hit = cam.world_from_camera.apply(CameraModel::point_at_depth(u, depth));

    let extent = n.sqrt() * depth / cam.focal();
    let s = (policy.size_factor * extent / (2.0 * SHAPE_HALF_EXTENT)).clamp(bounds.min * 1.0001, bounds.max * 0.9999);
    let o = cam.position();
    let ray = [hit[0] - o[0], hit[1] - o[1]];
    let len = ray[0].hypot(ray[1]).max(1e-12);
    let back = SHAPE_HALF_EXTENT * s;
    let position = [hit[0] + ray[0] / len * back, hit[1] + ray[1] / len * back, SHAPE_HALF_EXTENT * s];
    let extrinsics = ObjectExtrinsics::from_pose(position, 0.0, s, bounds)?;
    Ok(SlotSeed { extrinsics, pixel: (col, row), color: target.color[peak], residual: value, area: blob.len() })
}

/// Four-connected region around `seed` over steps that `joins` accepts.
fn grow_blob(w: usize, h: usize, seed: usize, joins: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut seen = vec![false; w * h];
    let mut stack = vec![seed];
    let mut out = Vec::new();
    seen[seed] = true;
    while let Some(i) = stack.pop() {
        out.push(i);
        let (c, r) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !seen[j] && joins(i, j) {
                seen[j] = true;
                stack.push(j);
            }
        };
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < w {
            visit(i + 1);
        }
        if r > 0 {
            visit(i - w);
        }
        if r + 1 < h {
            visit(i + w);
        }
    }
    out.sort_unstable();
    out
}

/// Result of [`fit_scene`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub latent: SceneLatent,
    /// One report per optimization step, gradients dropped.
    pub history: Vec<LossReport>,
    /// Loss at the start of the final refinement.
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Slots seeded from the residual; the rest were parked.
    pub active_slots: usize,
    /// `(steps taken, latents)` at every snapshot interval.
    pub snapshots: Vec<(u64, SceneLatent)>,
}

/// Position for slots that are not needed: behind the camera and clear of
/// the ground, where every loss term is constant.
fn parked_position(cam: &CameraModel, k: usize) -> [f64; 3] {
    let back = cam.world_from_camera.apply_dir([0.0, 0.0, -1.0]);
    let o = cam.position();
    let d = 4.0 + 2.0 * k as f64;
    [o[0] + back[0] * d, o[1] + back[1] * d, (o[2] + back[2] * d).max(2.0)]
}

fn neutral_shape(fields: &FieldSet, dim: usize) -> ShapeSlot {
    match &fields.shape {
        ShapeModel::Family(_) => ShapeSlot::Code { dim: dim.max(AnalyticFamily::MIN_CODE_DIM) },
        ShapeModel::Mlp(m) => ShapeSlot::Code { dim: m.latent_dim },
    }
}

fn new_slot(fields: &FieldSet, cfg: &FitConfig, ext: &ObjectExtrinsics<f64>, color: [f64; 3], rng: &mut ChaCha8Rng) -> (SlotLayout, Vec<f64>) {
    let shape = neutral_shape(fields, cfg.shape_dim);
    let texture = match fields.texture() {
        Some(m) => TextureSlot::Code { dim: m.latent_dim },
        None => TextureSlot::Constant,
    };
    let layout = SlotLayout { shape, texture };
    let mut values = vec![0.0; layout.shape_len()];
    match texture {
        TextureSlot::Constant => values.extend(color.map(logit)),
        TextureSlot::Code { dim } => values.extend((0..dim).map(|_| rng.gen_range(-0.01..0.01))),
    }
    values.extend([ext.position[0], ext.position[1], ext.position[2], ext.z_cos, ext.z_sin, ext.raw_scale]);
    (layout, values)
}

/// Mean target color over pixels that show the bare ground plane.
fn background_seed(target: &Target, cam: &CameraModel, far: f64) -> [f64; 3] {
    let plane = cam.plane_depth(far);
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (i, &d) in plane.iter().enumerate() {
        if (target.depth[i] - d).abs() <= 1e-3 * d.max(1.0) {
            for c in 0..3 {
                acc[c] += target.color[i][c];
            }
            n += 1;
        }
    }
    if n == 0 {
        [0.5; 3]
    } else {
        acc.map(|v| v / n as f64)
    }
}

/// Unblurred image and depth error of `current` with `candidate` composed
/// on top.
fn seed_score(target: &Target, current: &SceneRender<f64>, candidate: &ObjectParams<f64>, cam: &CameraModel, loss: &LossConfig, fields: &FieldSet) -> Result<f64> {
    let r = render_object(candidate, cam, &loss.march, fields)?;
    let n = (cam.width * cam.height) as f64;
    let (mut img, mut dep) = (0.0, 0.0);
    for i in 0..target.depth.len() {
        let (c, d) = if r.mask[i] && r.depth[i] < current.depth[i] { (r.color[i], r.depth[i]) } else { (current.color[i], current.depth[i]) };
        let t = target.color[i];
        img += (c[0] - t[0]).powi(2) + (c[1] - t[1]).powi(2) + (c[2] - t[2]).powi(2);
        dep += (d - target.depth[i]).abs();
    }
    Ok((loss.weights.image * img + loss.weights.depth * dep) / n)
}

/// Family codes tried for a fresh slot: the neutral blend plus every
/// primitive at a few heights.
fn family_codes(dim: usize, heights: &[f64], sharpness: f64) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]];
    for kind in PrimitiveKind::ALL {
        for &h in heights {
            let shape = AnalyticShape { kind, axis_scale: [1.0, 1.0, h] };
            out.push(AnalyticFamily::code_for(&shape, dim, sharpness));
        }
    }
    out
}

/// Coarse-to-fine search over ground position, rotation, scale and (for
/// the analytic family) shape code of a fresh slot, scored against the
/// unblurred target. Every candidate rests on the ground plane.
fn search_seed(
    target: &Target,
    current: &SceneRender<f64>,
    mut candidate: ObjectParams<f64>,
    cam: &CameraModel,
    loss: &LossConfig,
    fields: &FieldSet,
    policy: &InitPolicy,
) -> Result<ObjectParams<f64>> {
    if policy.search_radius <= 0.0 || policy.search_grid < 2 {
        return Ok(candidate);
    }
    let codes = match (&fields.shape, &candidate.shape) {
        (ShapeModel::Family(_), ShapeParams::Code(c)) => family_codes(c.len(), &policy.search_heights, policy.search_sharpness),
        _ => Vec::new(),
    };
    let height = |shape: &ShapeParams<f64>| match shape {
        ShapeParams::Code(c) if !codes.is_empty() => c[2].exp(),
        _ => 1.0,
    };
    let bounds = candidate.extrinsics.bounds;
    let mut best = candidate.clone();
    let mut best_score = seed_score(target, current, &best, cam, loss, fields)?;
    let mut spacing = 2.0 * policy.search_radius / (policy.search_grid - 1) as f64;
    let half = (policy.search_grid - 1) as f64 / 2.0;
    let angles = policy.search_angles.max(1);
    for _ in 0..policy.search_rounds.max(1) {
        let center = best.extrinsics.position;
        let (theta0, s0) = (best.extrinsics.theta()?, best.extrinsics.scale());
        let a_z = height(&best.shape);
        candidate = best.clone();
        for a in 0..angles {
            let th = theta0 + a as f64 * std::f64::consts::FRAC_PI_2 / angles as f64;
            for k in -(policy.search_scales as i64)..=policy.search_scales as i64 {
                let sc = (s0 * (1.0 + 0.1 * k as f64)).clamp(bounds.min * 1.0001, bounds.max * 0.9999);
                for i in 0..policy.search_grid {
                    for j in 0..policy.search_grid {
                        let x = center[0] + (i as f64 - half) * spacing;
                        let y = center[1] + (j as f64 - half) * spacing;
                        candidate.extrinsics = ObjectExtrinsics::from_pose([x, y, SHAPE_HALF_EXTENT * sc * a_z], th, sc, bounds)?;
                        let score = seed_score(target, current, &candidate, cam, loss, fields)?;
                        if score < best_score {
                            best_score = score;
                            best = candidate.clone();
                        }
                    }
                }
            }
        }
        candidate = best.clone();
        for code in &codes {
            candidate.shape = ShapeParams::Code(code.clone());
            candidate.extrinsics.position[2] = SHAPE_HALF_EXTENT * best.extrinsics.scale() * code[2].exp();
            let score = seed_score(target, current, &candidate, cam, loss, fields)?;
            if score < best_score {
                best_score = score;
                best = candidate.clone();
            }
        }
        spacing *= 0.5;
    }
    Ok(best)
}

fn render_values(latent: &SceneLatent, cam: &CameraModel, loss: &LossConfig, fields: &FieldSet) -> Result<SceneRender<f64>> {
    let (objects, bg) = latent.decode(&latent.params)?;
    Ok(render_scene(&objects, bg, cam, &loss.march, fields)?.1)
}

/// Fits `cfg.slots` object slots plus the background to an RGB-D target.
///
/// Slots are seeded one after the other from the residual of the current
/// render; after each seed all active latents are refined jointly while
/// the blur and shape-prior schedules advance. A final refinement at the
/// end-of-schedule weights keeps the best latents seen. Slots left over
/// once the target is explained are parked out of view.
pub fn fit_scene(target: &Target, cam: &CameraModel, cfg: &FitConfig, fields: &FieldSet) -> Result<FitResult> {
    cfg.validate()?;
    target.validate(cam)?;
    let loss = cfg.scheduled_loss();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut latent = SceneLatent::with_background_color(cfg.scale_bounds, background_seed(target, cam, loss.march.far));
    let mut adam = AdamState::new(latent.params.len(), cfg.adam);
    let mut history = Vec::new();
    let mut step = 0u64;
    let mut active = 0usize;

    let mut snapshots = Vec::new();
    let mut run = |latent: &mut SceneLatent, adam: &mut AdamState, t: u64, history: &mut Vec<LossReport>| -> Result<LossReport> {
        let mut report = total_loss(latent, target, cam, fields, &loss, t)?;
        adam.step(&mut latent.params, &report.gradient)?;
        let grad = std::mem::take(&mut report.gradient);
        history.push(report.clone());
        report.gradient = grad;
        if let Some(every) = cfg.snapshot_every.filter(|&k| k > 0) {
            if history.len() as u64 % every == 0 {
                snapshots.push((history.len() as u64, latent.clone()));
            }
        }
        Ok(report)
    };

    for k in 0..cfg.slots {
        let current = render_values(&latent, cam, &loss, fields)?;
        match init_next_slot(target, &current, cam, cfg.scale_bounds, &cfg.init) {
            Ok(seed) => {
                let (layout, mut values) = new_slot(fields, cfg, &seed.extrinsics, seed.color, &mut rng);
                let mut trial = latent.clone();
                trial.push_slot(layout, &values)?;
                let candidate = trial.objects()?.pop().expect("slot just pushed");
                let found = search_seed(target, &current, candidate, cam, &loss, fields, &cfg.init)?;
                if let ShapeParams::Code(code) = &found.shape {
                    values[..code.len()].copy_from_slice(code);
                }
                let ext = found.extrinsics;
                let at = values.len() - EXTRINSIC_LEN;
                values[at..].copy_from_slice(&[ext.position[0], ext.position[1], ext.position[2], ext.z_cos, ext.z_sin, ext.raw_scale]);
                latent.push_slot(layout, &values)?;
                active += 1;
            }
            Err(Error::FullyExplained) => {
                for j in k..cfg.slots {
                    let ext = ObjectExtrinsics::from_pose(parked_position(cam, j), 0.0, cfg.scale_bounds.mid(), cfg.scale_bounds)?;
                    let (layout, values) = new_slot(fields, cfg, &ext, [0.5; 3], &mut rng);
                    latent.push_slot(layout, &values)?;
                }
                break;
            }
            Err(e) => return Err(e),
        }
        adam.resize(latent.params.len());
        for _ in 0..cfg.steps_per_slot {
            run(&mut latent, &mut adam, step, &mut history)?;
            step += 1;
        }
    }
    adam.resize(latent.params.len());

    // the schedules keep advancing until the budget is spent; only losses
    // at the end-of-schedule weights are compared
    let hold = cfg.schedule_budget();
    let (initial_loss, _) = crate::losses::total_loss_value(&latent, target, cam, fields, &loss, hold)?;
    let mut best = latent.params.clone();
    let mut best_loss = initial_loss;
    for _ in 0..cfg.final_steps {
        let before = latent.params.clone();
        let report = run(&mut latent, &mut adam, step, &mut history)?;
        if step >= hold && report.total < best_loss {
            best_loss = report.total;
            best = before;
        }
        step += 1;
    }
    let (final_total, _) = crate::losses::total_loss_value(&latent, target, cam, fields, &loss, hold)?;
    if final_total < best_loss {
        best_loss = final_total;
        best = latent.params.clone();
    }
    latent.params = best;
    Ok(FitResult { latent, history, initial_loss, best_loss, active_slots: active, snapshots })
}

/// Range for [`sample_valid_pose`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub max_attempts: usize,
    /// Points per pair for the intersection test.
    pub intersection_samples: usize,
}

impl Default for PoseRange {
    fn default() -> Self {
        Self { x: (-1.5, 1.5), y: (-1.5, 1.5), max_attempts: 1000, intersection_samples: 32 }
    }
}

/// Rejection-samples a ground position and rotation for `slot`, keeping
/// its height and scale, until it neither sinks into the ground nor
/// intersects any other slot.
pub fn sample_valid_pose(scene: &SceneLatent, slot: usize, range: &PoseRange, fields: &FieldSet, rng: &mut impl Rng) -> Result<ObjectExtrinsics<f64>> {
    if !(range.x.0 <= range.x.1 && range.y.0 <= range.y.1) {
        return Err(Error::InvalidConfig("pose range bounds out of order".into()));
    }
    let current = scene.extrinsics(slot)?;
    let mut objects = scene.objects()?;
    let pick = |lo: f64, hi: f64, rng: &mut dyn rand::RngCore| if lo < hi { rng.gen_range(lo..hi) } else { lo };
    for _ in 0..range.max_attempts {
        let x = pick(range.x.0, range.x.1, rng);
        let y = pick(range.y.0, range.y.1, rng);
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        let ext = ObjectExtrinsics { position: [x, y, current.position[2]], z_cos: cos, z_sin: sin, ..current };
        objects[slot].extrinsics = ext;
        let ground = loss_ground(std::slice::from_ref(&objects[slot]), fields).unwrap_or(0.0);
        if ground > 0.0 {
            continue;
        }
        let clear = (0..objects.len()).filter(|&j| j != slot).try_fold(true, |ok, j| {
            let pair = [objects[slot].clone(), objects[j].clone()];
            Ok::<_, Error>(ok && loss_intersection(&pair, fields, range.intersection_samples)?.unwrap_or(0.0) == 0.0)
        })?;
        if clear {
            return Ok(ext);
        }
    }
    Err(Error::Rejected { attempts: range.max_attempts })
}
