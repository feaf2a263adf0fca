//! Synthetic tabletop scenes and their ground-truth renders.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{logit, SceneLatent, ShapeSlot, SlotLayout, TextureSlot};
use crate::geometry::{CameraModel, ObjectExtrinsics, ScaleBounds};
use crate::io;
use crate::losses::loss_intersection;
use crate::renderer::{render_scene, ObjectParams, ObjectRender, RayMarchConfig, SceneRender};
use crate::shape_space::{AnalyticShape, FieldSet, PrimitiveKind, SHAPE_HALF_EXTENT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Object counts drawn uniformly per scene.
    pub counts: Vec<usize>,
    pub kinds: Vec<PrimitiveKind>,
    /// Range of both ground coordinates.
    pub position_range: (f64, f64),
    pub scale_bounds: ScaleBounds,
    /// Range of the per-axis shape scale factors.
    pub axis_scale: (f64, f64),
    /// Range of each object color channel.
    pub color_range: (f64, f64),
    /// Range of the (grey) background level.
    pub background_range: (f64, f64),
    /// Clearance added under each object.
    pub lift: f64,
    pub max_attempts: usize,
    pub intersection_samples: usize,
    pub width: usize,
    pub height: usize,
    pub march: RayMarchConfig,
    /// Standard deviation of Gaussian noise added to the RGB output.
    pub noise_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            counts: vec![2, 3, 4, 5],
            kinds: PrimitiveKind::ALL.to_vec(),
            position_range: (-1.5, 1.5),
            scale_bounds: ScaleBounds::default(),
            axis_scale: (0.75, 1.25),
            color_range: (0.05, 0.95),
            background_range: (0.3, 0.6),
            lift: 1e-3,
            max_attempts: 1000,
            intersection_samples: 32,
            width: 64,
            height: 64,
            march: RayMarchConfig::ground_truth(),
            noise_sigma: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.counts.is_empty() || self.counts.contains(&0) {
            return bad("object counts must be non-empty and positive");
        }
        if self.kinds.is_empty() {
            return bad("at least one primitive kind is required");
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !ordered(self.position_range) || !ordered(self.color_range) || !ordered(self.background_range) {
            return bad("ranges must be ordered and finite");
        }
        if !(ordered(self.axis_scale) && self.axis_scale.0 > 0.0) {
            return bad("axis scale range must be positive and ordered");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.lift >= 0.0) {
            return bad("noise sigma and lift must be non-negative");
        }
        self.scale_bounds.validate()?;
        self.march.validate()
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::default_scene(self.width, self.height)
    }
}

/// One sampled scene: camera plus ground-truth latents with primitive shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub id: u64,
    pub camera: CameraModel,
    pub latent: SceneLatent,
}

impl SceneSpec {
    pub fn objects(&self) -> Result<Vec<ObjectParams<f64>>> {
        self.latent.objects()
    }

    pub fn shapes(&self) -> Vec<AnalyticShape> {
        self.latent
            .slots
            .iter()
            .filter_map(|s| match s.shape {
                ShapeSlot::Primitive(p) => Some(p),
                ShapeSlot::Code { .. } => None,
            })
            .collect()
    }
}

/// Horizontal radius of the vertical cylinder enclosing a posed primitive.
pub fn footprint_radius(shape: &AnalyticShape, scale: f64) -> f64 {
    let [ax, ay, _] = shape.axis_scale;
    let r = match shape.kind {
        PrimitiveKind::Box => (ax * ax + ay * ay).sqrt(),
        PrimitiveKind::Sphere | PrimitiveKind::Cylinder => ax.max(ay),
    };
    SHAPE_HALF_EXTENT * r * scale
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 < r.1 {
        rng.gen_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Draws one object resting on the ground plane.
fn sample_object(rng: &mut impl Rng, cfg: &GeneratorConfig) -> Result<(AnalyticShape, ObjectExtrinsics<f64>, [f64; 3])> {
    let kind = cfg.kinds[rng.gen_range(0..cfg.kinds.len())];
    let mut a = [uniform(rng, cfg.axis_scale), uniform(rng, cfg.axis_scale), uniform(rng, cfg.axis_scale)];
    if kind != PrimitiveKind::Box {
        a[1] = a[0];
    }
    let shape = AnalyticShape::new(kind, a)?;
    let b = cfg.scale_bounds;
    // strictly inside the bounds so the raw scale is finite
    let s = b.min + (b.max - b.min) * rng.gen_range(0.02..0.98);
    let x = uniform(rng, cfg.position_range);
    let y = uniform(rng, cfg.position_range);
    // uniform on (−π, π]
    let theta = -rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut ext = ObjectExtrinsics::from_pose([x, y, 0.0], theta, s, b)?;
    ext.position[2] = SHAPE_HALF_EXTENT * a[2] * ext.scale() + cfg.lift;
    let color = [0; 3].map(|_| uniform(rng, cfg.color_range));
    Ok((shape, ext, color))
}

fn object_params(shape: AnalyticShape, ext: ObjectExtrinsics<f64>, raw_color: [f64; 3]) -> (SlotLayout, Vec<f64>) {
    let layout = SlotLayout { shape: ShapeSlot::Primitive(shape), texture: TextureSlot::Constant };
    let mut v = raw_color.to_vec();
    v.extend([ext.position[0], ext.position[1], ext.position[2], ext.z_cos, ext.z_sin, ext.raw_scale]);
    (layout, v)
}

/// Rejection-samples a scene of `count` resting, pairwise disjoint objects.
///
/// A candidate is accepted when its ground footprint circle is disjoint
/// from every placed object's (which certifies non-intersection for
/// objects standing on the plane) and the segment test between centers
/// also reports no overlap.
pub fn sample_scene(id: u64, count: usize, rng: &mut impl Rng, cfg: &GeneratorConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("scene needs at least one object".into()));
    }
    let fields = FieldSet::default();
    let level = uniform(rng, cfg.background_range);
    let mut latent = SceneLatent::with_background_color(cfg.scale_bounds, [level; 3]);
    let mut placed: Vec<(ObjectParams<f64>, f64)> = Vec::new();
    for _ in 0..count {
        let mut accepted = false;
        for _ in 0..cfg.max_attempts {
            let (shape, ext, color) = sample_object(rng, cfg)?;
            let (layout, values) = object_params(shape, ext, color.map(logit));
            let mut probe = SceneLatent::new(cfg.scale_bounds, [0.0; 3]);
            probe.push_slot(layout, &values)?;
            let obj = probe.objects()?.remove(0);
            let r = footprint_radius(&shape, obj.extrinsics.scale());
            let p = obj.extrinsics.position;
            let mut clear = true;
            for (other, r_o) in &placed {
                let q = other.extrinsics.position;
                if (p[0] - q[0]).hypot(p[1] - q[1]) <= r + r_o {
                    clear = false;
                    break;
                }
                let pair = [obj.clone(), other.clone()];
                if loss_intersection(&pair, &fields, cfg.intersection_samples)?.unwrap_or(0.0) != 0.0 {
                    clear = false;
                    break;
                }
            }
            if clear {
                latent.push_slot(layout, &values)?;
                placed.push((obj, r));
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Rejected { attempts: cfg.max_attempts });
        }
    }
    Ok(SceneSpec { id, camera: cfg.camera(), latent })
}

/// Ground-truth render of a scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub objects: Vec<ObjectRender<f64>>,
    pub scene: SceneRender<f64>,
    /// RGB after optional noise.
    pub rgb: Vec<[f64; 3]>,
}

pub fn render_ground_truth(spec: &SceneSpec, march: &RayMarchConfig, noise_sigma: f64, rng: &mut impl Rng) -> Result<GroundTruth> {
    let (objects, bg) = spec.latent.decode(&spec.latent.params)?;
    let (renders, scene) = render_scene(&objects, bg, &spec.camera, march, &FieldSet::default())?;
    let mut rgb = scene.color_values();
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for px in &mut rgb {
            for c in px.iter_mut() {
                *c = (*c + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(GroundTruth { objects: renders, scene, rgb })
}

/// Independent random stream for scene `id`.
pub fn scene_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self { train: 180, val: 20, test: 50 }
    }
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Split of scene `id`; ids are assigned train, then val, then test.
    pub fn split_of(&self, id: u64) -> &'static str {
        let id = id as usize;
        if id < self.train {
            "train"
        } else if id < self.train + self.val {
            "val"
        } else {
            "test"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub id: u64,
    pub split: String,
    pub objects: usize,
    pub scene: String,
    pub rgb: String,
    pub depth: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub splits: Splits,
    pub generator: GeneratorConfig,
    pub files: Vec<FileEntry>,
}

pub fn file_stem(id: u64) -> String {
    format!("{id:06}")
}

fn entry(id: u64, splits: &Splits, objects: usize) -> FileEntry {
    let stem = file_stem(id);
    FileEntry {
        id,
        split: splits.split_of(id).into(),
        objects,
        scene: format!("scenes/{stem}.scene"),
        rgb: format!("rgb/{stem}.png"),
        depth: format!("depth/{stem}.f32"),
        mask: format!("mask/{stem}.png"),
    }
}

/// Samples and renders scene `id` of a dataset.
pub fn generate_scene(seed: u64, id: u64, cfg: &GeneratorConfig) -> Result<(SceneSpec, GroundTruth)> {
    let mut rng = scene_rng(seed, id);
    let count = cfg.counts[rng.gen_range(0..cfg.counts.len())];
    let spec = sample_scene(id, count, &mut rng, cfg)?;
    let gt = render_ground_truth(&spec, &cfg.march, cfg.noise_sigma, &mut rng)?;
    Ok((spec, gt))
}

/// Writes every scene of the dataset below `out` and returns the manifest.
pub fn generate_dataset(out: &Path, seed: u64, splits: Splits, cfg: &GeneratorConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    for d in ["scenes", "rgb", "depth", "mask"] {
        fs::create_dir_all(out.join(d))?;
    }
    let files = (0..splits.total() as u64)
        .into_par_iter()
        .map(|id| {
            let (spec, gt) = generate_scene(seed, id, cfg)?;
            let e = entry(id, &splits, spec.latent.slot_count());
            write_scene_outputs(out, &e, &spec, &gt)?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { seed, splits, generator: cfg.clone(), files };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn write_scene_outputs(out: &Path, e: &FileEntry, spec: &SceneSpec, gt: &GroundTruth) -> Result<()> {
    let (w, h) = (spec.camera.width, spec.camera.height);
    io::write_scene(&out.join(&e.scene), &spec.camera, &spec.latent)?;
    io::write_rgb_png(&out.join(&e.rgb), &gt.rgb, w, h)?;
    io::write_depth(&out.join(&e.depth), &gt.scene.depth_values(), w, h)?;
    io::write_mask_png(&out.join(&e.mask), &gt.scene.instance_ids(), w, h)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path: PathBuf = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.display().to_string(), message: e.to_string() })
}
