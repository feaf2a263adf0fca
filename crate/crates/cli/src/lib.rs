//! Command implementations behind the `sdfscene` binary.
//!
//! Every command writes its effective configuration to `config.json` in the
//! output directory before any other output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sdfscene::datagen::{self, file_stem, GeneratorConfig, Splits};
use sdfscene::fitting::{apply_edit, fit_scene, sample_valid_pose, Edit, FitConfig, PoseRange, SceneLatent, ShapeSlot};
use sdfscene::geometry::CameraModel;
use sdfscene::io;
use sdfscene::losses::Target;
use sdfscene::metrics::{self, EvalSample, Pose, Symmetry};
use sdfscene::renderer::{render_scene, RayMarchConfig, SceneRender};
use sdfscene::shape_space::{FieldSet, PrimitiveKind};

/// Failure of a command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<sdfscene::Error> for CliError {
    fn from(e: sdfscene::Error) -> Self {
        use sdfscene::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_) | E::BoundOrder { .. } | E::NonPositiveSigma(_) | E::NonPositiveAxisScale(_) => CliError::Config(msg),
            E::Autodiff(_) => CliError::Internal(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sdfscene", version, about = "Multi-object SDF scenes: generate, render, fit, evaluate, edit")]
pub struct Cli {
    /// JSON file overriding any part of the default run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample and render a synthetic dataset.
    Generate(GenerateArgs),
    /// Render a scene file to RGB, depth and instance mask.
    Render(RenderArgs),
    /// Fit object latents to an RGB-D target.
    Fit(FitArgs),
    /// Score predicted scenes against ground-truth scenes.
    Eval(EvalArgs),
    /// Edit a scene in latent space.
    Edit(EditArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Fixed object count for every scene.
    #[arg(long)]
    pub objects: Option<usize>,
    /// Number of scenes, all placed in the train split.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub scene: PathBuf,
    /// Ray samples per pixel.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    /// Scene file whose camera observed the target; defaults to the standard camera.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long)]
    pub slots: Option<usize>,
    #[arg(long)]
    pub steps_per_slot: Option<u64>,
    #[arg(long)]
    pub final_steps: Option<u64>,
    #[arg(long)]
    pub snapshot_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with `scenes/<stem>.scene` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory with `scenes/<stem>.scene` ground truth.
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    pub scene: PathBuf,
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub swap: Option<Vec<usize>>,
    #[arg(long)]
    pub remove: Option<usize>,
    /// Resample ground position and rotation until collision free.
    #[arg(long)]
    pub sample_pose: Option<usize>,
    #[arg(long, num_args = 4, value_names = ["SLOT", "R", "G", "B"])]
    pub set_color: Option<Vec<f64>>,
    #[arg(long, num_args = 4, value_names = ["SLOT", "X", "Y", "Z"])]
    pub set_position: Option<Vec<f64>>,
    /// Also render the scene before and after the edit.
    #[arg(long)]
    pub render: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub generator: GeneratorConfig,
    pub splits: Splits,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { generator: GeneratorConfig::default(), splits: Splits::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSection {
    pub march: RayMarchConfig,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self { march: RayMarchConfig::ground_truth() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Renderer used for both predicted and ground-truth scenes.
    pub march: RayMarchConfig,
    /// Folding period of box rotations, radians; spheres and cylinders
    /// are treated as fully symmetric.
    pub box_symmetry: f64,
    /// Folding period for code-shaped ground truth.
    pub default_symmetry: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { march: RayMarchConfig::ground_truth(), box_symmetry: std::f64::consts::FRAC_PI_2, default_symmetry: std::f64::consts::PI }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    pub pose_range: PoseRange,
    pub march: RayMarchConfig,
}

impl Default for EditSection {
    fn default() -> Self {
        Self { pose_range: PoseRange::default(), march: RayMarchConfig::ground_truth() }
    }
}

/// Effective configuration of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub generate: GenerateSection,
    pub render: RenderSection,
    pub fit: FitConfig,
    pub eval: EvalSection,
    pub edit: EditSection,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults with the JSON document at `path` merged over them; unknown
    /// keys are rejected.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| CliError::Internal(e.to_string()))?;
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let over: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut value, over);
        }
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn write(&self, out: &Path) -> CliResult<()> {
        fs::create_dir_all(out)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        io::write_atomic(&out.join("config.json"), text.as_bytes())?;
        Ok(())
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    match cli.threads {
        Some(0) => return Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| CliError::Internal(e.to_string()))?;
            pool.install(|| execute(&cli))
        }
        None => execute(&cli),
    }
}

fn execute(cli: &Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(cfg, a, &cli.out),
        Command::Render(a) => cmd_render(cfg, a, &cli.out),
        Command::Fit(a) => cmd_fit(cfg, a, &cli.out),
        Command::Eval(a) => cmd_eval(cfg, a, &cli.out),
        Command::Edit(a) => cmd_edit(cfg, a, &cli.out),
    }
}

pub fn cmd_generate(mut cfg: RunConfig, a: &GenerateArgs, out: &Path) -> CliResult<()> {
    cfg.command = "generate".into();
    if let Some(n) = a.objects {
        cfg.generate.generator.counts = vec![n];
    }
    if let Some(c) = a.count {
        cfg.generate.splits = Splits { train: c, val: 0, test: 0 };
    }
    cfg.generate.generator.validate()?;
    cfg.write(out)?;
    datagen::generate_dataset(out, cfg.seed, cfg.generate.splits, &cfg.generate.generator)?;
    Ok(())
}

fn write_render(dir: &Path, prefix: &str, scene: &SceneRender<f64>) -> CliResult<()> {
    let (w, h) = (scene.width, scene.height);
    io::write_rgb_png(&dir.join(format!("{prefix}rgb.png")), &scene.color_values(), w, h)?;
    io::write_depth(&dir.join(format!("{prefix}depth.f32")), &scene.depth_values(), w, h)?;
    io::write_mask_png(&dir.join(format!("{prefix}mask.png")), &scene.instance_ids(), w, h)?;
    Ok(())
}

fn render_latent(cam: &CameraModel, latent: &SceneLatent, march: &RayMarchConfig, fields: &FieldSet) -> CliResult<SceneRender<f64>> {
    let (objects, bg) = latent.decode(&latent.params)?;
    Ok(render_scene(&objects, bg, cam, march, fields)?.1)
}

pub fn cmd_render(mut cfg: RunConfig, a: &RenderArgs, out: &Path) -> CliResult<()> {
    cfg.command = "render".into();
    if let Some(n) = a.steps {
        cfg.render.march.steps = n;
    }
    cfg.render.march.validate()?;
    let (cam, latent) = io::read_scene(&a.scene)?;
    let scene = render_latent(&cam, &latent, &cfg.render.march, &FieldSet::default())?;
    cfg.write(out)?;
    write_render(out, "", &scene)
}

pub fn cmd_fit(mut cfg: RunConfig, a: &FitArgs, out: &Path) -> CliResult<()> {
    cfg.command = "fit".into();
    cfg.fit.seed = cfg.seed;
    if let Some(n) = a.slots {
        cfg.fit.slots = n;
    }
    if let Some(n) = a.steps_per_slot {
        cfg.fit.steps_per_slot = n;
    }
    if let Some(n) = a.final_steps {
        cfg.fit.final_steps = n;
    }
    if a.snapshot_every.is_some() {
        cfg.fit.snapshot_every = a.snapshot_every;
    }
    cfg.fit.validate()?;
    let (color, w, h) = io::read_rgb_png(&a.rgb)?;
    let (depth, dw, dh) = io::read_depth(&a.depth)?;
    if (w, h) != (dw, dh) {
        return Err(CliError::Data(format!("rgb is {w}×{h} but depth is {dw}×{dh}")));
    }
    let cam = match &a.camera {
        Some(p) => io::read_scene(p)?.0,
        None => CameraModel::default_scene(w, h),
    };
    if (cam.width, cam.height) != (w, h) {
        return Err(CliError::Data(format!("camera is {}×{} but target is {w}×{h}", cam.width, cam.height)));
    }
    let target = Target { width: w, height: h, color, depth };
    cfg.write(out)?;
    let fields = FieldSet::default();
    let result = fit_scene(&target, &cam, &cfg.fit, &fields)?;
    let log: String = result.history.iter().map(|r| r.log_line() + "\n").collect();
    io::write_atomic(&out.join("loss.jsonl"), log.as_bytes())?;
    if !result.snapshots.is_empty() {
        let dir = out.join("snapshots");
        fs::create_dir_all(&dir)?;
        for (step, latent) in &result.snapshots {
            io::write_scene(&dir.join(format!("step_{step:06}.scene")), &cam, latent)?;
        }
    }
    io::write_scene(&out.join("scene.scene"), &cam, &result.latent)?;
    let scene = render_latent(&cam, &result.latent, &cfg.fit.loss.march, &fields)?;
    write_render(out, "", &scene)
}

fn scene_stems(dir: &Path) -> CliResult<Vec<String>> {
    let scenes = dir.join("scenes");
    let mut stems = Vec::new();
    for entry in fs::read_dir(&scenes).map_err(|e| CliError::Data(format!("{}: {e}", scenes.display())))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "scene") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn poses(latent: &SceneLatent, eval: &EvalSection, with_symmetry: bool) -> CliResult<Vec<Pose>> {
    (0..latent.slot_count())
        .map(|i| {
            let e = latent.extrinsics(i)?;
            let mut p = Pose::new(e.position, e.theta()?);
            if with_symmetry {
                p.symmetry = Some(match latent.shape_of(i)?.0 {
                    ShapeSlot::Primitive(s) if s.kind == PrimitiveKind::Box => Symmetry::Period(eval.box_symmetry),
                    ShapeSlot::Primitive(_) => Symmetry::Continuous,
                    ShapeSlot::Code { .. } => Symmetry::Period(eval.default_symmetry),
                });
            }
            Ok(p)
        })
        .collect()
}

fn masks(scene: &SceneRender<f64>, objects: usize) -> Vec<Vec<bool>> {
    (0..objects).map(|i| scene.object_mask(i)).collect()
}

/// Per-image entry of `per_image.json`.
#[derive(Debug, Serialize)]
struct ImageEntry {
    stem: String,
    prediction_found: bool,
    #[serde(flatten)]
    eval: metrics::ImageEval,
}

pub fn cmd_eval(mut cfg: RunConfig, a: &EvalArgs, out: &Path) -> CliResult<()> {
    cfg.command = "eval".into();
    cfg.eval.march.validate()?;
    let stems = scene_stems(&a.gt)?;
    if stems.is_empty() {
        return Err(CliError::Data(format!("no ground-truth scenes under {}", a.gt.display())));
    }
    cfg.write(out)?;
    let fields = FieldSet::default();
    let mut samples = Vec::with_capacity(stems.len());
    let mut found = Vec::with_capacity(stems.len());
    for stem in &stems {
        let (cam, gt) = io::read_scene(&a.gt.join("scenes").join(format!("{stem}.scene")))?;
        let gt_render = render_latent(&cam, &gt, &cfg.eval.march, &fields)?;
        let pred_path = a.pred.join("scenes").join(format!("{stem}.scene"));
        let pred = if pred_path.exists() {
            let (pcam, p) = io::read_scene(&pred_path)?;
            if (pcam.width, pcam.height) != (cam.width, cam.height) {
                return Err(CliError::Data(format!("{}: image size differs from ground truth", pred_path.display())));
            }
            Some(p)
        } else {
            eprintln!("missing prediction {}: scored as empty scene", pred_path.display());
            None
        };
        found.push(pred.is_some());
        let pred = pred.unwrap_or_else(|| SceneLatent::with_background_color(gt.bounds, [0.5; 3]));
        let pred_render = render_latent(&cam, &pred, &cfg.eval.march, &fields)?;
        samples.push(EvalSample {
            width: cam.width,
            height: cam.height,
            pred_masks: masks(&pred_render, pred.slot_count()),
            gt_masks: masks(&gt_render, gt.slot_count()),
            pred_rgb: pred_render.color_values(),
            gt_rgb: gt_render.color_values(),
            pred_depth: pred_render.depth_values(),
            gt_depth: gt_render.depth_values(),
            pred_poses: poses(&pred, &cfg.eval, false)?,
            gt_poses: poses(&gt, &cfg.eval, true)?,
        });
    }
    let (report, per) = metrics::evaluate(&samples, Symmetry::Period(cfg.eval.default_symmetry))?;
    let entries: Vec<ImageEntry> = stems
        .iter()
        .zip(found)
        .zip(per)
        .map(|((stem, prediction_found), eval)| ImageEntry { stem: stem.clone(), prediction_found, eval })
        .collect();
    let per_text = serde_json::to_string_pretty(&entries).map_err(|e| CliError::Internal(e.to_string()))?;
    io::write_atomic(&out.join("per_image.json"), per_text.as_bytes())?;
    io::write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
    io::write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(())
}

fn parse_edit(a: &EditArgs, latent: &SceneLatent, cfg: &RunConfig) -> CliResult<Edit> {
    let slot = |v: f64| -> CliResult<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(CliError::Usage(format!("slot index must be a non-negative integer, got {v}")))
        }
    };
    let mut edits = Vec::new();
    if let Some(s) = &a.swap {
        edits.push(Edit::Swap(s[0], s[1]));
    }
    if let Some(i) = a.remove {
        edits.push(Edit::Remove(i));
    }
    if let Some(c) = &a.set_color {
        edits.push(Edit::set_color(slot(c[0])?, [c[1], c[2], c[3]]));
    }
    if let Some(p) = &a.set_position {
        let i = slot(p[0])?;
        let e = latent.extrinsics(i)?;
        edits.push(Edit::SetPose { slot: i, position: [p[1], p[2], p[3]], z_cos: e.z_cos, z_sin: e.z_sin, raw_scale: e.raw_scale });
    }
    if let Some(i) = a.sample_pose {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let e = sample_valid_pose(latent, i, &cfg.edit.pose_range, &FieldSet::default(), &mut rng)?;
        edits.push(Edit::set_pose(i, &e));
    }
    match edits.len() {
        1 => Ok(edits.remove(0)),
        0 => Err(CliError::Usage("edit needs one of --swap, --remove, --sample-pose, --set-color, --set-position".into())),
        _ => Err(CliError::Usage("edit takes exactly one operation".into())),
    }
}

pub fn cmd_edit(mut cfg: RunConfig, a: &EditArgs, out: &Path) -> CliResult<()> {
    cfg.command = "edit".into();
    let (cam, latent) = io::read_scene(&a.scene)?;
    let edit = parse_edit(a, &latent, &cfg)?;
    let edited = apply_edit(&latent, &edit)?;
    cfg.write(out)?;
    io::write_scene(&out.join("scene.scene"), &cam, &edited)?;
    if a.render {
        let fields = FieldSet::default();
        write_render(out, "before_", &render_latent(&cam, &latent, &cfg.edit.march, &fields)?)?;
        write_render(out, "after_", &render_latent(&cam, &edited, &cfg.edit.march, &fields)?)?;
    }
    Ok(())
}

/// Output names used by [`cmd_generate`] for scene `id`.
pub fn dataset_scene_path(dir: &Path, id: u64) -> PathBuf {
    dir.join("scenes").join(format!("{}.scene", file_stem(id)))
}
