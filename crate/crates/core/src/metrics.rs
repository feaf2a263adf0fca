//! Evaluation: instance matching and the AP family, image and depth
//! reconstruction errors, and pose errors of matched objects.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::geometry::Vec3;

/// Masks with fewer occupied pixels are ignored on both sides.
pub const MIN_MASK_PIXELS: usize = 25;
/// IoU thresholds averaged by mAP.
pub const AP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Intersection over union of two binary masks; 0 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    check_dim("mask", a.len(), b.len())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

fn occupied(m: &[bool]) -> usize {
    m.iter().filter(|&&v| v).count()
}

/// Outcome of matching at one IoU threshold. Indices refer to the input
/// mask lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMatch {
    pub tau: f64,
    /// `(pred, gt, iou)` in acceptance order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

impl ThresholdMatch {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.false_positives.len()
    }

    pub fn fn_(&self) -> usize {
        self.false_negatives.len()
    }

    /// TP / (TP + FP), with 0/0 = 0.
    pub fn precision(&self) -> f64 {
        ratio(self.tp(), self.tp() + self.fp())
    }

    /// TP / (TP + FN), with 0/0 = 0.
    pub fn recall(&self) -> f64 {
        ratio(self.tp(), self.tp() + self.fn_())
    }

    /// Harmonic mean of precision and recall, 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Matches of one image at several thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Predictions with at least [`MIN_MASK_PIXELS`] pixels.
    pub valid_pred: Vec<usize>,
    /// Ground-truth objects with at least [`MIN_MASK_PIXELS`] pixels.
    pub valid_gt: Vec<usize>,
    pub thresholds: Vec<ThresholdMatch>,
}

impl MatchResult {
    pub fn at(&self, tau: f64) -> Option<&ThresholdMatch> {
        self.thresholds.iter().find(|m| (m.tau - tau).abs() < 1e-12)
    }
}

/// Greedy IoU-descending matching of predicted to ground-truth masks.
///
/// Masks under [`MIN_MASK_PIXELS`] are dropped first. For every threshold,
/// pairs with IoU ≥ τ are accepted in descending IoU order while both
/// sides are free; ties go to the lower prediction, then the lower
/// ground-truth index.
pub fn match_instances(pred: &[Vec<bool>], gt: &[Vec<bool>], thresholds: &[f64]) -> Result<MatchResult> {
    let len = pred.first().or(gt.first()).map_or(0, Vec::len);
    for m in pred.iter().chain(gt) {
        check_dim("mask", len, m.len())?;
    }
    let valid_pred: Vec<usize> = (0..pred.len()).filter(|&i| occupied(&pred[i]) >= MIN_MASK_PIXELS).collect();
    let valid_gt: Vec<usize> = (0..gt.len()).filter(|&j| occupied(&gt[j]) >= MIN_MASK_PIXELS).collect();
    let mut candidates = Vec::with_capacity(valid_pred.len() * valid_gt.len());
    for &i in &valid_pred {
        for &j in &valid_gt {
            candidates.push((i, j, iou(&pred[i], &gt[j])?));
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let thresholds = thresholds
        .iter()
        .map(|&tau| {
            let mut pred_used = vec![false; pred.len()];
            let mut gt_used = vec![false; gt.len()];
            let mut pairs = Vec::new();
            for &(i, j, v) in &candidates {
                if v < tau || v <= 0.0 {
                    break;
                }
                if !pred_used[i] && !gt_used[j] {
                    pred_used[i] = true;
                    gt_used[j] = true;
                    pairs.push((i, j, v));
                }
            }
            ThresholdMatch {
                tau,
                pairs,
                false_positives: valid_pred.iter().copied().filter(|&i| !pred_used[i]).collect(),
                false_negatives: valid_gt.iter().copied().filter(|&j| !gt_used[j]).collect(),
            }
        })
        .collect();
    Ok(MatchResult { valid_pred, valid_gt, thresholds })
}

/// Dataset-level instance scores; precision, recall and F1 are computed per
/// image and then averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub map: f64,
    pub ap50: f64,
    pub ar50: f64,
    pub f1_50: f64,
    /// Fraction of images whose visible ground-truth objects are all
    /// matched at τ = 0.5; images without visible objects count as matched.
    pub all_obj: f64,
}

fn threshold(m: &MatchResult, tau: f64) -> Result<&ThresholdMatch> {
    m.at(tau).ok_or_else(|| Error::InvalidConfig(format!("match result lacks threshold {tau}")))
}

pub fn instance_metrics(images: &[MatchResult]) -> Result<InstanceMetrics> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = images.len() as f64;
    let mut map = 0.0;
    for &tau in &AP_THRESHOLDS {
        let mut ap = 0.0;
        for m in images {
            ap += threshold(m, tau)?.precision();
        }
        map += ap / n;
    }
    map /= AP_THRESHOLDS.len() as f64;
    let (mut ap50, mut ar50, mut f1, mut all) = (0.0, 0.0, 0.0, 0.0);
    for m in images {
        let t = threshold(m, 0.5)?;
        ap50 += t.precision();
        ar50 += t.recall();
        f1 += t.f1();
        all += (t.fn_() == 0) as u8 as f64;
    }
    Ok(InstanceMetrics { map, ap50: ap50 / n, ar50: ar50 / n, f1_50: f1 / n, all_obj: all / n })
}

/// Peak signal-to-noise ratio in dB; `+∞` when `mse` is 0.
pub fn psnr(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub rmse: f64,
    #[serde(serialize_with = "finite_or_string", deserialize_with = "finite_or_string_de")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Window side and constants of the structural similarity index.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean SSIM of one channel with a uniform window and sample covariance,
/// averaged over window positions that lie fully inside the image.
pub fn ssim_channel(a: &[f64], b: &[f64], width: usize, height: usize, range: f64) -> Result<f64> {
    check_dim("ssim channel", width * height, a.len())?;
    check_dim("ssim channel", width * height, b.len())?;
    let k = SSIM_WINDOW;
    if width < k || height < k {
        return Err(Error::InvalidConfig(format!("ssim needs at least {k}×{k} pixels, got {width}×{height}")));
    }
    let table = |f: &dyn Fn(usize) -> f64| {
        let mut t = vec![0.0; (width + 1) * (height + 1)];
        for r in 0..height {
            let mut row = 0.0;
            for c in 0..width {
                row += f(r * width + c);
                t[(r + 1) * (width + 1) + c + 1] = t[r * (width + 1) + c + 1] + row;
            }
        }
        t
    };
    let sa = table(&|i| a[i]);
    let sb = table(&|i| b[i]);
    let saa = table(&|i| a[i] * a[i]);
    let sbb = table(&|i| b[i] * b[i]);
    let sab = table(&|i| a[i] * b[i]);
    let boxed = |t: &[f64], r: usize, c: usize| {
        let w1 = width + 1;
        t[(r + k) * w1 + c + k] - t[r * w1 + c + k] - t[(r + k) * w1 + c] + t[r * w1 + c]
    };
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mut total = 0.0;
    for r in 0..=height - k {
        for c in 0..=width - k {
            let ux = boxed(&sa, r, c) / np;
            let uy = boxed(&sb, r, c) / np;
            let vx = cov_norm * (boxed(&saa, r, c) / np - ux * ux);
            let vy = cov_norm * (boxed(&sbb, r, c) / np - uy * uy);
            let vxy = cov_norm * (boxed(&sab, r, c) / np - ux * uy);
            total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((width - k + 1) * (height - k + 1)) as f64)
}

/// RMSE over per-pixel color vectors, PSNR of that MSE and channel-averaged
/// SSIM. Colors are in `[0, 1]`.
pub fn image_metrics(pred: &[[f64; 3]], gt: &[[f64; 3]], width: usize, height: usize) -> Result<ImageMetrics> {
    check_dim("image", width * height, pred.len())?;
    check_dim("image", width * height, gt.len())?;
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    let mut ssim = 0.0;
    for ch in 0..3 {
        let a: Vec<f64> = pred.iter().map(|p| p[ch]).collect();
        let b: Vec<f64> = gt.iter().map(|p| p[ch]).collect();
        ssim += ssim_channel(&a, &b, width, height, 1.0)?;
    }
    Ok(ImageMetrics { rmse: mse.sqrt(), psnr: psnr(mse, 1.0), ssim: ssim / 3.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub abs_rd: f64,
    pub sq_rd: f64,
}

pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<DepthMetrics> {
    check_dim("depth", gt.len(), pred.len())?;
    if gt.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut sq, mut abs_rd, mut sq_rd) = (0.0, 0.0, 0.0);
    for (index, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if !(g > 0.0) {
            return Err(Error::NonPositiveDepth { index, value: g });
        }
        let d = p - g;
        sq += d * d;
        abs_rd += d.abs() / g;
        sq_rd += d * d / g;
    }
    let n = gt.len() as f64;
    Ok(DepthMetrics { rmse: (sq / n).sqrt(), abs_rd: abs_rd / n, sq_rd: sq_rd / n })
}

/// Rotational symmetry of a ground-truth object about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    /// Identical after turning by this many radians.
    Period(f64),
    /// Identical at every angle.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3<f64>,
    pub theta: f64,
    /// Overrides the dataset symmetry period for the folded error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetry: Option<Symmetry>,
}

impl Pose {
    pub fn new(position: Vec3<f64>, theta: f64) -> Self {
        Self { position, theta, symmetry: None }
    }
}

/// Wrapped angle difference `min(|Δ|, 2π − |Δ|)` in radians.
pub fn wrapped_angle(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Angle difference after reducing modulo the symmetry period.
pub fn folded_angle(a: f64, b: f64, symmetry: Symmetry) -> f64 {
    match symmetry {
        Symmetry::Continuous => 0.0,
        Symmetry::Period(p) => {
            let d = (a - b).rem_euclid(p);
            d.min(p - d)
        }
    }
}

/// One matched prediction and its errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePair {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
    /// Degrees.
    pub rotation: f64,
    /// Degrees, after symmetry folding.
    pub rotation_folded: f64,
}

/// Greedy nearest-position assignment of predictions to ground truth: all
/// pairs by ascending distance, each side used at most once.
pub fn match_poses(pred: &[Pose], gt: &[Pose], symmetry: Symmetry) -> Result<Vec<PosePair>> {
    if let Symmetry::Period(p) = symmetry {
        if !(p > 0.0) {
            return Err(Error::InvalidConfig(format!("symmetry period must be positive, got {p}")));
        }
    }
    let mut candidates = Vec::with_capacity(pred.len() * gt.len());
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.position.iter().zip(&g.position).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            candidates.push((d, i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut out = Vec::new();
    for (d, i, j) in candidates {
        if pred_used[i] || gt_used[j] {
            continue;
        }
        pred_used[i] = true;
        gt_used[j] = true;
        let sym = gt[j].symmetry.unwrap_or(symmetry);
        out.push(PosePair {
            pred: i,
            gt: j,
            distance: d,
            rotation: wrapped_angle(pred[i].theta, gt[j].theta).to_degrees(),
            rotation_folded: folded_angle(pred[i].theta, gt[j].theta, sym).to_degrees(),
        });
    }
    Ok(out)
}

/// Mean position error and median rotation errors; `None` without pairs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub pairs: usize,
    pub err_pos: Option<f64>,
    pub err_rot: Option<f64>,
    pub err_rot_folded: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

pub fn pose_metrics(pairs: &[PosePair]) -> PoseMetrics {
    if pairs.is_empty() {
        return PoseMetrics::default();
    }
    let mut rot: Vec<f64> = pairs.iter().map(|p| p.rotation).collect();
    let mut folded: Vec<f64> = pairs.iter().map(|p| p.rotation_folded).collect();
    PoseMetrics {
        pairs: pairs.len(),
        err_pos: Some(pairs.iter().map(|p| p.distance).sum::<f64>() / pairs.len() as f64),
        err_rot: median(&mut rot),
        err_rot_folded: median(&mut folded),
    }
}

/// Everything known about one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub width: usize,
    pub height: usize,
    /// Composed visibility mask per predicted object.
    pub pred_masks: Vec<Vec<bool>>,
    pub gt_masks: Vec<Vec<bool>>,
    pub pred_rgb: Vec<[f64; 3]>,
    pub gt_rgb: Vec<[f64; 3]>,
    pub pred_depth: Vec<f64>,
    pub gt_depth: Vec<f64>,
    /// Indexed like `pred_masks`.
    pub pred_poses: Vec<Pose>,
    pub gt_poses: Vec<Pose>,
}

/// Per-image results kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub matches: MatchResult,
    pub image: ImageMetrics,
    pub depth: DepthMetrics,
    pub poses: Vec<PosePair>,
}

pub fn evaluate_image(s: &EvalSample, symmetry: Symmetry) -> Result<ImageEval> {
    check_dim("predicted poses", s.pred_masks.len(), s.pred_poses.len())?;
    let matches = match_instances(&s.pred_masks, &s.gt_masks, &AP_THRESHOLDS)?;
    let image = image_metrics(&s.pred_rgb, &s.gt_rgb, s.width, s.height)?;
    check_dim("depth", s.width * s.height, s.pred_depth.len())?;
    let depth = depth_metrics(&s.pred_depth, &s.gt_depth)?;
    let tp: Vec<usize> = matches.at(0.5).map(|m| m.pairs.iter().map(|p| p.0).collect()).unwrap_or_default();
    let preds: Vec<Pose> = tp.iter().map(|&i| s.pred_poses[i]).collect();
    let poses = match_poses(&preds, &s.gt_poses, symmetry)?
        .into_iter()
        .map(|p| PosePair { pred: tp[p.pred], ..p })
        .collect();
    Ok(ImageEval { matches, image, depth, poses })
}

/// Dataset summary. Image and depth errors are per-image means; pose
/// errors pool the matched objects of all images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub instance: InstanceMetrics,
    pub image: ImageMetrics,
    pub depth: DepthMetrics,
    pub pose: PoseMetrics,
}

pub fn evaluate(samples: &[EvalSample], symmetry: Symmetry) -> Result<(EvalReport, Vec<ImageEval>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per: Vec<ImageEval> = samples.par_iter().map(|s| evaluate_image(s, symmetry)).collect::<Result<_>>()?;
    let matches: Vec<MatchResult> = per.iter().map(|e| e.matches.clone()).collect();
    let n = per.len() as f64;
    let mean = |f: &dyn Fn(&ImageEval) -> f64| per.iter().map(f).sum::<f64>() / n;
    let pairs: Vec<PosePair> = per.iter().flat_map(|e| e.poses.iter().copied()).collect();
    let report = EvalReport {
        images: per.len(),
        instance: instance_metrics(&matches)?,
        image: ImageMetrics { rmse: mean(&|e| e.image.rmse), psnr: mean(&|e| e.image.psnr), ssim: mean(&|e| e.image.ssim) },
        depth: DepthMetrics { rmse: mean(&|e| e.depth.rmse), abs_rd: mean(&|e| e.depth.abs_rd), sq_rd: mean(&|e| e.depth.sq_rd) },
        pose: pose_metrics(&pairs),
    };
    Ok((report, per))
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "images,mAP,AP50,AR50,F1_50,allObj,rgb_rmse,psnr,ssim,depth_rmse,abs_rd,sq_rd,pose_pairs,err_pos,err_rot,err_rot_folded";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One CSV row matching [`Self::CSV_HEADER`]; absent values are empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let i = &self.instance;
        [
            self.images.to_string(),
            i.map.to_string(),
            i.ap50.to_string(),
            i.ar50.to_string(),
            i.f1_50.to_string(),
            i.all_obj.to_string(),
            self.image.rmse.to_string(),
            self.image.psnr.to_string(),
            self.image.ssim.to_string(),
            self.depth.rmse.to_string(),
            self.depth.abs_rd.to_string(),
            self.depth.sq_rd.to_string(),
            self.pose.pairs.to_string(),
            opt(self.pose.err_pos),
            opt(self.pose.err_rot),
            opt(self.pose.err_rot_folded),
        ]
        .join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

fn finite_or_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

fn finite_or_string_de<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) => s.parse().map_err(serde::de::Error::custom),
    }
}
