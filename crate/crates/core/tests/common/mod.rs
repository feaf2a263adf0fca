//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdfscene::datagen::{generate_scene, GeneratorConfig, GroundTruth, SceneSpec};
use sdfscene::metrics::{match_instances, AP_THRESHOLDS, MIN_MASK_PIXELS};
use sdfscene::renderer::ObjectRender;

/// Per-pixel winner by exhaustive search: the smallest object depth that is
/// strictly below the plane depth, ties to the lowest index.
pub fn brute_force_winners(renders: &[ObjectRender<f64>], plane: &[f64]) -> Vec<Option<usize>> {
    (0..plane.len())
        .map(|p| {
            let hits: Vec<(f64, usize)> = renders.iter().enumerate().filter(|(_, r)| r.mask[p]).map(|(i, r)| (r.depth[p], i)).collect();
            let nearest = hits.iter().copied().fold(None, |acc: Option<(f64, usize)>, h| match acc {
                Some(a) if a.0 <= h.0 => Some(a),
                _ => Some(h),
            });
            nearest.filter(|(d, _)| *d < plane[p]).map(|(_, i)| i)
        })
        .collect()
}

/// Largest number of one-to-one pairs with IoU ≥ `tau`, by trying every
/// assignment.
pub fn brute_force_matches(ious: &[Vec<f64>], tau: f64) -> usize {
    fn go(row: usize, ious: &[Vec<f64>], tau: f64, used: &mut Vec<bool>) -> usize {
        if row == ious.len() {
            return 0;
        }
        let mut best = go(row + 1, ious, tau, used);
        for j in 0..used.len() {
            if !used[j] && ious[row][j] >= tau && ious[row][j] > 0.0 {
                used[j] = true;
                best = best.max(1 + go(row + 1, ious, tau, used));
                used[j] = false;
            }
        }
        best
    }
    let cols = ious.first().map_or(0, Vec::len);
    go(0, ious, tau, &mut vec![false; cols])
}

/// SSIM straight from its definition: every 7×7 window fully inside the
/// image, uniform weights, sample (co)variances, averaged.
pub fn ssim_direct(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = 7;
    let n = (k * k) as f64;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - k {
        for c0 in 0..=w - k {
            let px: Vec<(f64, f64)> = (r0..r0 + k).flat_map(|r| (c0..c0 + k).map(move |c| r * w + c)).map(|i| (a[i], b[i])).collect();
            let mx = px.iter().map(|p| p.0).sum::<f64>() / n;
            let my = px.iter().map(|p| p.1).sum::<f64>() / n;
            let vx = px.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / (n - 1.0);
            let vy = px.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / (n - 1.0);
            let cxy = px.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / (n - 1.0);
            sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Scene `id` of a seeded dataset with exactly `count` objects.
pub fn scene(seed: u64, id: u64, count: usize, size: usize) -> (SceneSpec, GroundTruth) {
    let cfg = GeneratorConfig { counts: vec![count], width: size, height: size, ..Default::default() };
    generate_scene(seed, id, &cfg).unwrap()
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let i = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let u = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

const GRID: usize = 12;

/// Disjoint instance masks from rectangles painted in order on a 12×12 grid.
fn paint(rects: &[(usize, usize, usize, usize)]) -> Vec<Vec<bool>> {
    let mut labels = vec![usize::MAX; GRID * GRID];
    for (k, &(r0, c0, r1, c1)) in rects.iter().enumerate() {
        for r in r0..r1.min(GRID) {
            for c in c0..c1.min(GRID) {
                labels[r * GRID + c] = k;
            }
        }
    }
    (0..rects.len()).map(|k| labels.iter().map(|&l| l == k).collect()).collect()
}

fn random_rects(rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize, usize)> {
    (0..rng.gen_range(1..=4))
        .map(|_| {
            let (r, c) = (rng.gen_range(0..7), rng.gen_range(0..7));
            (r, c, r + rng.gen_range(5..9), c + rng.gen_range(5..9))
        })
        .collect()
}

fn jitter(rects: &[(usize, usize, usize, usize)], rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize, usize)> {
    let mut j = |v: usize| (v as i64 + rng.gen_range(-2..=2)).clamp(0, GRID as i64) as usize;
    let mut out: Vec<_> = rects.iter().map(|&(a, b, c, d)| (j(a), j(b), j(c), j(d))).collect();
    if rng.gen_bool(0.3) {
        out.pop();
    }
    if rng.gen_bool(0.3) {
        let (r, c) = (rng.gen_range(0..7), rng.gen_range(0..7));
        out.push((r, c, r + 6, c + 6));
    }
    out
}

/// Compares greedy instance matching with the optimal assignment on
/// `seeds` random micro-instances whose positive IoUs are all distinct.
/// Returns the number compared and a description of every mismatch.
pub fn micro_instance_check(seeds: u64) -> (usize, Vec<String>) {
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt_rects = random_rects(&mut rng);
        let gt = paint(&gt_rects);
        let pred = paint(&jitter(&gt_rects, &mut rng));
        let visible = |m: &Vec<bool>| m.iter().filter(|&&v| v).count() >= MIN_MASK_PIXELS;
        let vp: Vec<&Vec<bool>> = pred.iter().filter(|m| visible(m)).collect();
        let vg: Vec<&Vec<bool>> = gt.iter().filter(|m| visible(m)).collect();
        let ious: Vec<Vec<f64>> = vp.iter().map(|p| vg.iter().map(|g| iou(p, g)).collect()).collect();
        let mut positive: Vec<f64> = ious.iter().flatten().copied().filter(|&v| v > 0.0).collect();
        positive.sort_by(f64::total_cmp);
        if positive.windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        compared += 1;
        let result = match_instances(&pred, &gt, &AP_THRESHOLDS).unwrap();
        for t in &result.thresholds {
            let best = brute_force_matches(&ious, t.tau);
            if t.tp() != best || t.fp() != vp.len() - t.tp() || t.fn_() != vg.len() - t.tp() {
                mismatches.push(format!("seed {seed} tau {}: tp {} vs {best}", t.tau, t.tp()));
            }
        }
    }
    (compared, mismatches)
}

fn mask(f: impl Fn(usize, usize) -> bool) -> Vec<bool> {
    (0..100).map(|i| f(i / 10, i % 10)).collect()
}

/// Two 10×10 images as `[A pred, A gt, B pred, B gt]`.
///
/// Image A: p0 is a 43-pixel subset of g0 (IoU 0.86); p1 covers g1 plus 7
/// pixels of g0 (IoU 50/57 ≈ 0.877).
/// Image B: g1 has 20 pixels and is invisible; p0 is 32 pixels of g0
/// (IoU 0.64); p1 has 20 pixels and is ignored; g2 is never matched.
/// Precision per τ: A is 1 up to 0.85 then 0; B is 1 up to 0.6 then 0,
/// so mAP = (3·1 + 5·0.5 + 2·0) / 10 = 0.55.
pub fn toy_images() -> [Vec<Vec<bool>>; 4] {
    [
        vec![mask(|r, c| c < 4 || (c == 4 && r < 3)), mask(|r, c| c >= 5 || (c == 4 && r >= 3))],
        vec![mask(|_, c| c < 5), mask(|_, c| c >= 5)],
        vec![mask(|r, c| r < 3 || (r == 3 && c < 2)), mask(|r, _| r >= 8)],
        vec![mask(|r, _| r < 5), mask(|r, _| r == 5 || r == 6), mask(|r, _| r >= 7)],
    ]
}
