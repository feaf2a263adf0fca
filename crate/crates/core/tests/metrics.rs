mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdfscene::metrics::*;

#[test]
fn greedy_matching_equals_optimal_assignment_on_micro_instances() {
    let (compared, mismatches) = common::micro_instance_check(1000);
    assert!(mismatches.is_empty(), "{mismatches:?}");
    assert!(compared > 800, "only {compared} distinct-IoU cases");
}

#[test]
fn two_image_toy_set_matches_hand_enumeration() {
    let [a_pred, a_gt, b_pred, b_gt] = common::toy_images();
    let a = match_instances(&a_pred, &a_gt, &AP_THRESHOLDS).unwrap();
    let b = match_instances(&b_pred, &b_gt, &AP_THRESHOLDS).unwrap();
    assert_eq!(b.valid_gt, vec![0, 2]);
    assert_eq!(b.valid_pred, vec![0]);
    for (tau, tp_a, tp_b) in [(0.5, 2, 1), (0.6, 2, 1), (0.65, 2, 0), (0.85, 2, 0), (0.9, 0, 0), (0.95, 0, 0)] {
        assert_eq!(a.at(tau).unwrap().tp(), tp_a, "A at {tau}");
        assert_eq!(b.at(tau).unwrap().tp(), tp_b, "B at {tau}");
    }
    assert_eq!(a.at(0.5).unwrap().pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(1, 1), (0, 0)]);

    let m = instance_metrics(&[a, b]).unwrap();
    assert!((m.map - 0.55).abs() < 1e-12, "{}", m.map);
    assert!((m.ap50 - 1.0).abs() < 1e-12);
    assert!((m.ar50 - 0.75).abs() < 1e-12);
    assert!((m.f1_50 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((m.all_obj - 0.5).abs() < 1e-12);
}

#[test]
fn ssim_matches_direct_formula() {
    for (seed, w, h) in [(1u64, 16, 16), (2, 23, 9), (3, 64, 64)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + rng.gen_range(-0.2..0.2f64)).clamp(0.0, 1.0)).collect();
        let fast = ssim_channel(&a, &b, w, h, 1.0).unwrap();
        let direct = common::ssim_direct(&a, &b, w, h);
        assert!((fast - direct).abs() < 1e-6, "{fast} vs {direct}");
    }
}

#[test]
fn image_metrics_follow_their_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (20, 12);
    let gt: Vec<[f64; 3]> = (0..w * h).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let pred: Vec<[f64; 3]> = gt.iter().map(|p| p.map(|v| (v + rng.gen_range(-0.1..0.1f64)).clamp(0.0, 1.0))).collect();
    let m = image_metrics(&pred, &gt, w, h).unwrap();
    let mut sq = 0.0;
    for (p, g) in pred.iter().zip(&gt) {
        for c in 0..3 {
            sq += (p[c] - g[c]) * (p[c] - g[c]);
        }
    }
    let mse = sq / (w * h) as f64;
    assert!((m.rmse - mse.sqrt()).abs() < 1e-12);
    assert!((m.psnr - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    let chan = |img: &[[f64; 3]], c: usize| img.iter().map(|p| p[c]).collect::<Vec<_>>();
    let ssim = (0..3).map(|c| common::ssim_direct(&chan(&pred, c), &chan(&gt, c), w, h)).sum::<f64>() / 3.0;
    assert!((m.ssim - ssim).abs() < 1e-6);
}

#[test]
fn depth_metrics_match_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt: Vec<f64> = (0..4096).map(|_| rng.gen_range(4.0..12.0)).collect();
    let pred: Vec<f64> = gt.iter().map(|g| g + rng.gen_range(-1.0..1.0)).collect();
    let m = depth_metrics(&pred, &gt).unwrap();
    let n = gt.len() as f64;
    let rmse = (pred.iter().zip(&gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    let abs_rd = pred.iter().zip(&gt).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n;
    let sq_rd = pred.iter().zip(&gt).map(|(p, g)| (p - g).powi(2) / g).sum::<f64>() / n;
    assert!((m.rmse - rmse).abs() < 1e-9);
    assert!((m.abs_rd - abs_rd).abs() < 1e-9);
    assert!((m.sq_rd - sq_rd).abs() < 1e-9);
}

#[test]
fn greedy_pose_matching_is_optimal_when_well_separated() {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // ground truth spaced ≥ 1 apart, predictions within 0.2 of theirs
        let gt: Vec<Pose> = (0..3).map(|k| Pose::new([k as f64 * 1.2 + rng.gen_range(-0.1..0.1), rng.gen_range(-1.5..1.5), 0.4], rng.gen_range(-3.0..3.0))).collect();
        let order = perms[rng.gen_range(0..6)];
        let pred: Vec<Pose> = order
            .iter()
            .map(|&k| {
                let g = gt[k].position;
                Pose::new([g[0] + rng.gen_range(-0.2..0.2), g[1] + rng.gen_range(-0.2..0.2), g[2]], rng.gen_range(-3.0..3.0))
            })
            .collect();
        let pairs = match_poses(&pred, &gt, Symmetry::Period(std::f64::consts::PI)).unwrap();
        let dist = |p: &Pose, g: &Pose| p.position.iter().zip(&g.position).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let optimum = perms.iter().map(|pm| (0..3).map(|i| dist(&pred[i], &gt[pm[i]])).sum::<f64>() / 3.0).fold(f64::INFINITY, f64::min);
        let greedy = pose_metrics(&pairs).err_pos.unwrap();
        assert!((greedy - optimum).abs() < 1e-12, "seed {seed}: {greedy} vs {optimum}");
    }
}
