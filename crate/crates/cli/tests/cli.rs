use std::fs;
use std::path::{Path, PathBuf};

use sdfscene::datagen::read_manifest;
use sdfscene::fitting::SceneLatent;
use sdfscene::io;
use sdfscene::losses::loss_intersection;
use sdfscene::metrics::EvalReport;
use sdfscene::shape_space::FieldSet;
use sdfscene_cli::{run, CliError, RunConfig};
use tempfile::TempDir;

fn sdf(args: &[&str]) -> Result<(), CliError> {
    run(std::iter::once("sdfscene").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn generate(dir: &Path, objects: usize, count: usize, seed: u64) {
    sdf(&["generate", "--objects", &objects.to_string(), "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", p(dir)]).unwrap();
}

#[test]
fn generate_is_deterministic() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    generate(&a, 3, 10, 7);
    generate(&b, 3, 10, 7);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 2 + 4 * 10);
    assert_eq!(ta, tb);
}

#[test]
fn generate_defaults_and_threads() {
    let t = TempDir::new().unwrap();
    let dir = t.path().join("d");
    sdf(&["generate", "--count", "12", "--seed", "3", "--threads", "1", "--out", p(&dir)]).unwrap();
    let m = read_manifest(&dir).unwrap();
    assert_eq!(m.generator.counts, vec![2, 3, 4, 5]);
    assert!(m.files.iter().all(|f| (2..=5).contains(&f.objects)));
    let (_, w, h) = io::read_rgb_png(&dir.join(&m.files[0].rgb)).unwrap();
    assert_eq!((w, h), (64, 64));
    let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!((cfg.command.as_str(), cfg.seed), ("generate", 3));

    let other = t.path().join("e");
    sdf(&["generate", "--count", "12", "--seed", "3", "--threads", "2", "--out", p(&other)]).unwrap();
    assert_eq!(tree(&dir), tree(&other));
}

#[test]
fn render_reproduces_dataset_files() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    generate(&data, 3, 2, 11);
    let m = read_manifest(&data).unwrap();
    for f in &m.files {
        let out = t.path().join(format!("r{}", f.id));
        sdf(&["render", p(&data.join(&f.scene)), "--out", p(&out)]).unwrap();
        assert_eq!(fs::read(out.join("depth.f32")).unwrap(), fs::read(data.join(&f.depth)).unwrap());
        assert_eq!(fs::read(out.join("mask.png")).unwrap(), fs::read(data.join(&f.mask)).unwrap());
        assert_eq!(fs::read(out.join("rgb.png")).unwrap(), fs::read(data.join(&f.rgb)).unwrap());
    }
}

#[test]
fn coarse_render_masks_match_fine_renders() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    generate(&data, 1, 20, 5);
    let m = read_manifest(&data).unwrap();
    let mut worst = 1.0f64;
    for f in &m.files {
        let out = t.path().join(format!("r{}", f.id));
        sdf(&["render", p(&data.join(&f.scene)), "--steps", "12", "--out", p(&out)]).unwrap();
        let (coarse, _, _) = io::read_mask_png(&out.join("mask.png")).unwrap();
        let (fine, _, _) = io::read_mask_png(&data.join(&f.mask)).unwrap();
        let a: Vec<bool> = coarse.iter().map(|&v| v == 1).collect();
        let b: Vec<bool> = fine.iter().map(|&v| v == 1).collect();
        worst = worst.min(sdfscene::metrics::iou(&a, &b).unwrap());
    }
    assert!(worst >= 0.95, "worst mask IoU {worst}");
}

#[test]
fn malformed_scene_fails_without_outputs() {
    let t = TempDir::new().unwrap();
    let bad = t.path().join("bad.scene");
    fs::write(&bad, "{\n  \"version\": 1,\n  \"camera\": []\n}").unwrap();
    let out = t.path().join("out");
    let err = sdf(&["render", p(&bad), "--out", p(&out)]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("line 3"), "{err}");
    assert!(!out.exists());
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let t = TempDir::new().unwrap();
    assert_eq!(sdf(&["frobnicate"]).unwrap_err().exit_code(), 1);
    assert_eq!(sdf(&["generate", "--threads", "0"]).unwrap_err().exit_code(), 1);
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"generate": {"bogus": 1}}"#).unwrap();
    let err = sdf(&["generate", "--config", p(&cfg), "--out", p(&t.path().join("o"))]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert_eq!(sdf(&["fit", "--rgb", "x.png", "--depth", "x.f32", "--slots", "0"]).unwrap_err().exit_code(), 1);
}

#[test]
fn config_file_overrides_parts_of_defaults() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 9, "generate": {"splits": {"train": 2, "val": 1, "test": 0}}}"#).unwrap();
    let out = t.path().join("o");
    sdf(&["generate", "--config", p(&cfg), "--out", p(&out)]).unwrap();
    let m = read_manifest(&out).unwrap();
    assert_eq!((m.seed, m.files.len()), (9, 3));
    assert_eq!(m.files[2].split, "val");
}

fn fit_third(t: &TempDir, data: &Path, out: &str) -> PathBuf {
    let m = read_manifest(data).unwrap();
    let f = &m.files[2];
    let dir = t.path().join(out);
    sdf(&[
        "fit",
        "--rgb",
        p(&data.join(&f.rgb)),
        "--depth",
        p(&data.join(&f.depth)),
        "--camera",
        p(&data.join(&f.scene)),
        "--slots",
        "1",
        "--steps-per-slot",
        "200",
        "--final-steps",
        "400",
        "--snapshot-every",
        "300",
        "--seed",
        "4",
        "--out",
        p(&dir),
    ])
    .unwrap();
    dir
}

#[test]
fn fit_then_eval_round_trip() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    sdf(&["generate", "--objects", "1", "--count", "3", "--seed", "100", "--out", p(&data)]).unwrap();
    let fit = fit_third(&t, &data, "fit");
    for name in ["config.json", "scene.scene", "loss.jsonl", "rgb.png", "depth.f32", "mask.png", "snapshots/step_000300.scene"] {
        assert!(fit.join(name).exists(), "{name}");
    }
    assert_eq!(fs::read_to_string(fit.join("loss.jsonl")).unwrap().lines().count(), 600);

    let again = fit_third(&t, &data, "fit2");
    assert_eq!(fs::read(fit.join("scene.scene")).unwrap(), fs::read(again.join("scene.scene")).unwrap());

    // predictions for scene 2 only; the others are missing and score as all-FN
    let pred = t.path().join("pred");
    fs::create_dir_all(pred.join("scenes")).unwrap();
    fs::copy(fit.join("scene.scene"), pred.join("scenes/000002.scene")).unwrap();
    let ev = t.path().join("eval");
    sdf(&["eval", "--pred", p(&pred), "--gt", p(&data), "--out", p(&ev)]).unwrap();
    let per: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("per_image.json")).unwrap()).unwrap();
    let pairs = &per[2]["matches"]["thresholds"][0]["pairs"];
    assert_eq!(pairs.as_array().unwrap().len(), 1);
    assert!(pairs[0][2].as_f64().unwrap() > 0.9, "IoU {}", pairs[0][2]);
    assert_eq!(per[0]["prediction_found"], false);
    assert_eq!(per[0]["matches"]["thresholds"][0]["pairs"].as_array().unwrap().len(), 0);
    let report = EvalReport::from_json(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.images, 3);
    assert!(report.instance.ar50 <= 0.5);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    generate(&data, 3, 4, 21);
    let ev = t.path().join("eval");
    sdf(&["eval", "--pred", p(&data), "--gt", p(&data), "--out", p(&ev)]).unwrap();
    let r = EvalReport::from_json(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!((r.instance.map, r.instance.ap50, r.instance.ar50, r.instance.f1_50, r.instance.all_obj), (1.0, 1.0, 1.0, 1.0, 1.0));
    assert_eq!((r.image.rmse, r.image.psnr), (0.0, f64::INFINITY));
    assert_eq!((r.depth.rmse, r.depth.abs_rd, r.depth.sq_rd), (0.0, 0.0, 0.0));
    assert_eq!((r.pose.err_pos, r.pose.err_rot), (Some(0.0), Some(0.0)));
    let csv = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(csv.starts_with(EvalReport::CSV_HEADER));
}

fn scene_text(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn edit_swap_twice_restores_file() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    generate(&data, 3, 1, 2);
    let scene = data.join("scenes/000000.scene");
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    sdf(&["edit", p(&scene), "--swap", "0", "1", "--out", p(&a)]).unwrap();
    assert_ne!(scene_text(&a.join("scene.scene")), scene_text(&scene));
    sdf(&["edit", p(&a.join("scene.scene")), "--swap", "0", "1", "--render", "--out", p(&b)]).unwrap();
    assert_eq!(scene_text(&b.join("scene.scene")), scene_text(&scene));
    assert!(b.join("before_rgb.png").exists() && b.join("after_mask.png").exists());
}

#[test]
fn edit_sampled_pose_is_collision_free() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    generate(&data, 4, 1, 8);
    let scene = data.join("scenes/000000.scene");
    for seed in 0..5 {
        let out = t.path().join(format!("s{seed}"));
        sdf(&["edit", p(&scene), "--sample-pose", "2", "--seed", &seed.to_string(), "--out", p(&out)]).unwrap();
        let (_, latent): (_, SceneLatent) = io::read_scene(&out.join("scene.scene")).unwrap();
        let objects = latent.objects().unwrap();
        for j in 0..objects.len() {
            if j != 2 {
                let pair = [objects[2].clone(), objects[j].clone()];
                assert_eq!(loss_intersection(&pair, &FieldSet::default(), 32).unwrap().unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn edit_rejects_bad_slot() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    generate(&data, 2, 1, 1);
    let out = t.path().join("o");
    let err = sdf(&["edit", p(&data.join("scenes/000000.scene")), "--remove", "2", "--out", p(&out)]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!out.join("scene.scene").exists());
    assert_eq!(sdf(&["edit", p(&data.join("scenes/000000.scene")), "--out", p(&out)]).unwrap_err().exit_code(), 1);
}
