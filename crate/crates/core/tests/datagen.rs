mod common;

use std::fs;
use std::path::Path;

use sdfscene::datagen::*;
use sdfscene::io;
use sdfscene::losses::loss_intersection;
use sdfscene::renderer::{render_object, RayMarchConfig};
use sdfscene::shape_space::FieldSet;

fn small() -> GeneratorConfig {
    GeneratorConfig { width: 40, height: 40, ..Default::default() }
}

fn splits() -> Splits {
    Splits { train: 4, val: 2, test: 2 }
}

#[test]
fn regeneration_is_bitwise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(a.path(), 9, splits(), &small()).unwrap();
    let mb = generate_dataset(b.path(), 9, splits(), &small()).unwrap();
    assert_eq!(ma, mb);
    let read = |dir: &Path, rel: &str| fs::read(dir.join(rel)).unwrap();
    assert_eq!(read(a.path(), "manifest.json"), read(b.path(), "manifest.json"));
    for e in &ma.files {
        for rel in [&e.scene, &e.rgb, &e.depth, &e.mask] {
            assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel}");
        }
    }
    let other = tempfile::tempdir().unwrap();
    generate_dataset(other.path(), 10, splits(), &small()).unwrap();
    assert_ne!(read(a.path(), &ma.files[0].rgb), read(other.path(), &ma.files[0].rgb));
}

#[test]
fn written_files_agree_with_the_compositor_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let manifest = generate_dataset(dir.path(), 3, splits(), &cfg).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    let fields = FieldSet::default();
    for e in &manifest.files {
        let (cam, latent) = io::read_scene(&dir.path().join(&e.scene)).unwrap();
        let (ids, w, h) = io::read_mask_png(&dir.path().join(&e.mask)).unwrap();
        let (depth, dw, dh) = io::read_depth(&dir.path().join(&e.depth)).unwrap();
        let (rgb, _, _) = io::read_rgb_png(&dir.path().join(&e.rgb)).unwrap();
        assert_eq!((w, h, dw, dh), (cfg.width, cfg.height, cfg.width, cfg.height));
        assert_eq!(latent.slot_count(), e.objects);

        let objects = latent.objects().unwrap();
        let renders: Vec<_> = objects.iter().map(|o| render_object(o, &cam, &RayMarchConfig::ground_truth(), &fields).unwrap()).collect();
        let plane = cam.plane_depth(12.0);
        let winners = common::brute_force_winners(&renders, &plane);
        let bg = latent.background();
        for p in 0..w * h {
            assert_eq!(ids[p], winners[p].map_or(0, |i| i as u8 + 1), "scene {} pixel {p}", e.id);
            let (d, c) = match winners[p] {
                Some(i) => (renders[i].depth[p], renders[i].color[p]),
                None => (plane[p], bg),
            };
            assert!(depth[p] <= 12.0);
            assert_eq!(depth[p], d as f32 as f64);
            assert_eq!(rgb[p], c.map(|v| io::to_u8(v) as f64 / 255.0));
        }

        for (i, o) in objects.iter().enumerate() {
            let [x, y, _] = o.extrinsics.position;
            assert!((-1.5..=1.5).contains(&x) && (-1.5..=1.5).contains(&y));
            for other in &objects[i + 1..] {
                let pair = [o.clone(), other.clone()];
                assert_eq!(loss_intersection(&pair, &fields, cfg.intersection_samples).unwrap(), Some(0.0));
            }
        }
    }
}

#[test]
fn five_object_scenes_are_feasible() {
    let cfg = GeneratorConfig { counts: vec![5], ..small() };
    for id in 0..10 {
        let (spec, _) = generate_scene(12, id, &cfg).unwrap();
        assert_eq!(spec.latent.slot_count(), 5);
    }
}
