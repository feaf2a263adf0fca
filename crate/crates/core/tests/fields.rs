use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdfscene::fitting::AdamConfig;
use sdfscene::shape_space::*;

/// Largest clamped deviation from the oracle on a 17³ grid over [−0.6, 0.6]³.
fn grid_error(mlp: &Mlp, code: &[f64], shape: &AnalyticShape, clamp: f64) -> f64 {
    let c = |v: f64| v.clamp(-clamp, clamp);
    let mut worst: f64 = 0.0;
    for i in 0..17 {
        for j in 0..17 {
            for k in 0..17 {
                let x = [i, j, k].map(|n| -0.6 + 1.2 * n as f64 / 16.0);
                worst = worst.max((c(mlp.forward(code, x)[0]) - c(eval_analytic_sdf(shape, x).unwrap())).abs());
            }
        }
    }
    worst
}

#[test]
fn fitted_sphere_field_matches_its_oracle() {
    let sphere = AnalyticShape::unit(PrimitiveKind::Sphere);
    let init = FieldParams::new(DEFAULT_SHAPE_DIM, DEFAULT_TEXTURE_DIM, 1).sdf;
    let cfg = FieldFitConfig::default();
    assert_eq!(cfg.steps, 10_000);
    let fit = fit_field(&init, &[(sphere, vec![0.0; DEFAULT_SHAPE_DIM])], &cfg).unwrap();
    assert_eq!(fit.loss_history.len(), 10_000);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let held_out = sample_oracle(&sphere, &cfg, &mut rng);
    let loss = clamped_l1(&fit.params, &fit.codes[0], &held_out, cfg.clamp);
    assert!(loss < 0.005, "clamped L1 {loss}");
    let err = grid_error(&fit.params, &fit.codes[0], &sphere, cfg.clamp);
    assert!(err < 0.02, "grid error {err}");
}

#[test]
fn two_shapes_get_distinct_codes() {
    let sphere = AnalyticShape::unit(PrimitiveKind::Sphere);
    let cube = AnalyticShape::unit(PrimitiveKind::Box);
    let init = FieldParams::new(DEFAULT_SHAPE_DIM, DEFAULT_TEXTURE_DIM, 2).sdf;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let codes: Vec<Vec<f64>> = (0..2).map(|_| (0..DEFAULT_SHAPE_DIM).map(|_| rng.gen_range(-0.01..0.01)).collect()).collect();
    let cfg = FieldFitConfig::default();
    let fit = fit_field(&init, &[(sphere, codes[0].clone()), (cube, codes[1].clone())], &cfg).unwrap();
    let gap = fit.codes[0].iter().zip(&fit.codes[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(gap > 0.0);
    for (shape, code) in [(sphere, &fit.codes[0]), (cube, &fit.codes[1])] {
        let err = grid_error(&fit.params, code, &shape, cfg.clamp);
        assert!(err < 0.05, "{:?} grid error {err}", shape.kind);
    }
}

#[test]
fn texture_field_reproduces_two_tones() {
    let (low, high) = ([0.9, 0.2, 0.1], [0.1, 0.3, 0.8]);
    let tone = |z: f64| if z < 0.0 { low } else { high };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let points: Vec<([f64; 3], Vec<f64>)> = (0..4000)
        .map(|_| {
            let x = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            (x, tone(x[2]).to_vec())
        })
        .collect();
    let init = FieldParams::new(DEFAULT_SHAPE_DIM, DEFAULT_TEXTURE_DIM, 3).texture;
    let trainer = Trainer {
        loss: PointLoss::SquaredError,
        batch_per_set: 128,
        steps: 2000,
        adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::FIELD },
        code_learning_rate: 1e-3,
        seed: 4,
    };
    let (params, codes, _) = trainer.run(&init, vec![vec![0.0; DEFAULT_TEXTURE_DIM]], &[points]).unwrap();
    let field = FieldSet { shape: ShapeModel::Family(AnalyticFamily), texture: Some(params.into()) };
    let texture = TextureParams::Code(codes[0].clone());
    for (x, y) in [(-0.3, 0.2), (0.0, 0.0), (0.35, -0.25)] {
        for z in [-0.4, -0.25, 0.25, 0.4] {
            let rgb = eval_texture(&texture, field.texture(), [x, y, z]).unwrap();
            let want = tone(z);
            for c in 0..3 {
                assert!((rgb[c] - want[c]).abs() < 0.05, "at {:?}: {rgb:?} vs {want:?}", [x, y, z]);
            }
        }
    }
}
