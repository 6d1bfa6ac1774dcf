use pact_core::inr::{
    encode, predict_signals, train, FieldConfig, FieldDomain, HashEncodingConfig, NeuralField,
    TrainConfig,
};
use pact_core::phantom::{rasterize, synthesize_with, PhantomSpec, Sphere};
use pact_core::{
    subsample_projections, Acquisition, ForwardOperator, ImageGrid, Medium, Point2, RingGeometry,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk(n_el: usize) -> ForwardOperator {
    ForwardOperator::new(
        RingGeometry::new(0.04, n_el).unwrap(),
        Medium::new(1500.0).unwrap(),
        Acquisition::new(10e6, 512).unwrap(),
        ImageGrid::centered(64, 64, 4e-4).unwrap(),
    )
    .unwrap()
}

fn small_field() -> FieldConfig {
    FieldConfig {
        encoding: HashEncodingConfig {
            num_levels: 6,
            features_per_level: 2,
            table_size_log2: 14,
            base_resolution: 8,
            finest_resolution: 96,
        },
        hidden: vec![32, 32],
    }
}

#[test]
fn smooth_field_predictions_match_rendered_image() {
    let op = desk(16);
    let grid = *op.grid();
    let cfg = FieldConfig {
        encoding: HashEncodingConfig {
            num_levels: 2,
            features_per_level: 2,
            table_size_log2: 10,
            base_resolution: 2,
            finest_resolution: 4,
        },
        hidden: vec![16],
    };
    let mut nf = NeuralField::<f64>::new(cfg, FieldDomain::for_grid(&grid), 5).unwrap();
    let tables = nf.table_len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in &mut nf.params_mut()[..tables] {
        *p = rng.gen_range(-1.0..1.0);
    }
    let rays = op.interior_rays();
    let direct = predict_signals(&nf, &op, &rays).unwrap();
    let rendered = op.apply(&nf.render_grid(&grid).unwrap()).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (r, d) in rays.iter().zip(&direct) {
        let g = rendered.data[[r.element, r.sample]];
        num += (d - g) * (d - g);
        den += g * g;
    }
    assert!(den > 0.0);
    assert!(
        (num / den).sqrt() < 1e-2,
        "relative error {}",
        (num / den).sqrt()
    );
}

#[test]
fn training_fits_point_source() {
    let full = desk(64);
    let grid = *full.grid();
    let spec = PhantomSpec::Spheres {
        spheres: vec![Sphere {
            center: Point2::new(3e-3, -2.2e-3),
            radius_m: 0.45e-3,
            amplitude: 1.0,
        }],
    };
    let truth = rasterize(&spec, &grid).unwrap();
    let sino = subsample_projections(&synthesize_with(&full, &truth, None).unwrap(), 32).unwrap();
    let op = full.for_geometry(sino.geometry.clone()).unwrap();
    let nf = NeuralField::<f32>::new(small_field(), FieldDomain::for_grid(&grid), 0).unwrap();
    let cfg = TrainConfig {
        rays_per_batch: 256,
        loss_stop_threshold: 1e-5,
        max_epochs: 100,
        ..TrainConfig::default()
    };
    let res = train(nf, &sino, &op, &cfg).unwrap();
    let first = res.history[0].loss;
    let last = res.history.last().unwrap().loss;
    assert!(last * 10.0 <= first, "{first} -> {last}");
    assert!(last < 1e-3);
    let img = res.field.render_grid(&grid).unwrap();
    let (a, b) = (img.argmax(), truth.argmax());
    assert!(
        a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1,
        "{a:?} vs {b:?}"
    );
}

#[test]
fn training_is_deterministic() {
    let full = desk(64);
    let grid = *full.grid();
    let spec = PhantomSpec::Spheres {
        spheres: vec![Sphere {
            center: Point2::new(-2e-3, 4e-3),
            radius_m: 1e-3,
            amplitude: 1.0,
        }],
    };
    let truth = rasterize(&spec, &grid).unwrap();
    let sino = subsample_projections(&synthesize_with(&full, &truth, None).unwrap(), 8).unwrap();
    let op = full.for_geometry(sino.geometry.clone()).unwrap();
    let run = |seed: u64| {
        let nf =
            NeuralField::<f32>::new(small_field(), FieldDomain::for_grid(&grid), seed).unwrap();
        let cfg = TrainConfig {
            rays_per_batch: 512,
            max_epochs: 2,
            eta: 0.02,
            tv_resolution: 32,
            seed,
            ..TrainConfig::default()
        };
        train(nf, &sino, &op, &cfg).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(a.field.params(), b.field.params());
    assert_eq!(a.history, b.history);
    assert_ne!(a.field.params(), c.field.params());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn features_are_convex_combinations(
        u in 0.0f64..1.0,
        v in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let cfg = small_field().encoding;
        let (_, total) = cfg.level_offsets();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables: Vec<f64> = (0..total)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let features = encode([u, v], &cfg, &tables).unwrap();
        prop_assert_eq!(features.len(), cfg.output_dim());
        for f in features {
            prop_assert!((-1.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn encoding_is_continuous(
        u in 0.0f64..1.0,
        v in 0.0f64..1.0,
        du in -1e-7f64..1e-7,
        dv in -1e-7f64..1e-7,
    ) {
        let cfg = small_field().encoding;
        let (_, total) = cfg.level_offsets();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tables: Vec<f64> = (0..total)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let a = encode([u, v], &cfg, &tables).unwrap();
        let b = encode([u + du, v + dv], &cfg, &tables).unwrap();
        // Each level's interpolant is Lipschitz with constant ≲ 2·N·max|table|.
        let bound = 4.0 * cfg.finest_resolution as f64 * 2e-7;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= bound);
        }
    }
}
