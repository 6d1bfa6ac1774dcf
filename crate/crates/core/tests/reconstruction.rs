use ndarray::Array2;
use pact_core::mb::{mb_reconstruct, tv_value, MbConfig};
use pact_core::phantom::{rasterize, synthesize_with, PhantomSpec, Sphere, VesselParams};
use pact_core::ubp::{ubp_reconstruct, UbpConfig};
use pact_core::{
    subsample_projections, Acquisition, ForwardOperator, HeatImage, ImageGrid, Medium, Point2,
    RingGeometry, Sinogram,
};

fn desk(n_el: usize) -> ForwardOperator {
    ForwardOperator::new(
        RingGeometry::new(0.04, n_el).unwrap(),
        Medium::new(1500.0).unwrap(),
        Acquisition::new(10e6, 512).unwrap(),
        ImageGrid::centered(64, 64, 4e-4).unwrap(),
    )
    .unwrap()
}

fn point(grid: &ImageGrid, c: Point2) -> HeatImage {
    let spec = PhantomSpec::Spheres {
        spheres: vec![Sphere {
            center: c,
            radius_m: 0.45e-3,
            amplitude: 1.0,
        }],
    };
    rasterize(&spec, grid).unwrap()
}

fn near(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1
}

#[test]
fn ubp_localizes_off_center_points() {
    let op = desk(64);
    let grid = *op.grid();
    for c in [Point2::new(3e-3, -2.2e-3), Point2::new(-7e-3, 5e-3)] {
        let truth = point(&grid, c);
        let sino = synthesize_with(&op, &truth, None).unwrap();
        for k in [64, 32] {
            let sub = subsample_projections(&sino, k).unwrap();
            let img = ubp_reconstruct(&sub, &grid, op.medium(), &UbpConfig::default()).unwrap();
            assert!(
                near(img.argmax(), truth.argmax()),
                "k={k}: {:?} vs {:?}",
                img.argmax(),
                truth.argmax()
            );
        }
    }
}

#[test]
fn ubp_is_linear_without_clamping() {
    let op = desk(32);
    let grid = *op.grid();
    let cfg = UbpConfig {
        clamp_negatives: false,
        ..UbpConfig::default()
    };
    let a = synthesize_with(&op, &point(&grid, Point2::new(2e-3, 1e-3)), None).unwrap();
    let b = synthesize_with(&op, &point(&grid, Point2::new(-4e-3, 6e-3)), None).unwrap();
    let sum = Sinogram::new(a.geometry.clone(), a.acquisition, &a.data * 2.0 - &b.data).unwrap();
    let ra = ubp_reconstruct(&a, &grid, op.medium(), &cfg).unwrap();
    let rb = ubp_reconstruct(&b, &grid, op.medium(), &cfg).unwrap();
    let rs = ubp_reconstruct(&sum, &grid, op.medium(), &cfg).unwrap();
    let expect = &ra.values * 2.0 - &rb.values;
    let scale = expect.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in rs.values.iter().zip(&expect) {
        assert!((x - y).abs() <= 1e-10 * scale);
    }
}

#[test]
fn ubp_quarter_turn_of_elements_rotates_image() {
    let op = desk(64);
    let grid = *op.grid();
    let truth = point(&grid, Point2::new(3e-3, -2.2e-3));
    let sino = synthesize_with(&op, &truth, None).unwrap();
    let mut shifted = Array2::zeros(sino.data.dim());
    for e in 0..64 {
        shifted.row_mut((e + 16) % 64).assign(&sino.data.row(e));
    }
    let shifted = Sinogram::new(sino.geometry.clone(), sino.acquisition, shifted).unwrap();
    let cfg = UbpConfig::default();
    let a = ubp_reconstruct(&sino, &grid, op.medium(), &cfg).unwrap();
    let b = ubp_reconstruct(&shifted, &grid, op.medium(), &cfg).unwrap();
    let peak = a.max();
    for iy in 0..64 {
        for ix in 0..64 {
            let rotated = b.values[[ix, 63 - iy]];
            assert!((rotated - a.values[[iy, ix]]).abs() <= 1e-9 * peak);
        }
    }
}

#[test]
fn mb_objective_is_monotone_and_image_nonnegative() {
    let full = desk(64);
    let grid = *full.grid();
    let truth = rasterize(
        &PhantomSpec::VesselBranches(VesselParams::for_grid(&grid, 7)),
        &grid,
    )
    .unwrap();
    let sino = synthesize_with(&full, &truth, None).unwrap();
    let sub = subsample_projections(&sino, 16).unwrap();
    let op = full.for_geometry(sub.geometry.clone()).unwrap();
    let res = mb_reconstruct(&sub, &op, &MbConfig::default()).unwrap();
    assert_eq!(res.history.len(), 50);
    for w in res.history.windows(2) {
        assert!(w[1].objective <= w[0].objective, "{:?} -> {:?}", w[0], w[1]);
    }
    let first = &res.history[0];
    let last = res.history.last().unwrap();
    assert!(last.data_term < 0.1 * first.data_term);
    assert!(res.image.min() >= 0.0);
}

#[test]
fn mb_tv_weight_smooths() {
    let full = desk(64);
    let grid = *full.grid();
    let truth = rasterize(
        &PhantomSpec::VesselBranches(VesselParams::for_grid(&grid, 3)),
        &grid,
    )
    .unwrap();
    let sino = synthesize_with(&full, &truth, None).unwrap();
    let sub = subsample_projections(&sino, 8).unwrap();
    let op = full.for_geometry(sub.geometry.clone()).unwrap();
    let tv = |lambda: f64| {
        let cfg = MbConfig {
            lambda,
            max_iters: 30,
            ..MbConfig::default()
        };
        let img = mb_reconstruct(&sub, &op, &cfg).unwrap().image;
        tv_value(&img, 1e-6).unwrap()
    };
    assert!(tv(0.1) < tv(0.0));
}

#[test]
fn mb_localizes_point() {
    let op = desk(64);
    let truth = point(op.grid(), Point2::new(3e-3, -2.2e-3));
    let sino = synthesize_with(&op, &truth, None).unwrap();
    let cfg = MbConfig {
        max_iters: 20,
        ..MbConfig::default()
    };
    let img = mb_reconstruct(&sino, &op, &cfg).unwrap().image;
    assert!(near(img.argmax(), truth.argmax()));
}

#[test]
fn mb_zero_sinogram_gives_zero_image() {
    let op = desk(16);
    let sino = Sinogram::zeros(op.geometry().clone(), *op.acquisition());
    let res = mb_reconstruct(&sino, &op, &MbConfig::default()).unwrap();
    assert!(res.image.values.iter().all(|v| *v == 0.0));
}
