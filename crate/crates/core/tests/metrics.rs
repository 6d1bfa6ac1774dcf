use ndarray::Array2;
use pact_core::metrics::{cnr, psnr, snr, ssim, PixelRect, RegionSpec};
use pact_core::{HeatImage, ImageGrid};
use proptest::prelude::*;

fn image(values: Vec<f64>, n: usize) -> HeatImage {
    HeatImage::new(
        ImageGrid::centered(n, n, 1e-3).unwrap(),
        Array2::from_shape_vec((n, n), values).unwrap(),
    )
    .unwrap()
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.0f64..1.0, 64),
        prop::collection::vec(0.0f64..1.0, 64),
    )
}

fn regions() -> RegionSpec {
    RegionSpec {
        signal: PixelRect::new(0, 0, 3, 3),
        background: PixelRect::new(4, 4, 4, 4),
    }
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_bounded((a, b) in pair()) {
        let (f, g) = (image(a, 8), image(b, 8));
        let s = ssim(&f, &g).unwrap();
        prop_assert!((s - ssim(&g, &f).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        prop_assert!((ssim(&f, &f).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric_and_drops_with_error((a, b) in pair(), t in 0.1f64..0.9) {
        let (f, g) = (image(a, 8), image(b.clone(), 8));
        let p = psnr(&f, &g).unwrap();
        prop_assert!((p - psnr(&g, &f).unwrap()).abs() < 1e-9);
        // Moving f toward g can only raise PSNR when the peak is unchanged.
        let mixed: Vec<f64> = f.as_slice().iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let m = image(mixed, 8);
        if m.max() <= g.max() && f.max() <= g.max() {
            prop_assert!(psnr(&m, &g).unwrap() >= p - 1e-9);
        }
    }

    #[test]
    fn snr_and_cnr_ignore_positive_scale(a in prop::collection::vec(0.0f64..1.0, 64), c in 0.1f64..10.0) {
        let f = image(a.clone(), 8);
        let scaled = image(a.iter().map(|v| c * v).collect(), 8);
        let r = regions();
        prop_assert!((snr(&f, &r).unwrap() - snr(&scaled, &r).unwrap()).abs() < 1e-9);
        prop_assert!((cnr(&f, &r).unwrap() - cnr(&scaled, &r).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn cnr_ignores_offset(a in prop::collection::vec(0.0f64..1.0, 64), d in -5.0f64..5.0) {
        let f = image(a.clone(), 8);
        let shifted = image(a.iter().map(|v| v + d).collect(), 8);
        let r = regions();
        prop_assert!((cnr(&f, &r).unwrap() - cnr(&shifted, &r).unwrap()).abs() < 1e-8);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = image(vec![0.0; 64], 8);
    let b = image(vec![0.0; 49], 7);
    assert!(ssim(&a, &b).is_err());
    assert!(psnr(&a, &b).is_err());
}
