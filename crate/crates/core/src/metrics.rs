//! Image-quality metrics: SSIM and PSNR against a ground truth, SNR and CNR
//! from signal/background regions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{HeatImage, ImageGrid};

/// Stabilizing constants for SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimConstants {
    /// `C₁ = (0.01·L)²`, `C₂ = (0.03·L)²` with dynamic range `L = 1`.
    #[default]
    Squared,
    /// `C₁ = 0.01`, `C₂ = 0.03` taken literally.
    Raw,
}

impl SsimConstants {
    fn values(self) -> (f64, f64) {
        match self {
            SsimConstants::Squared => (0.01f64.powi(2), 0.03f64.powi(2)),
            SsimConstants::Raw => (0.01, 0.03),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    /// One window spanning the whole image.
    #[default]
    Global,
    /// Mean over 11×11 Gaussian windows (σ = 1.5), valid positions only.
    Gaussian11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SsimOptions {
    #[serde(default)]
    pub constants: SsimConstants,
    #[serde(default)]
    pub window: SsimWindow,
}

fn check_same_shape(a: &HeatImage, b: &HeatImage) -> Result<()> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "images are {:?} and {:?}",
            a.values.dim(),
            b.values.dim()
        )));
    }
    Ok(())
}

/// Global SSIM with the standard squared constants.
pub fn ssim(f: &HeatImage, gt: &HeatImage) -> Result<f64> {
    ssim_with(f, gt, SsimOptions::default())
}

pub fn ssim_with(f: &HeatImage, gt: &HeatImage, opts: SsimOptions) -> Result<f64> {
    check_same_shape(f, gt)?;
    let (c1, c2) = opts.constants.values();
    match opts.window {
        SsimWindow::Global => {
            let n = f.values.len() as f64;
            let weights = vec![1.0 / n; f.values.len()];
            Ok(weighted_ssim(f.as_slice(), gt.as_slice(), &weights, c1, c2))
        }
        SsimWindow::Gaussian11 => gaussian_ssim(f, gt, c1, c2),
    }
}

fn weighted_ssim(f: &[f64], g: &[f64], w: &[f64], c1: f64, c2: f64) -> f64 {
    let mu_f: f64 = f.iter().zip(w).map(|(a, w)| a * w).sum();
    let mu_g: f64 = g.iter().zip(w).map(|(a, w)| a * w).sum();
    let (mut var_f, mut var_g, mut cov) = (0.0, 0.0, 0.0);
    for ((a, b), w) in f.iter().zip(g).zip(w) {
        let (da, db) = (a - mu_f, b - mu_g);
        var_f += w * da * da;
        var_g += w * db * db;
        cov += w * da * db;
    }
    ((2.0 * mu_f * mu_g + c1) * (2.0 * cov + c2))
        / ((mu_f * mu_f + mu_g * mu_g + c1) * (var_f + var_g + c2))
}

fn gaussian_ssim(f: &HeatImage, gt: &HeatImage, c1: f64, c2: f64) -> Result<f64> {
    const SIZE: usize = 11;
    let (ny, nx) = f.values.dim();
    if nx < SIZE || ny < SIZE {
        return Err(invalid(
            "window",
            format!("image {nx}x{ny} smaller than the 11x11 window"),
        ));
    }
    let sigma: f64 = 1.5;
    let half = (SIZE / 2) as f64;
    let mut kernel = Vec::with_capacity(SIZE * SIZE);
    for j in 0..SIZE {
        for i in 0..SIZE {
            let (dx, dy) = (i as f64 - half, j as f64 - half);
            kernel.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut sum = 0.0;
    let mut count = 0usize;
    let mut fw = vec![0.0; SIZE * SIZE];
    let mut gw = vec![0.0; SIZE * SIZE];
    for y0 in 0..=ny - SIZE {
        for x0 in 0..=nx - SIZE {
            for j in 0..SIZE {
                for i in 0..SIZE {
                    fw[j * SIZE + i] = f.values[[y0 + j, x0 + i]];
                    gw[j * SIZE + i] = gt.values[[y0 + j, x0 + i]];
                }
            }
            sum += weighted_ssim(&fw, &gw, &kernel, c1, c2);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// PSNR in dB with `I_max` the larger of the two image maxima.
/// Identical images give `+∞`.
pub fn psnr(f: &HeatImage, gt: &HeatImage) -> Result<f64> {
    check_same_shape(f, gt)?;
    let n = f.values.len() as f64;
    let mse: f64 = f
        .values
        .iter()
        .zip(gt.values.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let i_max = f.max().max(gt.max());
    Ok(10.0 * (i_max * i_max / mse).log10())
}

/// SSIM and PSNR after min-max normalizing both images to [0, 1].
pub fn compare_normalized(f: &HeatImage, gt: &HeatImage) -> Result<(f64, f64)> {
    let (a, b) = (f.normalized(), gt.normalized());
    Ok((ssim(&a, &b)?, psnr(&a, &b)?))
}

/// Pixel rectangle `[x, x + width) × [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    fn overlaps(&self, o: &PixelRect) -> bool {
        self.x < o.x + o.width
            && o.x < self.x + self.width
            && self.y < o.y + o.height
            && o.y < self.y + self.height
    }

    fn fits(&self, grid: &ImageGrid) -> bool {
        self.x + self.width <= grid.nx && self.y + self.height <= grid.ny
    }

    fn values<'a>(&self, img: &'a HeatImage) -> impl Iterator<Item = f64> + 'a {
        let r = *self;
        (r.y..r.y + r.height)
            .flat_map(move |iy| (r.x..r.x + r.width).map(move |ix| img.values[[iy, ix]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub signal: PixelRect,
    pub background: PixelRect,
}

impl RegionSpec {
    pub fn validate(&self, grid: &ImageGrid) -> Result<()> {
        for (name, r) in [("signal", &self.signal), ("background", &self.background)] {
            if r.area() < 4 {
                return Err(invalid(
                    "regions",
                    format!("{name} rectangle has fewer than 4 pixels"),
                ));
            }
            if !r.fits(grid) {
                return Err(invalid(
                    "regions",
                    format!("{name} rectangle {r:?} leaves the grid"),
                ));
            }
        }
        if self.signal.overlaps(&self.background) {
            return Err(invalid(
                "regions",
                "signal and background rectangles overlap",
            ));
        }
        Ok(())
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `20·log₁₀(mean(signal) / std(background))`. A zero background std gives
/// `+∞`; a negative signal mean is reported through the magnitude with a
/// warning.
pub fn snr(img: &HeatImage, regions: &RegionSpec) -> Result<f64> {
    regions.validate(&img.grid)?;
    let (signal, _) = mean_std(regions.signal.values(img));
    let (_, sigma) = mean_std(regions.background.values(img));
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    if signal < 0.0 {
        log::warn!("SNR: signal region mean is negative ({signal}); reporting its magnitude");
    }
    Ok(20.0 * (signal.abs() / sigma).log10())
}

/// `20·log₁₀(|mean(signal) - mean(background)| / std(background))`.
/// Zero background std gives `+∞`, equal means give `-∞`.
pub fn cnr(img: &HeatImage, regions: &RegionSpec) -> Result<f64> {
    regions.validate(&img.grid)?;
    let (signal, _) = mean_std(regions.signal.values(img));
    let (background, sigma) = mean_std(regions.background.values(img));
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * ((signal - background).abs() / sigma).log10())
}
