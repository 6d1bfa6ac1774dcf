//! 8-bit grayscale previews. Each image is min-max normalized on its own and
//! flipped so that +y points up.

use std::path::Path;

use image::{GrayImage, Luma};
use pact_core::HeatImage;

use crate::error::CliError;

const GAP: u32 = 2;

pub fn to_gray(img: &HeatImage) -> GrayImage {
    let n = img.normalized();
    let (ny, nx) = n.values.dim();
    GrayImage::from_fn(nx as u32, ny as u32, |x, y| {
        let v = n.values[[ny - 1 - y as usize, x as usize]];
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

fn save(img: &GrayImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

pub fn save_png(img: &HeatImage, path: &Path) -> Result<(), CliError> {
    save(&to_gray(img), path)
}

/// Tile images in rows; missing cells stay white.
pub fn tile(rows: &[Vec<Option<HeatImage>>]) -> Option<GrayImage> {
    let first = rows.iter().flatten().flatten().next()?;
    let (h, w) = first.values.dim();
    let (w, h) = (w as u32, h as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let n_rows = rows.len() as u32;
    let mut out = GrayImage::from_pixel(
        cols * w + (cols.saturating_sub(1)) * GAP,
        n_rows * h + (n_rows.saturating_sub(1)) * GAP,
        Luma([255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let Some(img) = cell else { continue };
            if img.values.dim() != first.values.dim() {
                continue;
            }
            let g = to_gray(img);
            let (x0, y0) = (c as u32 * (w + GAP), r as u32 * (h + GAP));
            for (x, y, p) in g.enumerate_pixels() {
                out.put_pixel(x0 + x, y0 + y, *p);
            }
        }
    }
    Some(out)
}

pub fn save_strip(images: &[Option<HeatImage>], path: &Path) -> Result<(), CliError> {
    match tile(&[images.to_vec()]) {
        Some(img) => save(&img, path),
        None => Ok(()),
    }
}

pub fn save_grid(rows: &[Vec<Option<HeatImage>>], path: &Path) -> Result<(), CliError> {
    match tile(rows) {
        Some(img) => save(&img, path),
        None => Ok(()),
    }
}
