//! Binary sinogram and image files.
//!
//! Both formats are little-endian with a 4-byte magic and a `u16` version,
//! followed by a fixed header and a row-major `f32` payload.
//!
//! ```text
//! PARF v1: n_elements u32, n_samples u32, ring radius f64, sample rate f64,
//!          t_start f64, data[n_elements][n_samples]
//! PAIM v1: nx u32, ny u32, pixel size f64, center x f64, center y f64,
//!          data[ny][nx]
//! ```
//!
//! The payload is stored in single precision, so a value read back and
//! written again reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Acquisition, HeatImage, ImageGrid, Point2, RingGeometry, Sinogram};

pub const SINOGRAM_MAGIC: &[u8; 4] = b"PARF";
pub const IMAGE_MAGIC: &[u8; 4] = b"PAIM";
pub const FORMAT_VERSION: u16 = 1;

/// Largest payload accepted when reading, in values.
const MAX_VALUES: usize = 1 << 31;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn put_payload<'a>(w: &mut impl Write, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_payload(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    if n > MAX_VALUES {
        return Err(Error::Format(format!("payload of {n} values is too large")));
    }
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    Ok(())
}

fn expect_end(r: &mut impl Read) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

pub fn write_sinogram(sino: &Sinogram, mut w: impl Write) -> Result<()> {
    w.write_all(SINOGRAM_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    put_u32(&mut w, sino.num_elements())?;
    put_u32(&mut w, sino.num_samples())?;
    put_f64(&mut w, sino.geometry.radius_m())?;
    put_f64(&mut w, sino.acquisition.sample_rate_hz)?;
    put_f64(&mut w, sino.acquisition.t_start_s)?;
    put_payload(&mut w, sino.data.iter())?;
    w.flush()?;
    Ok(())
}

pub fn read_sinogram(mut r: impl Read) -> Result<Sinogram> {
    check_magic(&mut r, SINOGRAM_MAGIC)?;
    let ne = get_u32(&mut r)?;
    let ns = get_u32(&mut r)?;
    let radius = get_f64(&mut r)?;
    let fs = get_f64(&mut r)?;
    let t0 = get_f64(&mut r)?;
    let geometry = RingGeometry::new(radius, ne)?;
    let mut acquisition = Acquisition::new(fs, ns)?;
    acquisition.t_start_s = t0;
    acquisition.validate()?;
    let data = get_payload(&mut r, ne.saturating_mul(ns))?;
    expect_end(&mut r)?;
    Sinogram::new(
        geometry,
        acquisition,
        Array2::from_shape_vec((ne, ns), data).unwrap(),
    )
}

pub fn write_image(img: &HeatImage, mut w: impl Write) -> Result<()> {
    let g = &img.grid;
    w.write_all(IMAGE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    put_u32(&mut w, g.nx)?;
    put_u32(&mut w, g.ny)?;
    put_f64(&mut w, g.pixel_size_m)?;
    put_f64(&mut w, g.center.x)?;
    put_f64(&mut w, g.center.y)?;
    put_payload(&mut w, img.values.iter())?;
    w.flush()?;
    Ok(())
}

pub fn read_image(mut r: impl Read) -> Result<HeatImage> {
    check_magic(&mut r, IMAGE_MAGIC)?;
    let nx = get_u32(&mut r)?;
    let ny = get_u32(&mut r)?;
    let pixel = get_f64(&mut r)?;
    let center = Point2::new(get_f64(&mut r)?, get_f64(&mut r)?);
    let mut grid = ImageGrid::centered(nx, ny, pixel)?;
    grid.center = center;
    grid.validate()?;
    let data = get_payload(&mut r, nx.saturating_mul(ny))?;
    expect_end(&mut r)?;
    HeatImage::new(grid, Array2::from_shape_vec((ny, nx), data).unwrap())
}

pub fn save_sinogram(sino: &Sinogram, path: impl AsRef<Path>) -> Result<()> {
    write_sinogram(sino, BufWriter::new(File::create(path)?))
}

pub fn load_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    read_sinogram(BufReader::new(File::open(path)?))
}

pub fn save_image(img: &HeatImage, path: impl AsRef<Path>) -> Result<()> {
    write_image(img, BufWriter::new(File::create(path)?))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<HeatImage> {
    read_image(BufReader::new(File::open(path)?))
}

/// Header of either file kind, for inspection without reading the payload.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FileHeader {
    Sinogram {
        num_elements: usize,
        num_samples: usize,
        ring_radius_m: f64,
        sample_rate_hz: f64,
        t_start_s: f64,
    },
    Image {
        nx: usize,
        ny: usize,
        pixel_size_m: f64,
        center_x_m: f64,
        center_y_m: f64,
    },
}

pub fn read_header(mut r: impl Read) -> Result<FileHeader> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    if u16::from_le_bytes(v) != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            u16::from_le_bytes(v)
        )));
    }
    match &m {
        SINOGRAM_MAGIC => Ok(FileHeader::Sinogram {
            num_elements: get_u32(&mut r)?,
            num_samples: get_u32(&mut r)?,
            ring_radius_m: get_f64(&mut r)?,
            sample_rate_hz: get_f64(&mut r)?,
            t_start_s: get_f64(&mut r)?,
        }),
        IMAGE_MAGIC => Ok(FileHeader::Image {
            nx: get_u32(&mut r)?,
            ny: get_u32(&mut r)?,
            pixel_size_m: get_f64(&mut r)?,
            center_x_m: get_f64(&mut r)?,
            center_y_m: get_f64(&mut r)?,
        }),
        other => Err(Error::Format(format!(
            "unknown magic {:?}",
            String::from_utf8_lossy(other)
        ))),
    }
}

/// Ordering of values in a headerless raw recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawLayout {
    /// All elements of sample 0, then all elements of sample 1, …
    #[default]
    Interleaved,
    /// The full trace of element 0, then element 1, …
    ElementMajor,
}

/// Read a headerless little-endian `f32` recording of
/// `geometry.num_elements() × acquisition.num_samples` values.
pub fn import_raw(
    mut r: impl Read,
    geometry: RingGeometry,
    acquisition: Acquisition,
    layout: RawLayout,
) -> Result<Sinogram> {
    acquisition.validate()?;
    let (ne, ns) = (geometry.num_elements(), acquisition.num_samples);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * ne * ns {
        return Err(invalid(
            "raw input",
            format!(
                "{} bytes, expected {} for {ne} elements × {ns} samples",
                bytes.len(),
                4 * ne * ns
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let data = match layout {
        RawLayout::ElementMajor => Array2::from_shape_vec((ne, ns), values).unwrap(),
        RawLayout::Interleaved => Array2::from_shape_vec((ns, ne), values)
            .unwrap()
            .reversed_axes()
            .as_standard_layout()
            .into_owned(),
    };
    Sinogram::new(geometry, acquisition, data)
}
