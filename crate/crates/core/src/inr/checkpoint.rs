//! Binary checkpoint of a [`NeuralField`].
//!
//! Layout, all integers `u32` and floats little-endian:
//!
//! ```text
//! "PANF" | version = 1
//! config: L, F, log2 T, N_min, N_max, n_hidden, hidden widths…
//! domain: min x, min y, width, height (f64)
//! n_tensors, then per tensor: ndim, dims…, f32 data (row-major)
//! ```
//!
//! Tensors are the per-level tables (`entries × F`) followed by each layer's
//! weights (`fan_out × fan_in`) and biases (`fan_out`).

use std::io::{Read, Write};

use super::encoding::HashEncodingConfig;
use super::field::{FieldConfig, FieldDomain, NeuralField};
use super::Real;
use crate::error::{Error, Result};
use crate::geometry::Point2;

const MAGIC: &[u8; 4] = b"PANF";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
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

/// Shapes of the stored tensors, in order.
fn tensor_shapes<T: Real>(nf: &NeuralField<T>) -> Vec<Vec<usize>> {
    let enc = nf.config().encoding;
    let mut shapes: Vec<Vec<usize>> = (0..enc.num_levels)
        .map(|l| vec![enc.level_entries(l), enc.features_per_level])
        .collect();
    for (_, out, fan_in) in nf.layer_shapes() {
        shapes.push(vec![out, fan_in]);
        shapes.push(vec![out]);
    }
    shapes
}

pub fn write_checkpoint<T: Real>(nf: &NeuralField<T>, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION as usize)?;
    let cfg = nf.config();
    let e = cfg.encoding;
    for v in [
        e.num_levels,
        e.features_per_level,
        e.table_size_log2 as usize,
        e.base_resolution,
        e.finest_resolution,
        cfg.hidden.len(),
    ] {
        put_u32(&mut w, v)?;
    }
    for &h in &cfg.hidden {
        put_u32(&mut w, h)?;
    }
    let d = nf.domain();
    for v in [d.min.x, d.min.y, d.width_m, d.height_m] {
        w.write_all(&v.to_le_bytes())?;
    }
    let shapes = tensor_shapes(nf);
    put_u32(&mut w, shapes.len())?;
    let mut params = nf.params().iter();
    for shape in shapes {
        put_u32(&mut w, shape.len())?;
        for &s in &shape {
            put_u32(&mut w, s)?;
        }
        let n: usize = shape.iter().product();
        let mut buf = Vec::with_capacity(4 * n);
        for p in params.by_ref().take(n) {
            buf.extend_from_slice(&p.to_f32().unwrap().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real>(mut r: impl Read) -> Result<NeuralField<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a neural field checkpoint".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let num_levels = get_u32(&mut r)?;
    let features_per_level = get_u32(&mut r)?;
    let table_size_log2 = get_u32(&mut r)? as u32;
    let base_resolution = get_u32(&mut r)?;
    let finest_resolution = get_u32(&mut r)?;
    let n_hidden = get_u32(&mut r)?;
    if n_hidden > 64 {
        return Err(Error::Format(format!("{n_hidden} hidden layers")));
    }
    let hidden = (0..n_hidden)
        .map(|_| get_u32(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let config = FieldConfig {
        encoding: HashEncodingConfig {
            num_levels,
            features_per_level,
            table_size_log2,
            base_resolution,
            finest_resolution,
        },
        hidden,
    };
    let domain = FieldDomain {
        min: Point2::new(get_f64(&mut r)?, get_f64(&mut r)?),
        width_m: get_f64(&mut r)?,
        height_m: get_f64(&mut r)?,
    };
    let mut nf = NeuralField::<T>::zeros(config, domain)?;
    let shapes = tensor_shapes(&nf);
    if get_u32(&mut r)? != shapes.len() {
        return Err(Error::Format(
            "tensor count does not match the config".into(),
        ));
    }
    let mut offset = 0;
    for shape in shapes {
        let ndim = get_u32(&mut r)?;
        let dims = (0..ndim)
            .map(|_| get_u32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Format(format!(
                "tensor shape {dims:?}, expected {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)?;
        for (p, b) in nf.params_mut()[offset..offset + n]
            .iter_mut()
            .zip(buf.chunks_exact(4))
        {
            *p = T::from_f32(f32::from_le_bytes(b.try_into().unwrap())).unwrap();
        }
        offset += n;
    }
    nf.check_finite()?;
    Ok(nf)
}
