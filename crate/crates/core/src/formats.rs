//! On-disk formats: label-map PNGs, `SSEG` soft-segmentation dumps, energy
//! trace CSVs and feature CSVs.
//!
//! `SSEG` layout, little-endian: the 4 bytes `SSEG`, `u32` N, `u32` K, `u32`
//! reserved (zero), then `N * K` `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::Array2;

use crate::descent::{EnergyTrace, HardLabeling};
use crate::error::{invalid, Error, Result};
use crate::imagery::{FeatureMatrix, Image, ScribbleMask};
use crate::losses::SoftSegmentation;
use crate::scalar::Scalar;

pub const SSEG_MAGIC: &[u8; 4] = b"SSEG";

/// Writes class indices as an 8-bit gray PNG. Readable back with
/// [`crate::load_scribbles`] using the same class count.
pub fn write_label_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    labels: &HardLabeling,
) -> Result<()> {
    if labels.labels.len() != width * height {
        return Err(invalid(
            "label map",
            "label count does not match dimensions",
        ));
    }
    if labels.labels.iter().any(|&l| l >= 255) {
        return Err(invalid("label map", "class indices must be below 255"));
    }
    let raw = labels.labels.iter().map(|&l| l as u8).collect();
    let img =
        GrayImage::from_raw(width as u32, height as u32, raw).expect("buffer sized to dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::Encode)
}

/// Writes a scribble mask in the format [`crate::load_scribbles`] reads.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &ScribbleMask) -> Result<()> {
    let img = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.raw().to_vec(),
    )
    .expect("buffer sized to dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::Encode)
}

/// Writes an image as 8-bit RGB; values are rounded and clamped.
pub fn write_image_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let raster = RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer sized to dimensions");
    raster
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::Encode)
}

pub fn write_sseg<T: Scalar>(mut w: impl Write, s: &SoftSegmentation<T>) -> Result<()> {
    let (n, k) = (s.n(), s.k());
    let n32 = u32::try_from(n).map_err(|_| invalid("SSEG", "N exceeds u32"))?;
    let k32 = u32::try_from(k).map_err(|_| invalid("SSEG", "K exceeds u32"))?;
    let mut buf = Vec::with_capacity(16 + 4 * n * k);
    buf.extend_from_slice(SSEG_MAGIC);
    buf.extend_from_slice(&n32.to_le_bytes());
    buf.extend_from_slice(&k32.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for &v in s.values().iter() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads an `SSEG` dump as an `N x K` matrix without simplex validation.
pub fn read_sseg(mut r: impl Read) -> Result<Array2<f32>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != SSEG_MAGIC {
        return Err(invalid("SSEG", "bad magic"));
    }
    let word =
        |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, k) = (word(4), word(8));
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 4 * n * k {
        return Err(invalid(
            "SSEG",
            format!("expected {} payload bytes, found {}", 4 * n * k, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((n, k), values).expect("length checked"))
}

/// `iter,pce,nc,kmeans,potts,nel,total`.
pub fn write_trace_csv(w: impl Write, trace: &EnergyTrace) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iter", "pce", "nc", "kmeans", "potts", "nel", "total"])?;
    for row in trace.rows() {
        out.serialize((
            row.iter, row.pce, row.nc, row.kmeans, row.potts, row.nel, row.total,
        ))?;
    }
    out.flush()?;
    Ok(())
}

/// `index,f0,f1,...` with one row per pixel.
pub fn write_features_csv<T: Scalar>(w: impl Write, features: &FeatureMatrix<T>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["index".to_string()];
    header.extend((0..features.dim()).map(|j| format!("f{j}")));
    out.write_record(&header)?;
    for (p, row) in features.rows().rows().into_iter().enumerate() {
        let mut rec = vec![p.to_string()];
        rec.extend(row.iter().map(|v| v.as_f64().to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
