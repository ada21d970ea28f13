//! Image, mask and raw-array file formats.
//!
//! * CT slices: 16-bit grayscale PNG storing `HU + 32768`, or an `LSEG1` raw container.
//! * `LSEG1`: ASCII magic `LSEG1`, little-endian `u32` height, `u32` width,
//!   then `height * width` little-endian `f32` values in row-major order.
//! * Masks: 8-bit grayscale PNG, 0 = background, 255 = lesion.

use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;

use crate::{Error, Result};

pub const RAW_MAGIC: &[u8; 5] = b"LSEG1";
pub const HU_OFFSET: f64 = 32768.0;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn is_raw(path: &Path) -> Result<bool> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 5];
    match f.read_exact(&mut magic) {
        Ok(()) => Ok(&magic == RAW_MAGIC),
        Err(_) => Ok(false),
    }
}

/// Loads a CT slice in Hounsfield units from either supported container.
pub fn load_image(path: &Path) -> Result<Array2<f64>> {
    if is_raw(path)? {
        return load_raw(path);
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32)[0] as f64 - HU_OFFSET
            }))
        }
        other => Err(Error::Invalid(format!(
            "{}: expected 16-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_image_png16(path: &Path, hu: &Array2<f64>) -> Result<()> {
    let (h, w) = hu.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (hu[[y as usize, x as usize]] + HU_OFFSET).round().clamp(0.0, 65535.0);
        Luma([v as u16])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn load_raw(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Invalid(format!("{}: {msg}", path.display()));
    if bytes.len() < 13 || &bytes[..5] != RAW_MAGIC {
        return Err(bad("missing LSEG1 header"));
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() != h * w * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", h * w * 4, body.len())));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((h, w), data).expect("length checked"))
}

pub fn save_raw(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let mut out = Vec::with_capacity(13 + h * w * 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in values.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_preserves_integer_hu() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ct.png");
        let img = Array2::from_shape_fn((5, 7), |(y, x)| (y as f64 * 100.0) - (x as f64 * 333.0) - 1000.0);
        save_image_png16(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn raw_container_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prob.raw");
        let vals = Array2::from_shape_fn((3, 2), |(y, x)| (y * 2 + x) as f64 * 0.25);
        save_raw(&p, &vals).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..5], b"LSEG1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 13 + 24);
        assert_eq!(load_image(&p).unwrap(), vals);
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(load_raw(&p).is_err());
    }

    #[test]
    fn mask_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Array2::from_shape_fn((4, 6), |(y, x)| (x + y) % 3 == 0);
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
        let raw = image::open(&p).unwrap().to_luma8();
        assert!(raw.pixels().all(|p| p[0] == 0 || p[0] == 255));
    }
}
