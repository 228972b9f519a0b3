//! PGM and PNG export of slices, label maps, boundaries and overlays.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMask, LIVER, TUMOR};
use crate::preprocess::SliceImage;

/// Binary (P5) PGM with the given maximum value; one byte per pixel.
pub fn write_pgm(path: &Path, width: usize, height: usize, maxval: u8, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::dim(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    if maxval == 0 || pixels.iter().any(|&p| p > maxval) {
        return Err(Error::arg(format!("pixel values exceed PGM maximum {maxval}")));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n{maxval}\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`]: `(width, height, maxval, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, u8, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let corrupt = |r: &str| Error::CorruptFile { path: path.display().to_string(), reason: r.to_string() };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(corrupt("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad PGM header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(corrupt("unsupported PGM maximum"));
    }
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != w * h {
        return Err(corrupt("PGM pixel count does not match header"));
    }
    Ok((w, h, maxval as u8, data.to_vec()))
}

/// Min-max rescaled 8-bit grayscale.
pub fn slice_to_gray(slice: &SliceImage) -> Vec<u8> {
    let px = slice.pixels();
    let lo = px.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = px.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    px.iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn write_slice_pgm(path: &Path, slice: &SliceImage) -> Result<()> {
    write_pgm(path, slice.width(), slice.height(), 255, &slice_to_gray(slice))
}

/// Labels as a 3-level PGM (`maxval = 2`).
pub fn write_label_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    write_pgm(path, mask.width(), mask.height(), 2, mask.labels())
}

/// 1-bit PGM (`maxval = 1`).
pub fn write_binary_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bits: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
    write_pgm(path, mask.width(), mask.height(), 1, &bits)
}

/// Grayscale slice with liver tinted red and tumor purple.
pub fn overlay_image(slice: &SliceImage, mask: &LabelMask) -> Result<RgbImage> {
    if (slice.height(), slice.width()) != (mask.height(), mask.width()) {
        return Err(Error::dim("overlay slice and mask sizes differ"));
    }
    let gray = slice_to_gray(slice);
    let mut img = RgbImage::new(slice.width() as u32, slice.height() as u32);
    for (i, (&g, &l)) in gray.iter().zip(mask.labels()).enumerate() {
        let tint = match l {
            LIVER => Some([255.0, 0.0, 0.0]),
            TUMOR => Some([160.0, 32.0, 240.0]),
            _ => None,
        };
        let g = f32::from(g);
        let rgb = match tint {
            Some(t) => [0, 1, 2].map(|c| (0.55 * g + 0.45 * t[c]).round() as u8),
            None => [g as u8; 3],
        };
        img.put_pixel((i % slice.width()) as u32, (i / slice.width()) as u32, Rgb(rgb));
    }
    Ok(img)
}

pub fn write_overlay_png(path: &Path, slice: &SliceImage, mask: &LabelMask) -> Result<()> {
    overlay_image(slice, mask)?.save(path)?;
    Ok(())
}
