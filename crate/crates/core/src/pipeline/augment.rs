//! Paired geometric augmentation of a slice and its labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::AugmentParams;
use crate::error::{Error, Result};
use crate::mask::{LabelMask, BACKGROUND};
use crate::preprocess::SliceImage;

/// One sampled transform. Applied as: horizontal flip, then rotation and
/// zoom about the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub flip: bool,
    pub zoom: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { angle_deg: 0.0, flip: false, zoom: 1.0 };
}

pub fn draw(rng: &mut impl Rng, params: &AugmentParams) -> AugmentDraw {
    if !params.enabled {
        return AugmentDraw::IDENTITY;
    }
    let m = params.max_rotation_deg;
    let (z0, z1) = params.zoom_range;
    AugmentDraw {
        angle_deg: if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 },
        flip: rng.random::<f64>() < params.flip_probability,
        zoom: if z1 > z0 { rng.random_range(z0..=z1) } else { z0 },
    }
}

/// Source coordinate sampled by output pixel `(y, x)`.
fn source(draw: &AugmentDraw, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    let (s, c) = draw.angle_deg.to_radians().sin_cos();
    let sy = cy + (c * dy - s * dx) / draw.zoom;
    let mut sx = cx + (s * dy + c * dx) / draw.zoom;
    if draw.flip {
        sx = w as f64 - 1.0 - sx;
    }
    (sy, sx)
}

/// Applies the same geometry to both; the image uses bilinear sampling with
/// the slice minimum as fill, labels use nearest sampling with background fill.
pub fn apply(slice: &SliceImage, mask: &LabelMask, draw: &AugmentDraw) -> Result<(SliceImage, LabelMask)> {
    let (h, w) = (slice.height(), slice.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::dim(format!("slice {h}x{w} with mask {}x{}", mask.height(), mask.width())));
    }
    if !(draw.zoom > 0.0) {
        return Err(Error::arg(format!("zoom {} must be positive", draw.zoom)));
    }
    let fill = slice.pixels().iter().copied().fold(f32::INFINITY, f32::min);
    let px = slice.pixels();
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            fill
        } else {
            px[y as usize * w + x as usize]
        }
    };
    let mut pixels = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(draw, y, x, h, w);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1) * fx } else { 0.0 };
            let bottom = if fy > 0.0 {
                at(y0 + 1, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1, x0 + 1) * fx } else { 0.0 }
            } else {
                0.0
            };
            pixels.push(top * (1.0 - fy) + bottom * fy);
            let (ny, nx) = (sy.round(), sx.round());
            let label = if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                BACKGROUND
            } else {
                mask.get(ny as usize, nx as usize)
            };
            labels.push(label);
        }
    }
    let mut out = SliceImage::new(h, w, pixels, slice.stage())?;
    if let Some((lo, hi)) = slice.window() {
        out = out.with_window(lo, hi);
    }
    Ok((out, LabelMask::new(h, w, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Stage;

    fn sample() -> (SliceImage, LabelMask) {
        let s = SliceImage::new(5, 6, (0..30).map(|i| i as f32 * 0.5 - 3.0).collect(), Stage::Normalized).unwrap();
        let m = LabelMask::new(5, 6, (0..30).map(|i| (i % 3) as u8).collect()).unwrap();
        (s, m)
    }

    #[test]
    fn identity_draw_is_identity() {
        let (s, m) = sample();
        let (s2, m2) = apply(&s, &m, &AugmentDraw::IDENTITY).unwrap();
        assert_eq!(s2.pixels(), s.pixels());
        assert_eq!(m2, m);
    }

    #[test]
    fn double_flip_is_identity() {
        let (s, m) = sample();
        let f = AugmentDraw { flip: true, ..AugmentDraw::IDENTITY };
        let (s1, m1) = apply(&s, &m, &f).unwrap();
        assert_ne!(m1, m);
        let (s2, m2) = apply(&s1, &m1, &f).unwrap();
        assert_eq!(s2.pixels(), s.pixels());
        assert_eq!(m2, m);
    }
}
