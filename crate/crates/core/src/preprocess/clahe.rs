use serde::{Deserialize, Serialize};

use super::{SliceImage, Stage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    /// Tile grid as `(rows, cols)`.
    pub tiles: (usize, usize),
    /// Multiple of the mean bin height at which histograms are clipped;
    /// `None` disables clipping.
    pub clip_limit: Option<f64>,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { tiles: (8, 8), clip_limit: Some(2.0), bins: 256 }
    }
}

/// Half-open pixel range covered by tile `t` of `n` along an extent.
fn tile_range(t: usize, n: usize, extent: usize) -> (usize, usize) {
    (t * extent / n, (t + 1) * extent / n)
}

/// Equalization lookup table of one tile: normalized CDF of the clipped histogram.
fn tile_mapping(unit: &[f32], width: usize, rows: (usize, usize), cols: (usize, usize), p: &ClaheParams) -> Vec<f64> {
    let bins = p.bins;
    let mut hist = vec![0.0f64; bins];
    for y in rows.0..rows.1 {
        for &v in &unit[y * width + cols.0..y * width + cols.1] {
            hist[bin_of(v, bins)] += 1.0;
        }
    }
    let pixels = ((rows.1 - rows.0) * (cols.1 - cols.0)) as f64;
    if let Some(clip) = p.clip_limit {
        let limit = (clip * pixels / bins as f64).max(1.0);
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let share = excess / bins as f64;
        hist.iter_mut().for_each(|h| *h += share);
    }
    let mut cdf = 0.0;
    hist.iter()
        .map(|&h| {
            cdf += h;
            cdf / pixels
        })
        .collect()
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((v * bins as f32) as usize).min(bins - 1)
}

/// Neighbouring tile indices and blend weight for a pixel coordinate; tiles
/// past the border replicate the edge mapping.
fn neighbours(pos: usize, tile_extent: f64, n: usize) -> (usize, usize, f64) {
    let g = (pos as f64 + 0.5) / tile_extent - 0.5;
    if g <= 0.0 {
        return (0, 0, 0.0);
    }
    let t0 = g.floor() as usize;
    if t0 >= n - 1 {
        return (n - 1, n - 1, 0.0);
    }
    (t0, t0 + 1, g - t0 as f64)
}

/// Contrast-limited adaptive histogram equalization.
///
/// The windowed intensities are first rescaled to `[0, 1]`; the output is in
/// `[0, 1]` as well.
pub fn clahe(slice: &SliceImage, params: &ClaheParams) -> Result<SliceImage> {
    slice.expect_stage(&[Stage::Resized])?;
    let (ty, tx) = params.tiles;
    let (h, w) = (slice.height(), slice.width());
    if ty == 0 || tx == 0 || ty > h || tx > w {
        return Err(Error::arg(format!("CLAHE tile grid {ty}x{tx} does not fit a {h}x{w} image")));
    }
    if params.bins < 2 {
        return Err(Error::arg("CLAHE needs at least two histogram bins"));
    }
    if params.clip_limit.is_some_and(|c| !(c > 0.0)) {
        return Err(Error::arg("CLAHE clip limit must be positive"));
    }

    let unit: Vec<f32> = match slice.window() {
        Some((lo, hi)) => slice.pixels().iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect(),
        None => slice.pixels().iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
    };

    let mut maps = Vec::with_capacity(ty * tx);
    for r in 0..ty {
        for c in 0..tx {
            maps.push(tile_mapping(&unit, w, tile_range(r, ty, h), tile_range(c, tx, w), params));
        }
    }

    let tile_h = h as f64 / ty as f64;
    let tile_w = w as f64 / tx as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (r0, r1, wy) = neighbours(y, tile_h, ty);
        for x in 0..w {
            let (c0, c1, wx) = neighbours(x, tile_w, tx);
            let b = bin_of(unit[y * w + x], params.bins);
            let m = |r: usize, c: usize| maps[r * tx + c][b];
            let top = m(r0, c0) * (1.0 - wx) + m(r0, c1) * wx;
            let bottom = m(r1, c0) * (1.0 - wx) + m(r1, c1) * wx;
            out.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0) as f32);
        }
    }
    let mut result = SliceImage::new(h, w, out, Stage::Equalized)?;
    result.window = slice.window();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resized(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> SliceImage {
        SliceImage::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect(), Stage::Resized).unwrap()
    }

    #[test]
    fn constant_image_stays_constant() {
        let s = resized(32, 32, |_, _| 0.4);
        let out = clahe(&s, &ClaheParams::default()).unwrap();
        let first = out.pixels()[0];
        assert!(out.pixels().iter().all(|&v| (v - first).abs() < 1e-6));
        assert_eq!(out.stage(), Stage::Equalized);
    }

    #[test]
    fn output_in_unit_range() {
        let s = resized(40, 24, |y, x| ((y * 37 + x * 11) % 19) as f32 / 19.0);
        let out = clahe(&s, &ClaheParams::default()).unwrap();
        assert!(out.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tile_grid_larger_than_image_rejected() {
        let s = resized(4, 4, |_, _| 0.0);
        assert!(clahe(&s, &ClaheParams::default()).is_err());
    }

    #[test]
    fn windowed_values_are_rescaled_first() {
        let s = resized(16, 16, |y, _| -250.0 + 450.0 * y as f32 / 15.0).with_window(-250.0, 200.0);
        let out = clahe(&s, &ClaheParams { tiles: (2, 2), ..Default::default() }).unwrap();
        assert!(out.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.get(15, 0) > out.get(0, 0));
    }
}
