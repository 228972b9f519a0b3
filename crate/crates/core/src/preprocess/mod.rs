//! Slice preparation: volume slicing, HU windowing, resizing, CLAHE and
//! z-score normalization, in that fixed order.

mod clahe;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use clahe::{clahe, ClaheParams};

use crate::error::{Error, Result};
use crate::mask::LabelMask;

/// Raw CT volume of Hounsfield units, `[depth, height, width]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    pub id: String,
    depth: usize,
    height: usize,
    width: usize,
    /// Voxel size in millimetres along x, y, z.
    spacing: [f64; 3],
    voxels: Vec<i16>,
}

impl CtVolume {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], voxels: Vec<i16>) -> Result<Self> {
        let [depth, height, width] = dims;
        if dims.contains(&0) {
            return Err(Error::dim(format!("empty volume {dims:?}")));
        }
        if voxels.len() != depth * height * width {
            return Err(Error::dim(format!("volume {dims:?} with {} voxels", voxels.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::arg(format!("voxel spacing {spacing:?} must be positive")));
        }
        Ok(CtVolume { id: id.into(), depth, height, width, spacing, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn voxel(&self, k: usize, i: usize, j: usize) -> i16 {
        self.voxels[(k * self.height + i) * self.width + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Windowed,
    Resized,
    Equalized,
    Normalized,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Raw => "raw",
            Stage::Windowed => "windowed",
            Stage::Resized => "resized",
            Stage::Equalized => "equalized",
            Stage::Normalized => "normalized",
        };
        f.write_str(s)
    }
}

/// 2-d float image tagged with how far through preprocessing it is.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    stage: Stage,
    /// HU window applied so far, used to rescale to `[0, 1]` before equalization.
    window: Option<(f32, f32)>,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, stage: Stage) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::dim(format!("slice {height}x{width} with {} pixels", pixels.len())));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("slice contains non-finite pixels".into()));
        }
        Ok(SliceImage { height, width, pixels, stage, window: None })
    }

    pub fn with_window(mut self, lo: f32, hi: f32) -> Self {
        self.window = Some((lo, hi));
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn window(&self) -> Option<(f32, f32)> {
        self.window
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Rejects images that are not at one of the accepted stages.
    pub fn expect_stage(&self, accepted: &[Stage]) -> Result<()> {
        if accepted.contains(&self.stage) {
            return Ok(());
        }
        let expected = accepted.iter().map(Stage::to_string).collect::<Vec<_>>().join(" or ");
        Err(Error::Stage { expected, found: self.stage.to_string() })
    }
}

/// Axial slices of a volume in order, as raw HU images.
pub fn slice_volume(volume: &CtVolume) -> Result<Vec<SliceImage>> {
    let [d, h, w] = volume.dims();
    (0..d)
        .map(|k| {
            let pixels = volume.voxels[k * h * w..(k + 1) * h * w].iter().map(|&v| f32::from(v)).collect();
            SliceImage::new(h, w, pixels, Stage::Raw)
        })
        .collect()
}

/// Clamps intensities to `[lo, hi]`. Re-windowing a windowed slice is allowed
/// (and idempotent for the same bounds).
pub fn hu_window(slice: &SliceImage, lo: f32, hi: f32) -> Result<SliceImage> {
    if !(lo < hi) {
        return Err(Error::arg(format!("HU window lower bound {lo} must be below upper bound {hi}")));
    }
    slice.expect_stage(&[Stage::Raw, Stage::Windowed])?;
    let pixels = slice.pixels.iter().map(|&v| v.clamp(lo, hi)).collect();
    let window = match slice.window {
        Some((plo, phi)) => (plo.max(lo), phi.min(hi)),
        None => (lo, hi),
    };
    Ok(SliceImage { pixels, stage: Stage::Windowed, window: Some(window), ..*slice })
}

fn check_target(target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::arg(format!("degenerate resize target {}x{}", target.0, target.1)));
    }
    Ok(())
}

/// Source coordinate of a destination pixel centre (half-pixel convention).
fn source_coord(dst: usize, scale: f64, extent: usize) -> f64 {
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64)
}

/// Bilinear resize with the align-corners=false convention.
pub fn resize_bilinear(slice: &SliceImage, target: (usize, usize)) -> Result<SliceImage> {
    check_target(target)?;
    slice.expect_stage(&[Stage::Windowed, Stage::Resized])?;
    if slice.height < 2 || slice.width < 2 {
        return Err(Error::dim(format!("bilinear resize needs at least 2x2, got {}x{}", slice.height, slice.width)));
    }
    let (th, tw) = target;
    let sy = slice.height as f64 / th as f64;
    let sx = slice.width as f64 / tw as f64;
    let mut pixels = Vec::with_capacity(th * tw);
    for y in 0..th {
        let fy = source_coord(y, sy, slice.height);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(slice.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..tw {
            let fx = source_coord(x, sx, slice.width);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(slice.width - 1);
            let wx = fx - x0 as f64;
            let p = |yy: usize, xx: usize| f64::from(slice.get(yy, xx));
            let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
            let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
            pixels.push((top * (1.0 - wy) + bottom * wy) as f32);
        }
    }
    Ok(SliceImage { height: th, width: tw, pixels, stage: Stage::Resized, window: slice.window })
}

/// Nearest-neighbour resize, so no new labels can appear.
pub fn resize_mask_nearest(mask: &LabelMask, target: (usize, usize)) -> Result<LabelMask> {
    check_target(target)?;
    let (th, tw) = target;
    let sy = mask.height() as f64 / th as f64;
    let sx = mask.width() as f64 / tw as f64;
    let pick = |dst: usize, scale: f64, extent: usize| (((dst as f64 + 0.5) * scale).floor() as usize).min(extent - 1);
    let mut labels = Vec::with_capacity(th * tw);
    for y in 0..th {
        let src_y = pick(y, sy, mask.height());
        for x in 0..tw {
            labels.push(mask.get(src_y, pick(x, sx, mask.width())));
        }
    }
    LabelMask::new(th, tw, labels)
}

/// `(x - mean) / (std + eps)` with the population standard deviation.
pub fn zscore(slice: &SliceImage, eps: f64) -> Result<SliceImage> {
    slice.expect_stage(&[Stage::Equalized, Stage::Normalized])?;
    let n = slice.pixels.len() as f64;
    let mean = slice.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = slice.pixels.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    let pixels = slice.pixels.iter().map(|&v| ((f64::from(v) - mean) / denom) as f32).collect();
    Ok(SliceImage { pixels, stage: Stage::Normalized, ..*slice })
}

/// Every knob of the slice preparation chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReformationParams {
    pub window_lo: f32,
    pub window_hi: f32,
    /// Output `(height, width)`.
    pub size: (usize, usize),
    pub clahe: ClaheParams,
    pub zscore_eps: f64,
}

impl Default for ReformationParams {
    fn default() -> Self {
        ReformationParams {
            window_lo: -250.0,
            window_hi: 200.0,
            size: (256, 256),
            clahe: ClaheParams::default(),
            zscore_eps: 1e-8,
        }
    }
}

/// Every intermediate image of one slice, in pipeline order.
#[derive(Clone, Debug)]
pub struct ReformationStages {
    pub windowed: SliceImage,
    pub resized: SliceImage,
    pub equalized: SliceImage,
    pub normalized: SliceImage,
}

pub fn reform_slice_stages(raw: &SliceImage, params: &ReformationParams) -> Result<ReformationStages> {
    let windowed = hu_window(raw, params.window_lo, params.window_hi)?;
    let resized = resize_bilinear(&windowed, params.size)?;
    let equalized = clahe(&resized, &params.clahe)?;
    let normalized = zscore(&equalized, params.zscore_eps)?;
    Ok(ReformationStages { windowed, resized, equalized, normalized })
}

/// Full chain for one raw slice: window, resize, CLAHE, z-score.
pub fn reform_slice(raw: &SliceImage, params: &ReformationParams) -> Result<SliceImage> {
    Ok(reform_slice_stages(raw, params)?.normalized)
}

/// Slices and prepares a whole volume.
pub fn reform_volume(volume: &CtVolume, params: &ReformationParams) -> Result<Vec<SliceImage>> {
    slice_volume(volume)?.iter().map(|s| reform_slice(s, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> SliceImage {
        let pixels = (0..h * w).map(|i| f(i / w, i % w)).collect();
        SliceImage::new(h, w, pixels, Stage::Raw).unwrap()
    }

    fn at(stage: Stage, h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> SliceImage {
        SliceImage { stage, window: Some((-250.0, 200.0)), ..raw(h, w, f) }
    }

    #[test]
    fn slicing_preserves_order_and_indexing() {
        let voxels: Vec<i16> = (0..3 * 2 * 2).map(|v| v as i16).collect();
        let vol = CtVolume::new("v", [3, 2, 2], [1.0, 1.0, 2.5], voxels).unwrap();
        let slices = slice_volume(&vol).unwrap();
        assert_eq!(slices.len(), 3);
        for (k, s) in slices.iter().enumerate() {
            assert_eq!(s.stage(), Stage::Raw);
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(s.get(i, j), f32::from(vol.voxel(k, i, j)));
                }
            }
        }
    }

    #[test]
    fn volume_validation() {
        assert!(CtVolume::new("v", [0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(CtVolume::new("v", [1, 2, 2], [1.0, 0.0, 1.0], vec![0; 4]).is_err());
        let lits_like = CtVolume::new("v", [75, 4, 4], [0.7, 0.7, 1.0], vec![0; 75 * 16]).unwrap();
        assert_eq!(slice_volume(&lits_like).unwrap().len(), 75);
    }

    #[test]
    fn window_clamps_to_bounds() {
        let s = raw(1, 3, |_, x| [300.0, -400.0, 45.0][x]);
        let w = hu_window(&s, -250.0, 200.0).unwrap();
        assert_eq!(w.pixels(), &[200.0, -250.0, 45.0]);
        assert_eq!(w.stage(), Stage::Windowed);
        assert_eq!(hu_window(&w, -250.0, 200.0).unwrap().pixels(), w.pixels());
        assert!(hu_window(&s, 10.0, 10.0).is_err());
    }

    #[test]
    fn out_of_order_stages_are_rejected() {
        let s = raw(4, 4, |_, _| 0.0);
        assert!(matches!(resize_bilinear(&s, (2, 2)), Err(Error::Stage { .. })));
        assert!(matches!(zscore(&s, 1e-8), Err(Error::Stage { .. })));
        assert!(matches!(clahe(&s, &ClaheParams::default()), Err(Error::Stage { .. })));
        let n = at(Stage::Normalized, 4, 4, |_, _| 0.0);
        assert!(hu_window(&n, -1.0, 1.0).is_err());
    }

    #[test]
    fn resize_constant_and_ramp() {
        let c = at(Stage::Windowed, 8, 8, |_, _| 3.5);
        let r = resize_bilinear(&c, (4, 4)).unwrap();
        assert!(r.pixels().iter().all(|&v| v == 3.5));

        // Downscaling x -> 2x by half-pixel bilinear maps column j onto 2j + 0.5.
        let ramp = at(Stage::Windowed, 6, 16, |_, x| x as f32);
        let r = resize_bilinear(&ramp, (3, 8)).unwrap();
        for y in 0..3 {
            for x in 0..8 {
                assert!((r.get(y, x) - (2.0 * x as f32 + 0.5)).abs() < 1e-6);
            }
        }
        assert!(resize_bilinear(&ramp, (0, 4)).is_err());
    }

    #[test]
    fn resize_512_to_256() {
        let s = at(Stage::Windowed, 512, 512, |y, x| ((y * 7 + x) % 13) as f32);
        let r = resize_bilinear(&s, (256, 256)).unwrap();
        assert_eq!((r.height(), r.width()), (256, 256));
    }

    #[test]
    fn nearest_mask_resize() {
        let m = LabelMask::new(4, 4, vec![0, 0, 1, 1, 0, 2, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(resize_mask_nearest(&m, (4, 4)).unwrap(), m);
        let small = resize_mask_nearest(&m, (2, 2)).unwrap();
        assert!(small.label_set().is_subset(&m.label_set()));
        assert!(resize_mask_nearest(&m, (2, 0)).is_err());
    }

    #[test]
    fn zscore_moments_and_constant_input() {
        let c = at(Stage::Equalized, 4, 4, |_, _| 0.3);
        assert!(zscore(&c, 1e-8).unwrap().pixels().iter().all(|&v| v == 0.0));

        let s = at(Stage::Equalized, 8, 8, |y, x| ((y * 31 + x * 17) % 23) as f32 / 23.0);
        let z = zscore(&s, 1e-8).unwrap();
        let n = 64.0;
        let mean: f64 = z.pixels().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let std = (z.pixels().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-5 && (std - 1.0).abs() < 1e-5);

        let zz = zscore(&z, 1e-8).unwrap();
        for (a, b) in zz.pixels().iter().zip(z.pixels()) {
            assert!((a - b).abs() < 1e-5);
        }

        let affine = at(Stage::Equalized, 8, 8, |y, x| 3.0 * s.get(y, x) + 2.0);
        for (a, b) in zscore(&affine, 1e-8).unwrap().pixels().iter().zip(z.pixels()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn full_chain_stamps_stages() {
        let s = raw(32, 32, |y, x| (y as f32 - 16.0) * 20.0 + x as f32);
        let params = ReformationParams { size: (16, 16), ..Default::default() };
        let st = reform_slice_stages(&s, &params).unwrap();
        assert_eq!(st.windowed.stage(), Stage::Windowed);
        assert_eq!(st.resized.stage(), Stage::Resized);
        assert_eq!(st.equalized.stage(), Stage::Equalized);
        assert_eq!(st.normalized.stage(), Stage::Normalized);
        assert_eq!((st.normalized.height(), st.normalized.width()), (16, 16));
    }
}
