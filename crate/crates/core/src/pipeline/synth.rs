//! Synthetic abdominal-like CT volumes with an ellipsoidal liver and small
//! spherical tumors inside it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LabelMask, BACKGROUND, LIVER, TUMOR};
use crate::preprocess::CtVolume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// In-plane extent (square slices).
    pub size: usize,
    pub depth: usize,
    pub background_hu: f64,
    pub liver_hu: f64,
    pub tumor_hu: f64,
    pub noise_sd: f64,
    pub max_tumors: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 64,
            depth: 8,
            background_hu: -100.0,
            liver_hu: 45.0,
            tumor_hu: 70.0,
            noise_sd: 10.0,
            max_tumors: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub volume: CtVolume,
    pub masks: Vec<LabelMask>,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius; inside when `<= 1`.
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

/// One case; `seed` and `index` fully determine the bytes.
pub fn synth_case(seed: u64, index: usize, params: &SynthParams) -> Result<SynthCase> {
    if params.size < 8 || params.depth == 0 {
        return Err(Error::arg(format!("synthetic volume {}x{}x{} too small", params.depth, params.size, params.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    let (d, s) = (params.depth, params.size);
    let sf = s as f64;
    let liver = Ellipsoid {
        center: [
            (d as f64 - 1.0) / 2.0,
            sf * rng.random_range(0.42..0.58),
            sf * rng.random_range(0.42..0.58),
        ],
        radii: [
            (d as f64 * rng.random_range(0.7..0.9)).max(1.0),
            sf * rng.random_range(0.2..0.3),
            sf * rng.random_range(0.25..0.35),
        ],
    };
    let n_tumors = rng.random_range(0..=params.max_tumors);
    let mut tumors = Vec::with_capacity(n_tumors);
    for _ in 0..n_tumors {
        // Centre well inside the liver, in normalized ellipsoid coordinates.
        let (u, v, w): (f64, f64, f64) =
            (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let r = sf * rng.random_range(0.05..0.09);
        tumors.push(Ellipsoid {
            center: [
                liver.center[0] + u * liver.radii[0] * 0.5,
                liver.center[1] + v * liver.radii[1],
                liver.center[2] + w * liver.radii[2],
            ],
            radii: [(r / 3.0).max(1.0), r, r],
        });
    }
    let liver_hu = params.liver_hu + rng.random_range(-2.0..2.0);
    let noise = Normal::new(0.0, params.noise_sd).map_err(|e| Error::arg(e.to_string()))?;

    let mut voxels = Vec::with_capacity(d * s * s);
    let mut labels = Vec::with_capacity(d * s * s);
    for k in 0..d {
        for i in 0..s {
            for j in 0..s {
                let p = [k as f64, i as f64, j as f64];
                let label = if liver.level(p) <= 1.0 {
                    if tumors.iter().any(|t| t.level(p) <= 1.0) {
                        TUMOR
                    } else {
                        LIVER
                    }
                } else {
                    BACKGROUND
                };
                let base = match label {
                    BACKGROUND => params.background_hu,
                    LIVER => liver_hu,
                    _ => params.tumor_hu,
                };
                let hu = (base + noise.sample(&mut rng)).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX));
                voxels.push(hu as i16);
                labels.push(label);
            }
        }
    }
    let volume = CtVolume::new(format!("case_{index:03}"), [d, s, s], [0.8, 0.8, 2.5], voxels)?;
    let masks = labels.chunks_exact(s * s).map(|c| LabelMask::new(s, s, c.to_vec())).collect::<Result<Vec<_>>>()?;
    Ok(SynthCase { volume, masks })
}

pub fn synth_dataset(seed: u64, n_cases: usize, params: &SynthParams) -> Result<Vec<SynthCase>> {
    if n_cases == 0 {
        return Err(Error::arg("at least one synthetic case is required"));
    }
    (0..n_cases).map(|i| synth_case(seed, i, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn liver_mean_in_band_and_deterministic() {
        let p = SynthParams::default();
        let a = synth_case(7, 0, &p).unwrap();
        let b = synth_case(7, 0, &p).unwrap();
        assert_eq!(a, b);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (k, m) in a.masks.iter().enumerate() {
            for (idx, &l) in m.labels().iter().enumerate() {
                if l == LIVER {
                    sum += f64::from(a.volume.voxels()[k * 64 * 64 + idx]);
                    n += 1;
                }
            }
        }
        assert!(n > 0);
        let mean = sum / n as f64;
        assert!((40.0..=50.0).contains(&mean), "{mean}");
    }
}
