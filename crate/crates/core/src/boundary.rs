//! Erosion-based boundary extraction and optional boundary relabeling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMask, ProbMap, BACKGROUND, LIVER, TUMOR};

/// What refinement does with the extracted boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MbrStrategy {
    /// No boundary extraction.
    Off,
    /// Extract boundaries, leave labels untouched.
    EmitOnly,
    /// Demote boundary pixels whose class probability is below the threshold.
    ProbGated,
}

impl fmt::Display for MbrStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MbrStrategy::Off => "off",
            MbrStrategy::EmitOnly => "emit-only",
            MbrStrategy::ProbGated => "prob-gated",
        })
    }
}

impl FromStr for MbrStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(MbrStrategy::Off),
            "emit-only" => Ok(MbrStrategy::EmitOnly),
            "prob-gated" => Ok(MbrStrategy::ProbGated),
            other => Err(Error::arg(format!("unknown boundary strategy `{other}`"))),
        }
    }
}

/// Square structuring element of all ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub size: usize,
    pub iterations: usize,
}

impl Default for StructuringElement {
    fn default() -> Self {
        StructuringElement { size: 3, iterations: 1 }
    }
}

/// Binary erosion. A pixel survives iff the element centred on it lies
/// entirely inside the foreground; pixels outside the image are background.
pub fn erode(mask: &BinaryMask, se: StructuringElement) -> Result<BinaryMask> {
    if se.size.is_multiple_of(2) {
        return Err(Error::arg(format!("structuring element size {} must be odd", se.size)));
    }
    let (h, w) = (mask.height(), mask.width());
    let r = se.size / 2;
    let mut cur = mask.bits().to_vec();
    for _ in 0..se.iterations {
        // Separable: a square fits iff a horizontal run fits in every row of the window.
        let mut rows = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = x >= r && x + r < w && (x - r..=x + r).all(|xx| cur[y * w + xx]);
            }
        }
        for y in 0..h {
            for x in 0..w {
                cur[y * w + x] = y >= r && y + r < h && (y - r..=y + r).all(|yy| rows[yy * w + x]);
            }
        }
    }
    BinaryMask::new(h, w, cur)
}

/// Foreground of a class for boundary purposes: liver includes tumor pixels.
pub fn class_region(mask: &LabelMask, class_id: u8) -> Result<BinaryMask> {
    match class_id {
        LIVER => Ok(mask.select(&[LIVER, TUMOR])),
        TUMOR => Ok(mask.select(&[TUMOR])),
        c => Err(Error::arg(format!("boundary class must be 1 or 2, got {c}"))),
    }
}

/// Region minus its erosion.
pub fn boundary_mask(mask: &LabelMask, class_id: u8, se: StructuringElement) -> Result<BinaryMask> {
    let region = class_region(mask, class_id)?;
    region.minus(&erode(&region, se)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassBoundary {
    pub class_id: u8,
    pub eroded: BinaryMask,
    pub boundary: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryArtifacts {
    /// Liver then tumor.
    pub classes: Vec<ClassBoundary>,
    /// Label map with each class replaced by its eroded region.
    pub eroded: LabelMask,
    /// Union of the per-class boundaries.
    pub boundary: BinaryMask,
    pub refined: LabelMask,
}

/// Extracts per-class boundaries and, for [`MbrStrategy::ProbGated`],
/// demotes boundary pixels whose own class probability is below `tau`
/// (tumor to liver, liver to background). `Off` behaves like `EmitOnly`
/// here; callers skip refinement entirely when it is off.
pub fn refine(
    mask: &LabelMask,
    probs: &ProbMap,
    strategy: MbrStrategy,
    tau: f32,
    se: StructuringElement,
) -> Result<BoundaryArtifacts> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::arg(format!("boundary threshold {tau} outside (0, 1)")));
    }
    let (h, w) = (mask.height(), mask.width());
    if (probs.height(), probs.width()) != (h, w) {
        return Err(Error::dim(format!(
            "mask {h}x{w} vs probability map {}x{}",
            probs.height(),
            probs.width()
        )));
    }
    if probs.classes() <= TUMOR as usize {
        return Err(Error::dim(format!("probability map has {} classes, need 3", probs.classes())));
    }

    let mut classes = Vec::with_capacity(2);
    for class_id in [LIVER, TUMOR] {
        let region = class_region(mask, class_id)?;
        let eroded = erode(&region, se)?;
        let boundary = region.minus(&eroded)?;
        classes.push(ClassBoundary { class_id, eroded, boundary });
    }

    let mut eroded_labels = vec![BACKGROUND; h * w];
    let mut union = vec![false; h * w];
    for i in 0..h * w {
        if classes[0].eroded.bits()[i] {
            eroded_labels[i] = LIVER;
        }
        if classes[1].eroded.bits()[i] {
            eroded_labels[i] = TUMOR;
        }
        union[i] = classes[0].boundary.bits()[i] || classes[1].boundary.bits()[i];
    }

    let mut refined = mask.clone();
    if strategy == MbrStrategy::ProbGated {
        for y in 0..h {
            for x in 0..w {
                let label = mask.get(y, x);
                if label == BACKGROUND || !union[y * w + x] {
                    continue;
                }
                if probs.prob(y, x, label) < tau {
                    refined.set(y, x, label - 1)?;
                }
            }
        }
    }

    Ok(BoundaryArtifacts {
        classes,
        eroded: LabelMask::new(h, w, eroded_labels)?,
        boundary: BinaryMask::new(h, w, union)?,
        refined,
    })
}
