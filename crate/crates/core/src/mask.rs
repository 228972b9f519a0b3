//! Label maps, binary masks and per-pixel class probabilities.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const TUMOR: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Per-pixel labels in `{0 background, 1 liver, 2 tumor}`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::dim(format!("label mask {height}x{width} with {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > TUMOR) {
            return Err(Error::Format(format!("label {bad} outside {{0,1,2}}")));
        }
        Ok(LabelMask { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![BACKGROUND; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) -> Result<()> {
        if label > TUMOR {
            return Err(Error::Format(format!("label {label} outside {{0,1,2}}")));
        }
        self.labels[y * self.width + x] = label;
        Ok(())
    }

    pub fn label_set(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Pixels whose label is in `classes`.
    pub fn select(&self, classes: &[u8]) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|l| classes.contains(l)).collect(),
        }
    }
}

/// Row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::dim(format!("binary mask {height}x{width} with {} bits", bits.len())));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(format!(
                "binary masks {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// `self AND NOT other`.
    pub fn minus(&self, other: &Self) -> Result<Self> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect();
        Ok(BinaryMask { bits, ..*self })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Ok(BinaryMask { bits, ..*self })
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.same_dims(other).is_ok() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Per-pixel class probabilities, `[H, W, classes]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 || probs.len() != height * width * classes {
            return Err(Error::dim(format!(
                "probability map {height}x{width}x{classes} with {} values",
                probs.len()
            )));
        }
        Ok(ProbMap { height, width, classes, probs })
    }

    /// Probability 1 on the labelled class of every pixel.
    pub fn one_hot(mask: &LabelMask) -> Self {
        let mut probs = vec![0.0; mask.labels.len() * NUM_CLASSES];
        for (i, &l) in mask.labels.iter().enumerate() {
            probs[i * NUM_CLASSES + l as usize] = 1.0;
        }
        ProbMap { height: mask.height, width: mask.width, classes: NUM_CLASSES, probs }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn prob(&self, y: usize, x: usize, class: u8) -> f32 {
        self.probs[(y * self.width + x) * self.classes + class as usize]
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> LabelMask {
        let labels = self
            .probs
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask { height: self.height, width: self.width, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(matches!(LabelMask::new(1, 2, vec![0, 3]), Err(Error::Format(_))));
        assert!(LabelMask::new(2, 2, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn one_hot_argmax_round_trip() {
        let m = LabelMask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        assert_eq!(ProbMap::one_hot(&m).argmax(), m);
    }

    #[test]
    fn select_unions_classes() {
        let m = LabelMask::new(1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(m.select(&[LIVER, TUMOR]).bits(), &[false, true, true]);
    }
}
