//! Inference over slices and volumes, and dice evaluation of cases.

use super::volume_io::VolumeCase;
use crate::boundary::{refine, BoundaryArtifacts, MbrStrategy, StructuringElement};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::{LabelMask, ProbMap};
use crate::metrics::{report, DiceReport};
use crate::model::{forward_batch, probs_to_maps, slices_to_batch, Forward};
use crate::preprocess::{reform_volume, resize_mask_nearest, SliceImage};
use crate::tensor::{no_grad, ParamStore, Scalar};

/// Class probabilities of normalized slices, evaluated in batches without
/// recording gradients.
pub fn predict<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, slices: &[SliceImage]) -> Result<Vec<ProbMap>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(cfg.train.batch_size.max(1)) {
        let refs: Vec<&SliceImage> = chunk.iter().collect();
        let maps = no_grad(|| -> Result<Vec<ProbMap>> {
            let fw = Forward::inference(cfg, params);
            probs_to_maps(&forward_batch(&fw, &slices_to_batch::<T>(&refs)?)?.probs)
        })?;
        out.extend(maps);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SlicePrediction {
    pub image: SliceImage,
    pub probs: ProbMap,
    /// Final labels, after refinement when it is enabled.
    pub labels: LabelMask,
    pub boundary: Option<BoundaryArtifacts>,
}

/// Argmax labels plus optional boundary refinement for each probability map.
pub fn label_slices(cfg: &ModelConfig, images: Vec<SliceImage>, probs: Vec<ProbMap>) -> Result<Vec<SlicePrediction>> {
    images
        .into_iter()
        .zip(probs)
        .map(|(image, probs)| {
            let raw = probs.argmax();
            let (labels, boundary) = match cfg.mbr {
                MbrStrategy::Off => (raw, None),
                strategy => {
                    let art = refine(&raw, &probs, strategy, cfg.mbr_tau, StructuringElement::default())?;
                    (art.refined.clone(), Some(art))
                }
            };
            Ok(SlicePrediction { image, probs, labels, boundary })
        })
        .collect()
}

pub fn infer_volume<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    volume: &crate::preprocess::CtVolume,
) -> Result<Vec<SlicePrediction>> {
    let images = reform_volume(volume, &cfg.reformation)?;
    let probs = predict(cfg, params, &images)?;
    label_slices(cfg, images, probs)
}

/// Stacks per-slice masks vertically so a whole volume scores as one case.
pub fn stack_masks(masks: &[LabelMask]) -> Result<LabelMask> {
    let first = masks.first().ok_or_else(|| Error::arg("empty mask stack"))?;
    let (h, w) = (first.height(), first.width());
    let mut labels = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::dim("mask stack with mixed slice sizes"));
        }
        labels.extend_from_slice(m.labels());
    }
    LabelMask::new(masks.len() * h, w, labels)
}

/// Per-case volume dice averaged over cases.
pub fn evaluate_cases<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    cases: &[VolumeCase],
    reference: Option<&DiceReport>,
) -> Result<DiceReport> {
    let mut preds = Vec::with_capacity(cases.len());
    let mut gts = Vec::with_capacity(cases.len());
    for case in cases {
        let masks = case
            .masks
            .as_ref()
            .ok_or_else(|| Error::arg(format!("case `{}` has no ground-truth mask", case.volume.id)))?;
        let predicted: Vec<LabelMask> = infer_volume(cfg, params, &case.volume)?.into_iter().map(|p| p.labels).collect();
        let truth = masks.iter().map(|m| resize_mask_nearest(m, cfg.reformation.size)).collect::<Result<Vec<_>>>()?;
        preds.push(stack_masks(&predicted)?);
        gts.push(stack_masks(&truth)?);
    }
    report(&preds, &gts, reference)
}
