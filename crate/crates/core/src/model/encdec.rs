use super::Forward;
use crate::error::{Error, Result};
use crate::tensor::{dropout, Scalar, Tensor};

/// Three same-padded 3x3 conv + ReLU layers with dropout after the second.
pub fn adafex_forward<T: Scalar>(fw: &Forward<'_, T>, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
    let h = fw.conv(x, &format!("{prefix}.conv1"))?.relu()?;
    let h = fw.conv(&h, &format!("{prefix}.conv2"))?.relu()?;
    let h = fw.dropout(&h, fw.cfg.dropout.stage)?;
    fw.conv(&h, &format!("{prefix}.conv3"))?.relu()
}

/// Runs every encoder stage; returns the pre-pool features of each stage
/// (stage 1 first) and the pooled output of the last stage.
pub fn encoder_forward<T: Scalar>(fw: &Forward<'_, T>, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let cfg = fw.cfg;
    let (h, w) = cfg.input_size();
    if x.rank() != 4 || x.shape()[1..] != [h, w, cfg.in_channels] {
        return Err(Error::dim(format!(
            "encoder expects [N,{h},{w},{}] input, got {:?}",
            cfg.in_channels,
            x.shape()
        )));
    }
    let mut skips = Vec::with_capacity(cfg.stages);
    let mut cur = x.clone();
    for i in 1..=cfg.stages {
        let feat = adafex_forward(fw, &cur, &format!("enc{i}"))?;
        fw.record(format!("encoder.adafex{i}"), cur.shape(), feat.shape());
        let pooled = feat.max_pool2x2()?;
        fw.record(format!("encoder.down{i}"), feat.shape(), pooled.shape());
        skips.push(feat);
        cur = pooled;
    }
    Ok((skips, cur))
}

/// Weights of the two-layer channel gate.
pub struct CcrWeights<'a, T: Scalar> {
    pub fc1_w: &'a Tensor<T>,
    pub fc1_b: &'a Tensor<T>,
    pub fc2_w: &'a Tensor<T>,
    pub fc2_b: &'a Tensor<T>,
}

/// Squeeze-and-excite recalibration of `[N,H,W,C]`: global average pool,
/// reduce, ReLU, dropout, expand, sigmoid, then scale each channel by its gate.
/// Returns the recalibrated map and the `[N,C]` gate.
pub fn channel_recalibration<T: Scalar>(
    x: &Tensor<T>,
    weights: &CcrWeights<'_, T>,
    dropout_rate: f64,
    training: bool,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = *x.shape().last().ok_or_else(|| Error::dim("recalibration of a scalar"))?;
    let hidden = weights.fc1_w.shape().get(1).copied().unwrap_or(0);
    if hidden == 0 || c % hidden != 0 {
        return Err(Error::dim(format!("{c} channels do not reduce evenly to {hidden}")));
    }
    recalibrate(x, weights, |h| dropout(h, dropout_rate, training, seed))
}

fn recalibrate<T: Scalar>(
    x: &Tensor<T>,
    weights: &CcrWeights<'_, T>,
    drop: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let z = x.global_avg_pool()?;
    let h = z.linear(weights.fc1_w, Some(weights.fc1_b))?.relu()?;
    let gate = drop(&h)?.linear(weights.fc2_w, Some(weights.fc2_b))?.sigmoid()?;
    Ok((x.scale_channels(&gate)?, gate))
}

pub fn ccr_forward<T: Scalar>(fw: &Forward<'_, T>, x: &Tensor<T>, prefix: &str) -> Result<(Tensor<T>, Tensor<T>)> {
    let p = |s: &str| fw.param(&format!("{prefix}.{s}"));
    let weights = CcrWeights { fc1_w: p("fc1.w")?, fc1_b: p("fc1.b")?, fc2_w: p("fc2.w")?, fc2_b: p("fc2.b")? };
    recalibrate(x, &weights, |h| fw.dropout(h, fw.cfg.dropout.ccr))
}

/// Upsample, concatenate with the matching skip (skip first), recalibrate,
/// extract; from the deepest stage to the first. Returns the stage-1 features.
pub fn decoder_forward<T: Scalar>(fw: &Forward<'_, T>, bottleneck: &Tensor<T>, skips: &[Tensor<T>]) -> Result<Tensor<T>> {
    let cfg = fw.cfg;
    if skips.len() != cfg.stages {
        return Err(Error::dim(format!("{} skip maps for {} stages", skips.len(), cfg.stages)));
    }
    let mut cur = bottleneck.clone();
    for i in (1..=cfg.stages).rev() {
        let up = cur.conv_transpose2x2(fw.param(&format!("dec{i}.up.w"))?, Some(fw.param(&format!("dec{i}.up.b"))?))?;
        fw.record(format!("decoder.up{i}"), cur.shape(), up.shape());
        let skip = &skips[i - 1];
        if skip.shape() != up.shape() {
            return Err(Error::dim(format!(
                "decoder stage {i}: skip {:?} vs upsampled {:?}",
                skip.shape(),
                up.shape()
            )));
        }
        let cat = Tensor::concat(&[skip, &up], 3)?;
        let fused = if cfg.modules.ccr { ccr_forward(fw, &cat, &format!("dec{i}.ccr"))?.0 } else { cat };
        let out = adafex_forward(fw, &fused, &format!("dec{i}"))?;
        fw.record(format!("decoder.adafex{i}"), fused.shape(), out.shape());
        cur = out;
    }
    Ok(cur)
}
