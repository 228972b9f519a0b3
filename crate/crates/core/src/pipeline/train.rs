//! Epoch loop: augmentation, dice loss with the attention penalty, Adam,
//! validation dice and plateau learning-rate decay.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment;
use super::checkpoint::save_checkpoint;
use super::infer::predict;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::metrics::{report, soft_dice_loss_tensor, DEFAULT_DICE_EPS};
use crate::model::{apply_buffer_updates, dca_penalty, forward_batch, init_params, slices_to_batch, Forward};
use crate::preprocess::{reform_slice, resize_mask_nearest, slice_volume, CtVolume, SliceImage};
use crate::tensor::{no_grad, AdamConfig, ParamStore, Scalar};

/// A normalized slice and its labels at model resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: SliceImage,
    pub mask: LabelMask,
}

/// Reforms every slice of a volume and resizes its labels to match.
pub fn prepare_case(cfg: &ModelConfig, volume: &CtVolume, masks: &[LabelMask]) -> Result<Vec<Sample>> {
    let slices = slice_volume(volume)?;
    if slices.len() != masks.len() {
        return Err(Error::dim(format!("{} slices with {} masks", slices.len(), masks.len())));
    }
    slices
        .iter()
        .zip(masks)
        .map(|(s, m)| {
            Ok(Sample {
                image: reform_slice(s, &cfg.reformation)?,
                mask: resize_mask_nearest(m, cfg.reformation.size)?,
            })
        })
        .collect()
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// a strict improvement of the monitored score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub initial_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub decays: u32,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler { initial_lr, factor, patience, decays: 0, best: None, since_improvement: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr * self.factor.powf(f64::from(self.decays))
    }

    /// Records an epoch's score; returns `true` when it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.since_improvement = 0;
            return true;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            self.decays += 1;
            self.since_improvement = 0;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_dsc: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\tloss\tval_dsc\tlr";

    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.loss, self.val_dsc, self.lr)
    }
}

#[derive(Clone, Default)]
pub struct TrainOptions {
    /// Overrides `cfg.train.epochs`.
    pub epochs: Option<usize>,
    pub log_path: Option<PathBuf>,
    /// Best-validation checkpoint destination.
    pub checkpoint_path: Option<PathBuf>,
    /// Stop once the inference-mode training loss drops below this value.
    pub stop_below_train_loss: Option<f64>,
    /// Start from these parameters instead of a fresh initialization.
    pub initial_params: Option<ParamStore<f32>>,
}

pub struct TrainOutcome<T: Scalar> {
    pub params: ParamStore<T>,
    pub best_params: ParamStore<T>,
    pub history: Vec<EpochRecord>,
    pub scheduler: PlateauScheduler,
    pub best_val_dsc: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z ^ (z >> 33)
}

/// Soft dice loss of the network in inference mode.
pub fn evaluate_loss<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("loss over zero samples"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.train.batch_size.max(1)) {
        let images: Vec<&SliceImage> = chunk.iter().map(|s| &s.image).collect();
        let labels: Vec<u8> = chunk.iter().flat_map(|s| s.mask.labels().iter().copied()).collect();
        let loss = no_grad(|| -> Result<f64> {
            let fw = Forward::inference(cfg, params);
            let out = forward_batch(&fw, &slices_to_batch::<T>(&images)?)?;
            soft_dice_loss_tensor(&out.probs, &labels, DEFAULT_DICE_EPS)?.item()?.to_f64().ok_or_else(|| Error::Numeric("loss".into()))
        })?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mean of liver and tumor dice over validation slices.
pub fn validation_dsc<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, samples: &[Sample]) -> Result<f64> {
    let images: Vec<SliceImage> = samples.iter().map(|s| s.image.clone()).collect();
    let preds: Vec<LabelMask> = predict(cfg, params, &images)?.iter().map(|p| p.argmax()).collect();
    let gts: Vec<LabelMask> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok(report(&preds, &gts, None)?.mean)
}

fn train_step(
    cfg: &ModelConfig,
    params: &mut ParamStore<f32>,
    batch: &[Sample],
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let images: Vec<&SliceImage> = batch.iter().map(|s| &s.image).collect();
    let labels: Vec<u8> = batch.iter().flat_map(|s| s.mask.labels().iter().copied()).collect();
    let x = slices_to_batch::<f32>(&images)?;
    let (loss_value, updates) = {
        let fw = Forward::training(cfg, params, dropout_seed);
        let out = forward_batch(&fw, &x)?;
        let mut loss = soft_dice_loss_tensor(&out.probs, &labels, DEFAULT_DICE_EPS)?;
        if cfg.modules.dca && (cfg.train.lambda_l1 > 0.0 || cfg.train.lambda_l2 > 0.0) {
            loss = loss.add(&dca_penalty(&fw, cfg.train.lambda_l1, cfg.train.lambda_l2)?)?;
        }
        let v = f64::from(loss.item()?);
        if !v.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {v}")));
        }
        loss.backward()?;
        (v, fw.take_buffer_updates())
    };
    params.adam_step(&AdamConfig { lr, ..AdamConfig::default() })?;
    apply_buffer_updates(params, updates)?;
    Ok(loss_value)
}

/// Trains a fresh 32-bit model. Everything random derives from `cfg.seed`.
pub fn train(cfg: &ModelConfig, train_set: &[Sample], val_set: &[Sample], opts: TrainOptions) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::arg("training needs non-empty train and validation sets"));
    }
    let epochs = opts.epochs.unwrap_or(cfg.train.epochs);
    let mut params = match opts.initial_params {
        Some(p) => p,
        None => init_params::<f32>(cfg, cfg.seed)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0));
    let mut scheduler = PlateauScheduler::new(cfg.train.lr, cfg.train.decay_factor, cfg.train.patience);
    let mut log = match &opts.log_path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{}", EpochRecord::TSV_HEADER)?;
            Some(w)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(epochs);
    let mut best_params = params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;

    for epoch in 1..=epochs {
        let lr = scheduler.lr();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.train.batch_size) {
            let batch = idx
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let draw = augment::draw(&mut rng, &cfg.train.augment);
                    let (image, mask) = augment::apply(&s.image, &s.mask, &draw)?;
                    Ok(Sample { image, mask })
                })
                .collect::<Result<Vec<_>>>()?;
            step += 1;
            loss_sum += train_step(cfg, &mut params, &batch, lr, mix(cfg.seed, 2, step))? * batch.len() as f64;
        }
        let loss = loss_sum / train_set.len() as f64;
        let val_dsc = validation_dsc(cfg, &params, val_set)?;
        let record = EpochRecord { epoch, loss, val_dsc, lr };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", record.tsv())?;
            w.flush()?;
        }
        history.push(record);
        if scheduler.observe(val_dsc) {
            best_params = params.clone();
            if let Some(p) = &opts.checkpoint_path {
                save_checkpoint(p, cfg, &params)?;
            }
        }
        if let Some(target) = opts.stop_below_train_loss {
            if evaluate_loss(cfg, &params, train_set)? < target {
                break;
            }
        }
    }
    let best_val_dsc = scheduler.best.unwrap_or(0.0);
    Ok(TrainOutcome { params, best_params, history, scheduler, best_val_dsc })
}
