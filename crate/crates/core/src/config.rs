//! Model, preprocessing and training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boundary::MbrStrategy;
use crate::error::{Error, Result};
use crate::preprocess::ReformationParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutRates {
    /// After the second convolution of every feature stage.
    pub stage: f64,
    /// Inside the channel recalibration gate, before the sigmoid.
    pub ccr: f64,
    /// After the attention block's feed-forward output.
    pub dca: f64,
    /// After the multi-scale atrous block's batch norm.
    pub msas: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates { stage: 0.1, ccr: 0.1, dca: 0.1, msas: 0.1 }
    }
}

impl DropoutRates {
    pub fn none() -> Self {
        DropoutRates { stage: 0.0, ccr: 0.0, dca: 0.0, msas: 0.0 }
    }
}

/// Ablation switches for the optional network blocks. Boundary refinement is
/// switched through [`ModelConfig::mbr`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleSwitches {
    pub ccr: bool,
    pub dca: bool,
    pub msas: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        ModuleSwitches { ccr: true, dca: true, msas: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub zoom_range: (f64, f64),
    pub flip_probability: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { enabled: true, max_rotation_deg: 15.0, zoom_range: (0.9, 1.1), flip_probability: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before the learning rate decays.
    pub patience: usize,
    pub decay_factor: f64,
    /// L1 / L2 penalty on the attention block's first feed-forward weights.
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub augment: AugmentParams,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr: 1e-5,
            epochs: 50,
            batch_size: 4,
            patience: 3,
            decay_factor: 0.65,
            lambda_l1: 1e-6,
            lambda_l2: 1e-5,
            augment: AugmentParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Filters of the first stage; stage `i` (1-based) uses `2^(i-1)` times this.
    pub base_filters: usize,
    pub stages: usize,
    /// Channel reduction factor of the recalibration gate.
    pub reduction: usize,
    pub heads: usize,
    pub dilations: Vec<usize>,
    /// Candidate kernels mixed by each dynamic token convolution.
    pub dynamic_kernels: usize,
    pub token_kernel: usize,
    /// Feed-forward hidden width as a multiple of the token width.
    pub ff_expansion: usize,
    pub dropout: DropoutRates,
    pub batch_norm_momentum: f64,
    pub batch_norm_eps: f64,
    pub modules: ModuleSwitches,
    pub mbr: MbrStrategy,
    pub mbr_tau: f32,
    pub reformation: ReformationParams,
    pub train: TrainParams,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 3,
            base_filters: 16,
            stages: 5,
            reduction: 4,
            heads: 8,
            dilations: vec![1, 4, 8, 12],
            dynamic_kernels: 4,
            token_kernel: 3,
            ff_expansion: 2,
            dropout: DropoutRates::default(),
            batch_norm_momentum: 0.9,
            batch_norm_eps: 1e-5,
            modules: ModuleSwitches::default(),
            mbr: MbrStrategy::EmitOnly,
            mbr_tau: 0.6,
            reformation: ReformationParams::default(),
            train: TrainParams::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale variant: 64x64 inputs, 8 base filters, three stages.
    pub fn scaled() -> Self {
        let mut cfg = ModelConfig { base_filters: 8, stages: 3, ..Default::default() };
        cfg.reformation.size = (64, 64);
        cfg
    }

    /// Filters of 1-based stage `i`.
    pub fn filters(&self, stage: usize) -> usize {
        self.base_filters << (stage - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.filters(self.stages)
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.reformation.size
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        let (h, w) = self.input_size();
        (h >> self.stages, w >> self.stages)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.in_channels == 0 || self.num_classes < 2 || self.base_filters == 0 || self.stages == 0 {
            return bad("channels, classes, base filters and stages must be positive".into());
        }
        let (h, w) = self.input_size();
        let unit = 1usize << self.stages;
        if h % unit != 0 || w % unit != 0 {
            return bad(format!("input {h}x{w} is not divisible by 2^{} = {unit}", self.stages));
        }
        let d = self.bottleneck_channels();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return bad(format!("token width {d} is not divisible by {} heads", self.heads));
        }
        if self.reduction == 0 || !(2 * self.base_filters).is_multiple_of(self.reduction) {
            return bad(format!("recalibration width {} not divisible by {}", 2 * self.base_filters, self.reduction));
        }
        if !d.is_multiple_of(2) {
            return bad(format!("bottleneck width {d} must be even"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilation rates must be non-empty and >= 1".into());
        }
        if self.dynamic_kernels == 0 || self.token_kernel.is_multiple_of(2) || self.ff_expansion == 0 {
            return bad("dynamic kernel count, odd token kernel and feed-forward expansion required".into());
        }
        let d = &self.dropout;
        for r in [d.stage, d.ccr, d.dca, d.msas] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("dropout rate {r} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.batch_norm_momentum) || self.batch_norm_eps <= 0.0 {
            return bad("batch norm momentum must be in [0, 1) and eps positive".into());
        }
        if !(self.mbr_tau > 0.0 && self.mbr_tau < 1.0) {
            return bad(format!("boundary threshold {} outside (0, 1)", self.mbr_tau));
        }
        let t = &self.train;
        if !(t.decay_factor > 0.0 && t.decay_factor < 1.0) {
            return bad(format!("decay factor {} outside (0, 1)", t.decay_factor));
        }
        if !(t.lr > 0.0) || t.batch_size == 0 || t.patience == 0 {
            return bad("learning rate, batch size and patience must be positive".into());
        }
        if t.lambda_l1 < 0.0 || t.lambda_l2 < 0.0 {
            return bad("regularization weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&t.augment.flip_probability) || t.augment.zoom_range.0 > t.augment.zoom_range.1 {
            return bad("augmentation flip probability or zoom range invalid".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Architecture fields only; two configs with equal keys share parameter layouts.
    pub fn architecture_key(&self) -> serde_json::Value {
        serde_json::json!({
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "base_filters": self.base_filters,
            "stages": self.stages,
            "reduction": self.reduction,
            "heads": self.heads,
            "dilations": self.dilations,
            "dynamic_kernels": self.dynamic_kernels,
            "token_kernel": self.token_kernel,
            "ff_expansion": self.ff_expansion,
            "modules": self.modules,
            "input_size": self.reformation.size,
        })
    }
}
