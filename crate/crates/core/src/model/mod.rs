//! The segmentation network: encoder, attention bottleneck, multi-scale
//! atrous block and recalibrated decoder.

pub mod atrous;
pub mod attention;
pub mod encdec;

use std::cell::{Cell, RefCell};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::ProbMap;
use crate::preprocess::{SliceImage, Stage};
use crate::tensor::{dropout, glorot_uniform, he_normal, Padding, ParamStore, Scalar, Tensor};

pub use atrous::{atrous_depthwise, msas_branch, msas_forward, receptive_span};
pub use attention::{dca_forward, dca_penalty, dynamic_conv, mhdca, scaled_attention, DynamicKernelBank};
pub use encdec::{adafex_forward, ccr_forward, channel_recalibration, decoder_forward, encoder_forward, CcrWeights};

/// One recorded layer application.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub name: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

fn mix_seed(seed: u64, site: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ site.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-call state of a forward pass: mode, dropout seeding, optional shape
/// trace and pending batch-norm statistic updates.
pub struct Forward<'a, T: Scalar> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
    training: bool,
    seed: u64,
    dropout_sites: Cell<u64>,
    trace: RefCell<Option<Vec<LayerTrace>>>,
    buffer_updates: RefCell<Vec<(String, Vec<T>)>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn inference(cfg: &'a ModelConfig, params: &'a ParamStore<T>) -> Self {
        Self::new(cfg, params, false, 0)
    }

    /// Training mode; dropout masks are a pure function of `seed` and call order.
    pub fn training(cfg: &'a ModelConfig, params: &'a ParamStore<T>, seed: u64) -> Self {
        Self::new(cfg, params, true, seed)
    }

    fn new(cfg: &'a ModelConfig, params: &'a ParamStore<T>, training: bool, seed: u64) -> Self {
        Forward {
            cfg,
            params,
            training,
            seed,
            dropout_sites: Cell::new(0),
            trace: RefCell::new(None),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_trace(self) -> Self {
        *self.trace.borrow_mut() = Some(Vec::new());
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn param(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.params.get(name)
    }

    pub fn dropout(&self, x: &Tensor<T>, rate: f64) -> Result<Tensor<T>> {
        let site = self.dropout_sites.get();
        self.dropout_sites.set(site + 1);
        dropout(x, rate, self.training, mix_seed(self.seed, site))
    }

    pub fn record(&self, name: impl Into<String>, input: &[usize], output: &[usize]) {
        if let Some(t) = self.trace.borrow_mut().as_mut() {
            t.push(LayerTrace { name: name.into(), input: input.to_vec(), output: output.to_vec() });
        }
    }

    pub fn push_buffer_update(&self, name: String, value: Vec<T>) {
        self.buffer_updates.borrow_mut().push((name, value));
    }

    pub fn take_trace(&self) -> Vec<LayerTrace> {
        self.trace.borrow_mut().take().unwrap_or_default()
    }

    pub fn take_buffer_updates(&self) -> Vec<(String, Vec<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// 3x3 (or 1x1) same-padded convolution with the `{prefix}.w` / `{prefix}.b` pair.
    pub fn conv(&self, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        x.conv2d(w, Some(b), 1, Padding::Same, 1, 1)
    }

    pub fn linear(&self, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        x.linear(w, Some(b))
    }
}

pub struct ForwardOutput<T: Scalar> {
    /// `[N, H, W, classes]` pre-softmax scores.
    pub logits: Tensor<T>,
    /// Softmax over the class axis.
    pub probs: Tensor<T>,
}

/// Full network on an `[N, H, W, in_channels]` batch.
pub fn forward_batch<T: Scalar>(fw: &Forward<'_, T>, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
    let cfg = fw.cfg;
    let (skips, bottleneck) = encoder_forward(fw, x)?;
    let attended = if cfg.modules.dca { dca_forward(fw, &bottleneck)? } else { bottleneck };
    let pooled = if cfg.modules.msas {
        msas_forward(fw, &attended)?
    } else {
        let out = fw.conv(&attended, "msas_adapter")?;
        fw.record("msas_adapter", attended.shape(), out.shape());
        out
    };
    let features = decoder_forward(fw, &pooled, &skips)?;
    let logits = fw.conv(&features, "head")?;
    fw.record("head", features.shape(), logits.shape());
    let probs = logits.softmax(3)?;
    let s = probs.shape();
    fw.record("labels", s, &[s[0], s[1], s[2], 1]);
    Ok(ForwardOutput { logits, probs })
}

/// Stacks normalized slices into an `[N, H, W, 1]` batch.
pub fn slices_to_batch<T: Scalar>(slices: &[&SliceImage]) -> Result<Tensor<T>> {
    let first = slices.first().ok_or_else(|| Error::arg("empty slice batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        s.expect_stage(&[Stage::Normalized])?;
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::dim(format!("slice {}x{} in a {h}x{w} batch", s.height(), s.width())));
        }
        data.extend(s.pixels().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
    }
    Tensor::from_vec(data, &[slices.len(), h, w, 1])
}

/// Splits a `[N, H, W, C]` probability tensor into per-slice maps.
pub fn probs_to_maps<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<ProbMap>> {
    let s = probs.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("expected [N,H,W,C] probabilities, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    probs
        .data()
        .chunks(per)
        .map(|c| ProbMap::new(s[1], s[2], s[3], c.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()))
        .collect()
}

/// Class probabilities of one normalized slice.
pub fn model_forward<T: Scalar>(fw: &Forward<'_, T>, slice: &SliceImage) -> Result<ProbMap> {
    let x = slices_to_batch::<T>(&[slice])?;
    let out = forward_batch(fw, &x)?;
    Ok(probs_to_maps(&out.probs)?.remove(0))
}

/// Writes pending batch-norm statistic updates back into the store.
pub fn apply_buffer_updates<T: Scalar>(params: &mut ParamStore<T>, updates: Vec<(String, Vec<T>)>) -> Result<()> {
    for (name, value) in updates {
        params.set(&name, value)?;
    }
    Ok(())
}

enum Init {
    He,
    Glorot,
    Zeros,
    Ones,
}

struct Builder<T: Scalar> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: &str, shape: &[usize], init: Init, fan: (usize, usize)) -> Result<()> {
        let n = shape.iter().product();
        let data = match init {
            Init::He => he_normal(&mut self.rng, n, fan.0),
            Init::Glorot => glorot_uniform(&mut self.rng, n, fan.0, fan.1),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        self.store.insert(name, data, shape)
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize, init: Init) -> Result<()> {
        self.add(&format!("{prefix}.w"), &[k, k, cin, cout], init, (k * k * cin, k * k * cout))?;
        self.add(&format!("{prefix}.b"), &[cout], Init::Zeros, (0, 0))
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize, init: Init) -> Result<()> {
        self.add(&format!("{prefix}.w"), &[din, dout], init, (din, dout))?;
        self.add(&format!("{prefix}.b"), &[dout], Init::Zeros, (0, 0))
    }

    fn adafex(&mut self, prefix: &str, cin: usize, f: usize) -> Result<()> {
        self.conv(&format!("{prefix}.conv1"), 3, cin, f, Init::He)?;
        self.conv(&format!("{prefix}.conv2"), 3, f, f, Init::He)?;
        self.conv(&format!("{prefix}.conv3"), 3, f, f, Init::He)
    }
}

/// Freshly initialized parameters for `cfg`, deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) };

    let mut cin = cfg.in_channels;
    for i in 1..=cfg.stages {
        let f = cfg.filters(i);
        b.adafex(&format!("enc{i}"), cin, f)?;
        cin = f;
    }

    let d = cfg.bottleneck_channels();
    if cfg.modules.dca {
        b.linear("dca.fc1", d, d, Init::Glorot)?;
        for branch in ["q", "k", "v"] {
            let (m, k) = (cfg.dynamic_kernels, cfg.token_kernel);
            b.add(&format!("dca.{branch}.kernels"), &[m, k, d], Init::Glorot, (k, k))?;
            b.linear(&format!("dca.{branch}.gate"), d, m, Init::Glorot)?;
        }
        b.linear("dca.fc3", d, cfg.ff_expansion * d, Init::He)?;
        b.linear("dca.fc4", cfg.ff_expansion * d, d, Init::Glorot)?;
    }

    if cfg.modules.msas {
        let half = d / 2;
        for (j, _) in cfg.dilations.iter().enumerate() {
            b.add(&format!("msas.branch{j}.depthwise.w"), &[3, 3, 1, d], Init::He, (9, 9))?;
            b.add(&format!("msas.branch{j}.depthwise.b"), &[d], Init::Zeros, (0, 0))?;
            b.conv(&format!("msas.branch{j}.pointwise"), 1, d, half, Init::He)?;
        }
        let width = half * cfg.dilations.len();
        b.add("msas.bn.gamma", &[width], Init::Ones, (0, 0))?;
        b.add("msas.bn.beta", &[width], Init::Zeros, (0, 0))?;
        b.store.insert_buffer("msas.bn.running_mean", vec![T::zero(); width], &[width])?;
        b.store.insert_buffer("msas.bn.running_var", vec![T::one(); width], &[width])?;
    } else {
        b.conv("msas_adapter", 1, d, 2 * d, Init::He)?;
    }

    let mut cin = if cfg.modules.msas { (d / 2) * cfg.dilations.len() } else { 2 * d };
    for i in (1..=cfg.stages).rev() {
        let f = cfg.filters(i);
        b.add(&format!("dec{i}.up.w"), &[2, 2, f, cin], Init::He, (cin, f))?;
        b.add(&format!("dec{i}.up.b"), &[f], Init::Zeros, (0, 0))?;
        if cfg.modules.ccr {
            let c = 2 * f;
            b.linear(&format!("dec{i}.ccr.fc1"), c, c / cfg.reduction, Init::He)?;
            b.linear(&format!("dec{i}.ccr.fc2"), c / cfg.reduction, c, Init::Glorot)?;
        }
        b.adafex(&format!("dec{i}"), 2 * f, f)?;
        cin = f;
    }
    b.conv("head", 1, cfg.filters(1), cfg.num_classes, Init::Glorot)?;
    Ok(b.store)
}
