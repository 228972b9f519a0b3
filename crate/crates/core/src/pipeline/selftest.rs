//! Built-in invariant suite: gradient checks, layer shape walk, erosion and
//! dice oracles, attention and recalibration contracts, schedule and split
//! arithmetic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::split::{split_cases, DEFAULT_FRACTIONS};
use super::train::PlateauScheduler;
use crate::boundary::{erode, StructuringElement};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMask, LIVER, TUMOR};
use crate::metrics::{dsc, soft_dice_loss_tensor};
use crate::model::{
    atrous_depthwise, channel_recalibration, dynamic_conv, forward_batch, init_params, mhdca, scaled_attention, CcrWeights,
    DynamicKernelBank, Forward, LayerTrace,
};
use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
use crate::tensor::{no_grad, Padding, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed, detail }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelfTestOptions {
    /// Scales the analytic convolution gradient to prove the checker notices.
    pub corrupt_conv_gradient: bool,
}

/// One layer row of the network blueprint, as `(H, W, C)` extents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeRow {
    pub layer: String,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

fn hwc(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[_, h, w, c] => Ok([h, w, c]),
        s => Err(Error::dim(format!("expected an NHWC shape, got {s:?}"))),
    }
}

/// Runs one inference pass on a zero slice and records every block.
pub fn trace_model(cfg: &ModelConfig) -> Result<Vec<LayerTrace>> {
    let params = init_params::<f32>(cfg, 0)?;
    let (h, w) = cfg.input_size();
    let x = Tensor::<f32>::zeros(&[1, h, w, cfg.in_channels])?;
    no_grad(|| {
        let fw = Forward::inference(cfg, &params).with_trace();
        forward_batch(&fw, &x)?;
        Ok(fw.take_trace())
    })
}

/// Blueprint rows in network order. Decoder extractor rows take the
/// upsampled map as their input and the last one reports the label map.
pub fn shape_table_from_trace(trace: &[LayerTrace], stages: usize) -> Result<Vec<ShapeRow>> {
    let find = |name: &str| {
        trace.iter().find(|t| t.name == name).ok_or_else(|| Error::arg(format!("trace lacks layer `{name}`")))
    };
    let mut rows = Vec::new();
    for i in 1..=stages {
        let a = find(&format!("encoder.adafex{i}"))?;
        rows.push(ShapeRow { layer: format!("encoder AdaFEx {i}"), input: hwc(&a.input)?, output: hwc(&a.output)? });
        let d = find(&format!("encoder.down{i}"))?;
        rows.push(ShapeRow { layer: format!("encoder down-sampler {i}"), input: hwc(&d.input)?, output: hwc(&d.output)? });
    }
    for name in ["dca", "msas"] {
        let t = find(name)?;
        rows.push(ShapeRow { layer: name.to_uppercase(), input: hwc(&t.input)?, output: hwc(&t.output)? });
    }
    for i in (1..=stages).rev() {
        let up = find(&format!("decoder.up{i}"))?;
        rows.push(ShapeRow { layer: format!("decoder up-sampler {i}"), input: hwc(&up.input)?, output: hwc(&up.output)? });
        let out = if i == 1 { find("labels")? } else { find(&format!("decoder.adafex{i}"))? };
        rows.push(ShapeRow { layer: format!("decoder AdaFEx {i}"), input: hwc(&up.output)?, output: hwc(&out.output)? });
    }
    Ok(rows)
}

/// Rows implied by the configuration's stage arithmetic.
pub fn expected_shape_table(cfg: &ModelConfig) -> Vec<ShapeRow> {
    let (h, w) = cfg.input_size();
    let at = |i: usize| (h >> (i - 1), w >> (i - 1));
    let mut rows = Vec::new();
    let mut cin = cfg.in_channels;
    for i in 1..=cfg.stages {
        let (y, x) = at(i);
        let f = cfg.filters(i);
        rows.push(ShapeRow { layer: format!("encoder AdaFEx {i}"), input: [y, x, cin], output: [y, x, f] });
        rows.push(ShapeRow { layer: format!("encoder down-sampler {i}"), input: [y, x, f], output: [y / 2, x / 2, f] });
        cin = f;
    }
    let (by, bx) = cfg.bottleneck_size();
    let d = cfg.bottleneck_channels();
    rows.push(ShapeRow { layer: "DCA".into(), input: [by, bx, d], output: [by, bx, d] });
    rows.push(ShapeRow { layer: "MSAS".into(), input: [by, bx, d], output: [by, bx, 2 * d] });
    let mut cin = 2 * d;
    for i in (1..=cfg.stages).rev() {
        let (y, x) = at(i);
        let f = cfg.filters(i);
        rows.push(ShapeRow { layer: format!("decoder up-sampler {i}"), input: [y / 2, x / 2, cin], output: [y, x, f] });
        let out_c = if i == 1 { 1 } else { f };
        rows.push(ShapeRow { layer: format!("decoder AdaFEx {i}"), input: [y, x, f], output: [y, x, out_c] });
        cin = f;
    }
    rows
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(data, shape).expect("shape and data agree")
}

fn leaf(t: Tensor<f64>) -> Tensor<f64> {
    Tensor::param(t.to_vec(), t.shape()).expect("shape and data agree")
}

type LossFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

/// Weighted sum with fixed random weights, so every output element carries
/// a distinct upstream gradient.
fn weighted(out: Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    out.mul(&Tensor::from_vec(w, out.shape())?)?.sum()
}

/// `(name, inputs, loss)` for every differentiable building block.
pub fn gradient_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, LossFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut r = |s: &[usize]| leaf(random_tensor(&mut rng, s));
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, LossFn)> = Vec::new();
    cases.push((
        "conv2d standard",
        vec![r(&[2, 5, 5, 3]), r(&[3, 3, 3, 2]), r(&[2])],
        Box::new(|t| weighted(t[0].conv2d(&t[1], Some(&t[2]), 1, Padding::Same, 1, 1)?, 1)),
    ));
    cases.push((
        "conv2d dilated",
        vec![r(&[1, 5, 5, 2]), r(&[3, 3, 2, 2]), r(&[2])],
        Box::new(|t| weighted(t[0].conv2d(&t[1], Some(&t[2]), 1, Padding::Same, 2, 1)?, 2)),
    ));
    cases.push((
        "conv2d depthwise",
        vec![r(&[2, 4, 5, 3]), r(&[3, 3, 1, 3]), r(&[3])],
        Box::new(|t| weighted(t[0].conv2d(&t[1], Some(&t[2]), 1, Padding::Same, 1, 3)?, 3)),
    ));
    cases.push((
        "transposed conv",
        vec![r(&[2, 3, 3, 3]), r(&[2, 2, 2, 3]), r(&[2])],
        Box::new(|t| weighted(t[0].conv_transpose2x2(&t[1], Some(&t[2]))?, 4)),
    ));
    cases.push(("maxpool", vec![r(&[2, 4, 4, 3])], Box::new(|t| weighted(t[0].max_pool2x2()?, 5))));
    cases.push((
        "linear",
        vec![r(&[4, 5]), r(&[5, 3]), r(&[3])],
        Box::new(|t| weighted(t[0].linear(&t[1], Some(&t[2]))?, 6)),
    ));
    cases.push(("softmax", vec![r(&[3, 5])], Box::new(|t| weighted(t[0].softmax(1)?, 7))));
    cases.push(("sigmoid", vec![r(&[4, 5])], Box::new(|t| weighted(t[0].sigmoid()?, 8))));
    cases.push(("relu", vec![r(&[4, 5])], Box::new(|t| weighted(t[0].relu()?, 9))));
    cases.push(("global pool", vec![r(&[2, 3, 4, 3])], Box::new(|t| weighted(t[0].global_avg_pool()?, 10))));
    cases.push((
        "CCR gate",
        vec![r(&[2, 3, 3, 4]), r(&[4, 2]), r(&[2]), r(&[2, 4]), r(&[4])],
        Box::new(|t| {
            let w = CcrWeights { fc1_w: &t[1], fc1_b: &t[2], fc2_w: &t[3], fc2_b: &t[4] };
            weighted(channel_recalibration(&t[0], &w, 0.0, false, 0)?.0, 11)
        }),
    ));
    cases.push((
        "attention",
        vec![r(&[1, 4, 3]), r(&[1, 4, 3]), r(&[1, 4, 3])],
        Box::new(|t| weighted(scaled_attention(&t[0], &t[1], &t[2])?.0, 12)),
    ));
    cases.push((
        "soft dice loss",
        vec![r(&[2, 3, 3, 3])],
        Box::new(|t| {
            let labels: Vec<u8> = (0..18).map(|i| [0u8, 1, 2, 1, 0, 2][i % 6]).collect();
            soft_dice_loss_tensor(&t[0].softmax(3)?, &labels, 1e-6)
        }),
    ));
    cases
}

/// Gradient check of every block; the worst relative error per block.
pub fn gradient_suite(corrupt_conv: bool) -> Vec<CheckResult> {
    gradient_cases()
        .into_iter()
        .map(|(name, inputs, loss)| {
            let scale = if corrupt_conv && name.starts_with("conv2d") { 1.5 } else { 1.0 };
            let opts = GradCheckOptions { analytic_scale: scale, ..GradCheckOptions::default() };
            match check_gradients(&inputs, loss, opts) {
                Ok(rep) => CheckResult::new(
                    &format!("gradient {name}"),
                    rep.max_rel_error < GRAD_TOLERANCE,
                    format!("max relative error {:.2e} over {} entries", rep.max_rel_error, rep.checked),
                ),
                Err(e) => CheckResult::new(&format!("gradient {name}"), false, e.to_string()),
            }
        })
        .collect()
}

/// Direct structuring-element fit; pixels outside the frame are background.
pub fn erode_brute_force(mask: &BinaryMask, size: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let r = size as isize / 2;
    let bits = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && mask.get(yy as usize, xx as usize)
                })
            })
        })
        .collect();
    BinaryMask::new(h, w, bits).expect("same extents")
}

fn check_erosion(rng: &mut ChaCha8Rng) -> CheckResult {
    for trial in 0..100 {
        let density: f64 = rng.random_range(0.3..0.95);
        let bits: Vec<bool> = (0..256).map(|_| rng.random::<f64>() < density).collect();
        let m = BinaryMask::new(16, 16, bits).expect("16x16");
        match erode(&m, StructuringElement::default()) {
            Ok(e) if e == erode_brute_force(&m, 3) => {}
            _ => return CheckResult::new("erosion oracle", false, format!("mismatch on mask {trial}")),
        }
    }
    CheckResult::new("erosion oracle", true, "100 random 16x16 masks match".into())
}

fn check_dsc(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a: Vec<u8> = (0..256).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<u8> = (0..256).map(|_| rng.random_range(0..3)).collect();
        let (ma, mb) = (LabelMask::new(16, 16, a.clone()).unwrap(), LabelMask::new(16, 16, b.clone()).unwrap());
        for class in [LIVER, TUMOR] {
            let p = a.iter().filter(|&&l| l == class).count();
            let g = b.iter().filter(|&&l| l == class).count();
            let both = a.iter().zip(&b).filter(|&(&x, &y)| x == class && y == class).count();
            let direct = if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 };
            worst = worst.max((dsc(&ma, &mb, class).unwrap_or(f64::NAN) - direct).abs());
        }
    }
    CheckResult::new("dice oracle", worst < 1e-12, format!("max error {worst:.1e} over 100 pairs"))
}

fn check_impulse() -> CheckResult {
    for d in [1usize, 4, 8, 12] {
        let size = 2 * d + 3;
        let c = size / 2;
        let mut x = vec![0.0f64; size * size];
        x[c * size + c] = 1.0;
        let x = Tensor::from_vec(x, &[1, size, size, 1]).unwrap();
        let w = Tensor::from_vec((1..=9).map(f64::from).collect(), &[3, 3, 1, 1]).unwrap();
        let out = match atrous_depthwise(&x, &w, None, d) {
            Ok(o) => o,
            Err(e) => return CheckResult::new("atrous impulse taps", false, e.to_string()),
        };
        for y in 0..size {
            for xx in 0..size {
                let expected = match (c as isize - y as isize, c as isize - xx as isize) {
                    (dy, dx) if dy % d as isize == 0 && dx % d as isize == 0 && dy.abs() <= d as isize && dx.abs() <= d as isize => {
                        let (a, b) = ((dy / d as isize + 1) as usize, (dx / d as isize + 1) as usize);
                        (a * 3 + b + 1) as f64
                    }
                    _ => 0.0,
                };
                if out.data()[y * size + xx] != expected {
                    return CheckResult::new("atrous impulse taps", false, format!("dilation {d} at ({y},{xx})"));
                }
            }
        }
    }
    CheckResult::new("atrous impulse taps", true, "dilations 1, 4, 8, 12 exact".into())
}

fn check_attention(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (q, k, v) = (random_tensor(rng, &[2, 6, 4]), random_tensor(rng, &[2, 6, 4]), random_tensor(rng, &[2, 6, 4]));
        match scaled_attention(&q, &k, &v) {
            Ok((_, w)) => {
                for row in w.data().chunks(6) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            Err(_) => worst = f64::INFINITY,
        }
    }
    let rows = CheckResult::new("attention rows stochastic", worst <= 1e-6, format!("max |row sum - 1| {worst:.1e}"));
    vec![rows, check_single_head(rng), check_identical_keys(rng)]
}

fn check_single_head(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "attention single head";
    let run = |rng: &mut ChaCha8Rng| -> Result<f64> {
        let tokens = random_tensor(rng, &[2, 5, 4]);
        let parts: Vec<[Tensor<f64>; 3]> = (0..3)
            .map(|_| [random_tensor(rng, &[3, 3, 4]), random_tensor(rng, &[4, 3]), random_tensor(rng, &[3])])
            .collect();
        let banks: Vec<DynamicKernelBank<'_, f64>> = parts
            .iter()
            .map(|[k, w, b]| DynamicKernelBank { kernels: k, gate_w: w, gate_b: b })
            .collect();
        let multi = mhdca(&tokens, 1, [&banks[0], &banks[1], &banks[2]])?.output;
        let q = dynamic_conv(&tokens, &banks[0])?.0;
        let k = dynamic_conv(&tokens, &banks[1])?.0;
        let v = dynamic_conv(&tokens, &banks[2])?.0;
        let single = scaled_attention(&q, &k, &v)?.0;
        Ok(multi.data().iter().zip(single.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    };
    match run(rng) {
        Ok(err) => CheckResult::new(name, err <= 1e-6, format!("max deviation {err:.1e}")),
        Err(e) => CheckResult::new(name, false, e.to_string()),
    }
}

fn check_identical_keys(rng: &mut ChaCha8Rng) -> CheckResult {
    let name = "attention identical keys";
    let q = random_tensor(rng, &[1, 6, 4]);
    let key_row: Vec<f64> = random_tensor(rng, &[4]).to_vec();
    let k = Tensor::from_vec(key_row.repeat(6), &[1, 6, 4]).expect("6 rows");
    let v = random_tensor(rng, &[1, 6, 4]);
    let mean: Vec<f64> = (0..4).map(|j| (0..6).map(|i| v.data()[i * 4 + j]).sum::<f64>() / 6.0).collect();
    match scaled_attention(&q, &k, &v) {
        Ok((out, _)) => {
            let err = out.data().iter().enumerate().map(|(i, o)| (o - mean[i % 4]).abs()).fold(0.0, f64::max);
            CheckResult::new(name, err <= 1e-6, format!("max deviation from value mean {err:.1e}"))
        }
        Err(e) => CheckResult::new(name, false, e.to_string()),
    }
}

fn check_ccr(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let x = random_tensor(rng, &[2, 4, 4, 8]);
    let fc1_w = random_tensor(rng, &[8, 2]);
    let fc1_b = Tensor::zeros(&[2]).expect("shape");
    let fc2_w = Tensor::zeros(&[2, 8]).expect("shape");
    let fc2_b = Tensor::full(20.0, &[8]).expect("shape");
    let w = CcrWeights { fc1_w: &fc1_w, fc1_b: &fc1_b, fc2_w: &fc2_w, fc2_b: &fc2_b };
    let saturation = match channel_recalibration(&x, &w, 0.1, false, 0) {
        Ok((out, _)) => {
            let err = out.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            CheckResult::new("CCR saturation identity", err < 1e-6, format!("max deviation {err:.1e}"))
        }
        Err(e) => CheckResult::new("CCR saturation identity", false, e.to_string()),
    };

    let mut gate_ok = true;
    let mut norm_ok = true;
    for _ in 0..100 {
        let x = random_tensor(rng, &[1, 3, 3, 8]);
        let (w1, b1, w2, b2) =
            (random_tensor(rng, &[8, 2]), random_tensor(rng, &[2]), random_tensor(rng, &[2, 8]), random_tensor(rng, &[8]));
        let w = CcrWeights { fc1_w: &w1, fc1_b: &b1, fc2_w: &w2, fc2_b: &b2 };
        let Ok((out, gate)) = channel_recalibration(&x, &w, 0.0, false, 0) else {
            gate_ok = false;
            continue;
        };
        gate_ok &= gate.data().iter().all(|&g| g > 0.0 && g < 1.0);
        for c in 0..8 {
            let norm = |t: &Tensor<f64>| t.data().iter().skip(c).step_by(8).map(|v| v * v).sum::<f64>().sqrt();
            norm_ok &= norm(&out) <= norm(&x);
        }
    }
    vec![
        saturation,
        CheckResult::new("CCR gate in (0,1)", gate_ok, "100 random inputs".into()),
        CheckResult::new("CCR channel norms shrink", norm_ok, "100 random inputs".into()),
    ]
}

fn check_schedule() -> CheckResult {
    let mut s = PlateauScheduler::new(1e-5, 0.65, 1);
    s.observe(0.5);
    let exact = (0..10u32).all(|k| {
        let ok = s.lr() == 1e-5 * 0.65f64.powf(f64::from(k));
        s.observe(0.5);
        ok
    });
    CheckResult::new("plateau decay trace", exact, "lr = 1e-5 * 0.65^k for k < 10".into())
}

fn check_split() -> CheckResult {
    let ids: Vec<String> = (0..100).map(|i| format!("case_{i:03}")).collect();
    match split_cases(&ids, DEFAULT_FRACTIONS, 0) {
        Ok(s) => {
            let counts = (s.train.len(), s.val.len(), s.test.len());
            CheckResult::new("split 80/10/10", counts == (80, 10, 10), format!("{counts:?}"))
        }
        Err(e) => CheckResult::new("split 80/10/10", false, e.to_string()),
    }
}

fn check_shapes() -> CheckResult {
    let cfg = ModelConfig::default();
    let result = trace_model(&cfg).and_then(|t| shape_table_from_trace(&t, cfg.stages));
    match result {
        Ok(rows) => {
            let expected = expected_shape_table(&cfg);
            let bad = rows.iter().zip(&expected).filter(|(a, b)| a != b).count();
            let ok = rows.len() == expected.len() && bad == 0;
            CheckResult::new("layer shape walk", ok, format!("{} rows, {bad} mismatched", rows.len()))
        }
        Err(e) => CheckResult::new("layer shape walk", false, e.to_string()),
    }
}

/// Every check, in a fixed order.
pub fn run_self_test(opts: SelfTestOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = gradient_suite(opts.corrupt_conv_gradient);
    out.push(check_shapes());
    out.push(check_erosion(&mut rng));
    out.push(check_impulse());
    out.push(check_dsc(&mut rng));
    out.extend(check_attention(&mut rng));
    out.extend(check_ccr(&mut rng));
    out.push(check_schedule());
    out.push(check_split());
    out
}

/// Runs the suite and formats one line per check.
pub fn self_test_report(opts: SelfTestOptions) -> (bool, String) {
    let start = Instant::now();
    let results = run_self_test(opts);
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!("{} {:<28} {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail));
    }
    let passed = results.iter().all(|r| r.passed);
    text.push_str(&format!(
        "{} of {} checks passed in {:.1}s\n",
        results.iter().filter(|r| r.passed).count(),
        results.len(),
        start.elapsed().as_secs_f64()
    ));
    (passed, text)
}
