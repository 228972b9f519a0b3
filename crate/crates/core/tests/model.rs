use hepaseg::model::{
    adafex_forward, atrous_depthwise, channel_recalibration, dca_forward, dca_penalty, dynamic_conv, encoder_forward,
    forward_batch, init_params, mhdca, msas_branch, msas_forward, receptive_span, scaled_attention, CcrWeights,
    DynamicKernelBank, Forward,
};
use hepaseg::{no_grad, ModelConfig, Padding, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tiny() -> ModelConfig {
    let mut cfg = ModelConfig { base_filters: 4, stages: 2, heads: 2, reduction: 2, seed: 3, ..ModelConfig::default() };
    cfg.reformation.size = (8, 8);
    cfg.dilations = vec![1, 2];
    cfg
}

#[test]
fn adafex_table_rows() {
    let cfg = ModelConfig::default();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let fw = Forward::inference(&cfg, &params);
    no_grad(|| {
        let x = Tensor::<f32>::zeros(&[1, 256, 256, 1]).unwrap();
        assert_eq!(adafex_forward(&fw, &x, "enc1").unwrap().shape(), &[1, 256, 256, 16]);
        let x = Tensor::<f32>::zeros(&[1, 64, 64, 32]).unwrap();
        assert_eq!(adafex_forward(&fw, &x, "enc3").unwrap().shape(), &[1, 64, 64, 64]);
    });
}

#[test]
fn encoder_shapes_and_determinism() {
    let cfg = ModelConfig::default();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let fw = Forward::inference(&cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::from_vec((0..256 * 256).map(|_| rng.random_range(-1.0..1.0)).collect(), &[1, 256, 256, 1])
        .unwrap();
    let (skips, bottleneck) = no_grad(|| encoder_forward(&fw, &x)).unwrap();
    assert_eq!(bottleneck.shape(), &[1, 8, 8, 256]);
    for (i, s) in skips.iter().enumerate() {
        assert_eq!(s.shape(), &[1, 256 >> i, 256 >> i, 16 << i]);
    }
    let (_, again) = no_grad(|| encoder_forward(&fw, &x)).unwrap();
    assert_eq!(again.data(), bottleneck.data());
}

#[test]
fn zero_weights_zero_output() {
    let cfg = tiny();
    let mut params = init_params::<f64>(&cfg, 0).unwrap();
    let names: Vec<String> = params.names().filter(|n| n.starts_with("enc1")).map(str::to_string).collect();
    for n in names {
        let len = params.get(&n).unwrap().numel();
        params.set(&n, vec![0.0; len]).unwrap();
    }
    let fw = Forward::inference(&cfg, &params);
    let x = random(&mut ChaCha8Rng::seed_from_u64(2), &[1, 8, 8, 1]);
    assert!(adafex_forward(&fw, &x, "enc1").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn recalibration_scales_constant_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let consts = [0.5, -1.5, 2.0, 0.25];
    let x = Tensor::from_vec((0..2 * 3 * 3 * 4).map(|i| consts[i % 4]).collect(), &[2, 3, 3, 4]).unwrap();
    let (w1, b1, w2, b2) = (random(&mut rng, &[4, 2]), random(&mut rng, &[2]), random(&mut rng, &[2, 4]), random(&mut rng, &[4]));
    let w = CcrWeights { fc1_w: &w1, fc1_b: &b1, fc2_w: &w2, fc2_b: &b2 };
    let (out, gate) = channel_recalibration(&x, &w, 0.1, false, 0).unwrap();
    // Hand evaluation of the gate from the channel means.
    let hidden: Vec<f64> = (0..2)
        .map(|j| (b1.data()[j] + (0..4).map(|k| consts[k] * w1.data()[k * 2 + j]).sum::<f64>()).max(0.0))
        .collect();
    for k in 0..4 {
        let a = 1.0 / (1.0 + (-(b2.data()[k] + (0..2).map(|j| hidden[j] * w2.data()[j * 4 + k]).sum::<f64>())).exp());
        assert!((gate.data()[k] - a).abs() < 1e-12);
        for v in out.data().iter().skip(k).step_by(4) {
            assert!((v - a * consts[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn recalibration_hidden_width() {
    let params = init_params::<f32>(&ModelConfig::default(), 0).unwrap();
    assert_eq!(params.get("dec5.ccr.fc1.w").unwrap().shape(), &[512, 128]);
    assert_eq!(params.get("dec5.ccr.fc2.w").unwrap().shape(), &[128, 512]);
}

#[test]
fn full_model_output() {
    let cfg = ModelConfig::default();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let fw = Forward::inference(&cfg, &params);
    let x = Tensor::<f32>::full(0.1, &[1, 256, 256, 1]).unwrap();
    let out = no_grad(|| forward_batch(&fw, &x)).unwrap();
    assert_eq!(out.logits.shape(), &[1, 256, 256, 3]);
    for row in out.probs.data().chunks(3) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert!(out.probs.argmax_last().iter().all(|&l| l < 3));
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let cfg = tiny();
    let mut params = init_params::<f64>(&cfg, 0).unwrap();
    params.set("head.w", vec![0.0; params.get("head.w").unwrap().numel()]).unwrap();
    let fw = Forward::inference(&cfg, &params);
    let out = forward_batch(&fw, &random(&mut ChaCha8Rng::seed_from_u64(4), &[2, 8, 8, 1])).unwrap();
    assert!(out.probs.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn ablated_config_is_plain_encoder_decoder() {
    let mut cfg = ModelConfig::default();
    cfg.modules.ccr = false;
    cfg.modules.dca = false;
    cfg.modules.msas = false;
    cfg.mbr = hepaseg::boundary::MbrStrategy::Off;
    let params = init_params::<f32>(&cfg, 0).unwrap();
    assert!(params.names().all(|n| !n.contains("ccr") && !n.starts_with("dca") && !n.starts_with("msas.")));
    let fw = Forward::inference(&cfg, &params).with_trace();
    no_grad(|| forward_batch(&fw, &Tensor::<f32>::zeros(&[1, 256, 256, 1]).unwrap())).unwrap();
    let names: Vec<String> = fw.take_trace().into_iter().map(|t| t.name).collect();
    assert!(!names.iter().any(|n| n == "dca" || n == "msas"));
    assert!(names.iter().any(|n| n == "msas_adapter"));
}

#[test]
fn training_forward_is_deterministic_per_seed() {
    let cfg = tiny();
    let params = init_params::<f64>(&cfg, 0).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(5), &[2, 8, 8, 1]);
    let run = |seed| forward_batch(&Forward::training(&cfg, &params, seed), &x).unwrap().probs.to_vec();
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

#[test]
fn parameter_count_ignores_batch_size() {
    let cfg = tiny();
    let params = init_params::<f64>(&cfg, 0).unwrap();
    let before = params.num_parameters();
    for n in [1, 3] {
        let fw = Forward::inference(&cfg, &params);
        forward_batch(&fw, &random(&mut ChaCha8Rng::seed_from_u64(6), &[n, 8, 8, 1])).unwrap();
    }
    assert_eq!(params.num_parameters(), before);
}

#[test]
fn every_parameter_receives_gradient() {
    let mut cfg = tiny();
    cfg.dropout = hepaseg::config::DropoutRates::none();
    let params = init_params::<f64>(&cfg, 0).unwrap();
    let fw = Forward::training(&cfg, &params, 0);
    let x = random(&mut ChaCha8Rng::seed_from_u64(7), &[2, 8, 8, 1]);
    let out = forward_batch(&fw, &x).unwrap();
    let labels: Vec<u8> = (0..128).map(|i| (i % 3) as u8).collect();
    hepaseg::metrics::soft_dice_loss_tensor(&out.probs, &labels, 1e-6).unwrap().backward().unwrap();
    for (name, e) in params.iter().filter(|(_, e)| e.trainable) {
        let g = e.value.grad().unwrap_or_default();
        assert!(g.iter().any(|&v| v != 0.0), "no gradient reaches {name}");
    }
}

fn bank_parts(rng: &mut ChaCha8Rng, m: usize, k: usize, d: usize) -> [Tensor<f64>; 3] {
    [random(rng, &[m, k, d]), random(rng, &[d, m]), random(rng, &[m])]
}

#[test]
fn dynamic_conv_is_gate_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens = random(&mut rng, &[2, 6, 4]);
    let [k, w, b] = bank_parts(&mut rng, 3, 3, 4);
    let bank = DynamicKernelBank { kernels: &k, gate_w: &w, gate_b: &b };
    let (out, gate) = dynamic_conv(&tokens, &bank).unwrap();
    for row in gate.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for s in 0..2 {
        let t = tokens.narrow(0, s, 1).unwrap();
        let mut expected = vec![0.0; 6 * 4];
        for m in 0..3 {
            let km = k.narrow(0, m, 1).unwrap();
            let conv = t.token_conv1d(&km).unwrap();
            for (e, c) in expected.iter_mut().zip(conv.data()) {
                *e += gate.data()[s * 3 + m] * c;
            }
        }
        assert!(max_diff(&out.data()[s * 24..(s + 1) * 24], &expected) < 1e-12);
    }
}

#[test]
fn per_head_width_for_defaults() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tokens = random(&mut rng, &[1, 64, 256]);
    let parts: Vec<[Tensor<f64>; 3]> = (0..3).map(|_| bank_parts(&mut rng, 4, 3, 256)).collect();
    let banks: Vec<DynamicKernelBank<'_, f64>> =
        parts.iter().map(|[k, w, b]| DynamicKernelBank { kernels: k, gate_w: w, gate_b: b }).collect();
    let out = mhdca(&tokens, 8, [&banks[0], &banks[1], &banks[2]]).unwrap();
    assert_eq!(out.output.shape(), &[1, 64, 256]);
    assert_eq!(out.attention.len(), 8);
    assert!(out.attention.iter().all(|a| a.shape() == [1, 64, 64]));
}

#[test]
fn head_order_bookkeeping() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tokens = random(&mut rng, &[1, 5, 6]);
    let parts: Vec<[Tensor<f64>; 3]> = (0..3).map(|_| bank_parts(&mut rng, 2, 3, 6)).collect();
    let banks: Vec<DynamicKernelBank<'_, f64>> =
        parts.iter().map(|[k, w, b]| DynamicKernelBank { kernels: k, gate_w: w, gate_b: b }).collect();
    let reference = mhdca(&tokens, 3, [&banks[0], &banks[1], &banks[2]]).unwrap().output;
    let q = dynamic_conv(&tokens, &banks[0]).unwrap().0;
    let k = dynamic_conv(&tokens, &banks[1]).unwrap().0;
    let v = dynamic_conv(&tokens, &banks[2]).unwrap().0;
    let order = [2usize, 0, 1];
    let heads: Vec<Tensor<f64>> = order
        .iter()
        .map(|&h| scaled_attention(&q.narrow(2, 2 * h, 2).unwrap(), &k.narrow(2, 2 * h, 2).unwrap(), &v.narrow(2, 2 * h, 2).unwrap()).unwrap().0)
        .collect();
    let permuted = Tensor::concat(&heads.iter().collect::<Vec<_>>(), 2).unwrap();
    let mut blocks = vec![None; 3];
    for (pos, &h) in order.iter().enumerate() {
        blocks[h] = Some(permuted.narrow(2, 2 * pos, 2).unwrap());
    }
    let blocks: Vec<Tensor<f64>> = blocks.into_iter().map(Option::unwrap).collect();
    let restored = Tensor::concat(&blocks.iter().collect::<Vec<_>>(), 2).unwrap();
    assert!(max_diff(restored.data(), reference.data()) < 1e-15);
}

fn identity_banks(d: usize) -> [Tensor<f64>; 3] {
    let mut k = vec![0.0; 2 * 3 * d];
    for m in 0..2 {
        for c in 0..d {
            k[(m * 3 + 1) * d + c] = 1.0;
        }
    }
    [
        Tensor::from_vec(k, &[2, 3, d]).unwrap(),
        random(&mut ChaCha8Rng::seed_from_u64(12), &[d, 2]),
        Tensor::zeros(&[2]).unwrap(),
    ]
}

#[test]
fn identity_kernels_make_attention_permutation_equivariant() {
    let [k, w, b] = identity_banks(4);
    let bank = DynamicKernelBank { kernels: &k, gate_w: &w, gate_b: &b };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tokens = random(&mut rng, &[1, 5, 4]);
    let perm = [3usize, 0, 4, 1, 2];
    let shuffled: Vec<f64> = perm.iter().flat_map(|&i| tokens.data()[i * 4..(i + 1) * 4].to_vec()).collect();
    let shuffled = Tensor::from_vec(shuffled, &[1, 5, 4]).unwrap();
    let a = mhdca(&tokens, 2, [&bank, &bank, &bank]).unwrap().output;
    let b2 = mhdca(&shuffled, 2, [&bank, &bank, &bank]).unwrap().output;
    for (row, &i) in perm.iter().enumerate() {
        assert!(max_diff(&b2.data()[row * 4..(row + 1) * 4], &a.data()[i * 4..(i + 1) * 4]) < 1e-12);
    }
}

#[test]
fn every_attention_branch_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tokens = random(&mut rng, &[1, 5, 4]);
    let parts: Vec<[Tensor<f64>; 3]> = (0..3).map(|_| bank_parts(&mut rng, 2, 3, 4)).collect();
    let build = |parts: &[[Tensor<f64>; 3]]| {
        let banks: Vec<DynamicKernelBank<'_, f64>> =
            parts.iter().map(|[k, w, b]| DynamicKernelBank { kernels: k, gate_w: w, gate_b: b }).collect();
        mhdca(&tokens, 2, [&banks[0], &banks[1], &banks[2]]).unwrap().output.to_vec()
    };
    let base = build(&parts);
    for branch in 0..3 {
        let mut changed = parts.clone();
        changed[branch][0] = changed[branch][0].scale(1.5).unwrap();
        assert!(max_diff(&build(&changed), &base) > 1e-9, "branch {branch} has no effect");
    }
}

#[test]
fn attention_block_shapes_zero_output_and_penalty() {
    let cfg = ModelConfig::default();
    let mut params = init_params::<f32>(&cfg, 0).unwrap();
    let x = Tensor::<f32>::full(0.2, &[1, 8, 8, 256]).unwrap();
    {
        let fw = Forward::inference(&cfg, &params);
        assert_eq!(no_grad(|| dca_forward(&fw, &x)).unwrap().shape(), &[1, 8, 8, 256]);
        let w = params.get("dca.fc3.w").unwrap().data();
        let direct = 1e-6 * w.iter().map(|v| f64::from(v.abs())).sum::<f64>()
            + 1e-5 * w.iter().map(|v| f64::from(v * v)).sum::<f64>();
        let got = f64::from(dca_penalty(&fw, 1e-6, 1e-5).unwrap().item().unwrap());
        assert!((got - direct).abs() < 1e-6 * direct.max(1.0));
    }
    let n = params.get("dca.fc4.w").unwrap().numel();
    params.set("dca.fc4.w", vec![0.0; n]).unwrap();
    let fw = Forward::inference(&cfg, &params);
    assert!(no_grad(|| dca_forward(&fw, &x)).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn dilation_one_is_plain_depthwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[1, 6, 6, 3]);
    let w = random(&mut rng, &[3, 3, 1, 3]);
    let a = atrous_depthwise(&x, &w, None, 1).unwrap();
    let b = x.conv2d(&w, None, 1, Padding::Same, 1, 3).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(receptive_span(12, 3), 25);
}

#[test]
fn impulse_reaches_taps_four_apart_on_bottleneck_grid() {
    let mut x = vec![0.0; 64];
    x[4 * 8 + 4] = 1.0;
    let x = Tensor::from_vec(x, &[1, 8, 8, 1]).unwrap();
    let w = Tensor::from_vec((1..=9).map(f64::from).collect(), &[3, 3, 1, 1]).unwrap();
    let out = atrous_depthwise(&x, &w, None, 4).unwrap();
    let hits: Vec<(usize, usize, f64)> =
        (0..64).filter(|&i| out.data()[i] != 0.0).map(|i| (i / 8, i % 8, out.data()[i])).collect();
    // Taps that would land at row or column 8 fall off the grid.
    assert_eq!(hits, vec![(0, 0, 9.0), (0, 4, 8.0), (4, 0, 6.0), (4, 4, 5.0)]);
}

#[test]
fn atrous_block_shape_and_locality() {
    let cfg = ModelConfig::default();
    let mut params = init_params::<f32>(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor::<f32>::from_vec((0..64 * 256).map(|_| rng.random_range(0.0..1.0)).collect(), &[1, 8, 8, 256])
        .unwrap();
    {
        let fw = Forward::inference(&cfg, &params);
        let out = no_grad(|| msas_forward(&fw, &x)).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 512]);
    }
    for j in [0, 1, 3] {
        for s in ["w", "b"] {
            let name = format!("msas.branch{j}.pointwise.{s}");
            let n = params.get(&name).unwrap().numel();
            params.set(&name, vec![0.0; n]).unwrap();
        }
    }
    let fw = Forward::inference(&cfg, &params);
    let out = no_grad(|| msas_forward(&fw, &x)).unwrap();
    let branch2 = no_grad(|| msas_branch(&fw, &x, 2)).unwrap();
    let scale = 1.0 / (1.0f32 + 1e-5).sqrt();
    for (p, row) in out.data().chunks(512).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if (256..384).contains(&c) {
                assert!((v - branch2.data()[p * 128 + c - 256] * scale).abs() < 1e-5);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), n in 1usize..8, width in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&mut rng, &[2, n, width]).scale(5.0).unwrap();
        let k = random(&mut rng, &[2, n, width]).scale(5.0).unwrap();
        let v = random(&mut rng, &[2, n, width]);
        let (_, w) = scaled_attention(&q, &k, &v).unwrap();
        for row in w.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn gate_is_open_interval_and_never_amplifies(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, 3, 3, 8]);
        let (w1, b1, w2, b2) = (random(&mut rng, &[8, 2]), random(&mut rng, &[2]), random(&mut rng, &[2, 8]), random(&mut rng, &[8]));
        let w = CcrWeights { fc1_w: &w1, fc1_b: &b1, fc2_w: &w2, fc2_b: &b2 };
        let (out, gate) = channel_recalibration(&x, &w, 0.0, false, 0).unwrap();
        prop_assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
        for c in 0..8 {
            let norm = |t: &Tensor<f64>| t.data().iter().skip(c).step_by(8).map(|v| v * v).sum::<f64>();
            prop_assert!(norm(&out) <= norm(&x));
        }
    }
}
