use bite_core::model::{fuse_with, gradient_check, parameter_count, Ablation, BiteConfig, BiteModel, Direction};
use bite_core::tensor::kernels::conv2d;
use bite_core::tensor::{Conv2dSpec, Graph, Mode, Padding, Tensor, DEFAULT_EPS};
use bite_core::verify::tiny_config;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn small_mi() -> BiteConfig {
    let mut c = BiteConfig::motor_imagery(4, 96, 128.0, 3);
    c.temporal_kernel = 16;
    c.stft_window = 16;
    c.band = (8.0, 40.0);
    c.pool = 4;
    c
}

#[test]
fn reference_stream_shapes() {
    let config = BiteConfig::reference_mi();
    let model = BiteModel::new(config.clone(), &mut rng(1)).unwrap();
    let mut r = rng(2);
    let mut g = Graph::new();
    let mut s = model.bind(&mut g, Mode::Eval, None);
    let x = s.graph.constant(randn(&[2, 1, 22, 1000], &mut r));
    let ft = model.temporal_stream(&mut s, x).unwrap();
    assert_eq!(s.graph.value(ft).shape(), &[2, 16, 1, 125]);
    let spec = s.graph.constant(randn(&[2, 9, 22, 1000], &mut r).map(f64::abs));
    let ff = model.frequency_stream(&mut s, spec).unwrap();
    assert_eq!(s.graph.value(ff).shape(), &[2, 9, 1, 125]);
    let y = model.ptfa(&mut s, ft, ff).unwrap();
    assert_eq!(s.graph.value(y).shape(), &[2, 16, 1, 125]);
    let bad = s.graph.constant(Tensor::zeros([2, 1, 21, 1000]));
    assert!(model.temporal_stream(&mut s, bad).is_err());
}

#[test]
fn zero_inputs_give_zero_stream_outputs() {
    let config = small_mi();
    let model = BiteModel::new(config.clone(), &mut rng(3)).unwrap();
    let f0 = config.f0().unwrap();
    let mut g = Graph::new();
    let mut s = model.bind(&mut g, Mode::Eval, None);
    let x = s.graph.constant(Tensor::zeros([1, 1, 4, 96]));
    let ft = model.temporal_stream(&mut s, x).unwrap();
    assert!(s.graph.value(ft).data().iter().all(|&v| v == 0.0));
    let spec = s.graph.constant(Tensor::zeros([1, f0, 4, 96]));
    let ff = model.frequency_stream(&mut s, spec).unwrap();
    assert!(s.graph.value(ff).data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_outputs_are_batch_independent_and_deterministic() {
    let config = small_mi();
    let model = BiteModel::new(config, &mut rng(4)).unwrap();
    let mut r = rng(5);
    let a = randn(&[4, 96], &mut r);
    let b = randn(&[4, 96], &mut r);
    let single = model.predict_logits(&model.prepare_batch(&[&a]).unwrap()).unwrap();
    let pair = model.predict_logits(&model.prepare_batch(&[&a, &a, &b]).unwrap()).unwrap();
    assert_eq!(single.data(), &pair.data()[..3]);
    assert_eq!(single.data(), &pair.data()[3..6]);
    let again = model.predict_logits(&model.prepare_batch(&[&a, &a, &b]).unwrap()).unwrap();
    assert_eq!(pair, again);
    assert_eq!(pair.shape(), &[3, 3]);
    let mut g = Graph::new();
    let l = g.constant(pair);
    let p = g.softmax_last_axis(l).unwrap();
    for row in g.value(p).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn grouped_spatial_conv_keeps_bins_apart() {
    let (f0, c, t) = (3, 4, 5);
    let mut r = rng(6);
    let spec = randn(&[1, f0, c, t], &mut r);
    // one-hot on channel 0 for every bin
    let w = Tensor::from_fn([f0, 1, c, 1], |i| if i % c == 0 { 1.0 } else { 0.0 });
    let y = conv2d(&spec, &w, &Conv2dSpec::new(f0, (1, 1), Padding::None)).unwrap();
    assert_eq!(y.shape(), &[1, f0, 1, t]);
    for f in 0..f0 {
        for k in 0..t {
            assert_eq!(y.get(&[0, f, 0, k]), spec.get(&[0, f, 0, k]));
        }
    }
}

/// PTFA with the time-scale convolutions set to identity, so `X_ms` is the
/// temporal input itself.
fn ptfa_identity_scales(config: &BiteConfig, zero_attention: bool, seed: u64) -> (Tensor, Tensor) {
    let mut model = BiteModel::new(config.clone(), &mut rng(seed)).unwrap();
    let g_size = config.f2() / config.depth;
    for i in 2..=config.depth {
        let p = model.param_mut(&format!("ptfa.time_scale{i}.weight")).unwrap();
        let k = 2 * i - 3;
        p.value = Tensor::from_fn([g_size, g_size, 1, k], |idx| {
            let (o, rest) = (idx / (g_size * k), idx % (g_size * k));
            let (ci, tap) = (rest / k, rest % k);
            if o == ci && tap == k / 2 { 1.0 } else { 0.0 }
        });
    }
    if zero_attention {
        for name in ["ptfa.attention.weight", "ptfa.attention.bias"] {
            let p = model.param_mut(name).unwrap();
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }
    let mut r = rng(seed + 100);
    let tp = config.pooled_len();
    let f0 = config.f0().unwrap();
    let ft = randn(&[2, config.f2(), 1, tp], &mut r);
    let ff = randn(&[2, f0, 1, tp], &mut r);
    let mut g = Graph::new();
    let mut s = model.bind(&mut g, Mode::Eval, None);
    let a = s.graph.constant(ft.clone());
    let b = s.graph.constant(ff);
    let y = model.ptfa(&mut s, a, b).unwrap();
    (ft, s.graph.value(y).clone())
}

#[test]
fn zero_attention_halves_features() {
    for depth in [1, 2, 3] {
        let config = BiteConfig { depth, ..small_mi() };
        let (x, y) = ptfa_identity_scales(&config, true, 7);
        assert!(y.max_abs_diff(&x.scale(0.5)) < 1e-15, "D = {depth}");
    }
}

#[test]
fn attention_strictly_contracts() {
    let config = BiteConfig { depth: 3, ..small_mi() };
    let (x, y) = ptfa_identity_scales(&config, false, 8);
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!(b.abs() < a.abs() && a * b > 0.0);
    }
}

#[test]
fn pyramid_kernel_shapes() {
    let model = BiteModel::new(BiteConfig::reference_mi(), &mut rng(9)).unwrap();
    assert_eq!(model.param("ptfa.time_scale2.weight").unwrap().value.shape(), &[8, 8, 1, 1]);
    assert_eq!(model.param("ptfa.freq_scale2.weight").unwrap().value.shape(), &[9, 1, 1, 1]);
    assert_eq!(model.param("ptfa.attention.weight").unwrap().value.shape(), &[16, 18, 1, 1]);
    let deep = BiteModel::new(BiteConfig { depth: 4, ..BiteConfig::reference_mi() }, &mut rng(9)).unwrap();
    assert_eq!(deep.param("ptfa.time_scale4.weight").unwrap().value.shape(), &[8, 8, 1, 5]);
    assert_eq!(deep.param("ptfa.freq_scale3.weight").unwrap().value.shape(), &[9, 1, 1, 3]);
}

fn fuse(h_f: &Tensor, h_b: &Tensor, raw: f64) -> Tensor {
    let mut g = Graph::new();
    let (a, b, r) = (g.constant(h_f.clone()), g.constant(h_b.clone()), g.constant(Tensor::scalar(raw)));
    let h = fuse_with(&mut g, a, b, r).unwrap();
    g.value(h).clone()
}

#[test]
fn fusion_examples() {
    let mut r = rng(10);
    let (hf, hb) = (randn(&[3, 5], &mut r), randn(&[3, 5], &mut r));
    let mid = hf.zip_with(&hb, |a, b| (a + b) / 2.0).unwrap();
    assert!(fuse(&hf, &hb, 0.0).max_abs_diff(&mid) < 1e-15);
    assert!(fuse(&hf, &hb, 20.0).max_abs_diff(&hf) < 1e-8);
    for raw in [-7.0, 0.3, 4.0] {
        assert!(fuse(&hf, &hf, raw).max_abs_diff(&hf) < 1e-15);
    }
}

proptest! {
    #[test]
    fn fusion_is_convex(raw in -30.0f64..30.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (hf, hb) = (randn(&[2, 6], &mut r), randn(&[2, 6], &mut r));
        let h = fuse(&hf, &hb, raw);
        for i in 0..h.len() {
            let (a, b) = (hf.data()[i], hb.data()[i]);
            prop_assert!(h.data()[i] >= a.min(b) - 1e-15 && h.data()[i] <= a.max(b) + 1e-15);
        }
    }

    #[test]
    fn ptfa_preserves_temporal_shape(f1 in 1usize..5, depth in 1usize..4, pool in 1usize..5) {
        let config = BiteConfig { f1, depth, pool, ..small_mi() };
        prop_assume!(config.validate().is_ok());
        let model = BiteModel::new(config.clone(), &mut rng(11)).unwrap();
        let mut g = Graph::new();
        let mut s = model.bind(&mut g, Mode::Eval, None);
        let x = s.graph.constant(Tensor::ones([1, 1, 4, 96]));
        let ft = model.temporal_stream(&mut s, x).unwrap();
        let spec = s.graph.constant(Tensor::ones([1, config.f0().unwrap(), 4, 96]));
        let ff = model.frequency_stream(&mut s, spec).unwrap();
        let y = model.ptfa(&mut s, ft, ff).unwrap();
        prop_assert_eq!(s.graph.value(y).shape(), s.graph.value(ft).shape());
    }
}

#[test]
fn palindromic_input_with_mirrored_weights() {
    let config = small_mi();
    let mut model = BiteModel::new(config.clone(), &mut rng(12)).unwrap();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).filter(|n| n.starts_with("bitcn.forward.")).collect();
    for name in names {
        let value = model.param(&name).unwrap().value.clone();
        model.param_mut(&name.replace("forward", "backward")).unwrap().value = value;
    }
    let cz = config.fused_channels().unwrap();
    let tp = 17;
    let mut r = rng(13);
    let half = randn(&[2, cz, tp], &mut r);
    let z = Tensor::from_fn([2, cz, tp], |i| {
        let t = i % tp;
        half.data()[i - t + t.min(tp - 1 - t)]
    });
    let mut g = Graph::new();
    let mut s = model.bind(&mut g, Mode::Eval, None);
    let zv = s.graph.constant(z);
    let (hf, hb) = model.bitcn(&mut s, zv).unwrap();
    assert!(s.graph.value(hf).max_abs_diff(s.graph.value(hb)) < 1e-10);
}

fn forward_branch(model: &BiteModel, z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut s = model.bind(&mut g, Mode::Eval, None);
    let zv = s.graph.constant(z.clone());
    let y = model.tcn_sequence(&mut s, Direction::Forward, zv).unwrap();
    s.graph.value(y).clone()
}

#[test]
fn forward_branch_is_causal_on_32_steps() {
    let config = BiteConfig { tcn_kernel: 3, tcn_blocks: 2, ..small_mi() };
    let model = BiteModel::new(config.clone(), &mut rng(14)).unwrap();
    let cz = config.fused_channels().unwrap();
    let base = randn(&[1, cz, 1, 32], &mut rng(15));
    let reference = forward_branch(&model, &base);
    let w = reference.shape()[1];
    for t0 in 0..32 {
        let mut z = base.clone();
        for c in 0..cz {
            z.set(&[0, c, 0, t0], z.get(&[0, c, 0, t0]) - 2.0);
        }
        let out = forward_branch(&model, &z);
        for t in 0..t0 {
            for c in 0..w {
                assert_eq!(out.get(&[0, c, 0, t]), reference.get(&[0, c, 0, t]));
            }
        }
        assert_ne!(out.get(&[0, 0, 0, t0]), reference.get(&[0, 0, 0, t0]));
    }
}

#[test]
fn receptive_field_matches_dilation_sum() {
    for (k, l) in [(6, 2), (3, 1), (2, 3), (4, 2)] {
        let probe = bite_core::verify::causality_probe(k, l).unwrap();
        assert_eq!(probe.leaks, 0);
        assert_eq!(probe.receptive_field, 1 + 2 * (k - 1) * ((1 << l) - 1));
        assert_eq!(probe.receptive_field, probe.expected_receptive_field);
    }
    assert_eq!(BiteConfig::reference_mi().receptive_field(), 31);
}

#[test]
fn tiny_config_gradient_check() {
    let report = bite_core::verify::model_gradient_report(None).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    // the same check on a no-BiTCN, no-attention variant exercises the head path
    let config = BiteConfig { ablation: Ablation::preset("TF").unwrap(), ..tiny_config() };
    let model = BiteModel::new(config, &mut rng(16)).unwrap();
    let mut r = rng(17);
    let trials = [randn(&[3, 64], &mut r), randn(&[3, 64], &mut r)];
    let batch = model.prepare_batch(&[&trials[0], &trials[1]]).unwrap();
    let report = gradient_check(&model, &batch, &[1, 0], DEFAULT_EPS, 1e-4, None);
    assert!(report.pass, "{report:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    for (label, ablation) in Ablation::presets() {
        let config = BiteConfig { ablation, ..small_mi() };
        let mut model = BiteModel::new(config, &mut rng(18)).unwrap();
        let mut r = rng(19);
        let trials: Vec<Tensor> = (0..3).map(|_| randn(&[4, 96], &mut r)).collect();
        let batch = model.prepare_batch(&trials.iter().collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let mut drop = rng(20);
        let (s, logits) = model.forward_batch(&mut g, &batch, Mode::Train, Some(&mut drop)).unwrap();
        let loss = s.graph.cross_entropy(logits, &[0, 1, 2]).unwrap();
        s.graph.backward(loss).unwrap();
        model.zero_grad();
        model.accumulate_grads(&s);
        for p in model.params() {
            assert!(p.grad.max_abs() > 0.0, "{label}: {} has no gradient", p.name);
        }
    }
}

/// Per-layer count written out by hand for the default layout.
fn hand_count(c: &BiteConfig) -> usize {
    let (ch, f1, d) = (c.channels, c.f1, c.depth);
    let f2 = f1 * d;
    let f0 = c.f0().unwrap();
    let a = c.ablation;
    let mut n = 0;
    if a.use_temporal {
        n += f1 * c.temporal_kernel + 2 * f1 + f2 * ch + 2 * f2;
    }
    if a.use_frequency {
        n += f0 * ch + 2 * f0;
    }
    if a.use_attention {
        let g = f2 / d;
        n += (2..=d).map(|i| g * g * (2 * i - 3) + f0 * (2 * i - 3)).sum::<usize>();
        n += f2 * d * f0 + f2;
    }
    let cz = if a.use_temporal { f2 } else { 0 } + if a.use_frequency { f0 } else { 0 };
    let w = c.tcn_channels.unwrap_or(f2);
    if a.use_bitcn {
        let k = c.tcn_kernel;
        let first = w * cz * k + 2 * w + w * w * k + 2 * w + if cz != w { w * cz } else { 0 };
        let rest = (c.tcn_blocks - 1) * (2 * w * w * k + 4 * w);
        n += 2 * (first + rest) + 1;
    } else {
        n += cz * w + w;
    }
    n + w * c.n_classes + c.n_classes
}

#[test]
fn reference_parameter_budget() {
    let config = BiteConfig::reference_mi();
    let count = parameter_count(&config).unwrap();
    assert_eq!(count, hand_count(&config));
    assert_eq!(count, 16_646);
    assert!((10_000..=20_000).contains(&count));
    let model = BiteModel::new(config.clone(), &mut rng(21)).unwrap();
    assert_eq!(model.parameter_count(), count);
    assert_eq!(model.param("fusion.alpha_raw").unwrap().value.len(), 1);
    let classifier: usize = ["classifier.weight", "classifier.bias"].iter().map(|n| model.param(n).unwrap().value.len()).sum();
    assert_eq!(classifier, config.tcn_width() * 4 + 4);
    for (_, ablation) in Ablation::presets() {
        for tcn_channels in [None, Some(25), Some(7)] {
            let c = BiteConfig { ablation, tcn_channels, ..config.clone() };
            assert_eq!(parameter_count(&c).unwrap(), hand_count(&c));
        }
    }
}

#[test]
fn switching_components_moves_count_by_their_parameters() {
    let full = BiteConfig::reference_mi();
    let model = BiteModel::new(full.clone(), &mut rng(22)).unwrap();
    let sum = |prefix: &str| -> usize {
        model.params().iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    };
    let no_attention = BiteConfig { ablation: Ablation { use_attention: false, ..Ablation::FULL }, ..full.clone() };
    assert_eq!(parameter_count(&full).unwrap() - parameter_count(&no_attention).unwrap(), sum("ptfa."));
    let no_bitcn = BiteConfig { ablation: Ablation { use_bitcn: false, ..Ablation::FULL }, ..full.clone() };
    let head = BiteModel::new(no_bitcn.clone(), &mut rng(23)).unwrap();
    let head_params: usize = head.params().iter().filter(|p| p.name.starts_with("head.")).map(|p| p.value.len()).sum();
    assert_eq!(
        parameter_count(&full).unwrap() + head_params - parameter_count(&no_bitcn).unwrap(),
        sum("bitcn.") + sum("fusion.")
    );
}
