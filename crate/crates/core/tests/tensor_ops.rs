use bite_core::tensor::kernels::conv2d;
use bite_core::tensor::{finite_diff_check, Conv2dSpec, Graph, Mode, Padding, Tensor};
use bite_core::verify::{op_gradient_reports, GRADIENT_TOL};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Straight-line conv oracle: loops over every output and tap, padding
/// resolved by hand.
fn naive_conv(x: &Tensor, w: &Tensor, groups: usize, dil: (usize, usize), pad: (usize, usize, usize, usize)) -> Tensor {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (top, bottom, left, right) = pad;
    let ho = h + top + bottom - dil.0 * (kh - 1);
    let wo = wd + left + right - dil.1 * (kw - 1);
    let opg = cout / groups;
    let mut out = Tensor::zeros([b, cout, ho, wo]);
    for n in 0..b {
        for o in 0..cout {
            let g = o / opg;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cg {
                        for a in 0..kh {
                            for e in 0..kw {
                                let yi = (i + a * dil.0) as isize - top as isize;
                                let xj = (j + e * dil.1) as isize - left as isize;
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                    continue;
                                }
                                acc += w.get(&[o, c, a, e]) * x.get(&[n, g * cg + c, yi as usize, xj as usize]);
                            }
                        }
                    }
                    out.set(&[n, o, i, j], acc);
                }
            }
        }
    }
    assert_eq!(cin, groups * cg);
    out
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    for _ in 0..40 {
        let groups = rng.random_range(1..4);
        let cg = rng.random_range(1..3);
        let opg = rng.random_range(1..3);
        let (kh, kw) = (rng.random_range(1..3), rng.random_range(1..5));
        let dil = (rng.random_range(1..3), rng.random_range(1..4));
        let (h, wd) = (rng.random_range(kh * dil.0..6), rng.random_range(kw * dil.1..14));
        let x = Tensor::from_fn([2, groups * cg, h, wd], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn([groups * opg, cg, kh, kw], |_| rng.random_range(-1.0..1.0));
        let cases = [
            (Padding::None, (0, 0, 0, 0)),
            (Padding::Symmetric(1, 2), (1, 1, 2, 2)),
            (Padding::CausalLeft(dil.1 * (kw - 1)), (0, 0, dil.1 * (kw - 1), 0)),
        ];
        for (padding, pads) in cases {
            let got = conv2d(&x, &w, &Conv2dSpec::new(groups, dil, padding)).unwrap();
            let want = naive_conv(&x, &w, groups, dil, pads);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);

    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let f = g.flip_last_axis(x);
    assert_eq!(g.value(f).data(), &[3.0, 2.0, 1.0]);

    let x = g.constant(t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.avg_pool_last_axis(x, 2).unwrap();
    assert_eq!(g.value(p).data(), &[1.5, 3.5]);
    assert!(g.avg_pool_last_axis(x, 0).is_err());
    let odd = g.constant(Tensor::from_fn([1, 1, 1, 5], |i| i as f64));
    let p = g.avg_pool_last_axis(odd, 2).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 2.5]);

    let a = g.constant(Tensor::zeros([1, 2, 1, 4]));
    let b = g.constant(Tensor::zeros([1, 2, 1, 5]));
    assert!(g.concat_channels(&[a, b]).is_err());

    let e = g.constant(t(&[2], &[-1.0, 2.0]));
    let y = g.elu(e);
    assert!((g.value(y).data()[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    assert_eq!(g.value(y).data()[1], 2.0);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.3, -1.0, 2.0]));
    let loss = g.sum(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.grad(loss).data(), &[1.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).data(), &[2.0, 4.0]);
    // a second pass without zeroing accumulates
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).data(), &[4.0, 8.0]);
    g.zero_grad();
    assert_eq!(g.grad(x).data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let s = g.sigmoid(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[0.25]);

    let mut g = Graph::new();
    let x = g.param(Tensor::zeros([2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn finite_diff_examples() {
    let x = t(&[4], &[0.3, -1.2, 2.5, 0.7]);
    let r = finite_diff_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
        1e-4,
    );
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    let r = finite_diff_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &x, 1e-5, 1e-4);
    assert!(r.pass);
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn every_op_passes_gradient_check() {
    for (kind, report) in op_gradient_reports(None) {
        assert!(report.pass, "{kind:?}: {report:?}");
        assert!(report.max_rel_error < GRADIENT_TOL);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros([3, 4]));
    let l = g.cross_entropy(logits, &[0, 1, 3]).unwrap();
    assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let mut hot = Tensor::zeros([2, 3]);
    hot.set(&[0, 1], 1000.0);
    hot.set(&[1, 2], 1000.0);
    let logits = g.constant(hot);
    let l = g.cross_entropy(logits, &[1, 2]).unwrap();
    assert!(g.value(l).item().unwrap() < 1e-6);

    assert!(g.cross_entropy(logits, &[1, 3]).is_err());
    assert!(g.cross_entropy(logits, &[1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_matches_naive(values in prop::collection::vec(-3.0f64..3.0, 12), labels in prop::collection::vec(0usize..4, 3)) {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new([3, 4], values.clone()).unwrap());
        let l = g.cross_entropy(logits, &labels).unwrap();
        let naive: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = &values[r * 4..r * 4 + 4];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[y].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        prop_assert!((g.value(l).item().unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn causal_conv_never_looks_ahead(weights in prop::collection::vec(-1.0f64..1.0, 3), dil in 1usize..4, base in prop::collection::vec(-1.0f64..1.0, 16)) {
        let w = Tensor::new([1, 1, 1, 3], weights).unwrap();
        let spec = Conv2dSpec::new(1, (1, dil), Padding::CausalLeft(2 * dil));
        let x = Tensor::new([1, 1, 1, 16], base).unwrap();
        let y = conv2d(&x, &w, &spec).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        for t0 in 0..16 {
            let mut xp = x.clone();
            xp.data_mut()[t0] += 1.0;
            let yp = conv2d(&xp, &w, &spec).unwrap();
            for t in 0..t0 {
                prop_assert_eq!(yp.data()[t], y.data()[t]);
            }
        }
    }

    #[test]
    fn conv_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn([2, 4, 3, 9], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn([2, 4, 3, 9], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn([6, 2, 2, 3], |_| rng.random_range(-1.0..1.0));
        let spec = Conv2dSpec::new(2, (1, 2), Padding::Symmetric(1, 2));
        let mix = x.zip_with(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&mix, &w, &spec).unwrap();
        let rhs = conv2d(&x, &w, &spec).unwrap().zip_with(&conv2d(&y, &w, &spec).unwrap(), |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 15)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 5], values).unwrap());
        let s = g.softmax_last_axis(x).unwrap();
        for row in g.value(s).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn flip_is_an_involution(values in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, n], values).unwrap());
        let f = g.flip_last_axis(x);
        let ff = g.flip_last_axis(f);
        prop_assert_eq!(g.value(ff), g.value(x));
    }
}

#[test]
fn dropout_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::ones([200, 100]);
    for rate in [0.1, 0.3, 0.5] {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let eval = g.dropout(v, rate, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(eval), &x);
        let y = g.dropout(v, rate, Mode::Train, &mut rng).unwrap();
        let data = g.value(y).data();
        let zeros = data.iter().filter(|&&d| d == 0.0).count() as f64 / data.len() as f64;
        assert!((zeros - rate).abs() < 0.02, "rate {rate}: dropped {zeros}");
        let keep = 1.0 / (1.0 - rate);
        assert!(data.iter().all(|&d| d == 0.0 || (d - keep).abs() < 1e-15));
    }
    let mut g = Graph::new();
    let v = g.constant(x);
    assert!(g.dropout(v, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn batch_norm_training_normalizes_per_channel() {
    let x = Tensor::from_fn([4, 3, 2, 5], |i| ((i * 7919) % 31) as f64 * 0.3 + (i % 3) as f64);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::ones([3]));
    let beta = g.constant(Tensor::zeros([3]));
    let (y, stats) = g.batch_norm(xv, gamma, beta, Mode::Train, &[0.0; 3], &[1.0; 3]).unwrap();
    let stats = stats.unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..2).flat_map(move |h| (0..5).map(move |w| (b, h, w))))
            .map(|(b, h, w)| y.get(&[b, c, h, w]))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        // biased variance after normalization is var / (var + eps)
        assert!((var - 1.0).abs() < 1e-3);
        assert!(stats.var[c] > 0.0);
    }
    let (_, none) = g.batch_norm(xv, gamma, beta, Mode::Eval, &[0.0; 3], &[1.0; 3]).unwrap();
    assert!(none.is_none());
}
