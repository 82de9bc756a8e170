//! Fast self-check battery: gradients, STFT, alignment, causality, kappa.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::{gradient_check, Ablation, BiteConfig, BiteModel, Direction};
use crate::signal::{band_bins, ea_apply, ea_fit, stft_magnitude, StftPlan};
use crate::tensor::{
    finite_diff_check_with, Conv2dSpec, GradCheckReport, Graph, Mode, OpKind, Padding, Tensor, Var, DEFAULT_EPS,
};
use crate::training::{accuracy, kappa};

pub const GRADIENT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub metric: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "pass" } else { "fail" };
        write!(f, "check={} status={status} metric={:e}", self.name, self.metric)
    }
}

/// `C=3, T=64, N=16, F1=2, D=2, L=1, k_t=3`.
pub fn tiny_config() -> BiteConfig {
    BiteConfig {
        channels: 3,
        samples: 64,
        fs: 128.0,
        n_classes: 3,
        f1: 2,
        depth: 2,
        temporal_kernel: 16,
        pool: 4,
        stft_window: 16,
        band: (8.0, 32.0),
        tcn_blocks: 1,
        tcn_kernel: 3,
        tcn_channels: None,
        dropout: 0.3,
        ablation: Ablation::FULL,
    }
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

/// Full-model gradient check of the tiny configuration on a batch of two.
pub fn model_gradient_report(fault: Option<OpKind>) -> Result<GradCheckReport> {
    let config = tiny_config();
    let mut rng = seeded(11);
    let model = BiteModel::new(config.clone(), &mut rng)?;
    let trials: Vec<Tensor> = (0..2).map(|_| randn(&[config.channels, config.samples], &mut rng)).collect();
    let batch = model.prepare_batch(&trials.iter().collect::<Vec<_>>())?;
    Ok(gradient_check(&model, &batch, &[0, 2], DEFAULT_EPS, GRADIENT_TOL, fault))
}

type OpCase = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// A scalar-valued probe for each differentiable op, with its input.
pub fn op_cases() -> Vec<(OpKind, Tensor, OpCase)> {
    let mut rng = seeded(5);
    let mut r = |shape: &[usize]| randn(shape, &mut rng);
    // a random linear readout keeps every output element's gradient distinct
    let readout = |g: &mut Graph, y: Var, w: &Tensor| -> Result<Var> {
        let c = g.constant(w.clone());
        let p = g.mul(y, c)?;
        Ok(g.sum(p))
    };
    let w4 = r(&[2, 3, 2, 5]);
    let w_conv = r(&[4, 1, 1, 3]);
    let b_conv = r(&[2, 4, 2, 5]);
    let mm = r(&[3, 4]);
    let mm_out = r(&[2, 4]);
    let other = r(&[2, 3, 2, 5]);
    let scale = r(&[1]);
    let bias_w = r(&[2, 3, 2, 5]);
    let concat_w = r(&[2, 5, 2, 5]);
    let slice_w = r(&[2, 2, 2, 5]);
    let pool_w = r(&[2, 3, 2, 2]);
    let gamma = r(&[3]);
    let beta = r(&[3]);
    let soft_w = r(&[2, 3, 2, 5]);
    let mean_w = r(&[2, 3, 2]);
    let last_w = r(&[2, 3, 2]);
    let reshape_w = r(&[6, 10]);
    let bias = r(&[3]);
    let x = r(&[2, 3, 2, 5]);
    let logits = r(&[4, 3]);
    let mat = r(&[2, 3]);

    let mut cases: Vec<(OpKind, Tensor, OpCase)> = Vec::new();
    {
        let (w, out) = (w_conv, b_conv);
        cases.push((
            OpKind::Conv2d,
            r(&[2, 2, 2, 5]),
            Box::new(move |g, v| {
                let k = g.constant(w.clone());
                let y = g.conv2d(v, k, &Conv2dSpec::new(2, (1, 2), Padding::Same))?;
                let y = g.concat_channels(&[y])?;
                readout(g, y, &out)
            }),
        ));
    }
    // weight gradient of a dilated causal grouped convolution
    {
        let input = r(&[2, 4, 1, 7]);
        let out = r(&[2, 4, 1, 7]);
        cases.push((
            OpKind::Conv2d,
            r(&[4, 2, 1, 3]),
            Box::new(move |g, v| {
                let xi = g.constant(input.clone());
                let y = g.conv2d(xi, v, &Conv2dSpec::new(2, (1, 2), Padding::CausalLeft(4)))?;
                readout(g, y, &out)
            }),
        ));
    }
    cases.push((
        OpKind::MatMul,
        mat.clone(),
        Box::new(move |g, v| {
            let b = g.constant(mm.clone());
            let y = g.matmul(v, b)?;
            readout(g, y, &mm_out)
        }),
    ));
    {
        let o = other.clone();
        let w = w4.clone();
        cases.push((
            OpKind::Add,
            x.clone(),
            Box::new(move |g, v| {
                let c = g.constant(o.clone());
                let y = g.add(v, c)?;
                let y = g.add(y, v)?;
                readout(g, y, &w)
            }),
        ));
    }
    {
        let o = other.clone();
        let w = w4.clone();
        cases.push((
            OpKind::Mul,
            x.clone(),
            Box::new(move |g, v| {
                let c = g.constant(o.clone());
                let y = g.mul(v, c)?;
                let y = g.mul(y, v)?;
                readout(g, y, &w)
            }),
        ));
    }
    {
        let o = other.clone();
        let w = w4.clone();
        cases.push((
            OpKind::ScaleBy,
            scale,
            Box::new(move |g, v| {
                let c = g.constant(o.clone());
                let y = g.scale_by(c, v)?;
                readout(g, y, &w)
            }),
        ));
    }
    {
        let w = w4.clone();
        cases.push((
            OpKind::Affine,
            x.clone(),
            Box::new(move |g, v| {
                let y = g.affine(v, -1.7, 0.3);
                readout(g, y, &w)
            }),
        ));
    }
    cases.push((
        OpKind::AddBias,
        bias,
        Box::new(move |g, v| {
            let c = g.constant(other.clone());
            let y = g.add_bias(c, v)?;
            readout(g, y, &bias_w)
        }),
    ));
    {
        let w = w4.clone();
        cases.push((
            OpKind::Sigmoid,
            x.clone(),
            Box::new(move |g, v| {
                let y = g.sigmoid(v);
                readout(g, y, &w)
            }),
        ));
    }
    {
        let w = w4.clone();
        cases.push((
            OpKind::Elu,
            x.clone(),
            Box::new(move |g, v| {
                let y = g.elu(v);
                readout(g, y, &w)
            }),
        ));
    }
    {
        let w = w4.clone();
        cases.push((
            OpKind::FlipLastAxis,
            x.clone(),
            Box::new(move |g, v| {
                let y = g.flip_last_axis(v);
                readout(g, y, &w)
            }),
        ));
    }
    {
        let head = r(&[2, 2, 2, 5]);
        cases.push((
            OpKind::ConcatChannels,
            x.clone(),
            Box::new(move |g, v| {
                let c = g.constant(head.clone());
                let y = g.concat_channels(&[c, v])?;
                readout(g, y, &concat_w)
            }),
        ));
    }
    cases.push((
        OpKind::SliceChannels,
        x.clone(),
        Box::new(move |g, v| {
            let y = g.slice_channels(v, 1, 2)?;
            readout(g, y, &slice_w)
        }),
    ));
    cases.push((
        OpKind::AvgPoolLastAxis,
        x.clone(),
        Box::new(move |g, v| {
            let y = g.avg_pool_last_axis(v, 2)?;
            readout(g, y, &pool_w)
        }),
    ));
    for mode in [Mode::Train, Mode::Eval] {
        let (gm, bt, w) = (gamma.clone(), beta.clone(), w4.clone());
        cases.push((
            OpKind::BatchNorm,
            x.clone(),
            Box::new(move |g, v| {
                let gv = g.constant(gm.clone());
                let bv = g.constant(bt.clone());
                let (y, _) = g.batch_norm(v, gv, bv, mode, &[0.1, -0.2, 0.3], &[1.5, 0.7, 1.1])?;
                readout(g, y, &w)
            }),
        ));
    }
    {
        let w = w4.clone();
        cases.push((
            OpKind::Dropout,
            x.clone(),
            Box::new(move |g, v| {
                let mut mask_rng = seeded(99);
                let y = g.dropout(v, 0.4, Mode::Train, &mut mask_rng as &mut dyn RngCore)?;
                readout(g, y, &w)
            }),
        ));
    }
    cases.push((
        OpKind::SoftmaxLastAxis,
        x.clone(),
        Box::new(move |g, v| {
            let y = g.softmax_last_axis(v)?;
            readout(g, y, &soft_w)
        }),
    ));
    cases.push((OpKind::CrossEntropy, logits, Box::new(|g, v| g.cross_entropy(v, &[0, 2, 1, 2]))));
    cases.push((
        OpKind::Sum,
        x.clone(),
        Box::new(|g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        }),
    ));
    cases.push((
        OpKind::MeanLastAxis,
        x.clone(),
        Box::new(move |g, v| {
            let y = g.mean_last_axis(v)?;
            let y = g.reshape(y, &[2, 3, 2])?;
            readout(g, y, &mean_w)
        }),
    ));
    cases.push((
        OpKind::SelectLast,
        x.clone(),
        Box::new(move |g, v| {
            let y = g.select_last(v)?;
            let y = g.reshape(y, &[2, 3, 2])?;
            readout(g, y, &last_w)
        }),
    ));
    cases.push((
        OpKind::Reshape,
        x,
        Box::new(move |g, v| {
            let y = g.reshape(v, &[6, 10])?;
            readout(g, y, &reshape_w)
        }),
    ));
    cases
}

/// Finite-difference check of every op in [`op_cases`]; reports are merged
/// per op kind in first-appearance order.
pub fn op_gradient_reports(fault: Option<OpKind>) -> Vec<(OpKind, GradCheckReport)> {
    let make_graph = || fault.map(Graph::with_fault).unwrap_or_default();
    let mut out: Vec<(OpKind, GradCheckReport)> = Vec::new();
    for (kind, input, f) in op_cases() {
        let report = finite_diff_check_with(make_graph, |g, v| f(g, v), &input, DEFAULT_EPS, GRADIENT_TOL);
        match out.iter_mut().find(|(k, _)| *k == kind) {
            Some((_, r)) => *r = r.clone().merge(report, GRADIENT_TOL),
            None => out.push((kind, report)),
        }
    }
    out
}

/// Largest absolute gap between the planned STFT and a per-frame direct DFT
/// over `signals` random trials.
pub fn stft_oracle_error(signals: usize) -> Result<f64> {
    let mut rng = seeded(21);
    let plan = StftPlan::new(250.0, 64, (4.0, 40.0))?;
    let n = plan.window_len();
    let (left, _) = plan.padding();
    let mut worst = 0.0f64;
    for _ in 0..signals {
        let (c, t) = (2, 80);
        let x = randn(&[c, t], &mut rng);
        let spec = stft_magnitude(&x, &plan)?.values;
        for ch in 0..c {
            for frame in 0..t {
                for (bi, &k) in plan.bins().iter().enumerate() {
                    let (mut re, mut im) = (0.0, 0.0);
                    for m in 0..n {
                        let pos = frame as isize + m as isize - left as isize;
                        if pos < 0 || pos >= t as isize {
                            continue;
                        }
                        let w = 0.5 - 0.5 * (2.0 * PI * m as f64 / n as f64).cos();
                        let ang = -2.0 * PI * (k * m) as f64 / n as f64;
                        let v = w * x.get(&[ch, pos as usize]);
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    let mag = (re * re + im * im).sqrt();
                    worst = worst.max((mag - spec.get(&[bi, ch, frame])).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Max-abs deviation from identity of the mean covariance after aligning
/// 20 random trials, and the max-abs change of aligned trials when every
/// input is scaled.
pub fn ea_errors() -> Result<(f64, f64)> {
    let mut rng = seeded(31);
    let trials: Vec<Tensor> = (0..20).map(|_| randn(&[4, 48], &mut rng)).collect();
    let state = ea_fit(&trials)?;
    let aligned = trials.iter().map(|t| ea_apply(&state, t)).collect::<Result<Vec<_>>>()?;
    let after = ea_fit(&aligned)?;
    let identity_err = after.mean_cov.max_abs_diff(&Tensor::identity(4));
    let scaled: Vec<Tensor> = trials.iter().map(|t| t.scale(37.5)).collect();
    let scaled_state = ea_fit(&scaled)?;
    let mut scale_err = 0.0f64;
    for (t, a) in scaled.iter().zip(&aligned) {
        scale_err = scale_err.max(ea_apply(&scaled_state, t)?.max_abs_diff(a));
    }
    Ok((identity_err, scale_err))
}

/// Perturbation probes on the forward TCN branch: for each input time step,
/// which output steps change.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalityProbe {
    /// Outputs before the perturbed step that moved, summed over all probes.
    pub leaks: usize,
    /// Longest span from a perturbed input step to the last output it moved.
    pub receptive_field: usize,
    pub expected_receptive_field: usize,
}

pub fn causality_probe(tcn_kernel: usize, tcn_blocks: usize) -> Result<CausalityProbe> {
    let config = BiteConfig { tcn_kernel, tcn_blocks, ..tiny_config() };
    let mut rng = seeded(41);
    let model = BiteModel::new(config.clone(), &mut rng)?;
    let cz = config.fused_channels()?;
    let steps = 2 * config.receptive_field() + 8;
    let base = randn(&[1, cz, 1, steps], &mut rng);
    let run = |z: &Tensor| -> Result<Tensor> {
        let mut graph = Graph::new();
        let mut s = model.bind(&mut graph, Mode::Eval, None);
        let zv = s.graph.constant(z.clone());
        let y = model.tcn_sequence(&mut s, Direction::Forward, zv)?;
        Ok(s.graph.value(y).clone())
    };
    let reference = run(&base)?;
    let width = reference.shape()[1];
    let (mut leaks, mut rf) = (0, 0);
    for t0 in 0..steps {
        let mut z = base.clone();
        for c in 0..cz {
            let v = z.get(&[0, c, 0, t0]);
            z.set(&[0, c, 0, t0], v + 1.0);
        }
        let out = run(&z)?;
        for t in 0..steps {
            let moved = (0..width).any(|c| out.get(&[0, c, 0, t]) != reference.get(&[0, c, 0, t]));
            if moved && t < t0 {
                leaks += 1;
            }
            if moved && t >= t0 {
                rf = rf.max(t - t0 + 1);
            }
        }
    }
    Ok(CausalityProbe { leaks, receptive_field: rf, expected_receptive_field: config.receptive_field() })
}

/// Kappa of a balanced four-class confusion at accuracy 0.8534 with errors
/// spread evenly, and the worst deviation from `(acc - 1/K)/(1 - 1/K)` over
/// random confusions with balanced rows.
pub fn kappa_errors(samples: usize) -> Result<(f64, f64)> {
    let per_class = 30_000u64;
    let correct = 25_602u64;
    let off = (per_class - correct) / 3;
    let m: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| if i == j { correct } else { off }).collect()).collect();
    let headline = kappa(&m)?;
    let mut rng = seeded(51);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let k = rng.random_range(2..7usize);
        let n = rng.random_range(1..50u64);
        let m: Vec<Vec<u64>> = (0..k)
            .map(|_| {
                let mut row = vec![0u64; k];
                for _ in 0..n {
                    row[rng.random_range(0..k)] += 1;
                }
                row
            })
            .collect();
        let acc = accuracy(&m)?;
        let closed = (acc - 1.0 / k as f64) / (1.0 - 1.0 / k as f64);
        worst = worst.max((kappa(&m)? - closed).abs());
    }
    Ok((headline, worst))
}

/// Runs every check. `fault` scales the backward rule of one op kind, which
/// the gradient checks must catch.
pub fn run_battery(fault: Option<OpKind>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: Option<(bool, f64)>| {
        let (pass, metric) = r.unwrap_or((false, f64::NAN));
        out.push(CheckResult { name, pass, metric });
    };
    push("model-gradient", model_gradient_report(fault).ok().map(|r| (r.pass, r.max_rel_error)));
    let ops = op_gradient_reports(fault);
    let worst = ops.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    push("op-gradients", Some((ops.iter().all(|(_, r)| r.pass), worst)));
    push("stft-oracle", stft_oracle_error(5).ok().map(|e| (e < 1e-9, e)));
    let bins = band_bins(250.0, 64, 4.0, 40.0).and_then(|a| Ok((a.len(), band_bins(256.0, 32, 8.0, 64.0)?.len())));
    push(
        "band-bins",
        bins.ok().map(|(a, b)| {
            let miss = a.abs_diff(9) + b.abs_diff(8);
            (miss == 0, miss as f64)
        }),
    );
    let ea = ea_errors().ok();
    push("ea-identity", ea.map(|(e, _)| (e < 1e-6, e)));
    push("ea-scale-invariance", ea.map(|(_, e)| (e < 1e-8, e)));
    let probe = causality_probe(6, 2).ok();
    push("causality", probe.as_ref().map(|p| (p.leaks == 0, p.leaks as f64)));
    push(
        "receptive-field",
        probe.map(|p| (p.receptive_field == p.expected_receptive_field, p.receptive_field as f64)),
    );
    let k = kappa_errors(200).ok();
    push("kappa-headline", k.map(|(h, _)| ((h - 0.804).abs() <= 1e-3, h)));
    push("kappa-closed-form", k.map(|(_, c)| (c < 1e-12, c)));
    out
}
