//! The dual-stream network.
//!
//! Data flow for one batch (all switches on):
//!
//! ```text
//! x [B,1,C,T] ── temporal stream ──► F_time [B,F2,1,T'] ─┐
//!                                                          ├─ PTFA ─► Y ─┐
//! STFT(x) [B,F0,C,T] ── frequency stream ─► F_freq [B,F0,1,T'] ┴────────────┴─ concat ─► z
//! z ── forward TCN ─► h_f ─┐
//! flip(z) ── backward TCN ─► h_b ─┴─ α·h_f + (1-α)·h_b ─► classifier ─► logits
//! ```

mod config;

pub use config::{Ablation, BiteConfig};

use std::collections::HashMap;

use rand::{Rng, RngCore};

use crate::error::{BiteError, Result};
use crate::signal::{stft_magnitude, StftPlan};
use crate::tensor::{BatchStats, Conv2dSpec, Graph, Mode, Padding, Tensor, Var};

/// Momentum of the batch-norm running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Every learnable tensor of a configuration, in a fixed order, plus the
/// names of the batch-norm layers (which carry running statistics).
fn layout(config: &BiteConfig) -> Result<(Vec<ParamSpec>, Vec<(String, usize)>)> {
    config.validate()?;
    let mut params = Vec::new();
    let mut norms = Vec::new();
    let conv = |params: &mut Vec<ParamSpec>, name: String, shape: [usize; 4]| {
        let fan_in = shape[1] * shape[2] * shape[3];
        params.push(ParamSpec { name, shape: shape.to_vec(), init: Init::FanIn(fan_in) });
    };
    let bn = |params: &mut Vec<ParamSpec>, norms: &mut Vec<(String, usize)>, name: String, ch: usize| {
        params.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![ch], init: Init::Const(1.0) });
        params.push(ParamSpec { name: format!("{name}.beta"), shape: vec![ch], init: Init::Const(0.0) });
        norms.push((name, ch));
    };
    let dense = |params: &mut Vec<ParamSpec>, name: &str, inp: usize, out: usize| {
        params.push(ParamSpec { name: format!("{name}.weight"), shape: vec![inp, out], init: Init::FanIn(inp) });
        params.push(ParamSpec { name: format!("{name}.bias"), shape: vec![out], init: Init::FanIn(inp) });
    };

    let a = config.ablation;
    let (c, f1, f2, d) = (config.channels, config.f1, config.f2(), config.depth);
    let f0 = config.f0()?;
    if a.use_temporal {
        conv(&mut params, "temporal.conv_time.weight".into(), [f1, 1, 1, config.temporal_kernel]);
        bn(&mut params, &mut norms, "temporal.bn1".into(), f1);
        conv(&mut params, "temporal.conv_space.weight".into(), [f2, 1, c, 1]);
        bn(&mut params, &mut norms, "temporal.bn2".into(), f2);
    }
    if a.use_frequency {
        conv(&mut params, "frequency.conv_spatial.weight".into(), [f0, 1, c, 1]);
        bn(&mut params, &mut norms, "frequency.bn".into(), f0);
    }
    if a.use_attention {
        let g = f2 / d;
        for i in 2..=d {
            conv(&mut params, format!("ptfa.time_scale{i}.weight"), [g, g, 1, 2 * i - 3]);
        }
        for i in 2..=d {
            conv(&mut params, format!("ptfa.freq_scale{i}.weight"), [f0, 1, 1, 2 * i - 3]);
        }
        conv(&mut params, "ptfa.attention.weight".into(), [f2, d * f0, 1, 1]);
        params.push(ParamSpec {
            name: "ptfa.attention.bias".into(),
            shape: vec![f2],
            init: Init::FanIn(d * f0),
        });
    }
    let cz = config.fused_channels()?;
    let width = config.tcn_width();
    if a.use_bitcn {
        for dir in ["forward", "backward"] {
            for blk in 0..config.tcn_blocks {
                let cin = if blk == 0 { cz } else { width };
                let p = format!("bitcn.{dir}.block{blk}");
                conv(&mut params, format!("{p}.conv1.weight"), [width, cin, 1, config.tcn_kernel]);
                bn(&mut params, &mut norms, format!("{p}.bn1"), width);
                conv(&mut params, format!("{p}.conv2.weight"), [width, width, 1, config.tcn_kernel]);
                bn(&mut params, &mut norms, format!("{p}.bn2"), width);
                if cin != width {
                    conv(&mut params, format!("{p}.residual.weight"), [width, cin, 1, 1]);
                }
            }
        }
        params.push(ParamSpec { name: "fusion.alpha_raw".into(), shape: vec![1], init: Init::Const(0.0) });
    } else {
        dense(&mut params, "head.linear", cz, width);
    }
    dense(&mut params, "classifier", width, config.n_classes);
    Ok((params, norms))
}

/// Total number of learnable scalars for `config`, batch-norm affine
/// parameters and the fusion logit included.
pub fn parameter_count(config: &BiteConfig) -> Result<usize> {
    Ok(layout(config)?.0.iter().map(|p| p.shape.iter().product::<usize>()).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Running mean and (unbiased) variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: the graph being recorded, the parameter leaves bound
/// into it, and the batch statistics gathered along the way.
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    params: Vec<Var>,
    mode: Mode,
    rng: Option<&'a mut dyn RngCore>,
    stats: Vec<(usize, BatchStats)>,
}

impl<'a> Session<'a> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Parameter leaves in model order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match (self.mode, self.rng.as_deref_mut()) {
            (Mode::Eval, _) => Ok(x),
            (Mode::Train, Some(rng)) => self.graph.dropout(x, rate, Mode::Train, rng),
            (Mode::Train, None) => Err(BiteError::config("training-mode forward needs an RNG for dropout")),
        }
    }
}

/// Direction of a TCN branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// A model input batch: raw trials and, when the frequency stream is on,
/// their spectrograms.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 1, C, T]`.
    pub signal: Tensor,
    /// `[B, F0, C, T]`.
    pub spectrogram: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BiteModel {
    config: BiteConfig,
    plan: StftPlan,
    params: Vec<Param>,
    running: Vec<RunningStats>,
    index: HashMap<String, usize>,
    running_index: HashMap<String, usize>,
}

impl BiteModel {
    pub fn new<R: Rng + ?Sized>(config: BiteConfig, rng: &mut R) -> Result<Self> {
        let (specs, norms) = layout(&config)?;
        let params = specs
            .into_iter()
            .map(|s| {
                let value = match s.init {
                    Init::FanIn(fan_in) => {
                        let bound = (1.0 / fan_in as f64).sqrt();
                        Tensor::from_fn(s.shape.clone(), |_| rng.random_range(-bound..bound))
                    }
                    Init::Const(v) => Tensor::full(s.shape.clone(), v),
                };
                let grad = Tensor::zeros(s.shape);
                Param { name: s.name, value, grad }
            })
            .collect();
        let running: Vec<RunningStats> = norms
            .into_iter()
            .map(|(name, ch)| RunningStats { name, mean: vec![0.0; ch], var: vec![1.0; ch] })
            .collect();
        Self::assemble(config, params, running)
    }

    fn assemble(config: BiteConfig, params: Vec<Param>, running: Vec<RunningStats>) -> Result<Self> {
        let plan = config.stft_plan()?;
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let running_index = running.iter().enumerate().map(|(i, r)| (r.name.clone(), i)).collect();
        Ok(Self { config, plan, params, running, index, running_index })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against the layout of `config`.
    pub fn from_parts(config: BiteConfig, values: Vec<(String, Tensor)>, running: Vec<RunningStats>) -> Result<Self> {
        let (specs, norms) = layout(&config)?;
        if specs.len() != values.len() {
            return Err(BiteError::config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                values.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, value)) in specs.iter().zip(values) {
            if spec.name != name || spec.shape != value.shape() {
                return Err(BiteError::config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            let grad = Tensor::zeros(value.shape().to_vec());
            params.push(Param { name, value, grad });
        }
        if norms.len() != running.len()
            || norms.iter().zip(&running).any(|((n, ch), r)| {
                *n != r.name || r.mean.len() != *ch || r.var.len() != *ch
            })
        {
            return Err(BiteError::config("running statistics do not match the model layout"));
        }
        Self::assemble(config, params, running)
    }

    pub fn config(&self) -> &BiteConfig {
        &self.config
    }

    pub fn stft_plan(&self) -> &StftPlan {
        &self.plan
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    /// Enrolls every parameter as a gradient-carrying leaf of `graph`.
    pub fn bind<'a>(&self, graph: &'a mut Graph, mode: Mode, rng: Option<&'a mut dyn RngCore>) -> Session<'a> {
        let params = self.params.iter().map(|p| graph.param(p.value.clone())).collect();
        Session { graph, params, mode, rng, stats: Vec::new() }
    }

    /// As [`bind`](Self::bind), substituting the leaf `replacement` for
    /// parameter `index`. Used by gradient checks.
    pub fn bind_with<'a>(
        &self,
        graph: &'a mut Graph,
        mode: Mode,
        rng: Option<&'a mut dyn RngCore>,
        index: usize,
        replacement: Var,
    ) -> Session<'a> {
        let params = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| if i == index { replacement } else { graph.param(p.value.clone()) })
            .collect();
        Session { graph, params, mode, rng, stats: Vec::new() }
    }

    /// Adds the gradients accumulated in the session's graph to the model's
    /// parameter gradients.
    pub fn accumulate_grads(&mut self, session: &Session<'_>) {
        for (p, &v) in self.params.iter_mut().zip(&session.params) {
            p.grad.add_assign(&session.graph.grad(v));
        }
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, session: &mut Session<'_>) {
        for (idx, stats) in session.stats.drain(..) {
            let r = &mut self.running[idx];
            for (m, b) in r.mean.iter_mut().zip(&stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            for (v, b) in r.var.iter_mut().zip(&stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
            }
        }
    }

    fn var(&self, s: &Session<'_>, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| s.params[i])
            .ok_or_else(|| BiteError::config(format!("model has no parameter {name}")))
    }

    fn conv(&self, s: &mut Session<'_>, x: Var, weight: &str, spec: Conv2dSpec) -> Result<Var> {
        let w = self.var(s, weight)?;
        s.graph.conv2d(x, w, &spec)
    }

    fn batch_norm(&self, s: &mut Session<'_>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.var(s, &format!("{name}.gamma"))?;
        let beta = self.var(s, &format!("{name}.beta"))?;
        let idx = *self
            .running_index
            .get(name)
            .ok_or_else(|| BiteError::config(format!("model has no batch norm {name}")))?;
        let r = &self.running[idx];
        let (y, stats) = s.graph.batch_norm(x, gamma, beta, s.mode, &r.mean, &r.var)?;
        if let Some(stats) = stats {
            s.stats.push((idx, stats));
        }
        Ok(y)
    }

    fn dense(&self, s: &mut Session<'_>, x: Var, name: &str) -> Result<Var> {
        let w = self.var(s, &format!("{name}.weight"))?;
        let b = self.var(s, &format!("{name}.bias"))?;
        let y = s.graph.matmul(x, w)?;
        s.graph.add_bias(y, b)
    }

    fn check_shape(&self, s: &Session<'_>, v: Var, expected: &[usize], what: &str) -> Result<()> {
        let got = s.graph.value(v).shape();
        if got != expected {
            return Err(BiteError::shape(format!("{what}: expected {expected:?}, got {got:?}")));
        }
        Ok(())
    }

    /// Temporal convolution, depthwise spatial convolution, normalization,
    /// ELU, pooling and dropout: `[B,1,C,T] -> [B,F2,1,T']`.
    pub fn temporal_stream(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let c = &self.config;
        let b = s.graph.value(x).shape()[0];
        self.check_shape(s, x, &[b, 1, c.channels, c.samples], "temporal stream input")?;
        let h = self.conv(s, x, "temporal.conv_time.weight", Conv2dSpec::new(1, (1, 1), Padding::Same))?;
        let h = self.batch_norm(s, h, "temporal.bn1")?;
        let h = self.conv(s, h, "temporal.conv_space.weight", Conv2dSpec::new(c.f1, (1, 1), Padding::None))?;
        let h = self.batch_norm(s, h, "temporal.bn2")?;
        let h = s.graph.elu(h);
        let h = s.graph.avg_pool_last_axis(h, c.pool)?;
        s.dropout(h, c.dropout)
    }

    /// Per-bin spatial filtering of the spectrogram:
    /// `[B,F0,C,T] -> [B,F0,1,T']`.
    pub fn frequency_stream(&self, s: &mut Session<'_>, spec: Var) -> Result<Var> {
        let c = &self.config;
        let b = s.graph.value(spec).shape()[0];
        let f0 = self.plan.n_bins();
        self.check_shape(s, spec, &[b, f0, c.channels, c.samples], "frequency stream input")?;
        let h = self.conv(s, spec, "frequency.conv_spatial.weight", Conv2dSpec::new(f0, (1, 1), Padding::None))?;
        let h = self.batch_norm(s, h, "frequency.bn")?;
        let h = s.graph.elu(h);
        let h = s.graph.avg_pool_last_axis(h, c.pool)?;
        s.dropout(h, c.dropout)
    }

    /// Multi-scale temporal features gated by attention derived from
    /// multi-scale frequency features. Output has the shape of `f_time`.
    pub fn ptfa(&self, s: &mut Session<'_>, f_time: Var, f_freq: Var) -> Result<Var> {
        let c = &self.config;
        let (f2, d) = (c.f2(), c.depth);
        if f2 % d != 0 {
            return Err(BiteError::config(format!("F2 = {f2} is not divisible by D = {d}")));
        }
        let group = f2 / d;
        let same = Conv2dSpec::new(1, (1, 1), Padding::Same);
        let mut scales = Vec::with_capacity(d);
        for i in 1..=d {
            let part = if d == 1 { f_time } else { s.graph.slice_channels(f_time, (i - 1) * group, group)? };
            scales.push(if i == 1 {
                part
            } else {
                self.conv(s, part, &format!("ptfa.time_scale{i}.weight"), same)?
            });
        }
        let x_ms = if d == 1 { scales[0] } else { s.graph.concat_channels(&scales)? };

        let f0 = self.plan.n_bins();
        let grouped = Conv2dSpec::new(f0, (1, 1), Padding::Same);
        let mut branches = vec![f_freq];
        for i in 2..=d {
            branches.push(self.conv(s, f_freq, &format!("ptfa.freq_scale{i}.weight"), grouped)?);
        }
        let spectral = if d == 1 { f_freq } else { s.graph.concat_channels(&branches)? };

        let logits = self.conv(s, spectral, "ptfa.attention.weight", Conv2dSpec::default())?;
        let bias = self.var(s, "ptfa.attention.bias")?;
        let logits = s.graph.add_bias(logits, bias)?;
        let attention = s.graph.sigmoid(logits);
        s.graph.mul(x_ms, attention)
    }

    /// Runs one TCN branch over `z` (`[B,Cz,1,T']`) and returns the whole
    /// output sequence `[B,width,1,T']`. The backward branch expects its
    /// input already reversed in time.
    pub fn tcn_sequence(&self, s: &mut Session<'_>, dir: Direction, z: Var) -> Result<Var> {
        let c = &self.config;
        let k = c.tcn_kernel;
        let mut x = z;
        for blk in 0..c.tcn_blocks {
            let p = format!("bitcn.{}.block{blk}", dir.name());
            let dilation = 1usize << blk;
            let spec = Conv2dSpec::new(1, (1, dilation), Padding::CausalLeft((k - 1) * dilation));
            let h = self.conv(s, x, &format!("{p}.conv1.weight"), spec)?;
            let h = self.batch_norm(s, h, &format!("{p}.bn1"))?;
            let h = s.graph.elu(h);
            let h = s.dropout(h, c.dropout)?;
            let h = self.conv(s, h, &format!("{p}.conv2.weight"), spec)?;
            let h = self.batch_norm(s, h, &format!("{p}.bn2"))?;
            let h = s.graph.elu(h);
            let h = s.dropout(h, c.dropout)?;
            let residual = match self.index.contains_key(&format!("{p}.residual.weight")) {
                true => self.conv(s, x, &format!("{p}.residual.weight"), Conv2dSpec::default())?,
                false => x,
            };
            x = s.graph.add(h, residual)?;
        }
        Ok(x)
    }

    /// Bidirectional TCN over `z` (`[B,Cz,T']`): returns the last time step
    /// of the forward branch and of the branch run on the reversed input,
    /// each `[B,width]`.
    pub fn bitcn(&self, s: &mut Session<'_>, z: Var) -> Result<(Var, Var)> {
        let shape = s.graph.value(z).shape().to_vec();
        if shape.len() != 3 || shape[2] < 1 {
            return Err(BiteError::shape(format!("BiTCN expects [B, Cz, T'] with T' >= 1, got {shape:?}")));
        }
        let z4 = s.graph.reshape(z, &[shape[0], shape[1], 1, shape[2]])?;
        let width = self.config.tcn_width();
        let fwd = self.tcn_sequence(s, Direction::Forward, z4)?;
        let h_f = s.graph.select_last(fwd)?;
        let h_f = s.graph.reshape(h_f, &[shape[0], width])?;
        let flipped = s.graph.flip_last_axis(z4);
        let bwd = self.tcn_sequence(s, Direction::Backward, flipped)?;
        let h_b = s.graph.select_last(bwd)?;
        let h_b = s.graph.reshape(h_b, &[shape[0], width])?;
        Ok((h_f, h_b))
    }

    /// `σ(α_raw)·h_f + (1 − σ(α_raw))·h_b`.
    pub fn fuse(&self, s: &mut Session<'_>, h_f: Var, h_b: Var) -> Result<Var> {
        let raw = self.var(s, "fusion.alpha_raw")?;
        fuse_with(s.graph, h_f, h_b, raw)
    }

    /// Full network on a prepared batch; returns `[B, n_classes]` logits.
    pub fn forward(&self, s: &mut Session<'_>, signal: Var, spectrogram: Option<Var>) -> Result<Var> {
        let a = self.config.ablation;
        let f_time = match a.use_temporal {
            true => Some(self.temporal_stream(s, signal)?),
            false => None,
        };
        let f_freq = match (a.use_frequency, spectrogram) {
            (true, Some(spec)) => Some(self.frequency_stream(s, spec)?),
            (true, None) => return Err(BiteError::config("frequency stream enabled but no spectrogram given")),
            (false, _) => None,
        };
        let f_time = match (a.use_attention, f_time, f_freq) {
            (true, Some(t), Some(f)) => Some(self.ptfa(s, t, f)?),
            (true, _, _) => return Err(BiteError::config("attention requires both streams")),
            (false, t, _) => t,
        };
        let parts: Vec<Var> = f_time.into_iter().chain(f_freq).collect();
        let z = if parts.len() == 1 { parts[0] } else { s.graph.concat_channels(&parts)? };
        let zs = s.graph.value(z).shape().to_vec();
        let z = s.graph.reshape(z, &[zs[0], zs[1], zs[3]])?;
        let features = if a.use_bitcn {
            let (h_f, h_b) = self.bitcn(s, z)?;
            self.fuse(s, h_f, h_b)?
        } else {
            let pooled = s.graph.mean_last_axis(z)?;
            self.dense(s, pooled, "head.linear")?
        };
        self.dense(s, features, "classifier")
    }

    /// Stacks `[C, T]` trials into a batch, computing spectrograms if the
    /// frequency stream needs them.
    pub fn prepare_batch(&self, trials: &[&Tensor]) -> Result<Batch> {
        let signal = Tensor::stack(trials)?;
        let s = signal.shape().to_vec();
        if s.len() != 3 {
            return Err(BiteError::shape(format!("trials must be [C, T], batch shape is {s:?}")));
        }
        let signal = signal.reshape([s[0], 1, s[1], s[2]])?;
        let spectrogram = match self.config.ablation.use_frequency {
            true => {
                let specs = trials
                    .iter()
                    .map(|t| stft_magnitude(t, &self.plan).map(|sp| sp.values))
                    .collect::<Result<Vec<_>>>()?;
                Some(Tensor::stack(&specs.iter().collect::<Vec<_>>())?)
            }
            false => None,
        };
        Ok(Batch { signal, spectrogram })
    }

    /// Forward pass on `batch`, recording into a fresh session over `graph`.
    pub fn forward_batch<'a>(
        &self,
        graph: &'a mut Graph,
        batch: &Batch,
        mode: Mode,
        rng: Option<&'a mut dyn RngCore>,
    ) -> Result<(Session<'a>, Var)> {
        let mut s = self.bind(graph, mode, rng);
        let x = s.graph.constant(batch.signal.clone());
        let spec = batch.spectrogram.as_ref().map(|t| s.graph.constant(t.clone()));
        let logits = self.forward(&mut s, x, spec)?;
        Ok((s, logits))
    }

    /// Evaluation-mode logits, `[B, n_classes]`.
    pub fn predict_logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut graph = Graph::new();
        let (s, logits) = self.forward_batch(&mut graph, batch, Mode::Eval, None)?;
        Ok(s.graph.value(logits).clone())
    }
}

/// Convex combination of the two branch outputs with weight `σ(raw)`.
pub fn fuse_with(g: &mut Graph, h_f: Var, h_b: Var, raw: Var) -> Result<Var> {
    let alpha = g.sigmoid(raw);
    let beta = g.affine(alpha, -1.0, 1.0);
    let a = g.scale_by(h_f, alpha)?;
    let b = g.scale_by(h_b, beta)?;
    g.add(a, b)
}

/// Compares reverse-mode gradients of the mean cross-entropy with respect to
/// every parameter against central differences, in evaluation mode.
pub fn gradient_check(
    model: &BiteModel,
    batch: &Batch,
    labels: &[usize],
    eps: f64,
    tol: f64,
    fault: Option<crate::tensor::OpKind>,
) -> crate::tensor::GradCheckReport {
    use crate::tensor::{finite_diff_check_with, GradCheckReport};
    let make_graph = || fault.map(Graph::with_fault).unwrap_or_default();
    let mut total: Option<GradCheckReport> = None;
    for (idx, param) in model.params().iter().enumerate() {
        let f = |g: &mut Graph, v: Var| -> Result<Var> {
            let mut s = model.bind_with(g, Mode::Eval, None, idx, v);
            let x = s.graph.constant(batch.signal.clone());
            let spec = batch.spectrogram.as_ref().map(|t| s.graph.constant(t.clone()));
            let logits = model.forward(&mut s, x, spec)?;
            s.graph.cross_entropy(logits, labels)
        };
        let report = finite_diff_check_with(make_graph, f, &param.value, eps, tol);
        total = Some(match total {
            None => report,
            Some(t) => t.merge(report, tol),
        });
    }
    total.expect("model has parameters")
}
