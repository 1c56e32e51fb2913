//! Building blocks of the network and the parameter registry they draw from.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, BatchStats, NormStats, RunningStats};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Batch statistics in batch norm, parameters tracked for gradients.
    Train,
    /// Running statistics in batch norm, no gradient tracking.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    /// Kaiming-uniform initialized convolution kernel.
    ConvWeight {
        fan_in: usize,
    },
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Trainable parameters plus non-trainable batch-norm buffers, keyed by
/// unique dotted names in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    /// Allocates and initializes every entry of `layout` from `seed`.
    pub fn init(layout: &[ParamSpec], seed: u64, leaky_slope: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + leaky_slope * leaky_slope)).sqrt();
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        for spec in layout {
            let n = spec.numel();
            let data: Vec<T> = match spec.kind {
                ParamKind::ConvWeight { fan_in } => {
                    let bound = gain * (3.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
                        .collect()
                }
                ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean => vec![T::zero(); n],
                ParamKind::BnGamma | ParamKind::RunningVar => vec![T::one(); n],
            };
            let tensor = Tensor::new(spec.shape.clone(), data)?;
            let map = if spec.kind.trainable() {
                &mut params
            } else {
                &mut buffers
            };
            if map.insert(spec.name.clone(), tensor).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate parameter name `{}`",
                    spec.name
                )));
            }
        }
        Ok(Self { params, buffers })
    }

    pub fn from_parts(
        params: IndexMap<String, Tensor<T>>,
        buffers: IndexMap<String, Tensor<T>>,
    ) -> Self {
        Self { params, buffers }
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown buffer `{name}`")))
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Folds batch statistics into the running estimates of the named norms.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)], momentum: f64) {
        for (prefix, stats) in updates {
            let mean_key = format!("{prefix}.running_mean");
            let var_key = format!("{prefix}.running_var");
            let mut running = RunningStats {
                mean: self.buffers[&mean_key].to_vec(),
                var: self.buffers[&var_key].to_vec(),
            };
            running.update(stats, momentum);
            self.buffers[&mean_key]
                .data_mut()
                .copy_from_slice(&running.mean);
            self.buffers[&var_key]
                .data_mut()
                .copy_from_slice(&running.var);
        }
    }

    /// Every entry, parameters first, in layout order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.as_str(), v))
    }
}

/// State threaded through one forward pass.
pub struct ForwardCtx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    leaky_slope: f64,
    bn_eps: f64,
    bound: IndexMap<String, Var>,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Element> ForwardCtx<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        store: &'a ParamStore<T>,
        mode: Mode,
        leaky_slope: f64,
        bn_eps: f64,
    ) -> Self {
        Self {
            tape,
            store,
            mode,
            leaky_slope,
            bn_eps,
            bound: IndexMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Records a parameter on the tape once and returns its handle.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self
            .store
            .param(name)?
            .clone()
            .with_requires_grad(self.mode == Mode::Train);
        let v = self.tape.leaf(tensor);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter bindings and batch statistics gathered so far.
    pub fn finish(self) -> (IndexMap<String, Var>, Vec<(String, BatchStats<T>)>) {
        (self.bound, self.bn_updates)
    }
}

pub trait Layer {
    fn layout(&self, out: &mut Vec<ParamSpec>);
    fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var>;

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        self.layout(&mut v);
        v
    }
}

/// Convolution (no bias) → batch norm → leaky ReLU, "same" padding.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBnAct {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
        }
    }
}

impl Layer for ConvBnAct {
    fn layout(&self, out: &mut Vec<ParamSpec>) {
        let (n, c, k) = (&self.name, self.out_channels, self.kernel);
        let mut push = |suffix: &str, shape: Vec<usize>, kind| {
            out.push(ParamSpec {
                name: format!("{n}.{suffix}"),
                shape,
                kind,
            })
        };
        push(
            "conv.weight",
            vec![c, self.in_channels, k, k],
            ParamKind::ConvWeight {
                fan_in: self.in_channels * k * k,
            },
        );
        push("bn.weight", vec![c], ParamKind::BnGamma);
        push("bn.bias", vec![c], ParamKind::BnBeta);
        push("bn.running_mean", vec![c], ParamKind::RunningMean);
        push("bn.running_var", vec![c], ParamKind::RunningVar);
    }

    fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.conv.weight", self.name))?;
        let y = ops::conv2d(ctx.tape, x, w, None, self.stride, self.kernel / 2)?;
        let gamma = ctx.param(&format!("{}.bn.weight", self.name))?;
        let beta = ctx.param(&format!("{}.bn.bias", self.name))?;
        let bn = format!("{}.bn", self.name);
        let (y, stats) = match ctx.mode {
            Mode::Train => {
                ops::batch_norm2d(ctx.tape, y, gamma, beta, ctx.bn_eps, NormStats::Batch)?
            }
            Mode::Eval => {
                let mean = ctx.store.buffer(&format!("{bn}.running_mean"))?.data();
                let var = ctx.store.buffer(&format!("{bn}.running_var"))?.data();
                ops::batch_norm2d(
                    ctx.tape,
                    y,
                    gamma,
                    beta,
                    ctx.bn_eps,
                    NormStats::Running { mean, var },
                )?
            }
        };
        if let Some(stats) = stats {
            ctx.bn_updates.push((bn, stats));
        }
        ops::leaky_relu(ctx.tape, y, ctx.leaky_slope)
    }
}

/// Pixel-slicing stem: four parity sub-grids concatenated on channels, then
/// a 3×3 conv-BN-activation.
#[derive(Clone, Debug)]
pub struct Focus {
    pub conv: ConvBnAct,
}

impl Focus {
    pub fn new(name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self {
            conv: ConvBnAct::new(format!("{name}.conv"), 4 * in_channels, out_channels, 3, 1),
        }
    }

    /// The rearranged map before the convolution (N×4C×H/2×W/2).
    pub fn slices<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        ops::space_to_depth(tape, x)
    }
}

impl Layer for Focus {
    fn layout(&self, out: &mut Vec<ParamSpec>) {
        self.conv.layout(out);
    }

    fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let s = self.slices(ctx.tape, x)?;
        self.conv.forward(ctx, s)
    }
}

/// 1×1 then 3×3 conv with an additive shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
}

impl Layer for Bottleneck {
    fn layout(&self, out: &mut Vec<ParamSpec>) {
        self.cv1.layout(out);
        self.cv2.layout(out);
    }

    fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let y = self.cv2.forward(ctx, y)?;
        ops::add(ctx.tape, x, y)
    }
}

/// Cross-stage-partial block: two half-width 1×1 branches, residual
/// bottlenecks on one of them, concatenation and a fusing 1×1 conv.
#[derive(Clone, Debug)]
pub struct CspBlock {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
    pub blocks: Vec<Bottleneck>,
    pub cv3: ConvBnAct,
}

impl CspBlock {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        repeats: usize,
    ) -> Result<Self> {
        if repeats == 0 {
            return Err(Error::invalid("csp block needs at least one bottleneck"));
        }
        let hidden = (out_channels / 2).max(1);
        Ok(Self {
            cv1: ConvBnAct::new(format!("{name}.cv1"), in_channels, hidden, 1, 1),
            cv2: ConvBnAct::new(format!("{name}.cv2"), in_channels, hidden, 1, 1),
            blocks: (0..repeats)
                .map(|i| Bottleneck {
                    cv1: ConvBnAct::new(format!("{name}.m.{i}.cv1"), hidden, hidden, 1, 1),
                    cv2: ConvBnAct::new(format!("{name}.m.{i}.cv2"), hidden, hidden, 3, 1),
                })
                .collect(),
            cv3: ConvBnAct::new(format!("{name}.cv3"), 2 * hidden, out_channels, 1, 1),
        })
    }
}

impl Layer for CspBlock {
    fn layout(&self, out: &mut Vec<ParamSpec>) {
        self.cv1.layout(out);
        self.cv2.layout(out);
        for b in &self.blocks {
            b.layout(out);
        }
        self.cv3.layout(out);
    }

    fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let mut a = self.cv1.forward(ctx, x)?;
        for b in &self.blocks {
            a = b.forward(ctx, a)?;
        }
        let b = self.cv2.forward(ctx, x)?;
        let cat = ops::concat_channels(ctx.tape, &[a, b])?;
        self.cv3.forward(ctx, cat)
    }
}

/// Plain 1×1 convolution with bias; emits raw logits.
#[derive(Clone, Debug)]
pub struct HeadConv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Layer for HeadConv {
    fn layout(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{}.weight", self.name),
            shape: vec![self.out_channels, self.in_channels, 1, 1],
            kind: ParamKind::ConvWeight {
                fan_in: self.in_channels,
            },
        });
        out.push(ParamSpec {
            name: format!("{}.bias", self.name),
            shape: vec![self.out_channels],
            kind: ParamKind::Bias,
        });
    }

    fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        ops::conv2d(ctx.tape, x, w, Some(b), 1, 0)
    }
}
