//! YOLOv5-style single-stage detector: focus stem, CSP backbone, top-down
//! plus bottom-up feature pyramid neck, and a three-scale anchor head.

mod config;
pub mod layers;

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

pub use config::{scaled_anchors, ModelConfig, Preset, BASE_ANCHORS, STRIDES};
pub use layers::{
    Bottleneck, ConvBnAct, CspBlock, Focus, ForwardCtx, HeadConv, Layer, Mode, ParamKind,
    ParamSpec, ParamStore,
};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::ops::{self, BatchStats};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Layer graph of the network. Holds no weights.
#[derive(Clone, Debug)]
pub struct Architecture {
    stem: Focus,
    down: [ConvBnAct; 4],
    stages: [CspBlock; 4],
    lateral5: ConvBnAct,
    top_down4: CspBlock,
    lateral4: ConvBnAct,
    top_down3: CspBlock,
    bottom_up3: ConvBnAct,
    pan4: CspBlock,
    bottom_up4: ConvBnAct,
    pan5: CspBlock,
    heads: [HeadConv; 3],
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let ch = |b| config.channels(b);
        let rep = |b| config.repeats(b);
        let (c1, c2, c3, c4, c5) = (ch(64), ch(128), ch(256), ch(512), ch(1024));
        let no = config.head_channels();
        Ok(Self {
            stem: Focus::new("backbone.stem", 3, c1),
            down: [
                ConvBnAct::new("backbone.down1", c1, c2, 3, 2),
                ConvBnAct::new("backbone.down2", c2, c3, 3, 2),
                ConvBnAct::new("backbone.down3", c3, c4, 3, 2),
                ConvBnAct::new("backbone.down4", c4, c5, 3, 2),
            ],
            stages: [
                CspBlock::new("backbone.csp1", c2, c2, rep(3))?,
                CspBlock::new("backbone.csp2", c3, c3, rep(9))?,
                CspBlock::new("backbone.csp3", c4, c4, rep(9))?,
                CspBlock::new("backbone.csp4", c5, c5, rep(3))?,
            ],
            lateral5: ConvBnAct::new("neck.lateral5", c5, c4, 1, 1),
            top_down4: CspBlock::new("neck.top_down4", 2 * c4, c4, rep(3))?,
            lateral4: ConvBnAct::new("neck.lateral4", c4, c3, 1, 1),
            top_down3: CspBlock::new("neck.top_down3", 2 * c3, c3, rep(3))?,
            bottom_up3: ConvBnAct::new("neck.bottom_up3", c3, c3, 3, 2),
            pan4: CspBlock::new("neck.pan4", 2 * c3, c4, rep(3))?,
            bottom_up4: ConvBnAct::new("neck.bottom_up4", c4, c4, 3, 2),
            pan5: CspBlock::new("neck.pan5", 2 * c4, c5, rep(3))?,
            heads: [
                HeadConv {
                    name: "head.p3".into(),
                    in_channels: c3,
                    out_channels: no,
                },
                HeadConv {
                    name: "head.p4".into(),
                    in_channels: c4,
                    out_channels: no,
                },
                HeadConv {
                    name: "head.p5".into(),
                    in_channels: c5,
                    out_channels: no,
                },
            ],
        })
    }

    fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<[Var; 3]> {
        let x = self.stem.forward(ctx, x)?;
        let mut feats = Vec::with_capacity(4);
        let mut y = x;
        for (down, stage) in self.down.iter().zip(&self.stages) {
            y = down.forward(ctx, y)?;
            y = stage.forward(ctx, y)?;
            feats.push(y);
        }
        let (p3, p4, p5) = (feats[1], feats[2], feats[3]);

        let t5 = self.lateral5.forward(ctx, p5)?;
        let up = ops::upsample_nearest2x(ctx.tape, t5)?;
        let cat = ops::concat_channels(ctx.tape, &[up, p4])?;
        let n4 = self.top_down4.forward(ctx, cat)?;

        let t4 = self.lateral4.forward(ctx, n4)?;
        let up = ops::upsample_nearest2x(ctx.tape, t4)?;
        let cat = ops::concat_channels(ctx.tape, &[up, p3])?;
        let out3 = self.top_down3.forward(ctx, cat)?;

        let d = self.bottom_up3.forward(ctx, out3)?;
        let cat = ops::concat_channels(ctx.tape, &[d, t4])?;
        let out4 = self.pan4.forward(ctx, cat)?;

        let d = self.bottom_up4.forward(ctx, out4)?;
        let cat = ops::concat_channels(ctx.tape, &[d, t5])?;
        let out5 = self.pan5.forward(ctx, cat)?;

        Ok([
            self.heads[0].forward(ctx, out3)?,
            self.heads[1].forward(ctx, out4)?,
            self.heads[2].forward(ctx, out5)?,
        ])
    }
}

impl Layer for Architecture {
    fn layout(&self, out: &mut Vec<ParamSpec>) {
        self.stem.layout(out);
        for (down, stage) in self.down.iter().zip(&self.stages) {
            down.layout(out);
            stage.layout(out);
        }
        self.lateral5.layout(out);
        self.top_down4.layout(out);
        self.lateral4.layout(out);
        self.top_down3.layout(out);
        self.bottom_up3.layout(out);
        self.pan4.layout(out);
        self.bottom_up4.layout(out);
        self.pan5.layout(out);
        for h in &self.heads {
            h.layout(out);
        }
    }

    fn forward<T: Element>(&self, _ctx: &mut ForwardCtx<'_, T>, _x: Var) -> Result<Var> {
        Err(Error::invalid(
            "the detector produces three maps; use DetectorModel::forward",
        ))
    }
}

/// Result of one forward pass.
pub struct ForwardOutput<T: Element> {
    /// Raw logit maps at strides 8, 16, 32.
    pub maps: [Var; 3],
    /// Tape handle of every parameter, by name.
    pub params: IndexMap<String, Var>,
    /// Batch statistics per norm layer (train mode only).
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

#[derive(Clone, Debug)]
pub struct DetectorModel<T: Element = f32> {
    config: ModelConfig,
    arch: Architecture,
    store: ParamStore<T>,
}

/// Builds a model with weights drawn deterministically from `seed`.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<DetectorModel<T>> {
    let arch = Architecture::new(config)?;
    let store = ParamStore::init(&arch.param_specs(), seed, config.leaky_slope)?;
    Ok(DetectorModel {
        config: config.clone(),
        arch,
        store,
    })
}

/// Trainable scalar count implied by a config, without allocating weights.
pub fn config_param_count(config: &ModelConfig) -> Result<usize> {
    Ok(Architecture::new(config)?
        .param_specs()
        .iter()
        .filter(|s| s.kind.trainable())
        .map(ParamSpec::numel)
        .sum())
}

/// Checkpoint byte length implied by a config, without allocating weights.
pub fn config_checkpoint_len(config: &ModelConfig) -> Result<u64> {
    let mut specs = Architecture::new(config)?.param_specs();
    // parameters are written before buffers
    specs.sort_by_key(|s| !s.kind.trainable());
    Ok(checkpoint::encoded_len(
        specs.iter().map(|s| (s.name.as_str(), s.shape.as_slice())),
    ))
}

/// Path of the JSON config sidecar written next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl<T: Element> DetectorModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        self.arch.param_specs()
    }

    /// Runs the network on an N×3×S×S batch. Pure: batch-norm updates are
    /// returned, not applied.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        let (_, c, h, w) = tape.value(input).dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!(
                "detector expects N×3×{s}×{s} input, got {:?}",
                tape.value(input).shape()
            )));
        }
        let mut ctx = ForwardCtx::new(
            tape,
            &self.store,
            mode,
            self.config.leaky_slope,
            self.config.bn_eps,
        );
        let maps = self.arch.forward(&mut ctx, input)?;
        let (params, bn_updates) = ctx.finish();
        Ok(ForwardOutput {
            maps,
            params,
            bn_updates,
        })
    }

    /// Train-mode forward that also folds batch statistics into the running
    /// estimates.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, input: Var) -> Result<ForwardOutput<T>> {
        let out = self.forward(tape, input, Mode::Train)?;
        self.store
            .apply_bn_updates(&out.bn_updates, self.config.bn_momentum);
        Ok(out)
    }

    /// Eval-mode raw maps for a batch tensor, as plain tensors.
    pub fn predict(&self, batch: Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(out.maps.map(|v| tape.value(v).clone()))
    }

    /// Copies tape gradients into the parameter registry.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &IndexMap<String, Var>) -> Result<()> {
        for (name, &var) in bound {
            if let Some(g) = tape.grad(var) {
                self.store.params_mut()[name.as_str()].set_grad(g.to_vec())?;
            }
        }
        Ok(())
    }

    /// Writes the binary checkpoint plus its config sidecar; returns the
    /// checkpoint byte size.
    pub fn save(&self, path: &Path) -> Result<u64> {
        checkpoint::save(path, self.store.entries())?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok(fs::metadata(path).map_err(|e| Error::io(path, e))?.len())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        Self::load_with_config(path, config)
    }

    pub fn load_with_config(path: &Path, config: ModelConfig) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let mut entries: IndexMap<String, Tensor<T>> =
            checkpoint::load::<T>(path)?.into_iter().collect();
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        for spec in arch.param_specs() {
            let t = entries
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::format(path, format!("missing entry `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::format(
                    path,
                    format!(
                        "entry `{}` has shape {:?}, config implies {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    ),
                ));
            }
            if spec.kind.trainable() {
                params.insert(spec.name, t);
            } else {
                buffers.insert(spec.name, t);
            }
        }
        if let Some(extra) = entries.keys().next() {
            return Err(Error::format(path, format!("unexpected entry `{extra}`")));
        }
        Ok(Self {
            config,
            arch,
            store: ParamStore::from_parts(params, buffers),
        })
    }

    /// Element-type conversion of the whole model.
    pub fn cast<U: Element>(&self) -> DetectorModel<U> {
        let conv = |m: &IndexMap<String, Tensor<T>>| {
            m.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect()
        };
        DetectorModel {
            config: self.config.clone(),
            arch: self.arch.clone(),
            store: ParamStore::from_parts(conv(self.store.params()), conv(self.store.buffers())),
        }
    }
}
