//! Mixer-family classifiers: MLP-Mixer, ResMLP and ConvMixer built on the
//! tape, with hooks through which quantization observes and rewrites
//! weights and activations.

pub mod checkpoint;
mod config;
mod forward;

pub use config::{ActKind, Family, LayerSpec, ModelConfig, NormKind};
pub use forward::{patchify, BnStat, Edge, Hooks, Mode, Output, Plain, Site};

use std::collections::HashMap;

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Embed,
    TokenMixing,
    ChannelMixing,
    Norm,
    Activation,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub block: Block,
    /// 1-based layer index; `None` for embed, final norm and head.
    pub layer: Option<usize>,
    /// Output-channel axis for weights that get quantized.
    pub quant_axis: Option<usize>,
}

/// Running statistics of one batch-norm site.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffer {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-block parameter totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub embed: usize,
    pub token_mixing: usize,
    pub channel_mixing: usize,
    pub norm: usize,
    pub activation: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embed + self.token_mixing + self.channel_mixing + self.norm + self.activation + self.head
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormSlot {
    pub gamma: usize,
    pub beta: usize,
    pub bn: Option<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct TokenSlot {
    pub w1: usize,
    pub b1: usize,
    /// Second linear of the token MLP; absent for the single ResMLP map.
    pub second: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub(crate) enum LayerSlots {
    Mlp {
        norm1: NormSlot,
        token: Vec<TokenSlot>,
        token_alpha: Option<usize>,
        norm2: NormSlot,
        w3: usize,
        b3: usize,
        w4: usize,
        b4: usize,
        channel_alpha: Option<usize>,
    },
    Conv {
        dw: usize,
        dw_b: usize,
        alpha: Option<usize>,
        norm1: NormSlot,
        pw: usize,
        pw_b: usize,
        norm2: NormSlot,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed_w: usize,
    pub embed_b: usize,
    pub embed_alpha: Option<usize>,
    pub embed_norm: Option<NormSlot>,
    pub layers: Vec<LayerSlots>,
    pub final_norm: NormSlot,
    pub head_w: usize,
    pub head_b: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    values: Vec<Tensor>,
    info: Vec<ParamInfo>,
    buffers: Vec<BnBuffer>,
    layout: Layout,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    rng: SplitMix64,
    values: Vec<Tensor>,
    info: Vec<ParamInfo>,
    buffers: Vec<BnBuffer>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, value: Tensor, block: Block, layer: Option<usize>, quant_axis: Option<usize>) -> usize {
        self.values.push(value);
        self.info.push(ParamInfo {
            name,
            block,
            layer,
            quant_axis,
        });
        self.values.len() - 1
    }

    fn weight(&mut self, name: String, shape: &[usize], block: Block, layer: Option<usize>) -> usize {
        let n: usize = shape.iter().product();
        let std = self.cfg.init_std;
        let data = (0..n).map(|_| self.rng.truncated_normal(std)).collect();
        let t = Tensor::from_parts(shape.to_vec(), data);
        self.add(name, t, block, layer, Some(0))
    }

    fn bias(&mut self, name: String, n: usize, block: Block, layer: Option<usize>) -> usize {
        self.add(name, Tensor::zeros(&[n]), block, layer, None)
    }

    fn norm(&mut self, prefix: &str, layer: Option<usize>) -> NormSlot {
        let c = self.cfg.channels;
        let gamma = self.add(format!("{prefix}.gamma"), Tensor::ones(&[c]), Block::Norm, layer, None);
        let beta = self.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), Block::Norm, layer, None);
        let bn = (self.cfg.norm == NormKind::BatchNorm).then(|| {
            self.buffers.push(BnBuffer {
                name: prefix.to_string(),
                mean: vec![0.0; c],
                var: vec![1.0; c],
            });
            self.buffers.len() - 1
        });
        NormSlot { gamma, beta, bn }
    }

    fn alpha(&mut self, name: String, layer: Option<usize>) -> Option<usize> {
        (self.cfg.act == ActKind::Pact).then(|| {
            let a = Tensor::scalar(self.cfg.pact_alpha);
            self.add(name, a, Block::Activation, layer, None)
        })
    }
}

impl Model {
    /// Builds a freshly initialized model: truncated-normal weights
    /// (std `init_std`), zero biases, unit norm scales.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let cfg = config;
        let mut b = Builder {
            cfg,
            rng: SplitMix64::derive(seed, 0x1417),
            values: Vec::new(),
            info: Vec::new(),
            buffers: Vec::new(),
        };
        let (c, t) = (cfg.channels, cfg.tokens());
        let embed_w = b.weight("embed.weight".into(), &[c, cfg.patch_dim()], Block::Embed, None);
        let embed_b = b.bias("embed.bias".into(), c, Block::Embed, None);
        let (embed_alpha, embed_norm) = if cfg.family == Family::ConvMixer {
            (b.alpha("embed.alpha".into(), None), Some(b.norm("embed.norm", None)))
        } else {
            (None, None)
        };
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 1..=cfg.depth {
            let p = format!("layers.{i}");
            let l = Some(i);
            let slots = match cfg.family {
                Family::Mixer | Family::ResMlp => {
                    let norm1 = b.norm(&format!("{p}.norm1"), l);
                    let mut token = Vec::with_capacity(cfg.groups);
                    for g in 0..cfg.groups {
                        let tp = format!("{p}.token.{g}");
                        let slot = if cfg.family == Family::Mixer {
                            let dt = cfg.token_hidden;
                            let w1 = b.weight(format!("{tp}.w1"), &[dt, t], Block::TokenMixing, l);
                            let b1 = b.bias(format!("{tp}.b1"), dt, Block::TokenMixing, l);
                            let w2 = b.weight(format!("{tp}.w2"), &[t, dt], Block::TokenMixing, l);
                            let b2 = b.bias(format!("{tp}.b2"), t, Block::TokenMixing, l);
                            TokenSlot {
                                w1,
                                b1,
                                second: Some((w2, b2)),
                            }
                        } else {
                            let w1 = b.weight(format!("{tp}.w"), &[t, t], Block::TokenMixing, l);
                            let b1 = b.bias(format!("{tp}.b"), t, Block::TokenMixing, l);
                            TokenSlot { w1, b1, second: None }
                        };
                        token.push(slot);
                    }
                    let token_alpha = if cfg.family == Family::Mixer {
                        b.alpha(format!("{p}.token.alpha"), l)
                    } else {
                        None
                    };
                    let norm2 = b.norm(&format!("{p}.norm2"), l);
                    let dc = cfg.channel_hidden;
                    let w3 = b.weight(format!("{p}.channel.w3"), &[dc, c], Block::ChannelMixing, l);
                    let b3 = b.bias(format!("{p}.channel.b3"), dc, Block::ChannelMixing, l);
                    let w4 = b.weight(format!("{p}.channel.w4"), &[c, dc], Block::ChannelMixing, l);
                    let b4 = b.bias(format!("{p}.channel.b4"), c, Block::ChannelMixing, l);
                    let channel_alpha = b.alpha(format!("{p}.channel.alpha"), l);
                    LayerSlots::Mlp {
                        norm1,
                        token,
                        token_alpha,
                        norm2,
                        w3,
                        b3,
                        w4,
                        b4,
                        channel_alpha,
                    }
                }
                Family::ConvMixer => {
                    let k = cfg.kernel;
                    let dw = b.weight(format!("{p}.depthwise.weight"), &[c, 1, k, k], Block::TokenMixing, l);
                    let dw_b = b.bias(format!("{p}.depthwise.bias"), c, Block::TokenMixing, l);
                    let alpha = b.alpha(format!("{p}.alpha"), l);
                    let norm1 = b.norm(&format!("{p}.norm1"), l);
                    let pw = b.weight(format!("{p}.pointwise.weight"), &[c, c, 1, 1], Block::ChannelMixing, l);
                    let pw_b = b.bias(format!("{p}.pointwise.bias"), c, Block::ChannelMixing, l);
                    let norm2 = b.norm(&format!("{p}.norm2"), l);
                    LayerSlots::Conv {
                        dw,
                        dw_b,
                        alpha,
                        norm1,
                        pw,
                        pw_b,
                        norm2,
                    }
                }
            };
            layers.push(slots);
        }
        let final_norm = b.norm("final_norm", None);
        let head_w = b.weight("head.weight".into(), &[cfg.classes, c], Block::Head, None);
        let head_b = b.bias("head.bias".into(), cfg.classes, Block::Head, None);
        Ok(Model {
            config: config.clone(),
            values: b.values,
            info: b.info,
            buffers: b.buffers,
            layout: Layout {
                embed_w,
                embed_b,
                embed_alpha,
                embed_norm,
                layers,
                final_norm,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn buffers(&self) -> &[BnBuffer] {
        &self.buffers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.values[i])
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .param_index(name)
            .ok_or_else(|| Error::contract(format!("no parameter named `{name}`")))?;
        self.values[i].expect_same_shape(&value, "set_param")?;
        self.values[i] = value;
        Ok(())
    }

    /// Replaces every parameter at once, in declaration order.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (old, new) in self.values.iter().zip(&values) {
            old.expect_same_shape(new, "set_values")?;
        }
        self.values = values;
        Ok(())
    }

    /// Blends batch statistics into the running buffers:
    /// `running ← 0.9·running + 0.1·batch`.
    pub fn update_bn(&mut self, stats: &[BnStat]) {
        const MOMENTUM: f64 = 0.9;
        for s in stats {
            let buf = &mut self.buffers[s.buffer];
            for (r, &m) in buf.mean.iter_mut().zip(&s.mean) {
                *r = MOMENTUM * *r + (1.0 - MOMENTUM) * m;
            }
            for (r, &v) in buf.var.iter_mut().zip(&s.var) {
                *r = MOMENTUM * *r + (1.0 - MOMENTUM) * v;
            }
        }
    }

    pub fn set_buffer(&mut self, index: usize, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let buf = self
            .buffers
            .get_mut(index)
            .ok_or_else(|| Error::contract(format!("no batch-norm buffer {index}")))?;
        if mean.len() != buf.mean.len() || var.len() != buf.var.len() {
            return Err(Error::contract("running statistics length mismatch"));
        }
        buf.mean = mean;
        buf.var = var;
        Ok(())
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (v, p) in self.values.iter().zip(&self.info) {
            let slot = match p.block {
                Block::Embed => &mut c.embed,
                Block::TokenMixing => &mut c.token_mixing,
                Block::ChannelMixing => &mut c.channel_mixing,
                Block::Norm => &mut c.norm,
                Block::Activation => &mut c.activation,
                Block::Head => &mut c.head,
            };
            *slot += v.len();
        }
        c
    }

    /// Parameter indices of one `(layer, block)` pair.
    pub fn block_params(&self, layer: usize, block: Block) -> Vec<usize> {
        self.info
            .iter()
            .enumerate()
            .filter(|(_, p)| p.layer == Some(layer) && p.block == block)
            .map(|(i, _)| i)
            .collect()
    }

    /// Floating-point operations (2 per multiply-accumulate) of one forward
    /// pass over a single image, counting the linear and convolution maps.
    pub fn flops_per_sample(&self) -> u64 {
        let cfg = &self.config;
        let (c, t) = (cfg.channels as u64, cfg.tokens() as u64);
        let (dt, dc, k) = (cfg.token_hidden as u64, cfg.channel_hidden as u64, cfg.kernel as u64);
        let embed = t * cfg.patch_dim() as u64 * c;
        let layer = match cfg.family {
            Family::Mixer => c * 2 * t * dt + t * 2 * c * dc,
            Family::ResMlp => c * t * t + t * 2 * c * dc,
            Family::ConvMixer => c * t * k * k + t * c * c,
        };
        let head = c * cfg.classes as u64;
        2 * (embed + cfg.depth as u64 * layer + head)
    }

    /// Named tensors for a checkpoint: parameters, then batch-norm running
    /// statistics as `<site>.running_mean` / `<site>.running_var`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .info
            .iter()
            .zip(&self.values)
            .map(|(p, v)| (p.name.clone(), v.clone()))
            .collect();
        for b in &self.buffers {
            out.push((format!("{}.running_mean", b.name), Tensor::vector(b.mean.clone())));
            out.push((format!("{}.running_var", b.name), Tensor::vector(b.var.clone())));
        }
        out
    }

    /// Restores a state produced by [`Model::state`] for the same config.
    /// Every name must be present with the expected shape, and no extras.
    pub fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let mut by_name: HashMap<&str, &Tensor> = HashMap::with_capacity(state.len());
        for (n, t) in state {
            if by_name.insert(n.as_str(), t).is_some() {
                return Err(Error::Consistency(format!("duplicate tensor `{n}` in checkpoint")));
            }
        }
        let expected = self.values.len() + 2 * self.buffers.len();
        if state.len() != expected {
            return Err(Error::Consistency(format!(
                "checkpoint has {} tensors, model expects {expected}",
                state.len()
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for (p, cur) in self.info.iter().zip(&self.values) {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Consistency(format!("checkpoint lacks `{}`", p.name)))?;
            if t.shape() != cur.shape() {
                return Err(Error::Consistency(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    cur.shape()
                )));
            }
            values.push((*t).clone());
        }
        let mut buffers = self.buffers.clone();
        for b in &mut buffers {
            for (suffix, slot) in [("running_mean", &mut b.mean), ("running_var", &mut b.var)] {
                let key = format!("{}.{suffix}", b.name);
                let t = by_name
                    .get(key.as_str())
                    .ok_or_else(|| Error::Consistency(format!("checkpoint lacks `{key}`")))?;
                if t.len() != slot.len() {
                    return Err(Error::Consistency(format!("`{key}` has the wrong length")));
                }
                *slot = t.data().to_vec();
            }
        }
        self.values = values;
        self.buffers = buffers;
        Ok(())
    }

    /// Full forward pass. `images` is `[B, C_in, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: &Tensor,
        mode: Mode,
        hooks: &mut dyn Hooks,
    ) -> Result<Output> {
        forward::run(self, tape, vars, images, mode, hooks)
    }

    /// One mixing layer (1-based `layer`) applied to `x`, which is
    /// `[B, T, C]` for MLP families and `[B, C, H, W]` for ConvMixer.
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        layer: usize,
        x: Var,
        mode: Mode,
        hooks: &mut dyn Hooks,
    ) -> Result<(Var, Vec<BnStat>)> {
        forward::run_layer(self, tape, vars, layer, x, mode, hooks)
    }

    /// Plain inference: logits as a tensor.
    pub fn predict(&self, images: &Tensor, hooks: &mut dyn Hooks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = self.forward(&mut tape, &vars, images, Mode::Eval, hooks)?;
        Ok(tape.value(out.logits).clone())
    }
}
