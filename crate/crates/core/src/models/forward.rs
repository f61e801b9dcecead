use std::fmt;

use serde::Serialize;

use super::{ActKind, Family, LayerSlots, Model, NormKind, NormSlot, TokenSlot};
use crate::autograd::{BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Kind of activation tensor an [`Edge`] carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Patch-embedding output.
    Embed,
    /// Output of a norm layer.
    Norm,
    /// Output of an activation function.
    Act,
    /// Sum after a residual connection.
    Residual,
    FinalNorm,
    /// Pooled features entering the classifier.
    Pooled,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Embed => "embed",
            Site::Norm => "norm",
            Site::Act => "act",
            Site::Residual => "residual",
            Site::FinalNorm => "final_norm",
            Site::Pooled => "pooled",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One quantizable activation tensor in the forward graph. Edges are
/// numbered in evaluation order, which is fixed for a given config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub index: usize,
    /// 0 for the embedding, `1..=depth` for mixing layers, `depth + 1` for
    /// the final norm and the pooled features.
    pub layer: usize,
    pub site: Site,
    pub mode: Mode,
}

/// Interception points used by quantization and profiling.
pub trait Hooks {
    /// Called on every weight matrix or kernel before use. `axis` is its
    /// output-channel axis.
    fn weight(&mut self, tape: &mut Tape, w: Var, axis: usize) -> Result<Var> {
        let _ = (tape, axis);
        Ok(w)
    }

    /// Called on every activation edge.
    fn activation(&mut self, tape: &mut Tape, edge: &Edge, x: Var) -> Result<Var> {
        let _ = (tape, edge);
        Ok(x)
    }
}

/// Hooks that change nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Plain;

impl Hooks for Plain {}

/// Batch statistics from a training-mode batch-norm site.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStat {
    pub buffer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Output {
    pub logits: Var,
    pub bn_stats: Vec<BnStat>,
    pub edges: usize,
}

/// Splits `[B, C_in, H, W]` images into non-overlapping `P×P` patches,
/// giving `[B, T, C_in·P·P]` with tokens in row-major grid order and
/// features ordered by (channel, row, column) inside a patch.
pub fn patchify(images: &Tensor, p: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("images must be [B, C, H, W], got {s:?}")));
    }
    let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::contract(format!("patch {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let feat = cin * p * p;
    let src = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * feat);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..cin {
                    for py in 0..p {
                        let row = ((bi * cin + c) * h + gy * p + py) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, feat], out)
}

struct Ctx<'a> {
    model: &'a Model,
    tape: &'a mut Tape,
    vars: &'a [Var],
    mode: Mode,
    hooks: &'a mut dyn Hooks,
    edges: usize,
    bn: Vec<BnStat>,
}

impl Ctx<'_> {
    fn p(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn w(&mut self, i: usize) -> Result<Var> {
        let axis = self.model.info[i].quant_axis.unwrap_or(0);
        self.hooks.weight(self.tape, self.vars[i], axis)
    }

    fn edge(&mut self, layer: usize, site: Site, x: Var) -> Result<Var> {
        let e = Edge {
            index: self.edges,
            layer,
            site,
            mode: self.mode,
        };
        self.edges += 1;
        self.hooks.activation(self.tape, &e, x)
    }

    fn norm(&mut self, slot: &NormSlot, x: Var, axis: usize) -> Result<Var> {
        let (g, b) = (self.p(slot.gamma), self.p(slot.beta));
        let eps = self.model.config.eps;
        match self.model.config.norm {
            NormKind::Affine => self.tape.channel_affine(x, g, b, axis),
            NormKind::LayerNorm => self.tape.layer_norm(x, g, b, axis, eps),
            NormKind::BatchNorm => {
                let buffer = slot.bn.expect("batch-norm slot has a buffer");
                match self.mode {
                    Mode::Train => {
                        let (y, stats) = self.tape.batch_norm(x, g, b, axis, eps, BnMode::Train)?;
                        let (mean, var) = stats.expect("train mode returns statistics");
                        self.bn.push(BnStat { buffer, mean, var });
                        Ok(y)
                    }
                    Mode::Eval => {
                        let buf = &self.model.buffers[buffer];
                        let mode = BnMode::Eval {
                            mean: &buf.mean,
                            var: &buf.var,
                        };
                        Ok(self.tape.batch_norm(x, g, b, axis, eps, mode)?.0)
                    }
                }
            }
        }
    }

    fn act(&mut self, x: Var, alpha: Option<usize>) -> Result<Var> {
        match self.model.config.act {
            ActKind::Gelu => Ok(self.tape.gelu(x)),
            ActKind::Relu => Ok(self.tape.relu(x)),
            ActKind::Pact => {
                let a = alpha.ok_or_else(|| Error::contract("pact site has no alpha"))?;
                self.tape.pact(x, self.p(a))
            }
        }
    }

    /// Applies one linear map per channel group of `[B, C, n]` input along
    /// axis 1; a single group skips the split.
    fn grouped_linear(&mut self, x: Var, maps: &[(usize, usize)]) -> Result<Var> {
        if maps.len() == 1 {
            let w = self.w(maps[0].0)?;
            return self.tape.linear(x, w, Some(self.p(maps[0].1)));
        }
        let width = self.tape.shape(x)[1] / maps.len();
        let mut parts = Vec::with_capacity(maps.len());
        for (g, &(wi, bi)) in maps.iter().enumerate() {
            let xg = self.tape.narrow(x, 1, g * width, width)?;
            let w = self.w(wi)?;
            parts.push(self.tape.linear(xg, w, Some(self.p(bi)))?);
        }
        self.tape.concat(&parts, 1)
    }

    fn token_mixing(&mut self, x: Var, token: &[TokenSlot], alpha: Option<usize>, layer: usize) -> Result<Var> {
        let ht = self.tape.swap_last2(x)?;
        let first: Vec<(usize, usize)> = token.iter().map(|s| (s.w1, s.b1)).collect();
        let mut a = self.grouped_linear(ht, &first)?;
        if token[0].second.is_some() {
            a = self.act(a, alpha)?;
            a = self.edge(layer, Site::Act, a)?;
            let second: Vec<(usize, usize)> = token.iter().map(|s| s.second.expect("mixer pair")).collect();
            a = self.grouped_linear(a, &second)?;
        }
        self.tape.swap_last2(a)
    }

    fn layer(&mut self, layer: usize, x: Var) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        let s = self.tape.shape(x);
        let ok = match cfg.family {
            Family::ConvMixer => {
                let (gh, gw) = cfg.grid();
                s.len() == 4 && s[1] == cfg.channels && s[2] == gh && s[3] == gw
            }
            _ => s.len() == 3 && s[1] == cfg.tokens() && s[2] == cfg.channels,
        };
        if !ok {
            return Err(Error::contract(format!(
                "{} layer input has shape {s:?}",
                cfg.family
            )));
        }
        let slots = &model.layout.layers[layer - 1];
        match slots {
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
            } => {
                let h = self.norm(norm1, x, 2)?;
                let h = self.edge(layer, Site::Norm, h)?;
                let mixed = self.token_mixing(h, token, *token_alpha, layer)?;
                let z = self.tape.add(x, mixed)?;
                let z = self.edge(layer, Site::Residual, z)?;
                let h2 = self.norm(norm2, z, 2)?;
                let h2 = self.edge(layer, Site::Norm, h2)?;
                let w = self.w(*w3)?;
                let u = self.tape.linear(h2, w, Some(self.p(*b3)))?;
                let u = self.act(u, *channel_alpha)?;
                let u = self.edge(layer, Site::Act, u)?;
                let w = self.w(*w4)?;
                let v = self.tape.linear(u, w, Some(self.p(*b4)))?;
                let y = self.tape.add(z, v)?;
                self.edge(layer, Site::Residual, y)
            }
            LayerSlots::Conv {
                dw,
                dw_b,
                alpha,
                norm1,
                pw,
                pw_b,
                norm2,
            } => {
                let k = self.w(*dw)?;
                let a = self.tape.depthwise_conv(x, k, Some(self.p(*dw_b)))?;
                let a = self.act(a, *alpha)?;
                let a = self.edge(layer, Site::Act, a)?;
                let r = self.tape.add(a, x)?;
                let r = self.edge(layer, Site::Residual, r)?;
                let n1 = self.norm(norm1, r, 1)?;
                let n1 = self.edge(layer, Site::Norm, n1)?;
                let k = self.w(*pw)?;
                let p = self.tape.pointwise_conv(n1, k, Some(self.p(*pw_b)))?;
                let n2 = self.norm(norm2, p, 1)?;
                self.edge(layer, Site::Norm, n2)
            }
        }
    }

    fn embed(&mut self, images: &Tensor) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width {
            return Err(Error::Dimension {
                op: "model input",
                lhs: s.to_vec(),
                rhs: vec![0, cfg.in_channels, cfg.height, cfg.width],
            });
        }
        let patches = patchify(images, cfg.patch)?;
        let x = self.tape.constant(patches);
        let lay = &model.layout;
        let w = self.w(lay.embed_w)?;
        let e = self.tape.linear(x, w, Some(self.p(lay.embed_b)))?;
        if cfg.family != Family::ConvMixer {
            return self.edge(0, Site::Embed, e);
        }
        let e = self.act(e, lay.embed_alpha)?;
        let e = self.edge(0, Site::Act, e)?;
        let e = self.tape.swap_last2(e)?;
        let (gh, gw) = cfg.grid();
        let e = self.tape.reshape(e, &[s[0], cfg.channels, gh, gw])?;
        let norm = lay.embed_norm.as_ref().expect("convmixer embed norm");
        let e = self.norm(norm, e, 1)?;
        self.edge(0, Site::Norm, e)
    }

    fn head(&mut self, x: Var) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        let last = cfg.depth + 1;
        let lay = &model.layout;
        let pooled = if cfg.family == Family::ConvMixer {
            let f = self.norm(&lay.final_norm, x, 1)?;
            let f = self.edge(last, Site::FinalNorm, f)?;
            let s = self.tape.shape(f).to_vec();
            let f = self.tape.reshape(f, &[s[0], s[1], s[2] * s[3]])?;
            self.tape.mean_axis(f, 2)?
        } else {
            let f = self.norm(&lay.final_norm, x, 2)?;
            let f = self.edge(last, Site::FinalNorm, f)?;
            self.tape.mean_axis(f, 1)?
        };
        let pooled = self.edge(last, Site::Pooled, pooled)?;
        let w = self.w(lay.head_w)?;
        self.tape.linear(pooled, w, Some(self.p(lay.head_b)))
    }
}

fn check_vars(model: &Model, vars: &[Var]) -> Result<()> {
    if vars.len() != model.values.len() {
        return Err(Error::contract(format!(
            "model has {} parameters, {} vars given",
            model.values.len(),
            vars.len()
        )));
    }
    Ok(())
}

pub(super) fn run(
    model: &Model,
    tape: &mut Tape,
    vars: &[Var],
    images: &Tensor,
    mode: Mode,
    hooks: &mut dyn Hooks,
) -> Result<Output> {
    check_vars(model, vars)?;
    let mut ctx = Ctx {
        model,
        tape,
        vars,
        mode,
        hooks,
        edges: 0,
        bn: Vec::new(),
    };
    let mut x = ctx.embed(images)?;
    for l in 1..=model.config.depth {
        x = ctx.layer(l, x).map_err(|e| e.at(format!("layer {l}")))?;
    }
    let logits = ctx.head(x)?;
    Ok(Output {
        logits,
        bn_stats: ctx.bn,
        edges: ctx.edges,
    })
}

pub(super) fn run_layer(
    model: &Model,
    tape: &mut Tape,
    vars: &[Var],
    layer: usize,
    x: Var,
    mode: Mode,
    hooks: &mut dyn Hooks,
) -> Result<(Var, Vec<BnStat>)> {
    check_vars(model, vars)?;
    if layer == 0 || layer > model.config.depth {
        return Err(Error::contract(format!(
            "layer {layer} out of range 1..={}",
            model.config.depth
        )));
    }
    let mut ctx = Ctx {
        model,
        tape,
        vars,
        mode,
        hooks,
        edges: 0,
        bn: Vec::new(),
    };
    let y = ctx.layer(layer, x)?;
    Ok((y, ctx.bn))
}
