use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{fuse, fuse_backward_higher, relu_backward, relu_inplace, Conv2d, ConvCache, ConvGrads};
use super::tensor::{Scalar, Tensor};
use crate::decode::RawOutput;
use crate::error::{Error, Result};
use crate::geometry::{AnchorConfig, LayerSpec};

/// A run of `n_convs` 3x3 convolutions; only the last one is strided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub n_convs: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Separate conv stacks for classification and regression.
    Split,
    /// One conv stack feeding both output convs (`head_depth = 0` convolves
    /// the detection layer directly).
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Backbone stage index feeding each detection layer.
    pub taps: Vec<usize>,
    pub head_channels: usize,
    pub head_depth: usize,
    pub head: HeadKind,
    pub fusion: bool,
    pub anchors: AnchorConfig,
}

impl Default for NetConfig {
    /// Toy detector: 64x64 grayscale input, detection layers at strides 4 and 8.
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            stages: vec![
                StageSpec {
                    n_convs: 1,
                    channels: 8,
                    stride: 2,
                },
                StageSpec {
                    n_convs: 2,
                    channels: 16,
                    stride: 2,
                },
                StageSpec {
                    n_convs: 2,
                    channels: 32,
                    stride: 2,
                },
            ],
            taps: vec![1, 2],
            head_channels: 64,
            head_depth: 2,
            head: HeadKind::Split,
            fusion: true,
            anchors: AnchorConfig::with_strides(&[4, 8], 64, 64),
        }
    }
}

impl NetConfig {
    /// Single-shot reference variant: no fusion, output convs applied
    /// directly to the projected detection layers.
    pub fn baseline(&self) -> Self {
        NetConfig {
            head: HeadKind::Shared,
            head_depth: 0,
            fusion: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.head_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("at least one backbone stage required".into());
        }
        if let Some(i) = self
            .stages
            .iter()
            .position(|s| s.n_convs == 0 || s.channels == 0 || s.stride == 0)
        {
            return bad(format!("stage {i} has a zero field"));
        }
        if self.taps.is_empty() || self.taps.windows(2).any(|w| w[1] <= w[0]) {
            return bad("taps must be non-empty and strictly increasing".into());
        }
        if *self.taps.last().unwrap() != self.stages.len() - 1 {
            return bad("the deepest tap must be the last backbone stage".into());
        }
        if self.taps.len() != self.anchors.layers.len() {
            return bad(format!(
                "{} taps but {} anchor layers",
                self.taps.len(),
                self.anchors.layers.len()
            ));
        }
        for (t, (&tap, layer)) in self.taps.iter().zip(&self.anchors.layers).enumerate() {
            let stride: usize = self.stages[..=tap].iter().map(|s| s.stride).product();
            if stride != layer.stride as usize {
                return bad(format!(
                    "tap {t} (stage {tap}) has cumulative stride {stride}, anchor layer wants {}",
                    layer.stride
                ));
            }
        }
        if self.fusion {
            for w in self.taps.windows(2) {
                let ratio: usize = self.stages[w[0] + 1..=w[1]].iter().map(|s| s.stride).product();
                if ratio != 2 {
                    return bad(format!(
                        "fusion needs consecutive taps one stride-2 step apart, stages {} and {} differ by {ratio}",
                        w[0], w[1]
                    ));
                }
            }
        }
        Ok(())
    }

    /// Convolution stack from the input to the backbone output of `tap`.
    pub fn backbone_stack(&self, tap: usize) -> Vec<LayerSpec> {
        let stage = self.taps[tap];
        let mut out = Vec::new();
        for s in &self.stages[..=stage] {
            for i in 0..s.n_convs {
                let stride = if i + 1 == s.n_convs { s.stride } else { 1 };
                out.push(LayerSpec::conv3(stride as u32));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Activation<T> {
    cache: ConvCache<T>,
    out: Tensor<T>,
}

fn conv_relu<T: Scalar>(conv: &Conv2d<T>, x: &Tensor<T>) -> Result<Activation<T>> {
    let (mut out, cache) = conv.forward(x)?;
    relu_inplace(&mut out);
    Ok(Activation { cache, out })
}

fn conv_relu_backward<T: Scalar>(
    conv: &Conv2d<T>,
    act: &Activation<T>,
    mut grad: Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, ConvGrads<T>)> {
    relu_backward(&act.out, &mut grad);
    conv.backward(&act.cache, &grad, need_input)
}

/// Classification and regression branches on one detection layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead<T> {
    pub kind: HeadKind,
    /// Classification branch convs, or the shared trunk for [`HeadKind::Shared`].
    pub cls_trunk: Vec<Conv2d<T>>,
    /// Empty for [`HeadKind::Shared`].
    pub reg_trunk: Vec<Conv2d<T>>,
    pub cls_out: Conv2d<T>,
    pub reg_out: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    cls_trunk: Vec<Activation<T>>,
    reg_trunk: Vec<Activation<T>>,
    cls_out: ConvCache<T>,
    reg_out: ConvCache<T>,
}

impl<T: Scalar> DetectionHead<T> {
    pub fn zeros(name: &str, kind: HeadKind, channels: usize, depth: usize) -> Result<Self> {
        let trunk = |branch: &str| -> Result<Vec<Conv2d<T>>> {
            (0..depth)
                .map(|i| Conv2d::zeros(format!("{name}.{branch}.{i}"), channels, channels, 3, 1))
                .collect()
        };
        let (cls_trunk, reg_trunk) = match kind {
            HeadKind::Split => (trunk("cls")?, trunk("reg")?),
            HeadKind::Shared => (trunk("shared")?, Vec::new()),
        };
        Ok(DetectionHead {
            kind,
            cls_trunk,
            reg_trunk,
            cls_out: Conv2d::zeros(format!("{name}.cls_out"), 2, channels, 3, 1)?,
            reg_out: Conv2d::zeros(format!("{name}.reg_out"), 4, channels, 3, 1)?,
        })
    }

    pub fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut v: Vec<&Conv2d<T>> = self.cls_trunk.iter().collect();
        v.push(&self.cls_out);
        v.extend(self.reg_trunk.iter());
        v.push(&self.reg_out);
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v: Vec<&mut Conv2d<T>> = self.cls_trunk.iter_mut().collect();
        v.push(&mut self.cls_out);
        v.extend(self.reg_trunk.iter_mut());
        v.push(&mut self.reg_out);
        v
    }

    /// Returns the `2 x H x W` logit map and the `4 x H x W` offset map.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, HeadCache<T>)> {
        let run = |convs: &[Conv2d<T>]| -> Result<Vec<Activation<T>>> {
            let mut acts: Vec<Activation<T>> = Vec::with_capacity(convs.len());
            for conv in convs {
                let input = acts.last().map_or(x, |a| &a.out);
                acts.push(conv_relu(conv, input)?);
            }
            Ok(acts)
        };
        let cls_trunk = run(&self.cls_trunk)?;
        let reg_trunk = run(&self.reg_trunk)?;
        let cls_in = cls_trunk.last().map_or(x, |a| &a.out);
        let reg_in = match self.kind {
            HeadKind::Split => reg_trunk.last().map_or(x, |a| &a.out),
            HeadKind::Shared => cls_in,
        };
        let (cls, cls_out) = self.cls_out.forward(cls_in)?;
        let (reg, reg_out) = self.reg_out.forward(reg_in)?;
        Ok((
            cls,
            reg,
            HeadCache {
                cls_trunk,
                reg_trunk,
                cls_out,
                reg_out,
            },
        ))
    }

    /// Gradient with respect to the head input, plus parameter gradients in [`Self::convs`] order.
    pub fn backward(
        &self,
        cache: &HeadCache<T>,
        grad_cls: &Tensor<T>,
        grad_reg: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<ConvGrads<T>>)> {
        let back_trunk = |convs: &[Conv2d<T>],
                          acts: &[Activation<T>],
                          mut g: Tensor<T>|
         -> Result<(Tensor<T>, Vec<ConvGrads<T>>)> {
            let mut grads = Vec::with_capacity(convs.len());
            for (conv, act) in convs.iter().zip(acts).rev() {
                let (gx, gp) = conv_relu_backward(conv, act, g, true)?;
                g = gx.expect("input gradient requested");
                grads.push(gp);
            }
            grads.reverse();
            Ok((g, grads))
        };
        let (g_cls_in, g_cls_out) = self.cls_out.backward(&cache.cls_out, grad_cls, true)?;
        let (g_reg_in, g_reg_out) = self.reg_out.backward(&cache.reg_out, grad_reg, true)?;
        let (g_cls_in, g_reg_in) = (g_cls_in.unwrap(), g_reg_in.unwrap());
        match self.kind {
            HeadKind::Split => {
                let (gx_c, mut gc) = back_trunk(&self.cls_trunk, &cache.cls_trunk, g_cls_in)?;
                let (gx_r, gr) = back_trunk(&self.reg_trunk, &cache.reg_trunk, g_reg_in)?;
                let mut gx = gx_c;
                for (a, b) in gx.data_mut().iter_mut().zip(gx_r.data()) {
                    *a += *b;
                }
                gc.push(g_cls_out);
                gc.extend(gr);
                gc.push(g_reg_out);
                Ok((gx, gc))
            }
            HeadKind::Shared => {
                let mut g = g_cls_in;
                for (a, b) in g.data_mut().iter_mut().zip(g_reg_in.data()) {
                    *a += *b;
                }
                let (gx, mut gc) = back_trunk(&self.cls_trunk, &cache.cls_trunk, g)?;
                gc.push(g_cls_out);
                gc.push(g_reg_out);
                Ok((gx, gc))
            }
        }
    }
}

/// Flattens per-layer head maps into anchor-ordered rows (row-major cells).
fn append_rows<T: Scalar>(cls: &Tensor<T>, reg: &Tensor<T>, raw: &mut RawOutput) {
    let (_, h, w) = cls.chw();
    let n = h * w;
    let (c, r) = (cls.data(), reg.data());
    for i in 0..n {
        raw.logits.push([c[i].as_f64(), c[n + i].as_f64()]);
        raw.offsets.push([
            r[i].as_f64(),
            r[n + i].as_f64(),
            r[2 * n + i].as_f64(),
            r[3 * n + i].as_f64(),
        ]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetConfig,
    seed: u64,
    backbone: Vec<Vec<Conv2d<T>>>,
    projections: Vec<Conv2d<T>>,
    heads: Vec<DetectionHead<T>>,
}

/// Intermediate values of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    backbone: Vec<Vec<Activation<T>>>,
    projections: Vec<Activation<T>>,
    heads: Vec<HeadCache<T>>,
    layer_dims: Vec<(usize, usize)>,
}

/// Parameter gradients in [`Network::convs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<ConvGrads<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients(net.convs().into_iter().map(ConvGrads::zeros_like).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.0 {
            g.scale(s);
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Builds the topology with every parameter zero.
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::with_capacity(config.stages.len());
        let mut in_ch = config.in_channels;
        for (si, s) in config.stages.iter().enumerate() {
            let mut convs = Vec::with_capacity(s.n_convs);
            for i in 0..s.n_convs {
                let stride = if i + 1 == s.n_convs { s.stride } else { 1 };
                convs.push(Conv2d::zeros(format!("backbone.{si}.{i}"), s.channels, in_ch, 3, stride)?);
                in_ch = s.channels;
            }
            backbone.push(convs);
        }
        let mut projections = Vec::new();
        let mut heads = Vec::new();
        for (t, &tap) in config.taps.iter().enumerate() {
            projections.push(Conv2d::zeros(
                format!("proj.{t}"),
                config.head_channels,
                config.stages[tap].channels,
                1,
                1,
            )?);
            heads.push(DetectionHead::zeros(
                &format!("head.{t}"),
                config.head,
                config.head_channels,
                config.head_depth,
            )?);
        }
        Ok(Network {
            config: config.clone(),
            seed: 0,
            backbone,
            projections,
            heads,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn heads(&self) -> &[DetectionHead<T>] {
        &self.heads
    }

    /// Every convolution in canonical order: backbone, projections, heads.
    pub fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut v: Vec<&Conv2d<T>> = self.backbone.iter().flatten().collect();
        v.extend(self.projections.iter());
        for h in &self.heads {
            v.extend(h.convs());
        }
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v: Vec<&mut Conv2d<T>> = self.backbone.iter_mut().flatten().collect();
        v.extend(self.projections.iter_mut());
        for h in &mut self.heads {
            v.extend(h.convs_mut());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let head = |h: &DetectionHead<T>| DetectionHead {
            kind: h.kind,
            cls_trunk: h.cls_trunk.iter().map(Conv2d::cast).collect(),
            reg_trunk: h.reg_trunk.iter().map(Conv2d::cast).collect(),
            cls_out: h.cls_out.cast(),
            reg_out: h.reg_out.cast(),
        };
        Network {
            config: self.config.clone(),
            seed: self.seed,
            backbone: self
                .backbone
                .iter()
                .map(|s| s.iter().map(Conv2d::cast).collect())
                .collect(),
            projections: self.projections.iter().map(Conv2d::cast).collect(),
            heads: self.heads.iter().map(head).collect(),
        }
    }

    /// Copies parameters from a network of the same topology but different configuration
    /// flags that do not affect parameters (e.g. fusion on/off).
    pub fn with_config(&self, config: &NetConfig) -> Result<Self> {
        let mut other = Network::zeros(config)?;
        let src = self.convs();
        let mut dst = other.convs_mut();
        if src.len() != dst.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            if d.weight.dims() != s.weight.dims() || d.name != s.name {
                return Err(Error::Config(format!("parameter {} differs", s.name)));
            }
            **d = s.clone();
        }
        other.seed = self.seed;
        Ok(other)
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<RawOutput> {
        Ok(self.forward_trace(image)?.0)
    }

    pub fn forward_trace(&self, image: &Tensor<T>) -> Result<(RawOutput, ForwardTrace<T>)> {
        let dims = image.dims();
        if dims.len() != 3 || dims[0] != self.config.in_channels {
            return Err(Error::shape(
                "input",
                format!("image {dims:?}, expected {} channels", self.config.in_channels),
            ));
        }
        let mut backbone: Vec<Vec<Activation<T>>> = Vec::with_capacity(self.backbone.len());
        for stage in &self.backbone {
            let mut acts: Vec<Activation<T>> = Vec::with_capacity(stage.len());
            for conv in stage {
                let input = acts
                    .last()
                    .or_else(|| backbone.last().and_then(|s| s.last()))
                    .map_or(image, |a| &a.out);
                acts.push(conv_relu(conv, input)?);
            }
            backbone.push(acts);
        }
        let mut projections = Vec::with_capacity(self.projections.len());
        for (conv, &tap) in self.projections.iter().zip(&self.config.taps) {
            projections.push(conv_relu(conv, &backbone[tap].last().unwrap().out)?);
        }
        let n_layers = projections.len();
        let mut raw = RawOutput::default();
        let mut heads = Vec::with_capacity(n_layers);
        let mut layer_dims = Vec::with_capacity(n_layers);
        for t in 0..n_layers {
            let feature = if self.config.fusion && t + 1 < n_layers {
                fuse(&projections[t].out, &projections[t + 1].out)?
            } else {
                projections[t].out.clone()
            };
            let (cls, reg, cache) = self.heads[t].forward(&feature)?;
            let (_, h, w) = cls.chw();
            layer_dims.push((h, w));
            append_rows(&cls, &reg, &mut raw);
            heads.push(cache);
        }
        Ok((
            raw,
            ForwardTrace {
                backbone,
                projections,
                heads,
                layer_dims,
            },
        ))
    }

    /// Backpropagates per-anchor gradients of the logits and offsets.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &[[f64; 2]],
        grad_offsets: &[[f64; 4]],
    ) -> Result<Gradients<T>> {
        let total: usize = trace.layer_dims.iter().map(|(h, w)| h * w).sum();
        if grad_logits.len() != total || grad_offsets.len() != total {
            return Err(Error::shape(
                "backward",
                format!(
                    "{} logit / {} offset gradients for {total} anchors",
                    grad_logits.len(),
                    grad_offsets.len()
                ),
            ));
        }
        let n_layers = self.heads.len();
        let mut head_grads = Vec::with_capacity(n_layers);
        let mut g_proj: Vec<Tensor<T>> = trace
            .projections
            .iter()
            .map(|p| Tensor::zeros(p.out.dims()))
            .collect();
        let mut start = 0;
        for t in 0..n_layers {
            let (h, w) = trace.layer_dims[t];
            let n = h * w;
            let mut gc = Tensor::zeros(&[2, h, w]);
            let mut gr = Tensor::zeros(&[4, h, w]);
            for i in 0..n {
                let (gl, go) = (grad_logits[start + i], grad_offsets[start + i]);
                for (k, &v) in gl.iter().enumerate() {
                    gc.data_mut()[k * n + i] = T::of_f64(v);
                }
                for (k, &v) in go.iter().enumerate() {
                    gr.data_mut()[k * n + i] = T::of_f64(v);
                }
            }
            start += n;
            let (g_feature, grads) = self.heads[t].backward(&trace.heads[t], &gc, &gr)?;
            head_grads.push(grads);
            if self.config.fusion && t + 1 < n_layers {
                let gh = fuse_backward_higher(&g_feature, trace.projections[t + 1].out.chw())?;
                for (a, b) in g_proj[t + 1].data_mut().iter_mut().zip(gh.data()) {
                    *a += *b;
                }
            }
            for (a, b) in g_proj[t].data_mut().iter_mut().zip(g_feature.data()) {
                *a += *b;
            }
        }

        let mut g_stage: Vec<Option<Tensor<T>>> = vec![None; self.backbone.len()];
        let mut proj_grads = Vec::with_capacity(n_layers);
        for (t, g) in g_proj.into_iter().enumerate() {
            let (gx, gp) =
                conv_relu_backward(&self.projections[t], &trace.projections[t], g, true)?;
            proj_grads.push(gp);
            let gx = gx.unwrap();
            let slot = &mut g_stage[self.config.taps[t]];
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(gx.data()) {
                        *a += *b;
                    }
                }
                None => *slot = Some(gx),
            }
        }

        let mut backbone_grads: Vec<Vec<ConvGrads<T>>> = vec![Vec::new(); self.backbone.len()];
        let mut carry: Option<Tensor<T>> = None;
        for s in (0..self.backbone.len()).rev() {
            let mut g = match (carry.take(), g_stage[s].take()) {
                (Some(mut a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += *y;
                    }
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("the deepest stage is always tapped"),
            };
            let stage = &self.backbone[s];
            let mut grads = Vec::with_capacity(stage.len());
            for (i, (conv, act)) in stage.iter().zip(&trace.backbone[s]).enumerate().rev() {
                let first = s == 0 && i == 0;
                let (gx, gp) = conv_relu_backward(conv, act, g, !first)?;
                grads.push(gp);
                match gx {
                    Some(next) => g = next,
                    None => {
                        g = Tensor::zeros(&[0]);
                    }
                }
            }
            grads.reverse();
            backbone_grads[s] = grads;
            if s > 0 {
                carry = Some(g);
            }
        }

        let mut all: Vec<ConvGrads<T>> = backbone_grads.into_iter().flatten().collect();
        all.extend(proj_grads);
        for h in head_grads {
            all.extend(h);
        }
        Ok(Gradients(all))
    }

    /// Receptive field (pixels) of a detection layer's backbone feature, with
    /// fusion taking the larger field of the two merged paths.
    pub fn detection_rf(&self, tap: usize) -> Result<u64> {
        let own = crate::geometry::receptive_field(&self.config.backbone_stack(tap))?.rf_size;
        if self.config.fusion && tap + 1 < self.config.taps.len() {
            let higher =
                crate::geometry::receptive_field(&self.config.backbone_stack(tap + 1))?.rf_size;
            Ok(own.max(higher))
        } else {
            Ok(own)
        }
    }
}

/// He fan-in initialisation (`N(0, 2 / fan_in)`) for weights, zero biases.
pub fn build_network<T: Scalar>(config: &NetConfig, seed: u64) -> Result<Network<T>> {
    let mut net = Network::<T>::zeros(config)?;
    net.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for conv in net.convs_mut() {
        let d = conv.weight.dims();
        let fan_in = (d[1] * d[2] * d[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in conv.weight.data_mut() {
            *w = T::of_f64(normal.sample(&mut rng));
        }
    }
    Ok(net)
}
