//! The segmentation network: a slim ResNet-34 backbone whose last three
//! stages downsample by 2 and use dilation 2, bilinear fusion of every
//! stage back to input resolution, and a head of three 1×1 convolutions.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelImage;
use crate::kitti_io::NUM_CLASSES;
use crate::ops::{self, BatchNorm, ConvSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    /// Output widths of the stride-1 3×3 stem convolutions.
    pub stem_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub stage_dilations: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub bn_eps: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 8,
            stem_widths: vec![16, 16, 16],
            stage_blocks: vec![3, 4, 6, 3],
            stage_widths: vec![16, 32, 64, 128],
            stage_strides: vec![1, 2, 2, 2],
            stage_dilations: vec![1, 2, 2, 2],
            head_widths: vec![64, 32],
            num_classes: NUM_CLASSES,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 {
            return err("input_channels must be ≥ 1".into());
        }
        for (name, v) in [
            ("stage_blocks", &self.stage_blocks),
            ("stage_widths", &self.stage_widths),
            ("stage_strides", &self.stage_strides),
            ("stage_dilations", &self.stage_dilations),
        ] {
            if v.len() != 4 {
                return err(format!("{name} must have 4 entries, got {}", v.len()));
            }
            if v.contains(&0) {
                return err(format!("{name} entries must be ≥ 1"));
            }
        }
        if self.stem_widths.is_empty() || self.stem_widths.contains(&0) {
            return err("stem_widths must be non-empty and ≥ 1".into());
        }
        if self.head_widths.len() != 2 || self.head_widths.contains(&0) {
            return err("head_widths must hold two positive widths".into());
        }
        if self.num_classes != NUM_CLASSES {
            return err(format!("num_classes must be {NUM_CLASSES}"));
        }
        if !(self.bn_eps >= 0.0) {
            return err("bn_eps must be non-negative".into());
        }
        Ok(())
    }

    /// Channel count entering the head.
    pub fn fused_channels(&self) -> usize {
        self.stem_widths.last().unwrap() + self.stage_widths.iter().sum::<usize>()
    }

    /// Downsampling factor of the deepest stage.
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }
}

/// A parameter tensor substituted into the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    /// Learned parameters (counted and quantized); running statistics are not.
    pub fn is_learned(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }
}

/// Observes, and may rewrite, parameters and activations during a forward pass.
pub trait ForwardHook {
    fn param<'a>(&mut self, _name: &str, _kind: ParamKind, values: &'a [f32]) -> Result<Cow<'a, [f32]>> {
        Ok(Cow::Borrowed(values))
    }

    fn activation(&mut self, _name: &str, _t: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

/// Plain float inference.
pub struct NoHook;

impl ForwardHook for NoHook {}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Conv {
    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn apply(&self, x: &Tensor, hook: &mut dyn ForwardHook) -> Result<Tensor> {
        let w = hook.param(&self.weight_name(), ParamKind::Weight, &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(hook.param(&self.bias_name(), ParamKind::Bias, b)?),
            None => None,
        };
        ops::conv2d(x, &self.spec, &w, b.as_deref())
    }
}

/// Convolution followed by batch norm and optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn name(&self) -> &str {
        &self.conv.name
    }

    fn forward(&self, x: &Tensor, relu: bool, hook: &mut dyn ForwardHook) -> Result<Tensor> {
        let mut y = self.conv.apply(x, hook)?;
        let name = self.name();
        let gamma = hook.param(&format!("{name}.bn.gamma"), ParamKind::BnGamma, &self.bn.gamma)?;
        let beta = hook.param(&format!("{name}.bn.beta"), ParamKind::BnBeta, &self.bn.beta)?;
        let bn = BatchNorm {
            gamma: gamma.into_owned(),
            beta: beta.into_owned(),
            mean: self.bn.mean.clone(),
            var: self.bn.var.clone(),
            eps: self.bn.eps,
        };
        ops::batchnorm_in_place(&mut y, &bn)?;
        if relu {
            ops::relu_in_place(&mut y);
        }
        hook.activation(name, &mut y)?;
        Ok(y)
    }
}

/// Basic residual block: conv3×3→bn→relu→conv3×3→bn, plus shortcut, then relu.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    /// 1×1 projection when stride or width changes.
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &mut NoHook)
    }

    pub fn forward_with(&self, x: &Tensor, hook: &mut dyn ForwardHook) -> Result<Tensor> {
        let y = self.conv1.forward(x, true, hook)?;
        let mut y = self.conv2.forward(&y, false, hook)?;
        match &self.shortcut {
            Some(sc) => ops::add_in_place(&mut y, &sc.forward(x, false, hook)?)?,
            None => ops::add_in_place(&mut y, x)?,
        }
        ops::relu_in_place(&mut y);
        hook.activation(&self.name, &mut y)?;
        Ok(y)
    }

    fn convs(&self) -> impl Iterator<Item = &ConvBn> {
        [&self.conv1, &self.conv2].into_iter().chain(self.shortcut.as_ref())
    }
}

/// How to fill a freshly built model.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-normal conv weights and randomized batch-norm statistics.
    Seeded(u64),
    /// Zero convolutions and identity batch norms.
    Zeros,
}

struct Filler {
    rng: Option<ChaCha8Rng>,
}

impl Filler {
    fn conv(&mut self, name: String, spec: ConvSpec) -> Conv {
        let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f64;
        let (weight, bias) = match &mut self.rng {
            Some(rng) => {
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                let w = (0..spec.weight_len()).map(|_| normal.sample(rng) as f32).collect();
                let b = spec
                    .has_bias
                    .then(|| (0..spec.out_channels).map(|_| rng.gen_range(-0.1..0.1)).collect());
                (w, b)
            }
            None => (
                vec![0.0; spec.weight_len()],
                spec.has_bias.then(|| vec![0.0; spec.out_channels]),
            ),
        };
        Conv {
            name,
            spec,
            weight,
            bias,
        }
    }

    fn conv_bn(&mut self, name: String, spec: ConvSpec, eps: f32) -> ConvBn {
        let conv = self.conv(name, spec);
        let n = spec.out_channels;
        let bn = match &mut self.rng {
            Some(rng) => BatchNorm {
                gamma: (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
                beta: (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                mean: (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                var: (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
                eps,
            },
            None => BatchNorm::identity(n, eps),
        };
        ConvBn { conv, bn }
    }
}

/// Per-layer shape record from [`Model::trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub spec: ConvSpec,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCount {
    pub macs: u64,
    /// `2·MACs / 1e9`.
    pub gops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub stem: Vec<ConvBn>,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub head: Vec<Conv>,
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: &'a [f32],
}

impl Model {
    pub fn build(cfg: &NetworkConfig, init: Init) -> Result<Model> {
        cfg.validate()?;
        let mut fill = Filler {
            rng: match init {
                Init::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
                Init::Zeros => None,
            },
        };
        let eps = cfg.bn_eps;

        let mut stem = Vec::new();
        let mut ch = cfg.input_channels;
        for (i, &w) in cfg.stem_widths.iter().enumerate() {
            stem.push(fill.conv_bn(format!("stem.{i}"), ConvSpec::square(ch, w, 3, 1, 1), eps));
            ch = w;
        }

        let mut stages = Vec::new();
        for s in 0..4 {
            let (width, stride, dil) = (cfg.stage_widths[s], cfg.stage_strides[s], cfg.stage_dilations[s]);
            let mut blocks = Vec::new();
            for b in 0..cfg.stage_blocks[s] {
                let name = format!("stage{}.block{b}", s + 1);
                let stride = if b == 0 { stride } else { 1 };
                let conv1 = fill.conv_bn(format!("{name}.conv1"), ConvSpec::square(ch, width, 3, stride, dil), eps);
                let conv2 = fill.conv_bn(format!("{name}.conv2"), ConvSpec::square(width, width, 3, 1, dil), eps);
                let shortcut = (stride != 1 || ch != width).then(|| {
                    fill.conv_bn(format!("{name}.shortcut"), ConvSpec::square(ch, width, 1, stride, 1), eps)
                });
                blocks.push(ResidualBlock {
                    name,
                    conv1,
                    conv2,
                    shortcut,
                });
                ch = width;
            }
            stages.push(blocks);
        }

        let widths = [cfg.fused_channels(), cfg.head_widths[0], cfg.head_widths[1], cfg.num_classes];
        let head = (0..3)
            .map(|i| fill.conv(format!("head.{i}"), ConvSpec::square(widths[i], widths[i + 1], 1, 1, 1).with_bias(true)))
            .collect();

        Ok(Model {
            config: cfg.clone(),
            stem,
            stages,
            head,
        })
    }

    fn conv_bns(&self) -> impl Iterator<Item = &ConvBn> {
        self.stem
            .iter()
            .chain(self.stages.iter().flatten().flat_map(|b| b.convs()))
    }

    /// Every parameter tensor in a fixed order.
    pub fn params(&self) -> Vec<ParamView<'_>> {
        fn conv<'a>(out: &mut Vec<ParamView<'a>>, c: &'a Conv) {
            let s = c.spec;
            out.push(ParamView {
                name: c.weight_name(),
                kind: ParamKind::Weight,
                shape: vec![s.out_channels, s.in_channels, s.kernel.0, s.kernel.1],
                values: &c.weight,
            });
            if let Some(b) = &c.bias {
                out.push(ParamView {
                    name: c.bias_name(),
                    kind: ParamKind::Bias,
                    shape: vec![b.len()],
                    values: b,
                });
            }
        }
        let mut out = Vec::new();
        for cb in self.conv_bns() {
            conv(&mut out, &cb.conv);
            let n = cb.bn.channels();
            for (suffix, kind, values) in [
                ("gamma", ParamKind::BnGamma, &cb.bn.gamma),
                ("beta", ParamKind::BnBeta, &cb.bn.beta),
                ("mean", ParamKind::BnMean, &cb.bn.mean),
                ("var", ParamKind::BnVar, &cb.bn.var),
            ] {
                out.push(ParamView {
                    name: format!("{}.bn.{suffix}", cb.name()),
                    kind,
                    shape: vec![n],
                    values,
                });
            }
        }
        for c in &self.head {
            conv(&mut out, c);
        }
        out
    }

    /// Mutable access to every parameter tensor, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out: Vec<(String, &mut Vec<f32>)> = Vec::new();
        fn conv_mut<'a>(out: &mut Vec<(String, &'a mut Vec<f32>)>, c: &'a mut Conv) {
            let (weight_name, bias_name) = (c.weight_name(), c.bias_name());
            out.push((weight_name, &mut c.weight));
            if let Some(b) = &mut c.bias {
                out.push((bias_name, b));
            }
        }
        fn convbn_mut<'a>(out: &mut Vec<(String, &'a mut Vec<f32>)>, cb: &'a mut ConvBn) {
            let name = cb.conv.name.clone();
            conv_mut(out, &mut cb.conv);
            out.push((format!("{name}.bn.gamma"), &mut cb.bn.gamma));
            out.push((format!("{name}.bn.beta"), &mut cb.bn.beta));
            out.push((format!("{name}.bn.mean"), &mut cb.bn.mean));
            out.push((format!("{name}.bn.var"), &mut cb.bn.var));
        }
        for cb in &mut self.stem {
            convbn_mut(&mut out, cb);
        }
        for block in self.stages.iter_mut().flatten() {
            convbn_mut(&mut out, &mut block.conv1);
            convbn_mut(&mut out, &mut block.conv2);
            if let Some(sc) = &mut block.shortcut {
                convbn_mut(&mut out, sc);
            }
        }
        for c in &mut self.head {
            conv_mut(&mut out, c);
        }
        out
    }

    /// Conv weights and biases plus batch-norm γ and β.
    pub fn count_parameters(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind.is_learned())
            .map(|p| p.values.len())
            .sum()
    }

    /// Walks the graph at the given input size, checking every edge.
    pub fn trace(&self, height: usize, width: usize) -> Result<Vec<LayerTrace>> {
        let mut out = Vec::new();
        let step = |c: &Conv, h: usize, w: usize, out: &mut Vec<LayerTrace>| -> Result<(usize, usize)> {
            let (oh, ow) = c.spec.output_shape(h, w).ok_or_else(|| {
                Error::Config(format!("{}: window does not fit a {h}×{w} input", c.name))
            })?;
            out.push(LayerTrace {
                name: c.name.clone(),
                spec: c.spec,
                out_h: oh,
                out_w: ow,
            });
            Ok((oh, ow))
        };
        let (mut h, mut w) = (height, width);
        let mut ch = self.config.input_channels;
        for cb in &self.stem {
            check_channels(&cb.conv, ch)?;
            (h, w) = step(&cb.conv, h, w, &mut out)?;
            ch = cb.conv.spec.out_channels;
        }
        for block in self.stages.iter().flatten() {
            check_channels(&block.conv1.conv, ch)?;
            let main = step(&block.conv1.conv, h, w, &mut out)?;
            check_channels(&block.conv2.conv, block.conv1.conv.spec.out_channels)?;
            let main = step(&block.conv2.conv, main.0, main.1, &mut out)?;
            let out_ch = block.conv2.conv.spec.out_channels;
            let side = match &block.shortcut {
                Some(sc) => {
                    check_channels(&sc.conv, ch)?;
                    (step(&sc.conv, h, w, &mut out)?, sc.conv.spec.out_channels)
                }
                None => ((h, w), ch),
            };
            if side != (main, out_ch) {
                return Err(Error::Config(format!(
                    "{}: shortcut shape {side:?} differs from main path {:?}",
                    block.name,
                    (main, out_ch)
                )));
            }
            (h, w) = main;
            ch = out_ch;
        }
        let mut ch = self.config.fused_channels();
        for c in &self.head {
            check_channels(c, ch)?;
            step(c, height, width, &mut out)?;
            ch = c.spec.out_channels;
        }
        Ok(out)
    }

    pub fn count_macs(&self, height: usize, width: usize) -> Result<OpCount> {
        let macs = self
            .trace(height, width)?
            .iter()
            .map(|l| l.spec.macs(l.out_h, l.out_w))
            .sum::<u64>();
        Ok(OpCount {
            macs,
            gops: 2.0 * macs as f64 / 1e9,
        })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(input, &mut NoHook)
    }

    /// Logits `(num_classes, H, W)` for an `(input_channels, H, W)` input.
    pub fn forward_with(&self, input: &Tensor, hook: &mut dyn ForwardHook) -> Result<Tensor> {
        if input.channels() != self.config.input_channels {
            return Err(Error::Input(format!(
                "network expects {} input channels, got {}",
                self.config.input_channels,
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let mut x = input.clone();
        hook.activation("input", &mut x)?;
        for cb in &self.stem {
            x = cb.forward(&x, true, hook)?;
        }

        let mut branches = vec![x];
        for stage in &self.stages {
            let mut y = branches.last().unwrap().clone();
            for block in stage {
                y = block.forward_with(&y, hook)?;
            }
            branches.push(y);
        }

        let mut fused = Vec::with_capacity(branches.len());
        for (i, b) in branches.iter().enumerate() {
            let mut r = ops::bilinear_resize(b, h, w)?;
            hook.activation(&format!("resize.{i}"), &mut r)?;
            fused.push(r);
        }
        drop(branches);
        let mut y = Tensor::concat_channels(&fused.iter().collect::<Vec<_>>())?;
        drop(fused);

        let last = self.head.len() - 1;
        for (i, conv) in self.head.iter().enumerate() {
            y = conv.apply(&y, hook)?;
            if i < last {
                ops::relu_in_place(&mut y);
            }
            hook.activation(&conv.name, &mut y)?;
        }
        Ok(y)
    }

    /// Names of every activation edge the forward pass reports, in order.
    pub fn activation_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        names.extend(self.stem.iter().map(|c| c.name().to_string()));
        for block in self.stages.iter().flatten() {
            names.push(block.conv1.name().to_string());
            names.push(block.conv2.name().to_string());
            if let Some(sc) = &block.shortcut {
                names.push(sc.name().to_string());
            }
            names.push(block.name.clone());
        }
        names.extend((0..=self.stages.len()).map(|i| format!("resize.{i}")));
        names.extend(self.head.iter().map(|c| c.name.clone()));
        names
    }
}

fn check_channels(c: &Conv, ch: usize) -> Result<()> {
    if c.spec.in_channels != ch {
        return Err(Error::Config(format!(
            "{}: expects {} input channels, graph provides {ch}",
            c.name, c.spec.in_channels
        )));
    }
    Ok(())
}

/// Builds a network from `cfg` with the given weights.
pub fn build_network(cfg: &NetworkConfig, init: Init) -> Result<Model> {
    let model = Model::build(cfg, init)?;
    model.trace(64, 2048)?;
    Ok(model)
}

/// Per-pixel argmax over classes `1..C`; channel 0 (ignore) never wins,
/// ties go to the lowest class id.
pub fn argmax_labels(logits: &Tensor) -> LabelImage {
    let (c, h, w) = logits.shape();
    let mut out = LabelImage::filled(h, w, if c > 1 { 1 } else { 0 });
    if c <= 2 {
        return out;
    }
    let labels = out.as_mut_slice();
    let mut best = logits.plane(1).to_vec();
    for k in 2..c {
        for ((b, l), &v) in best.iter_mut().zip(labels.iter_mut()).zip(logits.plane(k)) {
            if v > *b {
                *b = v;
                *l = k as u8;
            }
        }
    }
    out
}
