//! Encoder/decoder segmentation network with skip connections.
//!
//! Level `i` of the encoder carries `base_channels * 2^i` channels. Every
//! level but the deepest ends in a 2x2 max pool; the decoder upsamples with a
//! stride-2 transposed convolution, concatenates the matching encoder output
//! (skip first) and runs another block. A 1x1 head emits one logit map per
//! organ class. All 3x3 convolutions use padding 1, so output size equals
//! input size.
//!
//! Convolutions followed by batchnorm carry no bias, and neither does the
//! upsampling convolution, whose output always passes through conv + batchnorm
//! next. Parameter names follow `enc0.conv1.weight`, `dec1.up.weight`,
//! `head.bias`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{norm, BatchNormMode, Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::tensor::{Float, Tensor};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    /// conv3x3-BN-ReLU, twice.
    Plain,
    /// The plain block plus a shortcut added before the last ReLU.
    Residual,
    /// Expand 1x1, depthwise 3x3, project 1x1. The projection stays linear
    /// when an identity shortcut applies.
    InvertedResidual,
}

impl BlockStyle {
    pub const ALL: [BlockStyle; 3] = [
        BlockStyle::Plain,
        BlockStyle::Residual,
        BlockStyle::InvertedResidual,
    ];
}

impl std::fmt::Display for BlockStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockStyle::Plain => "plain",
            BlockStyle::Residual => "residual",
            BlockStyle::InvertedResidual => "inverted_residual",
        })
    }
}

impl std::str::FromStr for BlockStyle {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "plain" => Ok(BlockStyle::Plain),
            "residual" => Ok(BlockStyle::Residual),
            "inverted_residual" => Ok(BlockStyle::InvertedResidual),
            other => Err(format!(
                "unknown block style {other:?} (expected plain, residual or inverted_residual)"
            )),
        }
    }
}

/// Expansion factor of inverted residual blocks.
const EXPANSION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub block_style: BlockStyle,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            base_channels: 64,
            in_channels: 1,
            out_channels: NUM_CLASSES,
            block_style: BlockStyle::Plain,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.depth > 16 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.in_channels != 1 {
            return Err(Error::Config(format!(
                "in_channels must be 1 (grayscale), got {}",
                self.in_channels
            )));
        }
        if self.out_channels != NUM_CLASSES {
            return Err(Error::Config(format!(
                "out_channels must be {NUM_CLASSES}, got {}",
                self.out_channels
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let d = self.required_divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(Error::Dimension(format!(
                "input {height}x{width} must be divisible by {d} for a depth-{} network",
                self.depth
            )));
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Running batchnorm statistics for one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Float> RunningStats<F> {
    fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }

    pub fn cast<G: Float>(&self) -> RunningStats<G> {
        let conv = |v: &[F]| v.iter().map(|x| G::from_f64_lossy(x.as_f64())).collect();
        RunningStats {
            mean: conv(&self.mean),
            var: conv(&self.var),
        }
    }
}

pub type StatsMap<F> = BTreeMap<String, RunningStats<F>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Eval,
}

/// One entry of the layer layout: either a learnable tensor or a batchnorm
/// layer (which contributes `.weight`/`.bias` parameters and running stats).
enum Slot {
    Tensor {
        name: String,
        shape: Vec<usize>,
        /// He fan-in; `None` for zero-initialized biases.
        fan_in: Option<usize>,
    },
    Norm {
        prefix: String,
        channels: usize,
    },
}

fn conv_slot(name: String, cout: usize, cin_per_group: usize, k: usize) -> Slot {
    Slot::Tensor {
        name,
        shape: vec![cout, cin_per_group, k, k],
        fan_in: Some(cin_per_group * k * k),
    }
}

fn block_slots(style: BlockStyle, p: &str, cin: usize, cout: usize, out: &mut Vec<Slot>) {
    let norm = |prefix: String, channels| Slot::Norm { prefix, channels };
    match style {
        BlockStyle::Plain | BlockStyle::Residual => {
            out.push(conv_slot(format!("{p}.conv1.weight"), cout, cin, 3));
            out.push(norm(format!("{p}.bn1"), cout));
            out.push(conv_slot(format!("{p}.conv2.weight"), cout, cout, 3));
            out.push(norm(format!("{p}.bn2"), cout));
            if style == BlockStyle::Residual && cin != cout {
                out.push(conv_slot(format!("{p}.proj.weight"), cout, cin, 1));
                out.push(norm(format!("{p}.proj_bn"), cout));
            }
        }
        BlockStyle::InvertedResidual => {
            let wide = cout * EXPANSION;
            out.push(conv_slot(format!("{p}.expand.weight"), wide, cin, 1));
            out.push(norm(format!("{p}.bn1"), wide));
            out.push(conv_slot(format!("{p}.dw.weight"), wide, 1, 3));
            out.push(norm(format!("{p}.bn2"), wide));
            out.push(conv_slot(format!("{p}.project.weight"), cout, wide, 1));
            out.push(norm(format!("{p}.bn3"), cout));
        }
    }
}

fn layout(cfg: &UNetConfig) -> Vec<Slot> {
    let mut slots = Vec::new();
    for level in 0..cfg.depth {
        let cin = if level == 0 {
            cfg.in_channels
        } else {
            cfg.level_channels(level - 1)
        };
        block_slots(cfg.block_style, &format!("enc{level}"), cin, cfg.level_channels(level), &mut slots);
    }
    for level in (0..cfg.depth - 1).rev() {
        let (deep, c) = (cfg.level_channels(level + 1), cfg.level_channels(level));
        // each output pixel of a 2x2/stride-2 transposed conv sees one tap per input channel
        slots.push(Slot::Tensor {
            name: format!("dec{level}.up.weight"),
            shape: vec![deep, c, 2, 2],
            fan_in: Some(deep),
        });
        block_slots(cfg.block_style, &format!("dec{level}"), 2 * c, c, &mut slots);
    }
    slots.push(conv_slot("head.weight".into(), cfg.out_channels, cfg.base_channels, 1));
    slots.push(Slot::Tensor {
        name: "head.bias".into(),
        shape: vec![cfg.out_channels],
        fan_in: None,
    });
    slots
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: UNetConfig,
    params: BTreeMap<String, Tensor<f32>>,
    stats: StatsMap<f32>,
}

/// Builds a freshly initialized network.
pub fn build_unet(config: UNetConfig) -> Result<Model> {
    Model::new(config)
}

impl Model {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let mut stats = BTreeMap::new();
        for slot in layout(&config) {
            match slot {
                Slot::Tensor {
                    name,
                    shape,
                    fan_in,
                } => {
                    let n: usize = shape.iter().product();
                    let data = match fan_in {
                        Some(fan_in) => {
                            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                                .expect("finite std");
                            (0..n).map(|_| normal.sample(&mut rng)).collect()
                        }
                        None => vec![0.0; n],
                    };
                    params.insert(name, Tensor::new(shape, data)?);
                }
                Slot::Norm { prefix, channels } => {
                    params.insert(format!("{prefix}.weight"), Tensor::full([channels], 1.0)?);
                    params.insert(format!("{prefix}.bias"), Tensor::zeros([channels])?);
                    stats.insert(prefix, RunningStats::fresh(channels));
                }
            }
        }
        Ok(Self {
            config,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn stats(&self) -> &StatsMap<f32> {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: StatsMap<f32>) -> Result<()> {
        let same_layout = stats.len() == self.stats.len()
            && stats.iter().zip(&self.stats).all(|((k, v), (k0, v0))| {
                k == k0 && v.mean.len() == v0.mean.len() && v.var.len() == v0.var.len()
            });
        if !same_layout {
            return Err(Error::Dimension("running statistics do not match the model".into()));
        }
        self.stats = stats;
        Ok(())
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn count_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`, cast to `F`.
    pub fn bind<F: Float>(&self, tape: &mut Tape<F>, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| {
                let t = t.cast::<F>();
                let v = if trainable { tape.param(t) } else { tape.constant(t) };
                (name.clone(), v)
            })
            .collect()
    }

    pub fn stats_as<F: Float>(&self) -> StatsMap<F> {
        self.stats.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    /// Eval-mode logits `[B, 3, H, W]` for a `[B, 1, H, W]` batch.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape, false);
        let mut stats = self.stats.clone();
        let x = tape.constant(batch.clone());
        let out = forward_graph(&self.config, &mut tape, &vars, &mut stats, Phase::Eval, x)?;
        Ok(tape.value(out).clone())
    }
}

struct Ctx<'a, F: Float> {
    tape: &'a mut Tape<F>,
    vars: &'a BTreeMap<String, Var>,
    stats: &'a mut StatsMap<F>,
    phase: Phase,
}

impl<F: Float> Ctx<'_, F> {
    fn var(&self, name: &str) -> std::result::Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::InvalidArgument {
            op: "unet",
            msg: format!("missing parameter {name}"),
        })
    }

    fn conv(&mut self, x: Var, name: &str, padding: usize, groups: usize) -> std::result::Result<Var, TensorError> {
        let k = self.var(name)?;
        self.tape.conv2d_grouped(x, k, None, 1, padding, groups)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> std::result::Result<Var, TensorError> {
        let gamma = self.var(&format!("{prefix}.weight"))?;
        let beta = self.var(&format!("{prefix}.bias"))?;
        let stats = self.stats.get_mut(prefix).ok_or_else(|| TensorError::InvalidArgument {
            op: "unet",
            msg: format!("missing running statistics {prefix}"),
        })?;
        let mode = match self.phase {
            Phase::Train => BatchNormMode::Train {
                running_mean: &mut stats.mean,
                running_var: &mut stats.var,
                momentum: norm::DEFAULT_MOMENTUM,
            },
            Phase::Eval => BatchNormMode::Eval {
                running_mean: &stats.mean,
                running_var: &stats.var,
            },
        };
        self.tape.batchnorm2d(x, gamma, beta, mode, norm::DEFAULT_EPS)
    }

    fn block(&mut self, style: BlockStyle, p: &str, x: Var) -> std::result::Result<Var, TensorError> {
        match style {
            BlockStyle::Plain | BlockStyle::Residual => {
                let h = self.conv(x, &format!("{p}.conv1.weight"), 1, 1)?;
                let h = self.bn(h, &format!("{p}.bn1"))?;
                let h = self.tape.relu(h);
                let h = self.conv(h, &format!("{p}.conv2.weight"), 1, 1)?;
                let mut h = self.bn(h, &format!("{p}.bn2"))?;
                if style == BlockStyle::Residual {
                    let shortcut = if self.vars.contains_key(&format!("{p}.proj.weight")) {
                        let s = self.conv(x, &format!("{p}.proj.weight"), 0, 1)?;
                        self.bn(s, &format!("{p}.proj_bn"))?
                    } else {
                        x
                    };
                    h = self.tape.add(h, shortcut)?;
                }
                Ok(self.tape.relu(h))
            }
            BlockStyle::InvertedResidual => {
                let h = self.conv(x, &format!("{p}.expand.weight"), 0, 1)?;
                let h = self.bn(h, &format!("{p}.bn1"))?;
                let h = self.tape.relu(h);
                let wide = self.tape.shape(h)[1];
                let h = self.conv(h, &format!("{p}.dw.weight"), 1, wide)?;
                let h = self.bn(h, &format!("{p}.bn2"))?;
                let h = self.tape.relu(h);
                let h = self.conv(h, &format!("{p}.project.weight"), 0, 1)?;
                let h = self.bn(h, &format!("{p}.bn3"))?;
                if self.tape.shape(h) == self.tape.shape(x) {
                    self.tape.add(h, x)
                } else {
                    // Without the identity sum the block output would go
                    // straight into another conv + batchnorm, which cancels
                    // this layer's shift entirely.
                    Ok(self.tape.relu(h))
                }
            }
        }
    }
}

/// Records the network on `tape`. `vars` comes from [`Model::bind`]; in
/// [`Phase::Train`] the running statistics in `stats` are updated in place.
pub fn forward_graph<F: Float>(
    config: &UNetConfig,
    tape: &mut Tape<F>,
    vars: &BTreeMap<String, Var>,
    stats: &mut StatsMap<F>,
    phase: Phase,
    input: Var,
) -> Result<Var> {
    let [_, c, h, w] = tape.value(input).dims4("unet")?;
    if c != config.in_channels {
        return Err(Error::Dimension(format!(
            "network expects {} input channel(s), got {c}",
            config.in_channels
        )));
    }
    config.check_input_size(h, w)?;
    let mut ctx = Ctx {
        tape,
        vars,
        stats,
        phase,
    };
    let style = config.block_style;
    let mut skips = Vec::with_capacity(config.depth);
    let mut x = input;
    for level in 0..config.depth {
        let y = ctx.block(style, &format!("enc{level}"), x)?;
        if level + 1 < config.depth {
            skips.push(y);
            x = ctx.tape.maxpool2d(y)?;
        } else {
            x = y;
        }
    }
    for level in (0..config.depth - 1).rev() {
        let k = ctx.var(&format!("dec{level}.up.weight"))?;
        let up = ctx.tape.conv_transpose2d(x, k, None, 2)?;
        let cat = ctx.tape.concat_channels(skips[level], up)?;
        x = ctx.block(style, &format!("dec{level}"), cat)?;
    }
    let k = ctx.var("head.weight")?;
    let b = ctx.var("head.bias")?;
    Ok(ctx.tape.conv2d(x, k, Some(b), 1, 0)?)
}

const MAGIC: &[u8; 8] = b"GITSEGW\0";
pub const WEIGHTS_VERSION: u32 = 1;
const KIND_PARAM: u8 = 0;
const KIND_MEAN: u8 = 1;
const KIND_VAR: u8 = 2;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, kind: u8, name: &str, shape: &[usize], data: &[f32]) {
    out.push(kind);
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the model (config, parameters and running statistics).
pub fn encode_weights(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, WEIGHTS_VERSION);
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u32(&mut out, (model.params.len() + 2 * model.stats.len()) as u32);
    for (name, t) in &model.params {
        put_blob(&mut out, KIND_PARAM, name, t.shape(), t.data());
    }
    for (prefix, s) in &model.stats {
        put_blob(&mut out, KIND_MEAN, &format!("{prefix}.running_mean"), &[s.mean.len()], &s.mean);
        put_blob(&mut out, KIND_VAR, &format!("{prefix}.running_var"), &[s.var.len()], &s.var);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Weights("file is truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses bytes written by [`encode_weights`]. Every tensor must match the
/// layout implied by the embedded config.
pub fn decode_weights(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Weights("not a weight file (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Weights(format!(
            "unsupported format version {version} (this build reads {WEIGHTS_VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: UNetConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Weights(format!("embedded config: {e}")))?;
    let mut model = Model::new(config)?;
    let expected = model.params.len() + 2 * model.stats.len();
    let count = r.u32()? as usize;
    if count != expected {
        return Err(Error::Weights(format!(
            "file holds {count} tensors, config implies {expected}"
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let kind = r.take(1)?[0];
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(n.checked_mul(4).ok_or_else(|| Error::Weights("tensor too large".into()))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let target: &mut Vec<f32> = match kind {
            KIND_PARAM => match model.params.get_mut(&name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    t.data_mut().copy_from_slice(&data);
                    seen.insert(name);
                    continue;
                }
                Some(t) => {
                    return Err(Error::Weights(format!(
                        "{name}: shape {shape:?} does not match config ({:?})",
                        t.shape()
                    )))
                }
                None => return Err(Error::Weights(format!("unexpected parameter {name}"))),
            },
            KIND_MEAN | KIND_VAR => {
                let suffix = if kind == KIND_MEAN { ".running_mean" } else { ".running_var" };
                let stats = name
                    .strip_suffix(suffix)
                    .and_then(|p| model.stats.get_mut(p))
                    .ok_or_else(|| Error::Weights(format!("unexpected buffer {name}")))?;
                if kind == KIND_MEAN {
                    &mut stats.mean
                } else {
                    &mut stats.var
                }
            }
            other => return Err(Error::Weights(format!("unknown tensor kind {other}"))),
        };
        if shape != [target.len()] {
            return Err(Error::Weights(format!("{name}: shape {shape:?} does not match config")));
        }
        target.copy_from_slice(&data);
        seen.insert(name);
    }
    if seen.len() != count {
        return Err(Error::Weights("duplicate tensor names".into()));
    }
    if !r.buf.is_empty() {
        return Err(Error::Weights(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(model)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_weights(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize, base: usize, style: BlockStyle) -> UNetConfig {
        UNetConfig {
            depth,
            base_channels: base,
            block_style: style,
            seed: 3,
            ..UNetConfig::default()
        }
    }

    /// Independent closed-form count: conv weights, two BN vectors per
    /// normalized layer, bias on the head only.
    fn closed_form(c: &UNetConfig) -> usize {
        let block = |i: usize, o: usize| match c.block_style {
            BlockStyle::Plain => 9 * i * o + 9 * o * o + 4 * o,
            BlockStyle::Residual => 9 * i * o + 9 * o * o + 4 * o + if i != o { i * o + 2 * o } else { 0 },
            BlockStyle::InvertedResidual => {
                let e = 2 * o;
                i * e + 2 * e + 9 * e + 2 * e + e * o + 2 * o
            }
        };
        let ch = |l: usize| c.base_channels * 2usize.pow(l as u32);
        let mut total = block(1, ch(0));
        for l in 1..c.depth {
            total += block(ch(l - 1), ch(l));
        }
        for l in 0..c.depth - 1 {
            total += 4 * ch(l + 1) * ch(l) + block(2 * ch(l), ch(l));
        }
        total + 3 * c.base_channels + 3
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        assert_eq!(Model::new(cfg(2, 4, BlockStyle::Plain)).unwrap().count_parameters(), 1683);
        for c in [
            cfg(2, 4, BlockStyle::Plain),
            cfg(3, 8, BlockStyle::Residual),
            cfg(4, 2, BlockStyle::InvertedResidual),
            cfg(5, 64, BlockStyle::Plain),
        ] {
            assert_eq!(Model::new(c).unwrap().count_parameters(), closed_form(&c), "{c:?}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(Model::new(cfg(1, 4, BlockStyle::Plain)).is_err());
        assert!(Model::new(cfg(2, 0, BlockStyle::Plain)).is_err());
        let mut c = cfg(2, 4, BlockStyle::Plain);
        c.out_channels = 2;
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(cfg(3, 4, BlockStyle::Residual)).unwrap();
        let b = Model::new(cfg(3, 4, BlockStyle::Residual)).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(3, 4, BlockStyle::Residual);
        other.seed = 4;
        assert_ne!(a.params(), Model::new(other).unwrap().params());
    }

    #[test]
    fn shape_contract_for_every_style() {
        for style in BlockStyle::ALL {
            let m = Model::new(cfg(2, 4, style)).unwrap();
            let x = Tensor::from_fn([1, 1, 32, 32], |i| (i % 7) as f32 / 7.0).unwrap();
            assert_eq!(m.forward(&x).unwrap().shape(), &[1, 3, 32, 32]);
        }
        let m = Model::new(cfg(3, 2, BlockStyle::Plain)).unwrap();
        let x = Tensor::zeros([2, 1, 288, 288]).unwrap();
        assert_eq!(m.forward(&x).unwrap().shape(), &[2, 3, 288, 288]);
    }

    #[test]
    fn indivisible_input_names_the_divisor() {
        let m = Model::new(cfg(3, 2, BlockStyle::Plain)).unwrap();
        let err = m.forward(&Tensor::zeros([1, 1, 30, 32]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn duplicated_sample_gives_identical_outputs() {
        let m = Model::new(cfg(2, 4, BlockStyle::Plain)).unwrap();
        let one: Vec<f32> = (0..256).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let two = Tensor::new([2, 1, 16, 16], [one.clone(), one].concat()).unwrap();
        let out = m.forward(&two).unwrap();
        let half = out.numel() / 2;
        assert_eq!(out.data()[..half], out.data()[half..]);
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let mut m = Model::new(cfg(2, 3, BlockStyle::InvertedResidual)).unwrap();
        m.stats.values_mut().next().unwrap().mean[0] = 0.25;
        let back = decode_weights(&encode_weights(&m).unwrap()).unwrap();
        assert_eq!(back, m);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&m, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), m);
    }

    #[test]
    fn weights_guards() {
        let m = Model::new(cfg(2, 3, BlockStyle::Plain)).unwrap();
        let bytes = encode_weights(&m).unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(decode_weights(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_weights(&bad).unwrap_err().to_string().contains("version"));
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_weights(&extra).is_err());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for depth in [2, 3] {
            for style in BlockStyle::ALL {
                let m = Model::new(cfg(depth, 3, style)).unwrap();
                let mut tape = Tape::<f32>::new();
                let vars = m.bind(&mut tape, true);
                let mut stats = m.stats_as::<f32>();
                let x = Tensor::from_fn([2, 1, 16, 16], |i| ((i * 7919) % 113) as f32 / 113.0).unwrap();
                let x = tape.constant(x);
                let y = forward_graph(m.config(), &mut tape, &vars, &mut stats, Phase::Train, x).unwrap();
                let loss = crate::gradcheck::probe(&mut tape, y).unwrap();
                tape.backward(loss).unwrap();
                for (name, &v) in &vars {
                    let g = tape.grad(v).unwrap_or_else(|| panic!("{name} has no gradient"));
                    assert!(g.iter().any(|&x| x != 0.0), "{style} depth {depth}: {name} gradient is all zero");
                }
                assert_ne!(stats, m.stats_as::<f32>(), "train phase updates running stats");
            }
        }
    }
}
