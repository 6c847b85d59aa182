//! Toy convolutional backbone with named insertion points.
//!
//! Four conv+ReLU blocks feed a linear classifier head. The first two
//! blocks (stem and stage1) are frozen from birth: style prototypes are
//! extracted through them once and stay valid for the whole run, because
//! the weights that produce those activations never move. Style injection
//! happens at named taps on the activations ("post_stem", "post_stage1",
//! "post_stage2"); gradients flow through the injected transform back into
//! every trainable weight, while the noise matrices and target statistics
//! stay constants of the forward pass. Backward passes are hand-written;
//! there is no autograd.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::stats::ChannelStats;
use crate::style::{ossa_with_noise, scaled_normalize_backward};
use crate::tensor::FeatureMap;

/// Ordered insertion-point names exposed by the backbone.
pub const INSERTION_POINTS: [&str; 3] = ["post_stem", "post_stage1", "post_stage2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InsertionPoint {
    PostStem,
    PostStage1,
    PostStage2,
}

impl InsertionPoint {
    pub fn name(self) -> &'static str {
        INSERTION_POINTS[self.block_index()]
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "post_stem" => Ok(InsertionPoint::PostStem),
            "post_stage1" => Ok(InsertionPoint::PostStage1),
            "post_stage2" => Ok(InsertionPoint::PostStage2),
            other => Err(Error::UnknownLayer(other.to_string())),
        }
    }

    /// Index of the block whose activation this point taps.
    pub fn block_index(self) -> usize {
        match self {
            InsertionPoint::PostStem => 0,
            InsertionPoint::PostStage1 => 1,
            InsertionPoint::PostStage2 => 2,
        }
    }

    pub fn all() -> [InsertionPoint; 3] {
        [InsertionPoint::PostStem, InsertionPoint::PostStage1, InsertionPoint::PostStage2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_stem_channels")]
    pub stem_channels: usize,
    #[serde(default = "default_stage_channels")]
    pub stage_channels: [usize; 3],
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
}

fn default_in_channels() -> usize {
    3
}
fn default_image_size() -> usize {
    32
}
fn default_stem_channels() -> usize {
    8
}
fn default_stage_channels() -> [usize; 3] {
    [16, 24, 24]
}
fn default_n_classes() -> usize {
    4
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: default_in_channels(),
            image_size: default_image_size(),
            stem_channels: default_stem_channels(),
            stage_channels: default_stage_channels(),
            n_classes: default_n_classes(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::invalid_config("channels", "all channel counts must be >= 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid_config("n_classes", "need at least 2 classes"));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::invalid_config(
                "image_size",
                format!("must be a multiple of 8 and >= 16, got {}", self.image_size),
            ));
        }
        Ok(())
    }

    /// Channel count of the feature map at an insertion point.
    pub fn channels_at(&self, point: InsertionPoint) -> usize {
        match point {
            InsertionPoint::PostStem => self.stem_channels,
            InsertionPoint::PostStage1 => self.stage_channels[0],
            InsertionPoint::PostStage2 => self.stage_channels[1],
        }
    }

    /// Spatial side length at an insertion point (stem keeps resolution,
    /// every stage halves it).
    pub fn side_at(&self, point: InsertionPoint) -> usize {
        match point {
            InsertionPoint::PostStem => self.image_size,
            InsertionPoint::PostStage1 => self.image_size / 2,
            InsertionPoint::PostStage2 => self.image_size / 4,
        }
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 3x3 convolution, padding 1, configurable stride. Weights are stored
/// `(out, in, ky, kx)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

const K: usize = 3;
const PAD: usize = 1;

/// Output positions i for which the tap `i*stride + k - PAD` lands inside
/// `0..size`; returns (inclusive lo, exclusive hi), clamped to `0..out_size`.
#[inline]
fn tap_range(size: usize, out_size: usize, stride: usize, k: usize) -> (usize, usize) {
    let off = k as isize - PAD as isize;
    let lo = if off < 0 { ((-off) as usize).div_ceil(stride) } else { 0 };
    let hi_tap = size as isize - 1 - off;
    if hi_tap < 0 {
        return (0, 0);
    }
    let hi = (hi_tap as usize / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

impl Conv2d {
    fn w(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_ch + c) * K + ky) * K + kx]
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * PAD - K) / self.stride + 1
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let [bs, cs, h, w] = x.dims();
        debug_assert_eq!(cs, self.in_ch);
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let s = self.stride;
        let mut out = FeatureMap::zeros([bs, self.out_ch, oh, ow]);
        for b in 0..bs {
            for o in 0..self.out_ch {
                let plane = out.channel_mut(b, o);
                plane.fill(self.bias[o]);
                for c in 0..cs {
                    let xp = x.channel(b, c);
                    for ky in 0..K {
                        let (i_lo, i_hi) = tap_range(h, oh, s, ky);
                        for kx in 0..K {
                            let wv = self.w(o, c, ky, kx);
                            let (j_lo, j_hi) = tap_range(w, ow, s, kx);
                            for i in i_lo..i_hi {
                                let xrow = (i * s + ky - PAD) * w;
                                let orow = i * ow;
                                for j in j_lo..j_hi {
                                    plane[orow + j] += wv * xp[xrow + j * s + kx - PAD];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    pub fn backward(
        &self,
        x: &FeatureMap,
        grad_out: &FeatureMap,
    ) -> (FeatureMap, Vec<f64>, Vec<f64>) {
        let [bs, cs, h, w] = x.dims();
        let [_, _, oh, ow] = grad_out.dims();
        let s = self.stride;
        let mut gx = FeatureMap::zeros(x.dims());
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        for b in 0..bs {
            for o in 0..self.out_ch {
                let gp = grad_out.channel(b, o);
                gb[o] += gp.iter().sum::<f64>();
            }
            for c in 0..cs {
                let xp = x.channel(b, c);
                let gxp = gx.channel_mut(b, c);
                for o in 0..self.out_ch {
                    let gp = grad_out.channel(b, o);
                    for ky in 0..K {
                        let (i_lo, i_hi) = tap_range(h, oh, s, ky);
                        for kx in 0..K {
                            let wi = ((o * cs + c) * K + ky) * K + kx;
                            let wv = self.weight[wi];
                            let (j_lo, j_hi) = tap_range(w, ow, s, kx);
                            let mut acc = 0.0;
                            for i in i_lo..i_hi {
                                let xrow = (i * s + ky - PAD) * w;
                                let grow = i * ow;
                                for j in j_lo..j_hi {
                                    let g = gp[grow + j];
                                    let xi = xrow + j * s + kx - PAD;
                                    acc += g * xp[xi];
                                    gxp[xi] += g * wv;
                                }
                            }
                            gw[wi] += acc;
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>, // (out, in) row-major
    pub bias: Vec<f64>,
}

impl Linear {
    /// x: (batch, in) row-major; returns (batch, out).
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.out_features];
        for b in 0..batch {
            let xi = &x[b * self.in_features..(b + 1) * self.in_features];
            for o in 0..self.out_features {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let mut acc = self.bias[o];
                for (wv, xv) in row.iter().zip(xi) {
                    acc += wv * xv;
                }
                out[b * self.out_features + o] = acc;
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &[f64],
        batch: usize,
        grad_out: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; batch * self.in_features];
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        for b in 0..batch {
            let xi = &x[b * self.in_features..(b + 1) * self.in_features];
            for o in 0..self.out_features {
                let g = grad_out[b * self.out_features + o];
                gb[o] += g;
                let row = o * self.in_features;
                for f in 0..self.in_features {
                    gw[row + f] += g * xi[f];
                    gx[b * self.in_features + f] += g * self.weight[row + f];
                }
            }
        }
        (gx, gw, gb)
    }
}

fn relu(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn relu_backward(pre_act: &FeatureMap, grad: &FeatureMap) -> FeatureMap {
    let mut out = grad.clone();
    for (g, &p) in out.data_mut().iter_mut().zip(pre_act.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Backbone {
    pub arch: ArchConfig,
    stem: Conv2d,
    stages: [Conv2d; 3],
    head: Linear,
    fingerprint: String,
}

/// Blocks frozen from initialization: the stem and stage1 (the layers whose
/// activations carry style statistics).
pub const FROZEN_BLOCKS: usize = 2;

/// Canonical order of trainable parameter tensors (frozen blocks are not
/// part of it): stage2 and stage3 weights and biases, then the head.
pub const TRAINABLE_TENSORS: usize = 6;

impl Backbone {
    /// Hex SHA-256 over the frozen-block parameters (stem and stage1),
    /// little-endian f64 bytes. A prototype extracted through one frozen
    /// front end refuses to inject into another.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn stem(&self) -> &Conv2d {
        &self.stem
    }

    pub fn stage1(&self) -> &Conv2d {
        &self.stages[0]
    }

    fn blocks(&self) -> [&Conv2d; 4] {
        [&self.stem, &self.stages[0], &self.stages[1], &self.stages[2]]
    }

    /// The head is linear over the flattened final feature map; at these
    /// sizes that learns shape geometry far faster than pooled features.
    pub fn head_features(&self) -> usize {
        let side = self.arch.image_size / 8;
        self.arch.stage_channels[2] * side * side
    }

    /// Plain forward pass to the logits.
    pub fn forward(&self, x: &FeatureMap) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x, None)?.logits)
    }

    /// Forward pass up to and including the named insertion point.
    pub fn forward_to(&self, x: &FeatureMap, point: InsertionPoint) -> Result<FeatureMap> {
        self.check_input(x)?;
        let mut act = x.clone();
        for (i, conv) in self.blocks().iter().enumerate() {
            act = relu(&conv.forward(&act));
            if i == point.block_index() {
                return Ok(act);
            }
        }
        unreachable!("insertion point indexes only the first three blocks");
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        x.ensure_finite()?;
        let [_, c, h, w] = x.dims();
        if c != self.arch.in_channels || h != self.arch.image_size || w != self.arch.image_size {
            return Err(Error::ShapeMismatch(format!(
                "expected input (B, {}, {}, {}), got {:?}",
                self.arch.in_channels,
                self.arch.image_size,
                self.arch.image_size,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Full forward pass, optionally applying the style transform at the
    /// planned insertion points, keeping everything backward needs.
    pub fn forward_traced(
        &self,
        x: &FeatureMap,
        injection: Option<&InjectionPlan<'_>>,
    ) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let batch = x.batch();
        let mut blocks = Vec::with_capacity(4);
        let mut act = x.clone();
        for (i, conv) in self.blocks().iter().enumerate() {
            let input = act;
            let pre_act = conv.forward(&input);
            let activated = relu(&pre_act);
            let mut injected = None;
            let mut output = activated.clone();
            if let Some(plan) = injection {
                if let Some(layer) = plan.layers.iter().find(|l| l.point.block_index() == i) {
                    let cs = activated.channels();
                    let mut scale = vec![0.0; batch * cs];
                    for b in 0..batch {
                        let tb = layer.stats.broadcast_row(b);
                        for c in 0..cs {
                            scale[b * cs + c] = layer.alpha[b * cs + c] * layer.stats.sigma(tb, c);
                        }
                    }
                    output = ossa_with_noise(
                        &activated,
                        layer.stats,
                        &layer.alpha,
                        &layer.beta,
                        plan.eps,
                    )?;
                    injected = Some(InjectionTrace { scale, eps: plan.eps });
                }
            }
            blocks.push(BlockTrace { input, pre_act, activated, injected, output: output.clone() });
            act = output;
        }

        // Flatten, then the linear head. The flattened view shares the
        // feature map's (b, c, h, w) layout, so it is a straight copy.
        let feats = self.head_features();
        let mut pooled = vec![0.0; batch * feats];
        pooled.copy_from_slice(act.data());
        let logits = self.head.forward(&pooled, batch);
        Ok(ForwardTrace { blocks, pooled, logits })
    }

    /// Backpropagates `grad_logits` (batch x n_classes, row-major) through
    /// the whole network. Returns gradients for the trainable tensors in
    /// canonical order; the frozen stem gets none.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<Gradients> {
        let batch = trace.blocks[0].input.batch();
        let (g_flat, gw_head, gb_head) = self.head.backward(&trace.pooled, batch, grad_logits);

        // Un-flatten: the flat view shares the feature map layout.
        let last = &trace.blocks[3].output;
        let mut grad = FeatureMap::zeros(last.dims());
        grad.data_mut().copy_from_slice(&g_flat);

        // The first two blocks are frozen and nothing below post_stage1
        // needs gradients, so the walk stops after stage2's conv backward.
        // A transform injected at post_stage2 sits above stage2 and is
        // backpropagated through; transforms at the frozen taps are not.
        let mut tensors: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(2);
        for i in (FROZEN_BLOCKS..4).rev() {
            let block = &trace.blocks[i];
            if let Some(inj) = &block.injected {
                grad = scaled_normalize_backward(&block.activated, &inj.scale, inj.eps, &grad)?;
            }
            let grad_pre = relu_backward(&block.pre_act, &grad);
            let conv = self.blocks()[i];
            let (gx, gw, gb) = conv.backward(&block.input, &grad_pre);
            tensors.push((gw, gb));
            grad = gx;
        }
        tensors.reverse(); // now stage2, stage3

        let mut out = Vec::with_capacity(TRAINABLE_TENSORS);
        for (gw, gb) in tensors {
            out.push(gw);
            out.push(gb);
        }
        out.push(gw_head);
        out.push(gb_head);
        Ok(Gradients { tensors: out })
    }

    /// Mutable views of the trainable tensors in canonical order.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::with_capacity(TRAINABLE_TENSORS);
        for stage in self.stages[1..].iter_mut() {
            out.push(&mut stage.weight);
            out.push(&mut stage.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn trainable_params(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::with_capacity(TRAINABLE_TENSORS);
        for stage in self.stages[1..].iter() {
            out.push(&stage.weight);
            out.push(&stage.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }
}

pub struct BlockTrace {
    pub input: FeatureMap,
    pub pre_act: FeatureMap,
    /// Post-ReLU activation, before any style transform.
    pub activated: FeatureMap,
    pub injected: Option<InjectionTrace>,
    /// What the next block consumed (equals `activated` when not injected).
    pub output: FeatureMap,
}

pub struct InjectionTrace {
    /// alpha * sigma(target) per (b, c); all backward needs besides x.
    pub scale: Vec<f64>,
    pub eps: f64,
}

pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// Activation at an insertion point as consumed by the next block.
    pub fn activation_at(&self, point: InsertionPoint) -> &FeatureMap {
        &self.blocks[point.block_index()].output
    }
}

pub struct LayerInjection<'a> {
    pub point: InsertionPoint,
    pub stats: &'a ChannelStats,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub struct InjectionPlan<'a> {
    pub layers: Vec<LayerInjection<'a>>,
    pub eps: f64,
}

pub struct Gradients {
    /// Same order as [`Backbone::trainable_params_mut`].
    pub tensors: Vec<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Construction and serialization
// ---------------------------------------------------------------------------

/// Deterministic He-style initialization from a seed; the stem and stage1
/// are frozen from birth.
pub fn build_backbone(arch: &ArchConfig, seed: u64) -> Result<Backbone> {
    arch.validate()?;
    let mut rng = crate::rng::SeededRng::from_seed(seed).substream(stream::INIT);
    let mut conv = |in_ch: usize, out_ch: usize, stride: usize| -> Conv2d {
        let fan_in = (in_ch * K * K) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..out_ch * in_ch * K * K).map(|_| rng.normal(0.0, std)).collect();
        Conv2d { in_ch, out_ch, stride, weight, bias: vec![0.0; out_ch] }
    };
    let stem = conv(arch.in_channels, arch.stem_channels, 1);
    let stages = [
        conv(arch.stem_channels, arch.stage_channels[0], 2),
        conv(arch.stage_channels[0], arch.stage_channels[1], 2),
        conv(arch.stage_channels[1], arch.stage_channels[2], 2),
    ];
    let side = arch.image_size / 8;
    let feats = arch.stage_channels[2] * side * side;
    let std = (1.0 / feats as f64).sqrt();
    let head = Linear {
        in_features: feats,
        out_features: arch.n_classes,
        weight: (0..arch.n_classes * feats).map(|_| rng.normal(0.0, std)).collect(),
        bias: vec![0.0; arch.n_classes],
    };
    let fingerprint = frozen_fingerprint(&stem, &stages[0]);
    Ok(Backbone { arch: *arch, stem, stages, head, fingerprint })
}

/// RNG stream ids used by the harness; fixed so runs are reproducible and
/// feature flags do not shift unrelated draws.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const OSSA: u64 = 3;
    pub const PROTO_SELECT: u64 = 4;
}

fn frozen_fingerprint(stem: &Conv2d, stage1: &Conv2d) -> String {
    let mut hasher = Sha256::new();
    for conv in [stem, stage1] {
        for v in conv.weight.iter().chain(conv.bias.iter()) {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerParams {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    arch: ArchConfig,
    stem: LayerParams,
    stage1: LayerParams,
    stage2: LayerParams,
    stage3: LayerParams,
    head: LayerParams,
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

pub fn model_to_json(bb: &Backbone) -> Result<String> {
    let pack = |c: &Conv2d| LayerParams { weight: c.weight.clone(), bias: c.bias.clone() };
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        arch: bb.arch,
        stem: pack(&bb.stem),
        stage1: pack(&bb.stages[0]),
        stage2: pack(&bb.stages[1]),
        stage3: pack(&bb.stages[2]),
        head: LayerParams { weight: bb.head.weight.clone(), bias: bb.head.bias.clone() },
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn model_from_json(json: &str) -> Result<Backbone> {
    let file: ModelFile = serde_json::from_str(json)?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "model schema version {} unsupported (expected {})",
            file.schema_version, MODEL_SCHEMA_VERSION
        )));
    }
    file.arch.validate()?;
    let arch = file.arch;
    let unpack = |p: LayerParams, in_ch: usize, out_ch: usize, stride: usize| -> Result<Conv2d> {
        if p.weight.len() != out_ch * in_ch * K * K || p.bias.len() != out_ch {
            return Err(Error::Schema(format!(
                "conv tensor sizes do not match arch ({} weights, {} biases)",
                p.weight.len(),
                p.bias.len()
            )));
        }
        if p.weight.iter().chain(p.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite model parameter".into()));
        }
        Ok(Conv2d { in_ch, out_ch, stride, weight: p.weight, bias: p.bias })
    };
    let stem = unpack(file.stem, arch.in_channels, arch.stem_channels, 1)?;
    let stages = [
        unpack(file.stage1, arch.stem_channels, arch.stage_channels[0], 2)?,
        unpack(file.stage2, arch.stage_channels[0], arch.stage_channels[1], 2)?,
        unpack(file.stage3, arch.stage_channels[1], arch.stage_channels[2], 2)?,
    ];
    let fingerprint = frozen_fingerprint(&stem, &stages[0]);
    let side = arch.image_size / 8;
    let feats = arch.stage_channels[2] * side * side;
    if file.head.weight.len() != arch.n_classes * feats || file.head.bias.len() != arch.n_classes {
        return Err(Error::Schema("head tensor sizes do not match arch".into()));
    }
    let head = Linear {
        in_features: feats,
        out_features: arch.n_classes,
        weight: file.head.weight,
        bias: file.head.bias,
    };
    Ok(Backbone { arch, stem, stages, head, fingerprint })
}
