//! Twin-encoder correlation network and its ablation variants.
//!
//! All variants share one UNet skeleton with `encoder_depth` resolution
//! levels. Level `l` runs at `1 / 2^l` scale with `base_channels * 2^l`
//! channels and consists of an optional 2x2 max pool followed by two 3x3
//! conv + ReLU layers. The decoder mirrors it with nearest upsampling,
//! optional skip concatenation and two conv + ReLU layers per level; two
//! 1x1 heads produce wire logits and depth.
//!
//! Correlation variants run the first `p` levels as a weight-shared encoder
//! on both frames (`p` = 2 for deep, 1 for shallow, 0 for pixel), pool, and
//! correlate current against previous features. Level `p` then consumes
//! `concat(current features, cost volume)`. Skip connections always come
//! from the current-frame path.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corr::CorrConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Variant {
    #[cfg_attr(feature = "serde", serde(rename = "ucorr_deep"))]
    UcorrDeep,
    #[cfg_attr(feature = "serde", serde(rename = "ucorr_shallow"))]
    UcorrShallow,
    #[cfg_attr(feature = "serde", serde(rename = "ucorr_pixel"))]
    UcorrPixel,
    #[cfg_attr(feature = "serde", serde(rename = "unet_1f"))]
    Unet1f,
    #[cfg_attr(feature = "serde", serde(rename = "unet_2f"))]
    Unet2f,
    #[cfg_attr(feature = "serde", serde(rename = "unet_3f"))]
    Unet3f,
    #[cfg_attr(feature = "serde", serde(rename = "ucorr_noskip"))]
    UcorrNoskip,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::UcorrPixel,
        Variant::UcorrShallow,
        Variant::UcorrDeep,
        Variant::Unet1f,
        Variant::Unet2f,
        Variant::Unet3f,
        Variant::UcorrNoskip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::UcorrDeep => "ucorr_deep",
            Variant::UcorrShallow => "ucorr_shallow",
            Variant::UcorrPixel => "ucorr_pixel",
            Variant::Unet1f => "unet_1f",
            Variant::Unet2f => "unet_2f",
            Variant::Unet3f => "unet_3f",
            Variant::UcorrNoskip => "ucorr_noskip",
        }
    }

    /// Number of input frames.
    pub fn arity(self) -> usize {
        match self {
            Variant::Unet1f => 1,
            Variant::Unet3f => 3,
            _ => 2,
        }
    }

    /// Levels run by the shared twin encoder before correlation, or `None`
    /// for the plain UNet variants.
    pub fn shared_levels(self) -> Option<usize> {
        match self {
            Variant::UcorrDeep | Variant::UcorrNoskip => Some(2),
            Variant::UcorrShallow => Some(1),
            Variant::UcorrPixel => Some(0),
            Variant::Unet1f | Variant::Unet2f | Variant::Unet3f => None,
        }
    }

    pub fn has_skips(self) -> bool {
        self != Variant::UcorrNoskip
    }

    pub fn uses_correlation(self) -> bool {
        self.shared_levels().is_some()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_channels: usize,
    /// Number of resolution levels, including the bottleneck.
    pub encoder_depth: usize,
    pub corr: CorrConfig,
    /// `[height, width]`, both divisible by `2^(encoder_depth - 1)`.
    pub input_size: [usize; 2],
    /// Meters per unit of the softplus depth head.
    pub depth_scale: f32,
    /// Wire probability the untrained wire head predicts everywhere.
    pub wire_prior: f32,
    /// Depth in meters the untrained depth head predicts everywhere.
    pub depth_prior: f32,
    /// Channel groups of the normalization after every encoder and decoder
    /// convolution; 0 disables it. Must divide `base_channels`.
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::UcorrDeep,
            base_channels: 16,
            encoder_depth: 4,
            corr: CorrConfig::default(),
            input_size: [64, 64],
            depth_scale: 4.0,
            wire_prior: 0.05,
            depth_prior: 25.0,
            norm_groups: 4,
        }
    }
}

impl ModelConfig {
    /// Desk-scale network: base 4, displacement 4.
    pub fn tiny(variant: Variant, size: usize) -> Self {
        Self {
            variant,
            base_channels: 4,
            corr: CorrConfig::with_displacement(4),
            input_size: [size, size],
            ..Self::default()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.encoder_depth == 0 {
            return Err(Error::InvalidConfig("base_channels and encoder_depth must be positive".into()));
        }
        if let Some(p) = self.variant.shared_levels() {
            if p >= self.encoder_depth {
                return Err(Error::InvalidConfig(format!(
                    "{} needs encoder_depth > {p}, got {}",
                    self.variant, self.encoder_depth
                )));
            }
        }
        self.corr.validate()?;
        if self.norm_groups > 0 && self.base_channels % self.norm_groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "norm_groups {} must divide base_channels {}",
                self.norm_groups, self.base_channels
            )));
        }
        if !(self.wire_prior > 0.0 && self.wire_prior < 1.0) {
            return Err(Error::InvalidConfig("wire_prior must be in (0, 1)".into()));
        }
        if !(self.depth_prior > 0.0) {
            return Err(Error::InvalidConfig("depth_prior must be positive".into()));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::InvalidConfig("depth_scale must be positive".into()));
        }
        self.check_size(self.input_size[0], self.input_size[1])
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << (self.encoder_depth - 1);
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} must be a positive multiple of {m} for {} levels",
                self.encoder_depth
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// The seven ablation configurations built from `template`.
pub fn variant_suite(template: &ModelConfig) -> Vec<ModelConfig> {
    Variant::ALL.iter().map(|&v| template.with_variant(v)).collect()
}

/// Ablation suite at default hyperparameters.
pub fn make_variant_suite() -> Vec<ModelConfig> {
    variant_suite(&ModelConfig::default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvRef {
    weight: ParamId,
    bias: ParamId,
    pad: usize,
    /// Normalization scale and shift applied to the convolution output.
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    first: ConvRef,
    second: ConvRef,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// Shared encoder levels `0..p` (empty for UNet variants).
    shared: Vec<Block>,
    /// Untied copy for the previous-frame path; `None` when weights are tied.
    shared_prev: Option<Vec<Block>>,
    /// Levels `p..depth`.
    trunk: Vec<Block>,
    /// Decoder block for level `l` at index `l`.
    decoder: Vec<Block>,
    wire_head: ConvRef,
    depth_head: ConvRef,
}

/// Graph nodes of the two heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOutput {
    /// `N x 1 x H x W`, pre-sigmoid.
    pub wire_logits: Var,
    /// `N x 1 x H x W`, meters, nonnegative.
    pub depth: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

fn conv(params: &mut ParamSet<f32>, name: &str, out: usize, inp: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvRef {
    let (weight, bias) = params.push_conv(name, out, inp, k, rng);
    ConvRef {
        weight,
        bias,
        pad: k / 2,
        norm: None,
    }
}

fn normed(params: &mut ParamSet<f32>, mut c: ConvRef, name: &str, ch: usize, on: bool) -> ConvRef {
    if on {
        let gamma = params.push(format!("{name}.weight"), Tensor::full(&[ch], 1.0));
        let beta = params.push(format!("{name}.bias"), Tensor::zeros(&[ch]));
        c.norm = Some((gamma, beta));
    }
    c
}

fn block(params: &mut ParamSet<f32>, name: &str, out: usize, inp: usize, norm: bool, rng: &mut ChaCha8Rng) -> Block {
    let first = conv(params, &format!("{name}.conv1"), out, inp, 3, rng);
    let first = normed(params, first, &format!("{name}.norm1"), out, norm);
    let second = conv(params, &format!("{name}.conv2"), out, out, 3, rng);
    let second = normed(params, second, &format!("{name}.norm2"), out, norm);
    Block { first, second }
}

/// Builds and initializes a model; equal seeds give bit-identical weights.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let depth = cfg.encoder_depth;
    let p = cfg.variant.shared_levels();
    let norm = cfg.norm_groups > 0;

    let mut shared = Vec::new();
    let mut in_ch = 3;
    for l in 0..p.unwrap_or(0) {
        shared.push(block(&mut params, &format!("enc{l}"), cfg.channels(l), in_ch, norm, &mut rng));
        in_ch = cfg.channels(l);
    }
    let first_trunk = p.unwrap_or(0);
    let mut trunk = Vec::new();
    for l in first_trunk..depth {
        let inp = if l == first_trunk {
            match p {
                Some(_) => in_ch + cfg.corr.out_channels(),
                None => 3 * cfg.variant.arity(),
            }
        } else {
            cfg.channels(l - 1)
        };
        trunk.push(block(&mut params, &format!("enc{l}"), cfg.channels(l), inp, norm, &mut rng));
    }
    let mut decoder = Vec::with_capacity(depth.saturating_sub(1));
    for l in 0..depth.saturating_sub(1) {
        let skip = if cfg.variant.has_skips() { cfg.channels(l) } else { 0 };
        decoder.push(block(
            &mut params,
            &format!("dec{l}"),
            cfg.channels(l),
            cfg.channels(l + 1) + skip,
            norm,
            &mut rng,
        ));
    }
    let wire_head = conv(&mut params, "head.wire", 1, cfg.base_channels, 1, &mut rng);
    let depth_head = conv(&mut params, "head.depth", 1, cfg.base_channels, 1, &mut rng);
    let pw = f64::from(cfg.wire_prior);
    params.get_mut(wire_head.bias).tensor.data_mut()[0] = num_traits::Float::ln(pw / (1.0 - pw)) as f32;
    // inverse softplus of the prior
    let u = f64::from(cfg.depth_prior / cfg.depth_scale);
    let bias = u + num_traits::Float::ln(-num_traits::Float::exp_m1(-u));
    params.get_mut(depth_head.bias).tensor.data_mut()[0] = bias as f32;
    Ok(Model {
        cfg: *cfg,
        params,
        layout: Layout {
            shared,
            shared_prev: None,
            trunk,
            decoder,
            wire_head,
            depth_head,
        },
    })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Parameter ids of the shared encoder (current-frame path when untied).
    pub fn shared_encoder_params(&self) -> Vec<ParamId> {
        block_ids(&self.layout.shared)
    }

    /// Parameter ids of the untied previous-frame encoder, if any.
    pub fn prev_encoder_params(&self) -> Option<Vec<ParamId>> {
        self.layout.shared_prev.as_deref().map(block_ids)
    }

    /// Copy of this model whose previous-frame encoder has its own
    /// parameters, initialized equal to the shared ones.
    pub fn untied(&self) -> Model<T> {
        let mut m = self.clone();
        if m.layout.shared_prev.is_some() || m.layout.shared.is_empty() {
            return m;
        }
        let mut dup = |c: ConvRef| -> ConvRef {
            let copy = |ps: &mut ParamSet<T>, id: ParamId| {
                let src = ps.get(id).clone();
                let name = src.name.replacen('.', "_prev.", 1);
                ps.push(name, src.tensor)
            };
            ConvRef {
                weight: copy(&mut m.params, c.weight),
                bias: copy(&mut m.params, c.bias),
                pad: c.pad,
                norm: c.norm.map(|(gm, bt)| (copy(&mut m.params, gm), copy(&mut m.params, bt))),
            }
        };
        let prev = self
            .layout
            .shared
            .iter()
            .map(|b| Block {
                first: dup(b.first),
                second: dup(b.second),
            })
            .collect();
        m.layout.shared_prev = Some(prev);
        m
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, c: ConvRef) -> Result<Var> {
        let w = g.param(&self.params, c.weight);
        let b = g.param(&self.params, c.bias);
        let y = g.conv2d(x, w, Some(b), 1, c.pad)?;
        match c.norm {
            Some((gamma, beta)) => {
                let gm = g.param(&self.params, gamma);
                let bt = g.param(&self.params, beta);
                g.group_norm(y, gm, bt, self.cfg.norm_groups, T::lit(1e-5))
            }
            None => Ok(y),
        }
    }

    fn block(&self, g: &mut Graph<T>, x: Var, b: &Block) -> Result<Var> {
        let y = self.conv(g, x, b.first)?;
        let y = g.relu(y);
        let y = self.conv(g, y, b.second)?;
        Ok(g.relu(y))
    }

    /// Runs the network on `frames`, ordered oldest to newest; the last
    /// frame is the one segmented and depth-mapped. Each frame is
    /// `N x 3 x H x W`.
    pub fn forward(&self, g: &mut Graph<T>, frames: &[Tensor<T>]) -> Result<ModelOutput> {
        let arity = self.cfg.variant.arity();
        if frames.len() != arity {
            return Err(Error::ArityMismatch {
                expected: arity,
                got: frames.len(),
            });
        }
        let shape = frames[0].shape();
        let (_, c, h, w) = frames[0].dims4()?;
        if c != 3 {
            return Err(Error::BadShape {
                op: "forward",
                shape: shape.to_vec(),
                reason: "frames must have 3 channels",
            });
        }
        for f in &frames[1..] {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: shape.to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
        }
        self.cfg.check_size(h, w)?;

        let depth = self.cfg.encoder_depth;
        let mut skips: Vec<Var> = Vec::with_capacity(depth);
        let (mut x, first_trunk) = match self.cfg.variant.shared_levels() {
            Some(p) => {
                let mut cur = g.constant(frames[arity - 1].clone());
                let mut prev = g.constant(frames[arity - 2].clone());
                let prev_blocks = self.layout.shared_prev.as_ref().unwrap_or(&self.layout.shared);
                for l in 0..p {
                    if l > 0 {
                        cur = g.max_pool2d(cur)?;
                        prev = g.max_pool2d(prev)?;
                    }
                    cur = self.block(g, cur, &self.layout.shared[l])?;
                    prev = self.block(g, prev, &prev_blocks[l])?;
                    skips.push(cur);
                }
                if p > 0 {
                    cur = g.max_pool2d(cur)?;
                    prev = g.max_pool2d(prev)?;
                }
                let cost = g.correlate(cur, prev, &self.cfg.corr)?;
                (g.concat_channels(cur, cost)?, p)
            }
            None => {
                // current frame first, then older frames
                let mut x = g.constant(frames[arity - 1].clone());
                for f in frames[..arity - 1].iter().rev() {
                    let v = g.constant(f.clone());
                    x = g.concat_channels(x, v)?;
                }
                (x, 0)
            }
        };
        for (i, l) in (first_trunk..depth).enumerate() {
            if l > first_trunk {
                x = g.max_pool2d(x)?;
            }
            x = self.block(g, x, &self.layout.trunk[i])?;
            skips.push(x);
        }
        for l in (0..depth - 1).rev() {
            x = g.upsample_nearest2(x)?;
            if self.cfg.variant.has_skips() {
                x = g.concat_channels(x, skips[l])?;
            }
            x = self.block(g, x, &self.layout.decoder[l])?;
        }
        let wire_logits = self.conv(g, x, self.layout.wire_head)?;
        let raw_depth = self.conv(g, x, self.layout.depth_head)?;
        let sp = g.softplus(raw_depth);
        let depth = g.scale(sp, T::lit(self.cfg.depth_scale as f64));
        Ok(ModelOutput { wire_logits, depth })
    }

    /// Forward pass returning `(wire probability, depth)` tensors.
    pub fn predict(&self, frames: &[Tensor<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, frames)?;
        let prob = g.sigmoid(out.wire_logits);
        Ok((g.value(prob).clone(), g.value(out.depth).clone()))
    }
}

fn block_ids(blocks: &[Block]) -> Vec<ParamId> {
    blocks
        .iter()
        .flat_map(|b| [b.first, b.second])
        .flat_map(|c| [Some(c.weight), Some(c.bias), c.norm.map(|n| n.0), c.norm.map(|n| n.1)])
        .flatten()
        .collect()
}
