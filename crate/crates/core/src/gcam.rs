//! Gated context aggregation on the skip connections.
//!
//! Each unit takes the encoder feature `F_e` and the upsampled decoder feature
//! `F_d` of the same scale and applies, in order:
//!
//! 1. context aggregation: five parallel branches (1x1, 3x3, 5x5 and 3x3
//!    dilated at two rates) over `F_e + F_d`, concatenated and fused back to
//!    `C` channels by a 1x1 convolution;
//! 2. gated attention: channel attention (global pooling + 1D convolution
//!    across channels) and spatial attention (channel pooling + 2D
//!    convolution), each producing a sigmoid map that rescales the input; a
//!    1x1 gate over `[F_c, F_s]` then weights `F_c + F_s`.
//!
//! The context aggregation has no residual path from its input. Attention
//! kernel sizes adapt to the channel count and to the spatial resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionVars, Conv2d, Init, Session};
use crate::tensor::{Real, Tensor, Var};

/// `floor(x)`, bumped to the next odd integer when even.
pub fn odd_floor(x: f64) -> usize {
    let f = x.floor().max(0.0) as usize;
    if f % 2 == 0 {
        f + 1
    } else {
        f
    }
}

/// 1D kernel size of the channel attention for `channels` channels.
pub fn eca_kernel_size(channels: usize) -> Result<usize> {
    eca_kernel_size_with(channels, 1.0, 2.0)
}

pub fn eca_kernel_size_with(channels: usize, b: f64, gamma: f64) -> Result<usize> {
    if channels < 1 {
        return Err(Error::Config("channel attention needs at least one channel".into()));
    }
    Ok(odd_floor(((channels as f64).log2() + b) / gamma))
}

/// Square kernel size of the spatial attention for an `h x w` feature map.
pub fn esa_kernel_size(h: usize, w: usize) -> usize {
    esa_kernel_size_with(h, w, 1.0, 2.0)
}

pub fn esa_kernel_size_with(h: usize, w: usize, b: f64, gamma: f64) -> usize {
    let hw = (h.max(1) * w.max(1)) as f64;
    odd_floor((hw.log2() + b) / gamma).max(3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcamConfig {
    pub eca_b: f64,
    pub eca_gamma: f64,
    /// Branch width is `round(C / cfa_reduction)` (at least 1).
    pub cfa_reduction: usize,
    pub dilation_rates: [usize; 2],
    /// Bias on the 1D/2D attention convolutions.
    pub attention_bias: bool,
}

impl Default for GcamConfig {
    fn default() -> Self {
        Self { eca_b: 1.0, eca_gamma: 2.0, cfa_reduction: 6, dilation_rates: [3, 5], attention_bias: false }
    }
}

impl GcamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cfa_reduction < 1 {
            return Err(Error::Config("cfa_reduction must be >= 1".into()));
        }
        if self.eca_gamma <= 0.0 {
            return Err(Error::Config("eca_gamma must be positive".into()));
        }
        if self.dilation_rates.iter().any(|&d| d < 1) {
            return Err(Error::Config("dilation rates must be >= 1".into()));
        }
        Ok(())
    }

    pub fn branch_width(&self, channels: usize) -> usize {
        ((channels as f64 / self.cfa_reduction as f64).round() as usize).max(1)
    }
}

/// Multi-kernel, multi-dilation context fusion over `F_e + F_d`.
#[derive(Clone, Debug)]
pub struct ContextAggregation {
    branches: Vec<Conv2d>,
    fuse: Conv2d,
}

impl ContextAggregation {
    pub fn new(init: &mut Init, name: &str, channels: usize, cfg: &GcamConfig) -> Self {
        let width = cfg.branch_width(channels);
        let [d1, d2] = cfg.dilation_rates;
        let specs = [(1, 1), (3, 1), (5, 1), (3, d1), (3, d2)];
        let branches = specs
            .iter()
            .enumerate()
            .map(|(i, &(k, d))| Conv2d::same(init, &format!("{name}.branch{i}"), channels, width, k, d, true))
            .collect();
        let fuse = Conv2d::same(init, &format!("{name}.fuse"), 5 * width, channels, 1, 1, true);
        Self { branches, fuse }
    }

    /// Context fusion of an already-summed input `X = F_e + F_d`.
    pub fn forward_sum<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let y = b.forward(s, x)?;
            outs.push(s.graph.relu(y));
        }
        let cat = s.graph.concat_channels(&outs)?;
        self.fuse.forward(s, cat)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, fe: Var, fd: Var) -> Result<Var> {
        check_same(s, fe, fd)?;
        let x = s.graph.add(fe, fd)?;
        self.forward_sum(s, x)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.branches.iter().map(|b| b.macs(h, w)).sum::<u64>() + self.fuse.macs(h, w)
    }
}

/// Channel attention: `F_c = X * sigmoid(conv1d_k(gap(X)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    conv: Conv2d,
    channels: usize,
    pub kernel: usize,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, cfg: &GcamConfig) -> Result<Self> {
        let k = eca_kernel_size_with(channels, cfg.eca_b, cfg.eca_gamma)?;
        // The 1D convolution runs over a 1 x C "image".
        let conv = Conv2d::new(init, &format!("{name}.conv"), 1, 1, (1, k), (0, k / 2), 1, cfg.attention_bias);
        Ok(Self { conv, channels, kernel: k })
    }

    /// Returns `(F_c, M_c)`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Var)> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!("channel attention for {} channels got {shape:?}", self.channels)));
        }
        let b = shape[0];
        let pooled = s.graph.mean_axes(x, &[2, 3])?;
        let row = s.graph.reshape(pooled, &[b, 1, 1, self.channels])?;
        let mixed = self.conv.forward(s, row)?;
        let col = s.graph.reshape(mixed, &[b, self.channels, 1, 1])?;
        let map = s.graph.sigmoid(col);
        Ok((s.graph.mul(x, map)?, map))
    }

    pub fn weight(&self) -> crate::nn::ParamId {
        self.conv.weight()
    }

    pub fn macs(&self) -> u64 {
        (self.kernel * self.channels) as u64
    }
}

/// Spatial attention: `F_s = X * sigmoid(conv2d_k(mean_c(X)))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    conv: Conv2d,
    pub kernel: usize,
}

impl SpatialAttention {
    pub fn new(init: &mut Init, name: &str, h: usize, w: usize, cfg: &GcamConfig) -> Self {
        let k = esa_kernel_size_with(h, w, cfg.eca_b, cfg.eca_gamma);
        let conv = Conv2d::same(init, &format!("{name}.conv"), 1, 1, k, 1, cfg.attention_bias);
        Self { conv, kernel: k }
    }

    /// Returns `(F_s, M_s)`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Var)> {
        let pooled = s.graph.mean_axes(x, &[1])?;
        let conv = self.conv.forward(s, pooled)?;
        let map = s.graph.sigmoid(conv);
        Ok((s.graph.mul(x, map)?, map))
    }

    pub fn weight(&self) -> crate::nn::ParamId {
        self.conv.weight()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}

/// Channel + spatial attention fused through a learned sigmoid gate.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    gate: Conv2d,
    channels: usize,
}

impl GatedAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, h: usize, w: usize, cfg: &GcamConfig) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(init, &format!("{name}.eca"), channels, cfg)?,
            spatial: SpatialAttention::new(init, &format!("{name}.esa"), h, w, cfg),
            gate: Conv2d::same(init, &format!("{name}.gate"), 2 * channels, channels, 1, 1, true),
            channels,
        })
    }

    /// `g = sigmoid(conv1x1([F_c, F_s]))`, `X_out = g * (F_c + F_s)`. Returns
    /// `(X_out, g)`.
    pub fn gate_fuse<T: Real>(&self, s: &mut Session<T>, fc: Var, fs: Var) -> Result<(Var, Var)> {
        check_same(s, fc, fs)?;
        let cat = s.graph.concat_channels(&[fc, fs])?;
        let logits = self.gate.forward(s, cat)?;
        let g = s.graph.sigmoid(logits);
        let sum = s.graph.add(fc, fs)?;
        Ok((s.graph.mul(g, sum)?, g))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var, level: usize) -> Result<Var> {
        let (fc, mc) = self.channel.forward(s, x)?;
        let (fs, ms) = self.spatial.forward(s, x)?;
        let (out, g) = self.gate_fuse(s, fc, fs)?;
        s.push_attention(AttentionVars { level, channel: mc, spatial: ms, gate: g });
        Ok(out)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.channel.macs() + self.spatial.macs(h, w) + self.gate.macs(h, w)
    }
}

/// One skip-connection unit; either stage may be disabled for ablation.
#[derive(Clone, Debug)]
pub struct Gcam {
    pub level: usize,
    pub cfa: Option<ContextAggregation>,
    pub ega: Option<GatedAttention>,
}

impl Gcam {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        level: usize,
        channels: usize,
        h: usize,
        w: usize,
        cfg: &GcamConfig,
        use_cfa: bool,
        use_ega: bool,
    ) -> Result<Self> {
        let name = format!("skip{level}");
        let cfa = use_cfa.then(|| ContextAggregation::new(init, &format!("{name}.cfa"), channels, cfg));
        let ega = if use_ega {
            Some(GatedAttention::new(init, &format!("{name}.ega"), channels, h, w, cfg)?)
        } else {
            None
        };
        Ok(Self { level, cfa, ega })
    }

    /// Fuses same-scale encoder and decoder features. With both stages
    /// disabled this is exactly `F_e + F_d`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, fe: Var, fd: Var) -> Result<Var> {
        check_same(s, fe, fd)?;
        let x = s.graph.add(fe, fd)?;
        let x = match &self.cfa {
            Some(cfa) => cfa.forward_sum(s, x)?,
            None => x,
        };
        match &self.ega {
            Some(ega) => ega.forward(s, x, self.level),
            None => Ok(x),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.cfa.as_ref().map_or(0, |c| c.macs(h, w)) + self.ega.as_ref().map_or(0, |e| e.macs(h, w))
    }
}

fn check_same<T: Real>(s: &Session<T>, a: Var, b: Var) -> Result<()> {
    if s.graph.shape(a) != s.graph.shape(b) {
        return Err(Error::Shape(format!(
            "skip fusion expects equal shapes, got {:?} and {:?}",
            s.graph.shape(a),
            s.graph.shape(b)
        )));
    }
    Ok(())
}

/// Attention maps of one skip unit, copied out of a graph for export.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub level: usize,
    /// `B x C x 1 x 1`
    pub channel: Tensor<f32>,
    /// `B x 1 x H x W`
    pub spatial: Tensor<f32>,
    /// `B x C x H x W`
    pub gate: Tensor<f32>,
}
