//! The dual-horizon encoder-decoder predictor.
//!
//! `t` frames are stacked along channels and encoded over four levels
//! (three 2x2 max-pools). The decoder upsamples with 4x4 stride-2 transposed
//! convolutions; at each of the three scales the upsampled feature and the
//! encoder skip feature are fused by a [`Gcam`] unit and refined by a
//! convolutional block. Two independent 3x3 heads with `tanh` produce the
//! immediate (`t+1`) and forward (`t+sigma`) predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcam::{AttentionMaps, Gcam, GcamConfig};
use crate::nn::{Activation, BatchNorm2d, Conv2d, ConvTranspose2d, Init, Mode, ParamStore, Session};
use crate::tensor::{Real, Tensor, Var};

pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of input frames.
    pub t: usize,
    /// Forward prediction horizon.
    pub sigma: usize,
    /// Channels per frame.
    pub c_in: usize,
    /// Square input resolution; must be divisible by 8.
    pub frame_size: usize,
    pub channel_plan: Vec<usize>,
    /// Convolutions per encoder block, one entry per level.
    pub encoder_depths: Vec<usize>,
    /// Convolutions per decoder block, for levels 0, 1, 2.
    pub decoder_depths: Vec<usize>,
    pub activation: Activation,
    pub use_cfa: bool,
    pub use_ega: bool,
    pub gcam: GcamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t: 4,
            sigma: 4,
            c_in: 3,
            frame_size: 224,
            channel_plan: vec![32, 64, 128, 256],
            encoder_depths: vec![1, 1, 1, 2],
            decoder_depths: vec![1, 1, 1],
            activation: Activation::Relu,
            use_cfa: true,
            use_ega: true,
            gcam: GcamConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t < 1 || self.sigma < 1 {
            return fail(format!("t and sigma must be >= 1 (t={}, sigma={})", self.t, self.sigma));
        }
        if self.c_in < 1 {
            return fail("c_in must be >= 1".into());
        }
        if self.frame_size == 0 || self.frame_size % 8 != 0 {
            return fail(format!("frame_size {} is not a positive multiple of 8", self.frame_size));
        }
        if self.channel_plan.len() != LEVELS {
            return fail(format!("channel_plan needs {LEVELS} entries, got {}", self.channel_plan.len()));
        }
        if self.channel_plan[0] == 0 || self.channel_plan.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("channel_plan {:?} must be strictly increasing", self.channel_plan));
        }
        if self.encoder_depths.len() != LEVELS || self.encoder_depths.contains(&0) {
            return fail(format!("encoder_depths needs {LEVELS} entries >= 1"));
        }
        if self.decoder_depths.len() != LEVELS - 1 || self.decoder_depths.contains(&0) {
            return fail(format!("decoder_depths needs {} entries >= 1", LEVELS - 1));
        }
        self.gcam.validate()
    }

    pub fn input_channels(&self) -> usize {
        self.t * self.c_in
    }

    /// Side length of level `l` feature maps.
    pub fn level_size(&self, level: usize) -> usize {
        self.frame_size >> level
    }
}

/// `depth` x (3x3 conv -> batch norm -> activation).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    layers: Vec<(Conv2d, BatchNorm2d)>,
    activation: Activation,
}

impl ConvBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, depth: usize, activation: Activation) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let c = if i == 0 { cin } else { cout };
                (
                    Conv2d::same(init, &format!("{name}.conv{i}"), c, cout, 3, 1, false),
                    BatchNorm2d::new(init, &format!("{name}.bn{i}"), cout),
                )
            })
            .collect();
        Self { layers, activation }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, mut x: Var) -> Result<Var> {
        for (conv, bn) in &self.layers {
            let y = conv.forward(s, x)?;
            let y = bn.forward(s, y)?;
            x = self.activation.apply(&mut s.graph, y);
        }
        Ok(x)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.layers.iter().map(|(c, _)| c.macs(h, w)).sum()
    }
}

/// Immediate and forward predictions, each `B x c_in x H x W` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPair {
    pub immediate: Tensor<f32>,
    pub forward: Tensor<f32>,
}

/// Multiply-accumulate count of one forward pass; `flops = 2 * macs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub macs: u64,
    pub flops: u64,
}

impl Complexity {
    pub fn from_macs(macs: u64) -> Self {
        Self { macs, flops: 2 * macs }
    }
}

#[derive(Clone, Debug)]
pub struct Predictor {
    config: ModelConfig,
    store: ParamStore,
    encoder: Vec<ConvBlock>,
    upsample: Vec<ConvTranspose2d>,
    skips: Vec<Gcam>,
    decoder: Vec<ConvBlock>,
    head_immediate: Conv2d,
    head_forward: Conv2d,
}

impl Predictor {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let init = &mut Init::new(&mut store, seed);
        let plan = &config.channel_plan;
        let act = config.activation;

        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = config.input_channels();
        for l in 0..LEVELS {
            encoder.push(ConvBlock::new(init, &format!("enc{l}"), cin, plan[l], config.encoder_depths[l], act));
            cin = plan[l];
        }
        // Decoder parts are stored by level (0 = full resolution) but created
        // deepest first, matching the order they run in.
        let mut upsample = Vec::with_capacity(LEVELS - 1);
        let mut skips = Vec::with_capacity(LEVELS - 1);
        let mut decoder = Vec::with_capacity(LEVELS - 1);
        for l in (0..LEVELS - 1).rev() {
            let size = config.level_size(l);
            upsample.push(ConvTranspose2d::new(init, &format!("up{l}"), plan[l + 1], plan[l], 4, 2, 1, true));
            skips.push(Gcam::new(init, l, plan[l], size, size, &config.gcam, config.use_cfa, config.use_ega)?);
            decoder.push(ConvBlock::new(init, &format!("dec{l}"), plan[l], plan[l], config.decoder_depths[l], act));
        }
        upsample.reverse();
        skips.reverse();
        decoder.reverse();
        let head_immediate = Conv2d::same(init, "head_immediate", plan[0], config.c_in, 3, 1, true);
        let head_forward = Conv2d::same(init, "head_forward", plan[0], config.c_in, 3, 1, true);
        Ok(Self { config: config.clone(), store, encoder, upsample, skips, decoder, head_immediate, head_forward })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn skips(&self) -> &[Gcam] {
        &self.skips
    }

    /// Checks that `x` is `B x (t*c_in) x S x S` for the configured size.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = shape.len() == 4
            && shape[0] >= 1
            && shape[1] == c.input_channels()
            && shape[2] == c.frame_size
            && shape[3] == c.frame_size;
        if !ok {
            return Err(Error::Config(format!(
                "model expects B x {} x {} x {} input (t={}, c_in={}), got {shape:?}",
                c.input_channels(),
                c.frame_size,
                c.frame_size,
                c.t,
                c.c_in
            )));
        }
        Ok(())
    }

    /// Feature maps of all four levels, full resolution first.
    pub fn encode<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Vec<Var>> {
        self.check_input(s.graph.shape(x))?;
        let mut levels = Vec::with_capacity(LEVELS);
        let mut h = x;
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = s.graph.max_pool2d(h, 2)?;
            }
            h = block.forward(s, h)?;
            levels.push(h);
        }
        Ok(levels)
    }

    /// Decodes from the bottleneck back to a level-0 feature map.
    pub fn decode<T: Real>(&self, s: &mut Session<T>, levels: &[Var]) -> Result<Var> {
        if levels.len() != LEVELS {
            return Err(Error::Shape(format!("decode needs {LEVELS} levels, got {}", levels.len())));
        }
        let mut d = levels[LEVELS - 1];
        for l in (0..LEVELS - 1).rev() {
            let up = self.upsample[l].forward(s, d)?;
            let fused = self.skips[l].forward(s, levels[l], up)?;
            d = self.decoder[l].forward(s, fused)?;
        }
        Ok(d)
    }

    /// Graph-level forward pass returning `(immediate, forward)` predictions.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Var)> {
        let levels = self.encode(s, x)?;
        let d = self.decode(s, &levels)?;
        let hi = self.head_immediate.forward(s, d)?;
        let hf = self.head_forward.forward(s, d)?;
        Ok((s.graph.tanh(hi), s.graph.tanh(hf)))
    }

    /// Inference on a stacked batch `B x (t*c_in) x S x S`.
    pub fn predict(&self, inputs: Tensor<f32>) -> Result<PredictionPair> {
        let mut s = Session::<f32>::new(&self.store, Mode::Eval);
        let x = s.input(inputs);
        let (i, f) = self.forward(&mut s, x)?;
        Ok(PredictionPair { immediate: s.graph.value(i).clone(), forward: s.graph.value(f).clone() })
    }

    /// Inference that also returns the attention maps of every gated skip
    /// unit (empty when attention is disabled).
    pub fn predict_with_attention(&self, inputs: Tensor<f32>) -> Result<(PredictionPair, Vec<AttentionMaps>)> {
        let mut s = Session::<f32>::new(&self.store, Mode::Eval).record_attention();
        let x = s.input(inputs);
        let (i, f) = self.forward(&mut s, x)?;
        let maps = s
            .attention()
            .iter()
            .map(|a| AttentionMaps {
                level: a.level,
                channel: s.graph.value(a.channel).clone(),
                spatial: s.graph.value(a.spatial).clone(),
                gate: s.graph.value(a.gate).clone(),
            })
            .collect();
        Ok((PredictionPair { immediate: s.graph.value(i).clone(), forward: s.graph.value(f).clone() }, maps))
    }

    /// Analytic cost of one forward pass for a single window.
    pub fn complexity(&self) -> Complexity {
        let size = |l: usize| self.config.level_size(l);
        let mut macs = 0;
        for (l, b) in self.encoder.iter().enumerate() {
            macs += b.macs(size(l), size(l));
        }
        for l in 0..LEVELS - 1 {
            macs += self.upsample[l].macs(size(l + 1), size(l + 1));
            macs += self.skips[l].macs(size(l), size(l));
            macs += self.decoder[l].macs(size(l), size(l));
        }
        macs += self.head_immediate.macs(size(0), size(0)) + self.head_forward.macs(size(0), size(0));
        Complexity::from_macs(macs)
    }
}

/// Exact trainable-parameter count of the model described by `config`.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(Predictor::new(config, 0)?.num_params())
}

/// Analytic multiply-accumulate count at `config.frame_size`.
pub fn estimate_flops(config: &ModelConfig) -> Result<Complexity> {
    Ok(Predictor::new(config, 0)?.complexity())
}
