//! Parameter storage and the convolutional layers the predictor is built from.
//!
//! Layers only hold [`ParamId`]s; the weights live in a [`ParamStore`] that is
//! plain `f32` data (`Send + Sync`, serializable). A forward pass runs inside a
//! [`Session`], which lifts parameters into a [`Graph`] on first use.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Trainable parameters plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Param>,
}

impl ParamStore {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Param {
        &self.buffers[id.0]
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.data.len()).sum()
    }

    /// Folds batch statistics gathered during a training forward pass into
    /// the running estimates.
    pub fn apply_running_stats(&mut self, updates: &[RunningStatUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, &b) in self.buffers[u.mean.0].data.iter_mut().zip(&u.batch_mean) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
            for (r, &b) in self.buffers[u.var.0].data.iter_mut().zip(&u.batch_var) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
        }
    }

    /// Replaces all values from another store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        let same = |a: &[Param], b: &[Param]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.name == y.name && x.shape == y.shape)
        };
        if !same(&self.params, &other.params) || !same(&self.buffers, &other.buffers) {
            return Err(Error::Checkpoint("parameter layout does not match the model".into()));
        }
        self.params.clone_from(&other.params);
        self.buffers.clone_from(&other.buffers);
        Ok(())
    }

    pub(crate) fn from_parts(params: Vec<Param>, buffers: Vec<Param>) -> Self {
        Self { params, buffers }
    }
}

/// Deterministic parameter initializer.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect();
        self.store.params.push(Param { name, shape, data });
        ParamId(self.store.params.len() - 1)
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: f32) -> ParamId {
        let n = shape.iter().product();
        self.store.params.push(Param { name, shape, data: vec![value; n] });
        ParamId(self.store.params.len() - 1)
    }

    pub fn buffer(&mut self, name: String, shape: Vec<usize>, value: f32) -> BufferId {
        let n = shape.iter().product();
        self.store.buffers.push(Param { name, shape, data: vec![value; n] });
        BufferId(self.store.buffers.len() - 1)
    }
}

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    mean: BufferId,
    var: BufferId,
    momentum: f64,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, parameters tracked for gradients.
    Train,
    /// Running statistics, parameters treated as constants.
    Eval,
}

/// One forward (and optionally backward) pass over a parameter store.
pub struct Session<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
    stat_updates: Vec<RunningStatUpdate>,
    attention: Option<Vec<AttentionVars>>,
}

/// Graph handles of the attention maps produced by one gated skip unit.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub level: usize,
    pub channel: Var,
    pub spatial: Var,
    pub gate: Var,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            vars: vec![None; store.params.len()],
            mode,
            track_params: mode == Mode::Train,
            stat_updates: Vec::new(),
            attention: None,
        }
    }

    /// Evaluation-mode statistics while still differentiating the parameters.
    pub fn with_param_grads(mut self) -> Self {
        self.track_params = true;
        self
    }

    pub fn record_attention(mut self) -> Self {
        self.attention = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let t = Tensor::from_vec(p.shape.clone(), p.data.iter().map(|&x| T::of(x as f64)).collect())
            .expect("stored parameter is consistent");
        let v = if self.track_params { self.graph.leaf(t) } else { self.graph.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub(crate) fn push_attention(&mut self, a: AttentionVars) {
        if let Some(list) = self.attention.as_mut() {
            list.push(a);
        }
    }

    pub fn attention(&self) -> &[AttentionVars] {
        self.attention.as_deref().unwrap_or(&[])
    }

    pub fn take_stat_updates(&mut self) -> Vec<RunningStatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Parameter gradients (as `f32`) indexed like the store; `None` for
    /// parameters that did not take part in the pass.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Vec<f32>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)).map(|g| g.iter().map(|x| x.as_f64() as f32).collect()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
        }
    }
}

/// Stride-1 convolution with size-preserving (or explicit) padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: usize,
}

impl Conv2d {
    /// Square kernel, "same" padding for the given dilation.
    pub fn same(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, dilation: usize, bias: bool) -> Self {
        let pad = dilation * (k - 1) / 2;
        Self::new(init, name, cin, cout, (k, k), (pad, pad), dilation, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        padding: (usize, usize),
        dilation: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = init.uniform(format!("{name}.weight"), vec![cout, cin, kernel.0, kernel.1], bound);
        let bias = bias.then(|| init.uniform(format!("{name}.bias"), vec![cout], bound));
        Self { weight, bias, in_channels: cin, out_channels: cout, kernel, padding, dilation }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.padding, self.dilation)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |k: usize| self.dilation * (k - 1) + 1;
        (h + 2 * self.padding.0 + 1 - span(self.kernel.0), w + 2 * self.padding.1 + 1 - span(self.kernel.1))
    }

    /// Multiply-accumulate count for one `h x w` input image.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_size(h, w);
        (self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1 * oh * ow) as u64
    }
}

/// Upsampling transposed convolution (`k x k`, given stride and padding).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        // PyTorch computes fan-in from dim 1 of a transposed-conv weight.
        let bound = 1.0 / ((cout * kernel * kernel) as f64).sqrt();
        let weight = init.uniform(format!("{name}.weight"), vec![cin, cout, kernel, kernel], bound);
        let bias = bias.then(|| init.uniform(format!("{name}.bias"), vec![cout], bound));
        Self { weight, bias, in_channels: cin, out_channels: cout, kernel, stride, padding }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv_transpose2d(x, w, b, self.stride, self.padding)
    }

    /// MACs for an `h x w` input (every input pixel touches `k*k*cout` outputs).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.in_channels * self.out_channels * self.kernel * self.kernel * h * w) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), vec![channels], 1.0),
            beta: init.constant(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: init.buffer(format!("{name}.running_mean"), vec![channels], 0.0),
            running_var: init.buffer(format!("{name}.running_var"), vec![channels], 1.0),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, mean, var) = s.graph.batch_norm(x, gamma, beta, self.eps, None)?;
                s.stat_updates.push(RunningStatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    batch_mean: mean,
                    batch_var: var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store;
                let rm = &store.buffer(self.running_mean).data;
                let rv = &store.buffer(self.running_var).data;
                Ok(s.graph.batch_norm(x, gamma, beta, self.eps, Some((rm, rv)))?.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut a = ParamStore::default();
        let mut b = ParamStore::default();
        Conv2d::same(&mut Init::new(&mut a, 3), "c", 4, 8, 3, 1, true);
        Conv2d::same(&mut Init::new(&mut b, 3), "c", 4, 8, 3, 1, true);
        assert_eq!(a, b);
        let bound = 1.0 / 36f32.sqrt();
        assert!(a.params()[0].data.iter().all(|v| v.abs() <= bound));
        assert_eq!(a.num_params(), 4 * 8 * 9 + 8);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::default();
        let bn = BatchNorm2d::new(&mut Init::new(&mut store, 0), "bn", 1);
        let updates = {
            let mut s = Session::<f32>::new(&store, Mode::Train);
            let x = s.input(Tensor::from_vec([2, 1, 1, 2], vec![1.0, 3.0, 1.0, 3.0]).unwrap());
            bn.forward(&mut s, x).unwrap();
            s.take_stat_updates()
        };
        store.apply_running_stats(&updates);
        // batch mean 2, unbiased var 4/3
        assert!((store.buffers()[0].data[0] - 0.2).abs() < 1e-6);
        assert!((store.buffers()[1].data[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn conv_macs_formula() {
        let mut store = ParamStore::default();
        let conv = Conv2d::same(&mut Init::new(&mut store, 0), "c", 32, 32, 3, 1, true);
        assert_eq!(conv.macs(224, 224), 9 * 32 * 32 * 224 * 224);
        let d = Conv2d::same(&mut Init::new(&mut store, 0), "d", 8, 4, 3, 5, true);
        assert_eq!(d.output_size(20, 20), (20, 20));
    }
}
