use super::conv::{self, Window};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, win: Window },
    ConvT2d { x: Var, w: Var, b: Option<Var>, win: Window, cin: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Scale(Var, T),
    Shift(Var),
    Binary { a: Var, b: Var, kind: Binary },
    Concat(Vec<Var>),
    Mean { x: Var, count: usize },
    Reshape(Var),
    BackDiff { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking the tape backwards is a
/// valid topological order for gradient propagation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape4(s: &[usize]) -> Result<[usize; 4]> {
    if s.len() > 4 {
        return Err(Error::Shape(format!("rank {} exceeds 4", s.len())));
    }
    let mut out = [1; 4];
    out[4 - s.len()..].copy_from_slice(s);
    Ok(out)
}

/// Strides of a contiguous tensor of shape `s` read in the index space of
/// `full`; broadcast axes get stride 0.
fn bstrides(s: [usize; 4], full: [usize; 4]) -> [usize; 4] {
    let mut st = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        st[d] = if s[d] == 1 && full[d] != 1 { 0 } else { acc };
        acc *= s[d];
    }
    st
}

/// Visits every index of `full` (row-major) with the matching offsets into
/// two broadcast operands.
#[inline]
fn for_each_pair(full: [usize; 4], sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for i0 in 0..full[0] {
        for i1 in 0..full[1] {
            for i2 in 0..full[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..full[3] {
                    f(o, base_a + i3 * sa[3], base_b + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Forward-only nodes drop their saved state.
        let op = if rg { op } else { Op::Leaf };
        self.push_node(value, op, rg)
    }

    fn dims4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4().map_err(|_| Error::Shape(format!("{what}: expected rank 4, got {:?}", self.shape(v))))
    }

    /// Stride-1 2D convolution; `w` is `cout x cin x kh x kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: (usize, usize), dilation: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4(x, "conv2d input")?;
        let (cout, cin, kh, kw) = self.dims4(w, "conv2d weight")?;
        if cin != c {
            return Err(Error::Shape(format!("conv2d: input has {c} channels, weight expects {cin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!("conv2d: bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let win = Window::new(c, h, wd, kh, kw, 1, pad, dilation.max(1))
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {kh}x{kw} does not fit {h}x{wd}")))?;
        let out = conv::conv_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
            &win,
        );
        let value = Tensor::from_vec([n, cout, win.out_h, win.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, win }, &inputs))
    }

    /// Transposed convolution; `w` is `cin x cout x k x k`. Output size is
    /// `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4(x, "conv_transpose2d input")?;
        let (cin, cout, kh, kw) = self.dims4(w, "conv_transpose2d weight")?;
        if cin != c {
            return Err(Error::Shape(format!("conv_transpose2d: input has {c} channels, weight expects {cin}")));
        }
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Shape("conv_transpose2d: padding exceeds output".into()));
        };
        let win = Window::new(cout, oh, ow, kh, kw, stride, (pad, pad), 1)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::Shape("conv_transpose2d: inconsistent geometry".into()))?;
        let out = conv::conv_transpose_forward(
            self.value(x).data(),
            n,
            cin,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &win,
        );
        let value = Tensor::from_vec([n, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvT2d { x, w, b, win, cin }, &inputs))
    }

    /// Non-overlapping `k x k` max pooling (trailing rows/columns dropped).
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "max_pool2d")?;
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::from_vec([n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Per-channel normalization of an `N x C x H x W` tensor followed by an
    /// affine map. With `running = None` the batch statistics are used and
    /// returned as `(mean, unbiased variance)`; otherwise the given
    /// `(mean, variance)` are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f32], &[f32])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.dims4(x, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("batch_norm: affine params must be [{c}]")));
        }
        let plane = h * w;
        let m = n * plane;
        let src = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match running {
            Some((rm, rv)) => {
                for ch in 0..c {
                    mean[ch] = rm[ch] as f64;
                    var[ch] = rv[ch] as f64;
                }
            }
            None => {
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        s += src[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0f64;
                    for b in 0..n {
                        q += src[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m as f64;
                }
            }
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let mu = T::of(mean[ch]);
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in range {
                    let xh = (src[i] - mu) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let unbiased: Vec<f64> = if m > 1 { var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect() } else { var.clone() };
        let value = Tensor::from_vec([n, c, h, w], out)?;
        let batch_stats = running.is_none();
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta]);
        Ok((v, mean, unbiased))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn shift(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v + s, Op::Shift(x))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let sa = shape4(self.shape(a))?;
        let sb = shape4(self.shape(b))?;
        let mut full = [0; 4];
        for d in 0..4 {
            full[d] = match (sa[d], sb[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::Shape(format!(
                        "cannot broadcast {:?} with {:?}",
                        self.shape(a),
                        self.shape(b)
                    )))
                }
            };
        }
        let out_shape: Vec<usize> = if self.shape(a).len() >= self.shape(b).len() {
            let r = self.shape(a).len();
            full[4 - r..].to_vec()
        } else {
            let r = self.shape(b).len();
            full[4 - r..].to_vec()
        };
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); full.iter().product()];
            for_each_pair(full, bstrides(sa, full), bstrides(sb, full), |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Binary { a, b, kind }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Concatenation along axis 1 of rank-4 tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Shape("concat of zero tensors".into()));
        };
        let (n, _, h, w) = self.dims4(first, "concat")?;
        let mut total = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.dims4(v, "concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", self.shape(v), self.shape(first))));
            }
            total += vc;
        }
        let mut out = Vec::with_capacity(n * total * h * w);
        for b in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * h * w..(b + 1) * c * h * w]);
            }
        }
        let value = Tensor::from_vec([n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// Mean over the given axes of a rank-4 tensor, keeping them as size 1.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = shape4(self.shape(x))?;
        if self.shape(x).len() != 4 || axes.iter().any(|&a| a >= 4) {
            return Err(Error::Shape(format!("mean_axes {axes:?} on {:?}", self.shape(x))));
        }
        let mut os = s;
        for &a in axes {
            os[a] = 1;
        }
        let count: usize = axes.iter().map(|&a| s[a]).product::<usize>().max(1);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); os.iter().product()];
        for_each_pair(s, bstrides(s, s), bstrides(os, s), |_, ix, io| out[io] += src[ix]);
        let inv = T::of(1.0 / count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_vec(os.to_vec(), out)?;
        Ok(self.push(value, Op::Mean { x, count }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Backward differences along `axis` (2 = rows, 3 = columns) evaluated at
    /// positions `i >= 1, j >= 1`; output is `N x C x (H-1) x (W-1)`.
    pub fn backward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "backward_diff")?;
        if h < 2 || w < 2 || !(axis == 2 || axis == 3) {
            return Err(Error::Shape(format!("backward_diff: axis {axis} on {h}x{w}")));
        }
        let src = self.value(x).data();
        let step = if axis == 2 { w } else { 1 };
        let mut out = Vec::with_capacity(n * c * (h - 1) * (w - 1));
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 1..h {
                for j in 1..w {
                    let idx = base + i * w + j;
                    out.push(src[idx] - src[idx - step]);
                }
            }
        }
        let value = Tensor::from_vec([n, c, h - 1, w - 1], out)?;
        Ok(self.push(value, Op::BackDiff { x, axis }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Reverse-mode gradients of the single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!("backward root must be a scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.numel()]))
    }

    fn put(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
        if let Some(g) = g {
            grads[v.0] = Some(g);
        }
    }

    /// Accumulates `f(i)` into every element of `v`'s gradient.
    fn acc_map(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(mut g) = self.take_slot(grads, v) {
            g.iter_mut().enumerate().for_each(|(i, d)| *d += f(i));
            grads[v.0] = Some(g);
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, win } => {
                let batch = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let mut dx = self.take_slot(grads, *x);
                let mut dw = self.take_slot(grads, *w);
                let mut db = b.and_then(|b| self.take_slot(grads, b));
                conv::conv_backward(
                    self.value(*x).data(),
                    batch,
                    self.value(*w).data(),
                    cout,
                    win,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                Self::put(grads, *x, dx);
                Self::put(grads, *w, dw);
                if let Some(b) = b {
                    Self::put(grads, *b, db);
                }
            }
            Op::ConvT2d { x, w, b, win, cin } => {
                let batch = self.shape(*x)[0];
                let mut dx = self.take_slot(grads, *x);
                let mut dw = self.take_slot(grads, *w);
                let mut db = b.and_then(|b| self.take_slot(grads, b));
                conv::conv_transpose_backward(
                    self.value(*x).data(),
                    batch,
                    *cin,
                    self.value(*w).data(),
                    win,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                Self::put(grads, *x, dx);
                Self::put(grads, *w, dw);
                if let Some(b) = b {
                    Self::put(grads, *b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(mut dx) = self.take_slot(grads, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src as usize] += gv;
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank checked at construction");
                let plane = h * w;
                let m = T::of((n * plane) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for k in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            sum_dy[ch] += g[k];
                            sum_dy_xhat[ch] += g[k] * xhat[k];
                        }
                    }
                }
                let gam = self.value(*gamma).data();
                if let Some(mut dx) = self.take_slot(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for k in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                                dx[k] += if *batch_stats {
                                    scale * (g[k] - (sum_dy[ch] + xhat[k] * sum_dy_xhat[ch]) / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    grads[x.0] = Some(dx);
                }
                self.acc_map(grads, *gamma, |ch| sum_dy_xhat[ch]);
                self.acc_map(grads, *beta, |ch| sum_dy[ch]);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, |k| if xv[k] > T::zero() { g[k] } else { T::zero() });
            }
            Op::Sigmoid(x) => self.acc_map(grads, *x, |k| g[k] * out[k] * (T::one() - out[k])),
            Op::Tanh(x) => self.acc_map(grads, *x, |k| g[k] * (T::one() - out[k] * out[k])),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, |k| g[k] * T::of(2.0) * xv[k]);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, |k| {
                    if xv[k] > T::zero() {
                        g[k]
                    } else if xv[k] < T::zero() {
                        -g[k]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Scale(x, s) => self.acc_map(grads, *x, |k| g[k] * *s),
            Op::Shift(x) | Op::Reshape(x) => self.acc_map(grads, *x, |k| g[k]),
            Op::Binary { a, b, kind } => self.binary_backward(*a, *b, *kind, g, grads),
            Op::Concat(xs) => {
                let (n, total, h, w) = self.nodes[i].value.dims4().expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if let Some(mut dv) = self.take_slot(grads, v) {
                        for b in 0..n {
                            let src = &g[(b * total + offset) * plane..(b * total + offset + c) * plane];
                            for (d, &s) in dv[b * c * plane..(b + 1) * c * plane].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        grads[v.0] = Some(dv);
                    }
                    offset += c;
                }
            }
            Op::Mean { x, count } => {
                let s = shape4(self.shape(*x)).expect("rank checked");
                let os = shape4(self.nodes[i].value.shape()).expect("rank checked");
                let inv = T::of(1.0 / *count as f64);
                if let Some(mut dx) = self.take_slot(grads, *x) {
                    for_each_pair(s, bstrides(s, s), bstrides(os, s), |_, ix, io| dx[ix] += g[io] * inv);
                    grads[x.0] = Some(dx);
                }
            }
            Op::BackDiff { x, axis } => {
                if let Some(mut dx) = self.take_slot(grads, *x) {
                    let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                    let step = if *axis == 2 { w } else { 1 };
                    let mut k = 0;
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for r in 1..h {
                            for col in 1..w {
                                let idx = base + r * w + col;
                                dx[idx] += g[k];
                                dx[idx - step] -= g[k];
                                k += 1;
                            }
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::SumAll(x) => self.acc_map(grads, *x, |_| g[0]),
            Op::MeanAll(x) => {
                let inv = T::of(1.0 / self.value(*x).numel() as f64);
                self.acc_map(grads, *x, |_| g[0] * inv);
            }
        }
    }

    fn binary_backward(&self, a: Var, b: Var, kind: Binary, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let sa = shape4(self.shape(a)).expect("rank checked");
        let sb = shape4(self.shape(b)).expect("rank checked");
        let mut full = [0; 4];
        for d in 0..4 {
            full[d] = sa[d].max(sb[d]);
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (sta, stb) = (bstrides(sa, full), bstrides(sb, full));
        if let Some(mut da) = self.take_slot(grads, a) {
            for_each_pair(full, sta, stb, |o, ia, ib| {
                da[ia] += match kind {
                    Binary::Add | Binary::Sub => g[o],
                    Binary::Mul => g[o] * vb[ib],
                    Binary::Div => g[o] / vb[ib],
                }
            });
            grads[a.0] = Some(da);
        }
        if let Some(mut db) = self.take_slot(grads, b) {
            for_each_pair(full, sta, stb, |o, ia, ib| {
                db[ib] += match kind {
                    Binary::Add => g[o],
                    Binary::Sub => -g[o],
                    Binary::Mul => g[o] * va[ia],
                    Binary::Div => -g[o] * va[ia] / (vb[ib] * vb[ib]),
                }
            });
            grads[b.0] = Some(db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    /// Compares the analytic gradient of `f` w.r.t. each input against
    /// central finite differences.
    fn check_grad(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = f(&mut g, &vars);
        let grads = g.backward(root).unwrap();
        let h = 1e-6;
        for (idx, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).unwrap().to_vec();
            for k in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut gg = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, tt)| {
                            let mut tt = tt.clone();
                            if j == idx {
                                tt.data_mut()[k] += delta;
                            }
                            gg.leaf(tt)
                        })
                        .collect();
                    let r = f(&mut gg, &vs);
                    gg.scalar(r)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let tol = 1e-6 * (1.0 + numeric.abs());
                assert!(
                    (numeric - analytic[k]).abs() < tol,
                    "input {idx} elem {k}: numeric {numeric} analytic {}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let x = rand_tensor(&[2, 3, 5, 4], 1);
        let w = rand_tensor(&[2, 3, 3, 3], 2);
        let b = rand_tensor(&[2], 3);
        check_grad(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), (2, 2), 2).unwrap();
            let y = g.square(y);
            g.mean_all(y)
        });
    }

    #[test]
    fn conv_transpose_gradients() {
        let x = rand_tensor(&[2, 3, 3, 3], 4);
        let w = rand_tensor(&[3, 2, 4, 4], 5);
        let b = rand_tensor(&[2], 6);
        check_grad(&[x, w, b], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            assert_eq!(g.shape(y), [2, 2, 6, 6]);
            let y = g.square(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn batch_norm_and_pool_gradients() {
        let x = rand_tensor(&[3, 2, 4, 4], 7);
        let gamma = rand_tensor(&[2], 8);
        let beta = rand_tensor(&[2], 9);
        let wts = rand_tensor(&[3, 2, 2, 2], 10);
        check_grad(&[x, gamma, beta], move |g, v| {
            let (y, _, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, None).unwrap();
            let p = g.max_pool2d(y, 2).unwrap();
            let c = g.constant(wts.clone());
            let p = g.mul(p, c).unwrap();
            g.sum_all(p)
        });
    }

    #[test]
    fn broadcast_and_reduction_gradients() {
        let x = rand_tensor(&[2, 3, 4, 5], 11);
        let cw = rand_tensor(&[2, 3, 1, 1], 12);
        let sw = rand_tensor(&[2, 1, 4, 5], 13);
        check_grad(&[x, cw, sw], |g, v| {
            let a = g.mul(v[0], v[1]).unwrap();
            let s = g.sigmoid(v[2]);
            let s2 = g.shift(s, 2.0);
            let b = g.div(a, s2).unwrap();
            let c = g.mul(b, s).unwrap();
            let m = g.mean_axes(c, &[1]).unwrap();
            let m2 = g.mean_axes(v[0], &[2, 3]).unwrap();
            let t = g.tanh(m2);
            let q = g.sub(c, t).unwrap();
            let cat = g.concat_channels(&[q, m]).unwrap();
            let d = g.backward_diff(cat, 3).unwrap();
            let d = g.abs(d);
            g.mean_all(d)
        });
    }

    #[test]
    fn division_gradient_both_sides() {
        let a = rand_tensor(&[1, 2, 3, 3], 14);
        let b = rand_tensor(&[1, 2, 3, 3], 15).map(|v| v.abs() + 0.5);
        check_grad(&[a, b], |g, v| {
            let q = g.div(v[0], v[1]).unwrap();
            let q = g.shift(q, 0.3);
            let q = g.scale(q, 1.7);
            let q = g.square(q);
            let r = g.reshape(q, &[2, 9]).unwrap();
            g.sum_all(r)
        });
    }

    #[test]
    fn constants_do_not_track() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let y = g.relu(c);
        let s = g.sum_all(y);
        assert!(!g.requires_grad(s));
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
    }
}
