//! im2col-based convolution kernels.
//!
//! `Window` describes how a sliding kernel maps an image of `channels x height
//! x width` onto a grid of `out_h x out_w` positions. Standard convolution
//! gathers with `im2col`; transposed convolution scatters with its adjoint
//! `col2im`.

use super::{gemm, Mat, Real};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Returns `None` when the kernel does not fit the padded image.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: (usize, usize),
        dilation: usize,
    ) -> Option<Self> {
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        let padded_h = height + 2 * pad.0;
        let padded_w = width + 2 * pad.1;
        if span_h > padded_h || span_w > padded_w || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad_h: pad.0,
            pad_w: pad.1,
            dilation,
            out_h: (padded_h - span_h) / stride + 1,
            out_w: (padded_w - span_w) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Range of output columns `ox` whose source column `ox*stride + off` lies
    /// inside the image, where `off = kj*dilation - pad_w`.
    fn valid_cols(&self, off: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let w = self.width as isize;
        // first ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // last ox with ox*s + off <= w-1
        let hi = if w - 1 - off < 0 { -1 } else { (w - 1 - off) / s };
        let lo = lo.clamp(0, self.out_w as isize) as usize;
        let hi = (hi + 1).clamp(0, self.out_w as isize) as usize;
        (lo, hi.max(lo))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Gathers `img` into `cols` (`rows x positions`, row-major).
pub(crate) fn im2col<T: Real>(img: &[T], g: &Window, cols: &mut [T]) {
    let p = g.positions();
    debug_assert!(cols.len() >= g.rows() * p);
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let col_off = (kj * g.dilation) as isize - g.pad_w as isize;
                let (lo, hi) = g.valid_cols(col_off);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad_h as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = (lo as isize + col_off) as usize;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src[(ox as isize * g.stride as isize + col_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `img`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Window, img: &mut [T]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let col_off = (kj * g.dilation) as isize - g.pad_w as isize;
                let (lo, hi) = g.valid_cols(col_off);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let in_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if lo == hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = (lo as isize + col_off) as usize;
                        for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[(ox as isize * g.stride as isize + col_off) as usize] += in_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution. `w` is `cout x (cin*kh*kw)`; `x` holds `batch`
/// images of `g.image_len()`; returns `batch x cout x positions`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    batch: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &Window,
) -> Vec<T> {
    let (k, p) = (g.rows(), g.positions());
    let mut out = vec![T::zero(); batch * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..batch {
        let img = &x[n * g.image_len()..(n + 1) * g.image_len()];
        let rhs = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        let dst = &mut out[n * cout * p..(n + 1) * cout * p];
        gemm(T::one(), Mat::new(w, cout, k), Mat::new(rhs, k, p), T::zero(), dst);
        if let Some(b) = bias {
            for (co, row) in dst.chunks_exact_mut(p).enumerate() {
                let bv = b[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]; each requested buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    batch: usize,
    w: &[T],
    cout: usize,
    g: &Window,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, p) = (g.rows(), g.positions());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if g.is_pointwise() || dx.is_none() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..batch {
        let img = &x[n * g.image_len()..(n + 1) * g.image_len()];
        let dyn_ = &dy[n * cout * p..(n + 1) * cout * p];
        if let Some(dw) = dw.as_deref_mut() {
            let rhs = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut cols);
                &cols
            };
            // dW (cout x k) += dY (cout x p) * cols^T (p x k)
            gemm(T::one(), Mat::new(dyn_, cout, p), Mat::new(rhs, k, p).t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dimg = &mut dx[n * g.image_len()..(n + 1) * g.image_len()];
            let wt = Mat::new(w, cout, k).t();
            if g.is_pointwise() {
                gemm(T::one(), wt, Mat::new(dyn_, cout, p), T::one(), dimg);
            } else {
                gemm(T::one(), wt, Mat::new(dyn_, cout, p), T::zero(), &mut dcols);
                col2im(&dcols, g, dimg);
            }
        }
    }
    if let Some(db) = db {
        for n in 0..batch {
            for (co, row) in dy[n * cout * p..(n + 1) * cout * p].chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
}

/// Transposed convolution. `w` is `cin x (cout*kh*kw)`; `g` describes the
/// *output* image (cout channels), with `g.out_h x g.out_w` equal to the input
/// spatial size.
pub(crate) fn conv_transpose_forward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &Window,
) -> Vec<T> {
    let (k, p) = (g.rows(), g.positions());
    let mut out = vec![T::zero(); batch * g.image_len()];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..batch {
        let xin = &x[n * cin * p..(n + 1) * cin * p];
        // cols (k x p) = W^T (k x cin) * x (cin x p)
        gemm(T::one(), Mat::new(w, cin, k).t(), Mat::new(xin, cin, p), T::zero(), &mut cols);
        let dst = &mut out[n * g.image_len()..(n + 1) * g.image_len()];
        col2im(&cols, g, dst);
        if let Some(b) = bias {
            let plane = g.height * g.width;
            for (co, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                let bv = b[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    w: &[T],
    g: &Window,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, p) = (g.rows(), g.positions());
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..batch {
        let dyn_ = &dy[n * g.image_len()..(n + 1) * g.image_len()];
        im2col(dyn_, g, &mut dcols);
        if let Some(dx) = dx.as_deref_mut() {
            // dx (cin x p) += W (cin x k) * dcols (k x p)
            gemm(T::one(), Mat::new(w, cin, k), Mat::new(&dcols, k, p), T::one(), &mut dx[n * cin * p..(n + 1) * cin * p]);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xin = &x[n * cin * p..(n + 1) * cin * p];
            // dW (cin x k) += x (cin x p) * dcols^T (p x k)
            gemm(T::one(), Mat::new(xin, cin, p), Mat::new(&dcols, k, p).t(), T::one(), dw);
        }
    }
    if let Some(db) = db {
        let plane = g.height * g.width;
        for n in 0..batch {
            let dyn_ = &dy[n * g.image_len()..(n + 1) * g.image_len()];
            for (co, chunk) in dyn_.chunks_exact(plane).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(x: &[f64], c: usize, h: usize, wd: usize, w: &[f64], cout: usize, k: usize, pad: usize, dil: usize) -> Vec<f64> {
        let g = Window::new(c, h, wd, k, k, 1, (pad, pad), dil).unwrap();
        let mut out = vec![0.0; cout * g.positions()];
        for co in 0..cout {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy + ki * dil) as isize - pad as isize;
                                let ix = (ox + kj * dil) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[(ci * h + iy as usize) * wd + ix as usize]
                                        * w[((co * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[(co * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect()
    }

    #[test]
    fn conv_matches_naive_with_padding_and_dilation() {
        let cases = [(1, 0, 1, 7, 6), (3, 1, 1, 7, 6), (5, 2, 1, 7, 6), (3, 3, 3, 7, 6), (3, 5, 5, 7, 6), (3, 0, 1, 7, 6)];
        // tiny maps where dilated taps land entirely in the padding
        let tiny = [(3, 5, 5, 2, 2), (3, 3, 3, 1, 2), (5, 2, 1, 2, 3)];
        for &(k, pad, dil, h, w) in cases.iter().chain(&tiny) {
            let (c, cout) = (2, 3);
            let x = seq(c * h * w, 0.05);
            let wt = seq(cout * c * k * k, 0.03);
            let g = Window::new(c, h, w, k, k, 1, (pad, pad), dil).unwrap();
            let fast = conv_forward(&x, 1, &wt, cout, None, &g);
            let slow = naive_conv(&x, c, h, w, &wt, cout, k, pad, dil);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} pad={pad} dil={dil}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y
        let g = Window::new(2, 5, 6, 4, 4, 2, (1, 1), 1).unwrap();
        let x = seq(g.image_len(), 0.1);
        let y = seq(g.rows() * g.positions(), 0.07);
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let g = Window::new(3, 8, 8, 4, 4, 2, (1, 1), 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        let x = vec![1.0f64; 2 * 16];
        let w = vec![1.0f64; 2 * 3 * 16];
        let out = conv_transpose_forward(&x, 1, 2, &w, None, &g);
        assert_eq!(out.len(), 3 * 64);
        // interior output pixels receive 4 kernel taps from each of 2 input channels
        assert_eq!(out[3 * 8 + 3], 8.0);
    }
}
