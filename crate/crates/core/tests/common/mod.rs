//! Independent loop-based reference implementations used by the
//! integration tests. None of these call into the library's kernels.

#![allow(dead_code)]

pub mod checks;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Row-major NCHW index.
pub fn at(shape: [usize; 4], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

pub fn intensity(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]) * (p[i] - g[i]);
    }
    s / p.len() as f64
}

/// `| |g[y,x]-g[y-1,x]| - |p[y,x]-p[y-1,x]| | + (same along x)`, averaged
/// over `y >= 1, x >= 1`.
pub fn gradient(p: &[f64], g: &[f64], shape: [usize; 4]) -> f64 {
    let [b, c, h, w] = shape;
    let mut s = 0.0;
    for n in 0..b {
        for ch in 0..c {
            for y in 1..h {
                for x in 1..w {
                    let i = at(shape, n, ch, y, x);
                    let up = at(shape, n, ch, y - 1, x);
                    let left = at(shape, n, ch, y, x - 1);
                    s += ((g[i] - g[up]).abs() - (p[i] - p[up]).abs()).abs();
                    s += ((g[i] - g[left]).abs() - (p[i] - p[left]).abs()).abs();
                }
            }
        }
    }
    s / (b * c * (h - 1) * (w - 1)) as f64
}

pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Mean SSIM over every valid window position of every channel map, with a
/// full 2D Gaussian window.
pub fn ssim(a: &[f64], b: &[f64], shape: [usize; 4], size: usize, sigma: f64, c1: f64, c2: f64) -> f64 {
    let [bn, c, h, w] = shape;
    let t = gaussian_taps(size, sigma);
    let mut total = 0.0;
    let mut count = 0;
    for n in 0..bn {
        for ch in 0..c {
            for y0 in 0..=h - size {
                for x0 in 0..=w - size {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..size {
                        for dx in 0..size {
                            let wt = t[dy] * t[dx];
                            let i = at(shape, n, ch, y0 + dy, x0 + dx);
                            ma += wt * a[i];
                            mb += wt * b[i];
                            saa += wt * a[i] * a[i];
                            sbb += wt * b[i] * b[i];
                            sab += wt * a[i] * b[i];
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

/// Channel attention: per-channel mean, zero-padded cross-correlation
/// across channels with `kernel`, logistic, then rescaling of `x`.
/// Returns `(output, per-(n,c) map)`.
pub fn channel_attention(x: &[f64], shape: [usize; 4], kernel: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = shape;
    let k = kernel.len();
    let half = (k / 2) as isize;
    let mut map = vec![0.0; b * c];
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        let mut pooled = vec![0.0; c];
        for (ch, p) in pooled.iter_mut().enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    *p += x[at(shape, n, ch, y, xx)];
                }
            }
            *p /= (h * w) as f64;
        }
        for ch in 0..c {
            let mut acc = 0.0;
            for (j, &kw) in kernel.iter().enumerate() {
                let src = ch as isize + j as isize - half;
                if src >= 0 && (src as usize) < c {
                    acc += kw * pooled[src as usize];
                }
            }
            let m = 1.0 / (1.0 + (-acc).exp());
            map[n * c + ch] = m;
            for y in 0..h {
                for xx in 0..w {
                    let i = at(shape, n, ch, y, xx);
                    out[i] = x[i] * m;
                }
            }
        }
    }
    (out, map)
}

/// Largest mean over non-overlapping `k x k` patches (clamped to the map).
pub fn max_patch_mean(e: &[f64], h: usize, w: usize, k: usize) -> f64 {
    let (kh, kw) = (k.min(h), k.min(w));
    let mut best = f64::NEG_INFINITY;
    for py in 0..h / kh {
        for px in 0..w / kw {
            let mut s = 0.0;
            for y in py * kh..(py + 1) * kh {
                for x in px * kw..(px + 1) * kw {
                    s += e[y * w + x];
                }
            }
            best = best.max(s / (kh * kw) as f64);
        }
    }
    best
}

pub fn pyramid_psnr(e: &[f64], h: usize, w: usize, windows: &[usize], eps: f64) -> f64 {
    let v: f64 = windows.iter().map(|&k| max_patch_mean(e, h, w, k)).sum();
    10.0 * (1.0 / v.max(eps)).log10()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + step;
            let up = f(&xp);
            xp[i] = x[i] - step;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
