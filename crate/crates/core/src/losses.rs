//! Training objectives.
//!
//! `l_pred = Int + Grad` against the immediate target, `l_fc = Int + Grad`
//! against the forward target and `l_con = 1 - SSIM` between the two
//! predictions. The total is the unit-weight sum of the enabled terms.
//!
//! Int and Grad are averaged over elements. Grad compares absolute
//! one-sided differences `|x[i,j] - x[i-1,j]|` and `|x[i,j] - x[i,j-1]|` at
//! every position where both exist (`i, j >= 1`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 2.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.sigma <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::Config(format!("invalid SSIM settings {self:?}")));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> =
            (0..self.window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Which loss terms take part in the total. Serialized by name (`full`,
/// `no_grad`, `no_fc_con`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LossMask {
    /// Gradient term inside both `l_pred` and `l_fc`.
    pub grad: bool,
    pub pred: bool,
    pub fc: bool,
    pub con: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl LossMask {
    pub const FULL: Self = Self { grad: true, pred: true, fc: true, con: true };

    /// The full objective plus the four single-term removals.
    pub fn presets() -> [Self; 5] {
        let f = Self::FULL;
        [
            f,
            Self { grad: false, ..f },
            Self { pred: false, ..f },
            Self { fc: false, ..f },
            Self { con: false, ..f },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pred || self.fc || self.con) {
            return Err(Error::Config("every loss term is masked out; nothing to optimize".into()));
        }
        Ok(())
    }
}

impl fmt::Display for LossMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::FULL {
            return f.write_str("full");
        }
        let dropped: Vec<&str> = [(self.grad, "grad"), (self.pred, "pred"), (self.fc, "fc"), (self.con, "con")]
            .iter()
            .filter(|(on, _)| !on)
            .map(|(_, n)| *n)
            .collect();
        write!(f, "no_{}", dropped.join("_"))
    }
}

impl From<LossMask> for String {
    fn from(m: LossMask) -> Self {
        m.to_string()
    }
}

impl TryFrom<String> for LossMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for LossMask {
    type Err = Error;

    /// `full`, or `no_` followed by `_`-separated terms (`no_grad`, `no_fc_con`).
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::FULL);
        }
        let Some(rest) = s.strip_prefix("no_") else {
            return Err(Error::Config(format!("unknown loss mask `{s}`")));
        };
        let mut m = Self::FULL;
        for term in rest.split('_') {
            match term {
                "grad" => m.grad = false,
                "pred" => m.pred = false,
                "fc" => m.fc = false,
                "con" => m.con = false,
                _ => return Err(Error::Config(format!("unknown loss term `{term}` in `{s}`"))),
            }
        }
        Ok(m)
    }
}

/// Scalar values of one loss evaluation. Masked-out terms are still
/// reported but do not enter `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_fc: f64,
    pub l_con: f64,
    pub total: f64,
    pub mask: LossMask,
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_pred: Var,
    pub l_fc: Var,
    pub l_con: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<T>, mask: LossMask) -> LossBreakdown {
        LossBreakdown {
            l_pred: g.scalar(self.l_pred).as_f64(),
            l_fc: g.scalar(self.l_fc).as_f64(),
            l_con: g.scalar(self.l_con).as_f64(),
            total: g.scalar(self.total).as_f64(),
            mask,
        }
    }
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("loss operands differ: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean squared difference.
pub fn intensity_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, pred, gt)?;
    let d = g.sub(pred, gt)?;
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// Mean absolute difference of absolute spatial gradients.
pub fn gradient_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, pred, gt)?;
    let shape = g.shape(pred);
    if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
        return Err(Error::Config(format!("gradient loss needs H, W >= 2, got {shape:?}")));
    }
    let mut parts = Vec::with_capacity(2);
    for axis in [2, 3] {
        let dp = g.backward_diff(pred, axis)?;
        let dg = g.backward_diff(gt, axis)?;
        let ap = g.abs(dp);
        let ag = g.abs(dg);
        let diff = g.sub(ag, ap)?;
        parts.push(g.abs(diff));
    }
    let sum = g.add(parts[0], parts[1])?;
    Ok(g.mean_all(sum))
}

/// Mean local SSIM with a separable Gaussian window (valid positions only).
pub fn ssim<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    cfg.validate()?;
    same_shape(g, a, b)?;
    let (n, c, h, w) = match g.shape(a)[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Shape(format!("SSIM expects rank-4 tensors, got {:?}", g.shape(a)))),
    };
    if cfg.window > h || cfg.window > w {
        return Err(Error::Config(format!("SSIM window {} is larger than the {h}x{w} image", cfg.window)));
    }
    let taps: Vec<T> = cfg.taps().into_iter().map(T::of).collect();
    let kv = g.constant(Tensor::from_vec([1, 1, cfg.window, 1], taps.clone())?);
    let kh = g.constant(Tensor::from_vec([1, 1, 1, cfg.window], taps)?);
    let blur = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let y = g.conv2d(x, kv, None, (0, 0), 1)?;
        g.conv2d(y, kh, None, (0, 0), 1)
    };
    let a = g.reshape(a, &[n * c, 1, h, w])?;
    let b = g.reshape(b, &[n * c, 1, h, w])?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let e_aa = blur(g, aa)?;
    let e_bb = blur(g, bb)?;
    let e_ab = blur(g, ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.shift(l_num, cfg.c1());
    let s_num = g.scale(cov, 2.0);
    let s_num = g.shift(s_num, cfg.c2());
    let num = g.mul(l_num, s_num)?;
    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.shift(l_den, cfg.c1());
    let s_den = g.add(var_a, var_b)?;
    let s_den = g.shift(s_den, cfg.c2());
    let den = g.mul(l_den, s_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean_all(map))
}

/// `1 - SSIM(a, b)`.
pub fn consistency_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = ssim(g, a, b, cfg)?;
    let neg = g.scale(s, -1.0);
    Ok(g.shift(neg, 1.0))
}

/// Int (+ Grad unless masked) against one target.
fn prediction_term<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, grad: bool) -> Result<Var> {
    let int = intensity_loss(g, pred, gt)?;
    if !grad {
        return Ok(int);
    }
    let gr = gradient_loss(g, pred, gt)?;
    g.add(int, gr)
}

/// Builds every loss term and the masked total.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pred_immediate: Var,
    pred_forward: Var,
    target_immediate: Var,
    target_forward: Var,
    mask: LossMask,
    ssim_cfg: &SsimConfig,
) -> Result<LossVars> {
    mask.validate()?;
    let l_pred = prediction_term(g, pred_immediate, target_immediate, mask.grad)?;
    let l_fc = prediction_term(g, pred_forward, target_forward, mask.grad)?;
    let l_con = consistency_loss(g, pred_immediate, pred_forward, ssim_cfg)?;
    let enabled: Vec<Var> =
        [(mask.pred, l_pred), (mask.fc, l_fc), (mask.con, l_con)].iter().filter(|(on, _)| *on).map(|(_, v)| *v).collect();
    let mut total = enabled[0];
    for &v in &enabled[1..] {
        total = g.add(total, v)?;
    }
    Ok(LossVars { l_pred, l_fc, l_con, total })
}

fn eval2<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&mut g, va, vb)?;
    Ok(g.scalar(out).as_f64())
}

/// Value-only [`intensity_loss`].
pub fn intensity<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    eval2(pred, gt, intensity_loss)
}

/// Value-only [`gradient_loss`].
pub fn gradient<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    eval2(pred, gt, gradient_loss)
}

/// Value-only [`ssim`].
pub fn ssim_index<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    eval2(a, b, |g, x, y| ssim(g, x, y, cfg))
}

/// Value-only [`total_loss`].
pub fn evaluate<T: Real>(
    pred_immediate: &Tensor<T>,
    pred_forward: &Tensor<T>,
    target_immediate: &Tensor<T>,
    target_forward: &Tensor<T>,
    mask: LossMask,
    ssim_cfg: &SsimConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let pi = g.constant(pred_immediate.clone());
    let pf = g.constant(pred_forward.clone());
    let ti = g.constant(target_immediate.clone());
    let tf = g.constant(target_forward.clone());
    Ok(total_loss(&mut g, pi, pf, ti, tf, mask, ssim_cfg)?.values(&g, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_vec([1, 1, h, w], (0..h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn intensity_of_uniform_offset() {
        let a = img(4, 5, |i| (i as f64 * 0.37).sin() * 0.5);
        let b = a.map(|v| v + 0.5);
        assert!((intensity(&b, &a).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(intensity(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn gradient_loss_ignores_constant_shift() {
        let a = img(6, 6, |i| (i as f64 * 0.91).cos());
        assert!(gradient(&a.map(|v| v - 0.3), &a).unwrap().abs() < 1e-12);
        assert!(matches!(gradient(&img(1, 4, |_| 0.0), &img(1, 4, |_| 0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn ssim_of_constants_is_closed_form() {
        let cfg = SsimConfig::default();
        let (c1, c2) = (0.4, -0.2);
        let got = ssim_index(&img(12, 13, |_| c1), &img(12, 13, |_| c2), &cfg).unwrap();
        let want = (2.0 * c1 * c2 + cfg.c1()) / (c1 * c1 + c2 * c2 + cfg.c1());
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let a = img(11, 11, |i| (i as f64).sin());
        assert!((ssim_index(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim_index(&img(10, 12, |_| 0.0), &img(10, 12, |_| 0.0), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn masks_select_terms() {
        let t = img(12, 12, |i| ((i * 13) % 7) as f64 / 7.0 - 0.5);
        let pi = t.map(|v| v * 0.9);
        let pf = t.map(|v| v * 0.5 + 0.1);
        let cfg = SsimConfig::default();
        let full = evaluate(&pi, &pf, &t, &t, LossMask::FULL, &cfg).unwrap();
        assert!((full.total - (full.l_pred + full.l_fc + full.l_con)).abs() < 1e-12);
        let no_fc = evaluate(&pi, &pf, &t, &t, "no_fc".parse().unwrap(), &cfg).unwrap();
        assert_eq!(no_fc.total, no_fc.l_pred + no_fc.l_con);
        let no_grad = evaluate(&pi, &pf, &t, &t, "no_grad".parse().unwrap(), &cfg).unwrap();
        assert!((no_grad.l_pred - intensity(&pi, &t).unwrap()).abs() < 1e-15);
        let none = LossMask { pred: false, fc: false, con: false, grad: true };
        assert!(matches!(evaluate(&pi, &pf, &t, &t, none, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn mask_names_round_trip() {
        for m in LossMask::presets() {
            assert_eq!(m.to_string().parse::<LossMask>().unwrap(), m);
        }
        assert!("no_int".parse::<LossMask>().is_err());
        assert!("everything".parse::<LossMask>().is_err());
    }
}
