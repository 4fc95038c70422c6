mod common;

use common::checks::*;
use common::*;
use fcvad::losses::{intensity, SsimConfig};
use fcvad::scoring::{max_patch_mean, ErrorMap, Horizon};
use fcvad::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn budgets_hold() {
    parameter_budget().unwrap();
    complexity_budget().unwrap();
}

#[test]
fn kernel_sizes_match_table() {
    kernel_tables().unwrap();
}

#[test]
fn channel_attention_matches_loops() {
    for seed in 0..20 {
        let d = channel_attention_deviation(seed).unwrap();
        assert!(d <= 1e-6, "seed {seed}: {d}");
    }
}

#[test]
fn pyramid_matches_loops() {
    for seed in 0..20 {
        assert!(pyramid_deviation(seed).unwrap() <= 1e-6);
    }
}

#[test]
fn gradient_loss_matches_loops() {
    for seed in 0..20 {
        assert!(gradient_loss_deviation(seed).unwrap() <= 1e-6);
    }
}

#[test]
fn ssim_matches_loops() {
    for seed in 0..20 {
        assert!(ssim_deviation(seed).unwrap() <= 1e-6);
    }
}

#[test]
fn ssim_of_two_constants() {
    let cfg = SsimConfig::default();
    let (a, b) = (0.3, -0.2);
    let ta = Tensor::full([1, 1, 12, 12], a);
    let tb = Tensor::full([1, 1, 12, 12], b);
    let got = fcvad::losses::ssim_index::<f64>(&ta, &tb, &cfg).unwrap();
    let c1 = (0.01f64 * 2.0).powi(2);
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

proptest! {
    #[test]
    fn intensity_is_mean_square(
        (h, w, seed) in (1usize..7, 1usize..7, 0u64..1000)
    ) {
        let mut r = rng(seed);
        let n = 2 * h * w;
        let (p, g) = (uniform(&mut r, n, -1.0, 1.0), uniform(&mut r, n, -1.0, 1.0));
        let tp = Tensor::from_vec([1, 2, h, w], p.clone()).unwrap();
        let tg = Tensor::from_vec([1, 2, h, w], g.clone()).unwrap();
        prop_assert!((intensity(&tp, &tg).unwrap() - common::intensity(&p, &g)).abs() < 1e-12);
    }

    #[test]
    fn patch_max_matches_loops(
        (h, w, k, seed) in (1usize..40, 1usize..40, 1usize..48, 0u64..1000)
    ) {
        let mut r = rng(seed);
        let values = uniform(&mut r, h * w, 0.0, 1.0);
        let e = ErrorMap { height: h, width: w, values: values.clone(), horizon: Horizon::Immediate };
        prop_assert!((max_patch_mean(&e, k) - common::max_patch_mean(&values, h, w, k)).abs() < 1e-12);
    }

    #[test]
    fn gradient_loss_is_shift_invariant(
        (c, seed) in (-2.0f64..2.0, 0u64..1000)
    ) {
        let mut r = rng(seed);
        let shape = [1, 1, 5, 5];
        let g = uniform(&mut r, 25, -1.0, 1.0);
        let p: Vec<f64> = g.iter().map(|v| v + c).collect();
        prop_assert!(common::gradient(&p, &g, shape) < 1e-12);
        let tp = Tensor::from_vec(shape, p).unwrap();
        let tg = Tensor::from_vec(shape, g).unwrap();
        prop_assert!(fcvad::losses::gradient(&tp, &tg).unwrap() < 1e-12);
    }
}
