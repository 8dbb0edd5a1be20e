//! Library kernels and the fusion block checked against independent loop
//! implementations.

#[path = "support/oracle.rs"]
mod oracle;

use oracle::*;
use sfmkit_core::ops::{self, Activation, NormMode, RunningStats};
use sfmkit_core::sfm;
use sfmkit_core::Tensor;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for n in 1..=5 {
        for k in 1..=5 {
            for m in 1..=5 {
                let a = Tensor::randn(&[n, k], 1.0, &mut r);
                let b = Tensor::randn(&[k, m], 1.0, &mut r);
                let c = ops::matmul(&a, &b).unwrap();
                assert_close(
                    c.data(),
                    &matmul_oracle(a.data(), b.data(), n, k, m),
                    TOL,
                    "matmul",
                );
            }
        }
    }
}

#[test]
fn conv2d_matches_loop_oracle_on_all_small_shapes() {
    sweep_conv2d();
}

#[test]
fn gap_matches_loop_oracle() {
    sweep_gap();
}

#[test]
fn elementwise_activations_match_formulas() {
    assert!((Activation::Gelu.eval(1.0) - gelu(1.0)).abs() <= 1e-9);
    for i in -40..=40 {
        let x = i as f64 * 0.25;
        assert!((Activation::Gelu.eval(x) - gelu(x)).abs() <= TOL);
        assert!((Activation::Silu.eval(x) - silu(x)).abs() <= TOL);
        assert!((Activation::Sigmoid.eval(x) - sigmoid(x)).abs() <= TOL);
    }
}

#[test]
fn softmax_rows_match_definition() {
    let mut r = rng(4);
    let x = Tensor::randn(&[4, 7], 3.0, &mut r);
    let y = ops::softmax_rows(&x);
    for (xr, yr) in x.rows().zip(y.rows()) {
        let z: f64 = xr.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = xr.iter().map(|v| v.exp() / z).collect();
        assert_close(yr, &want, TOL, "softmax");
        assert!((yr.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    let big = Tensor::from_rows(&[vec![1000.0, 1001.0, 999.0]]).unwrap();
    assert!(ops::softmax_rows(&big).all_finite());
}

#[test]
fn layer_norm_rows_have_zero_mean_unit_variance() {
    let mut r = rng(5);
    let x = Tensor::randn(&[5, 8], 2.0, &mut r).map(|v| v + 3.0);
    let (y, _) =
        ops::layer_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), ops::LN_EPS).unwrap();
    for row in y.rows() {
        let m = row.iter().sum::<f64>() / 8.0;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
        assert!(m.abs() <= 1e-12);
        assert!((v - 1.0).abs() <= 1e-5, "{v}");
    }
    let g = Tensor::randn(&[8], 1.0, &mut r);
    let b = Tensor::randn(&[8], 1.0, &mut r);
    let (y, _) = ops::layer_norm(&x, &g, &b, ops::LN_EPS).unwrap();
    let n = normalize_groups(x.data(), 8, ops::LN_EPS, None);
    let want: Vec<f64> = n
        .iter()
        .enumerate()
        .map(|(i, v)| v * g.data()[i % 8] + b.data()[i % 8])
        .collect();
    assert_close(y.data(), &want, TOL, "layer_norm");
}

#[test]
fn batch_norm_matches_two_pass_statistics() {
    let mut r = rng(6);
    let x = Tensor::randn(&[3, 4, 5], 2.0, &mut r).map(|v| v - 1.0);
    let g = Tensor::randn(&[3], 1.0, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    let (y, cache) = ops::batch_norm(&x, &g, &b, None, NormMode::Train, ops::BN_EPS).unwrap();
    let n = normalize_groups(x.data(), 20, ops::BN_EPS, None);
    let want: Vec<f64> = n
        .iter()
        .enumerate()
        .map(|(i, v)| v * g.data()[i / 20] + b.data()[i / 20])
        .collect();
    assert_close(y.data(), &want, TOL, "batch_norm train");

    let mut rs = RunningStats::fresh(3);
    rs.update(&cache.mean, &cache.var, 20, ops::BN_MOMENTUM);
    for k in 0..3 {
        let ch = &x.data()[k * 20..(k + 1) * 20];
        let m = ch.iter().sum::<f64>() / 20.0;
        let unbiased = ch.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 19.0;
        assert!((rs.mean.data()[k] - 0.1 * m).abs() <= TOL);
        assert!((rs.var.data()[k] - (0.9 + 0.1 * unbiased)).abs() <= TOL);
    }
    let (yi, _) = ops::batch_norm(&x, &g, &b, Some(&rs), NormMode::Infer, ops::BN_EPS).unwrap();
    let n = normalize_groups(
        x.data(),
        20,
        ops::BN_EPS,
        Some((rs.mean.data(), rs.var.data())),
    );
    let want: Vec<f64> = n
        .iter()
        .enumerate()
        .map(|(i, v)| v * g.data()[i / 20] + b.data()[i / 20])
        .collect();
    assert_close(yi.data(), &want, TOL, "batch_norm infer");
    assert!(ops::batch_norm(&x, &g, &b, None, NormMode::Infer, ops::BN_EPS).is_err());
}

#[test]
fn l2_normalized_rows_have_unit_norm_and_keep_direction() {
    let mut r = rng(7);
    let x = Tensor::randn(&[6, 5], 3.0, &mut r);
    let y = ops::l2_normalize_rows(&x, ops::L2_EPS);
    for (xr, yr) in x.rows().zip(y.rows()) {
        assert!((yr.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() <= 1e-12);
        let dot: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
        assert!(dot > 0.0);
    }
    let zero = Tensor::zeros(&[1, 4]);
    assert_eq!(
        ops::l2_normalize_rows(&zero, ops::L2_EPS).data(),
        zero.data()
    );
}

#[test]
fn cosine_attention_matches_loop_oracle() {
    sweep_cosine_attention();
}

#[test]
fn cosine_attention_worked_example() {
    let q = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let y = sfm::cosine_attention(&q, &q, &v, &Tensor::from_vec(vec![1.0]), ops::L2_EPS).unwrap();
    let e = std::f64::consts::E;
    let expect = [
        e / (e + 1.0),
        2.0 / (e + 1.0),
        1.0 / (e + 1.0),
        2.0 * e / (e + 1.0),
    ];
    assert_close(y.data(), &expect, 1e-15, "worked example");
    assert!((y.data()[0] - 0.7311).abs() < 1e-4 && (y.data()[1] - 0.5379).abs() < 1e-4);
}

#[test]
fn guidance_and_fusion_match_loop_oracle() {
    sweep_guidance_and_fusion();
}

#[test]
fn full_block_matches_composed_loop_oracle() {
    sweep_full_block();
}

#[test]
fn zero_fusion_block_is_bitwise_identity() {
    sweep_zero_fusion_identity();
}
