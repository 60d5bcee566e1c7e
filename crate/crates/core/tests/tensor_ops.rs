//! Forward-path contracts for the tensor ops: frozen small examples, oracle
//! comparisons, and shape-error behavior.

mod support;

use dbfusion_core::tensor::Tensor;
use dbfusion_core::CoreError;
use proptest::prelude::*;
use support::*;

#[test]
fn matmul_identity() {
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let id = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let c = a.matmul(&id).unwrap();
    assert_eq!(c.data(), a.data());
}

#[test]
fn matmul_row_times_column() {
    let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(c.data()[0], 11.0);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = rand_vec(&mut r, 5 * 7);
    let b = rand_vec(&mut r, 7 * 3);
    let got = Tensor::new(&[5, 7], a.clone())
        .unwrap()
        .matmul(&Tensor::new(&[7, 3], b.clone()).unwrap())
        .unwrap();
    let want = matmul_oracle(&a, &b, 5, 7, 3);
    assert_slice_close(got.data(), &want, 1e-12, "matmul vs oracle");
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("[2, 3]") && matches!(err, CoreError::Dimension { .. }),
        "expected dimension error naming both shapes, got: {msg}"
    );
}

#[test]
fn matmul_nt_matches_plain_matmul_of_transpose() {
    let mut r = rng(8);
    let a = Tensor::new(&[4, 6], rand_vec(&mut r, 24)).unwrap();
    let b = Tensor::new(&[5, 6], rand_vec(&mut r, 30)).unwrap();
    let got = a.matmul_nt(&b).unwrap();
    let want = a.matmul(&b.transpose().unwrap()).unwrap();
    assert_slice_close(got.data(), want.data(), 1e-12, "matmul_nt");
}

#[test]
fn concat_single_tensor_is_identity() {
    let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = Tensor::concat(&[a.clone()], 0).unwrap();
    assert_eq!(c.shape(), a.shape());
    assert_eq!(c.data(), a.data());
}

#[test]
fn concat_three_blocks_of_576_tokens_gives_1728() {
    let parts: Vec<Tensor> = (0..3).map(|i| Tensor::full(&[576, 4], i as f64)).collect();
    let c = Tensor::concat(&parts, 0).unwrap();
    assert_eq!(c.shape(), &[1728, 4]);
    assert_eq!(c.data()[0], 0.0);
    assert_eq!(c.data()[576 * 4], 1.0);
    assert_eq!(c.data()[2 * 576 * 4], 2.0);
}

#[test]
fn concat_axis1_then_slice_recovers_parts_bit_exactly() {
    let mut r = rng(9);
    let parts: Vec<Tensor> = (0..4)
        .map(|_| Tensor::new(&[64, 64], rand_vec(&mut r, 64 * 64)).unwrap())
        .collect();
    let c = Tensor::concat(&parts, 1).unwrap();
    assert_eq!(c.shape(), &[64, 256]);
    for (i, p) in parts.iter().enumerate() {
        let s = c.narrow(1, i * 64, 64).unwrap();
        assert_eq!(s.data(), p.data(), "slice {i} must round-trip bit-exactly");
    }
}

#[test]
fn concat_empty_list_is_an_argument_error() {
    let err = Tensor::concat(&[], 0).unwrap_err();
    assert!(matches!(err, CoreError::Argument { .. }), "got {err}");
}

#[test]
fn concat_mismatched_off_axis_extent_is_a_dimension_error() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 4]);
    let err = Tensor::concat(&[a, b], 0).unwrap_err();
    assert!(matches!(err, CoreError::Dimension { .. }), "got {err}");
}

#[test]
fn mean_pool_small_example() {
    let x = Tensor::new(&[2, 2], vec![2.0, 4.0, 6.0, 8.0]).unwrap();
    let p0 = x.mean_pool(0).unwrap();
    assert_eq!(p0.shape(), &[2]);
    assert_slice_close(p0.data(), &[4.0, 6.0], 1e-15, "mean_pool axis 0");
    let p1 = x.mean_pool(1).unwrap();
    assert_slice_close(p1.data(), &[3.0, 7.0], 1e-15, "mean_pool axis 1");
}

#[test]
fn mean_pool_of_constant_is_constant() {
    let x = Tensor::full(&[5, 3], 2.5);
    let p = x.mean_pool(0).unwrap();
    assert_slice_close(p.data(), &[2.5, 2.5, 2.5], 1e-15, "constant pool");
}

#[test]
fn mean_pool_matches_sum_over_n() {
    let mut r = rng(11);
    let data = rand_vec(&mut r, 50);
    let x = Tensor::new(&[10, 5], data.clone()).unwrap();
    let p = x.mean_pool(0).unwrap();
    let mut want = vec![0.0; 5];
    for row in 0..10 {
        for col in 0..5 {
            want[col] += data[row * 5 + col] / 10.0;
        }
    }
    assert_slice_close(p.data(), &want, 1e-12, "mean_pool oracle");
}

#[test]
fn l2_normalize_three_four_five() {
    let x = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
    let n = x.l2_normalize(1e-12).unwrap();
    assert_slice_close(n.data(), &[0.6, 0.8], 1e-15, "3-4-5 row");
}

#[test]
fn l2_normalize_is_idempotent() {
    let mut r = rng(12);
    let x = Tensor::new(&[6, 9], rand_vec(&mut r, 54)).unwrap();
    let once = x.l2_normalize(1e-12).unwrap();
    let twice = once.l2_normalize(1e-12).unwrap();
    assert_slice_close(twice.data(), once.data(), 1e-12, "idempotence");
}

#[test]
fn l2_normalize_rows_have_unit_norm() {
    let mut r = rng(13);
    let x = Tensor::new(&[8, 16], rand_vec(&mut r, 128)).unwrap();
    let n = x.l2_normalize(1e-12).unwrap();
    for row in 0..8 {
        let s: f64 = n.data()[row * 16..(row + 1) * 16].iter().map(|v| v * v).sum();
        assert_close(s.sqrt(), 1.0, 1e-12, "row norm");
    }
}

#[test]
fn l2_normalize_near_zero_row_error_names_the_row() {
    let x = Tensor::new(&[3, 2], vec![1.0, 0.0, 1e-20, 0.0, 0.0, 1.0]).unwrap();
    let err = x.l2_normalize(1e-12).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CoreError::Degenerate { .. }), "got {msg}");
    assert!(msg.contains("row 1"), "error must name the offending row: {msg}");
}

#[test]
fn layer_norm_one_two_three() {
    let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let gain = Tensor::ones(&[3]);
    let bias = Tensor::zeros(&[3]);
    let y = x.layer_norm(&gain, &bias, 1e-5).unwrap();
    assert_slice_close(y.data(), &[-1.2247, 0.0, 1.2247], 1e-4, "layer_norm example");
}

#[test]
fn layer_norm_constant_row_hits_the_variance_floor() {
    let x = Tensor::full(&[2, 4], 7.5);
    let y = x.layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
    assert_slice_close(y.data(), &[0.0; 8], 1e-15, "constant row");
}

#[test]
fn layer_norm_standardizes_random_rows() {
    let mut r = rng(14);
    let x = Tensor::new(&[12, 32], rand_vec(&mut r, 384)).unwrap();
    let y = x.layer_norm(&Tensor::ones(&[32]), &Tensor::zeros(&[32]), 1e-5).unwrap();
    for row in 0..12 {
        let d = &y.data()[row * 32..(row + 1) * 32];
        let mean = d.iter().sum::<f64>() / 32.0;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-10, "row {row} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "row {row} var {var}");
    }
}

#[test]
fn cross_entropy_uniform_logits_is_ln_classes() {
    let logits = Tensor::zeros(&[3, 4]);
    let mut t = vec![0.0; 12];
    t[0] = 1.0;
    t[4 + 1] = 1.0;
    t[8 + 2] = 1.0;
    let targets = Tensor::new(&[3, 4], t).unwrap();
    let loss = logits.softmax_cross_entropy_rows(&targets).unwrap();
    assert_close(loss.data()[0], 4.0f64.ln(), 1e-12, "uniform CE");
}

#[test]
fn cross_entropy_saturated_correct_class_goes_to_zero() {
    let mut l = vec![0.0; 4];
    l[2] = 50.0;
    let logits = Tensor::new(&[1, 4], l).unwrap();
    let mut t = vec![0.0; 4];
    t[2] = 1.0;
    let loss = logits
        .softmax_cross_entropy_rows(&Tensor::new(&[1, 4], t).unwrap())
        .unwrap();
    assert!(loss.data()[0] < 1e-10, "saturated loss = {}", loss.data()[0]);
    assert!(loss.data()[0] >= 0.0);
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let mut r = rng(15);
    let logits = rand_vec(&mut r, 36).iter().map(|v| v * 4.0).collect::<Vec<_>>();
    // Random rows normalized into distributions.
    let mut targets = rand_vec(&mut r, 36).iter().map(|v| v.abs() + 0.05).collect::<Vec<_>>();
    for row in 0..6 {
        let s: f64 = targets[row * 6..(row + 1) * 6].iter().sum();
        for c in 0..6 {
            targets[row * 6 + c] /= s;
        }
    }
    let got = Tensor::new(&[6, 6], logits.clone())
        .unwrap()
        .softmax_cross_entropy_rows(&Tensor::new(&[6, 6], targets.clone()).unwrap())
        .unwrap();
    let want = cross_entropy_oracle(&logits, &targets, 6, 6);
    assert_close(got.data()[0], want, 1e-10, "CE vs oracle");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut r = rng(16);
    let w = Tensor::param(&[3, 4], rand_vec(&mut r, 12)).unwrap();
    w.sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![1.0; 12]);
}

#[test]
fn backward_of_half_sum_of_squares_is_w_exactly() {
    let mut r = rng(17);
    let data = rand_vec(&mut r, 20);
    let w = Tensor::param(&[4, 5], data.clone()).unwrap();
    let loss = w.mul(&w).unwrap().scale(0.5).sum();
    loss.backward().unwrap();
    assert_eq!(w.grad().unwrap(), data, "gradient must equal W bit-exactly");
}

#[test]
fn backward_on_non_scalar_is_an_error() {
    let w = Tensor::param(&[2, 2], vec![1.0; 4]).unwrap();
    let err = w.scale(2.0).backward().unwrap_err();
    assert!(matches!(err, CoreError::Argument { .. }), "got {err}");
}

#[test]
fn grads_accumulate_across_backward_calls_until_cleared() {
    let w = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    w.sum().backward().unwrap();
    w.sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
    w.zero_grad();
    assert!(w.grad().is_none());
}

#[test]
fn softmax_rows_sum_to_one_and_match_shifted_exp() {
    let mut r = rng(18);
    let data = rand_vec(&mut r, 21).iter().map(|v| v * 10.0).collect::<Vec<_>>();
    let s = Tensor::new(&[3, 7], data.clone()).unwrap().softmax_rows().unwrap();
    for row in 0..3 {
        let sum: f64 = s.data()[row * 7..(row + 1) * 7].iter().sum();
        assert_close(sum, 1.0, 1e-12, "softmax row sum");
        let m = data[row * 7..(row + 1) * 7].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = data[row * 7..(row + 1) * 7].iter().map(|v| (v - m).exp()).sum();
        for c in 0..7 {
            let want = (data[row * 7 + c] - m).exp() / z;
            assert_close(s.data()[row * 7 + c], want, 1e-12, "softmax entry");
        }
    }
}

#[test]
fn same_seeded_op_sequence_is_bit_identical() {
    let run = || {
        let mut r = rng(99);
        let a = Tensor::new(&[6, 6], rand_vec(&mut r, 36)).unwrap();
        let b = Tensor::new(&[6, 6], rand_vec(&mut r, 36)).unwrap();
        let g = Tensor::ones(&[6]);
        let z = Tensor::zeros(&[6]);
        a.matmul(&b)
            .unwrap()
            .layer_norm(&g, &z, 1e-5)
            .unwrap()
            .softmax_rows()
            .unwrap()
            .data()
            .to_vec()
    };
    let x = run();
    let y = run();
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_softmax_rows_always_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000) {
        let mut r = rng(seed);
        let data = rand_vec(&mut r, rows * cols).iter().map(|v| v * 20.0).collect::<Vec<_>>();
        let s = Tensor::new(&[rows, cols], data).unwrap().softmax_rows().unwrap();
        for row in 0..rows {
            let sum: f64 = s.data()[row * cols..(row + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prop_concat_then_narrow_round_trips(parts in 1usize..5, rows in 1usize..5, cols in 1usize..5, axis in 0usize..2, seed in 0u64..1000) {
        let mut r = rng(seed);
        let tensors: Vec<Tensor> = (0..parts)
            .map(|_| Tensor::new(&[rows, cols], rand_vec(&mut r, rows * cols)).unwrap())
            .collect();
        let c = Tensor::concat(&tensors, axis).unwrap();
        let step = if axis == 0 { rows } else { cols };
        for (i, p) in tensors.iter().enumerate() {
            let s = c.narrow(axis, i * step, step).unwrap();
            prop_assert_eq!(s.data(), p.data());
        }
    }

    #[test]
    fn prop_l2_normalized_rows_are_unit(rows in 1usize..6, cols in 1usize..10, seed in 0u64..1000) {
        let mut r = rng(seed);
        let data: Vec<f64> = rand_vec(&mut r, rows * cols).iter().map(|v| v + 2.0).collect();
        let n = Tensor::new(&[rows, cols], data).unwrap().l2_normalize(1e-12).unwrap();
        for row in 0..rows {
            let s: f64 = n.data()[row * cols..(row + 1) * cols].iter().map(|v| v * v).sum();
            prop_assert!((s.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prop_all_op_outputs_stay_finite(seed in 0u64..2000) {
        let mut r = rng(seed);
        let a = Tensor::new(&[4, 4], rand_vec(&mut r, 16)).unwrap();
        let b = Tensor::new(&[4, 4], rand_vec(&mut r, 16)).unwrap();
        let y = a.matmul(&b).unwrap()
            .gelu()
            .add(&b).unwrap()
            .softmax_rows().unwrap();
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
