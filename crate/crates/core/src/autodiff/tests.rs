use proptest::prelude::*;

use super::check::{check_inputs, max_error, DEFAULT_STEP};
use super::*;
use crate::error::Error;
use crate::rng::Rng;
use crate::tensor::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

/// Contracts `v` with fixed random weights so every output entry matters.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, Error> {
    let w = random(tape.shape(v), seed).into_data();
    let p = tape.mul_const(v, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let a = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let out = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
    let c = tape.constant(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap());
    let out = tape.matmul(r, c).unwrap();
    assert_eq!(tape.value(out).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![3, 4]));
    let b = tape.constant(Tensor::zeros(vec![3, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn matmul_gradient_of_sum() {
    let reports = check_inputs(&[random(&[3, 4], 1), random(&[4, 2], 2)], DEFAULT_STEP, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(max_error(&reports) < 1e-6, "{reports:?}");
}

#[test]
fn bmm_gradients_both_layouts() {
    for transpose_b in [false, true] {
        let b_shape = if transpose_b { [2, 4, 3] } else { [2, 3, 4] };
        let reports = check_inputs(&[random(&[2, 5, 3], 3), random(&b_shape, 4)], DEFAULT_STEP, |t, v| {
            let y = t.bmm(v[0], v[1], transpose_b)?;
            project(t, y, 9)
        })
        .unwrap();
        assert!(max_error(&reports) < 1e-6, "{reports:?}");
    }
}

/// Algorithm-literal nested loops for valid 1-D convolution.
fn conv_loops(x: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (bn, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, f) = (w.shape()[1], w.shape()[2]);
    let mut out = vec![0.0; bn * (t - k + 1) * f];
    for j in 0..f {
        for bi in 0..bn {
            for ti in 0..t - k + 1 {
                let mut s = b[j];
                for i in 0..d {
                    for m in 0..k {
                        s += w.data()[(i * k + m) * f + j] * x.data()[(bi * t + ti + m) * d + i];
                    }
                }
                out[(bi * (t - k + 1) + ti) * f + j] = s;
            }
        }
    }
    out
}

#[test]
fn conv1d_matches_nested_loops() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::vector(vec![0.0]));
    let y = tape.conv1d(x, w, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 1]);
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

    let xt = random(&[2, 6, 3], 11);
    let wt = random(&[3, 2, 4], 12);
    let bt = random(&[4], 13);
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(xt.clone()), tape.constant(wt.clone()), tape.constant(bt.clone()));
    let y = tape.conv1d(x, w, b).unwrap();
    let expect = conv_loops(&xt, &wt, bt.data());
    for (a, e) in tape.value(y).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv1d_zero_kernel_gives_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 5, 3], 5));
    let w = tape.constant(Tensor::zeros(vec![3, 2, 4]));
    let b = tape.constant(Tensor::full(vec![4], 0.7));
    let y = tape.conv1d(x, w, b).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn conv1d_kernel_longer_than_sequence() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 3]));
    let w = tape.constant(Tensor::zeros(vec![3, 3, 4]));
    let b = tape.constant(Tensor::zeros(vec![4]));
    assert!(matches!(
        tape.conv1d(x, w, b),
        Err(Error::SequenceTooShort { len: 2, kernel: 3 })
    ));
}

#[test]
fn conv1d_gradient() {
    let inputs = [random(&[2, 6, 3], 21), random(&[3, 2, 4], 22), random(&[4], 23)];
    let reports = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
        let y = t.conv1d(v[0], v[1], v[2])?;
        project(t, y, 24)
    })
    .unwrap();
    assert!(max_error(&reports) < 1e-6, "{reports:?}");
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    let p = tape.value(y).data();
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);

    let x = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(tape.softmax(x), Err(Error::NonFinite { .. })));
}

#[test]
fn softmax_jacobian() {
    // Each output component separately, i.e. the full Jacobian.
    for c in 0..4 {
        let reports = check_inputs(&[random(&[4], 31)], DEFAULT_STEP, |t, v| {
            let y = t.softmax(v[0])?;
            let mut pick = vec![0.0; 4];
            pick[c] = 1.0;
            let s = t.mul_const(y, pick)?;
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(max_error(&reports) < 1e-6, "{reports:?}");
    }
}

#[test]
fn masked_softmax_zero_weight_and_degenerate() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
    let keep = [true, false, true, true, true, false];
    let y = tape.masked_softmax(x, Some(&keep)).unwrap();
    let p = tape.value(y).data();
    assert_eq!(p[1], 0.0);
    assert_eq!(p[5], 0.0);
    assert!((p[0] + p[2] - 1.0).abs() < 1e-15);
    assert!((p[3] - 0.5).abs() < 1e-15);

    let keep = [false, false, false, true, true, true];
    assert!(matches!(tape.masked_softmax(x, Some(&keep)), Err(Error::DegenerateAttention)));
}

#[test]
fn masked_softmax_gradient() {
    let keep = vec![true, false, true, true, true, true, false, true];
    let reports = check_inputs(&[random(&[2, 4], 41)], DEFAULT_STEP, |t, v| {
        let y = t.masked_softmax(v[0], Some(&keep))?;
        project(t, y, 42)
    })
    .unwrap();
    assert!(max_error(&reports) < 1e-6, "{reports:?}");
}

#[test]
fn dropout_identities() {
    let mut rng = Rng::new(0);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[4, 5], 1));
    assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.35, &mut rng, false).unwrap(), x);
    assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
}

#[test]
fn dropout_zeroes_about_p_and_rescales() {
    let mut rng = Rng::new(5);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![100, 100], 1.0));
    let y = tape.dropout(x, 0.35, &mut rng, true).unwrap();
    let data = tape.value(y).data();
    let zeros = data.iter().filter(|&&v| v == 0.0).count() as f64 / data.len() as f64;
    assert!((zeros - 0.35).abs() < 0.02, "{zeros}");
    let scale = 1.0 / 0.65;
    assert!(data.iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-12));
}

#[test]
fn layer_norm_standardizes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let g = tape.constant(Tensor::full(vec![3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![3]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let d = tape.value(y).data();
    let mean = d.iter().sum::<f64>() / 3.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_gradient() {
    let inputs = [random(&[3, 5], 51), random(&[5], 52), random(&[5], 53)];
    let reports = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
        project(t, y, 54)
    })
    .unwrap();
    assert!(max_error(&reports) < 1e-5, "{reports:?}");
}

#[test]
fn batch_norm_rejects_single_row_in_training() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 4]));
    let g = tape.constant(Tensor::full(vec![4], 1.0));
    let b = tape.constant(Tensor::zeros(vec![4]));
    assert!(matches!(
        tape.batch_norm_train(x, g, b, None, 1e-5),
        Err(Error::DegenerateBatch { rows: 1 })
    ));
    // Eval mode is fine with a single row.
    assert!(tape.batch_norm_eval(x, g, b, &[0.0; 4], &[1.0; 4], 1e-5).is_ok());
}

#[test]
fn batch_norm_train_gradient_with_and_without_mask() {
    let mask = vec![true, true, false, true, false, true];
    for row_mask in [None, Some(mask.as_slice())] {
        let inputs = [random(&[2, 3, 4], 61), random(&[4], 62), random(&[4], 63)];
        let reports = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], row_mask, 1e-5)?;
            project(t, y, 64)
        })
        .unwrap();
        assert!(max_error(&reports) < 1e-5, "{reports:?}");
    }
}

#[test]
fn batch_norm_masked_rows_do_not_affect_statistics() {
    let mut tape = Tape::new();
    let mut data = random(&[4, 2], 70).into_data();
    let g = tape.constant(Tensor::full(vec![2], 1.0));
    let b = tape.constant(Tensor::zeros(vec![2]));
    let mask = [true, true, true, false];
    let x = tape.constant(Tensor::new(vec![4, 2], data.clone()).unwrap());
    let (y1, s1) = tape.batch_norm_train(x, g, b, Some(&mask), 1e-5).unwrap();
    data[6] = 100.0;
    data[7] = -50.0;
    let x = tape.constant(Tensor::new(vec![4, 2], data).unwrap());
    let (y2, s2) = tape.batch_norm_train(x, g, b, Some(&mask), 1e-5).unwrap();
    assert_eq!(s1.mean, s2.mean);
    assert_eq!(&tape.value(y1).data()[..6], &tape.value(y2).data()[..6]);
}

#[test]
fn elementwise_gradients() {
    let inputs = [random(&[3, 4], 81), random(&[3, 4], 82), random(&[4], 83)];
    let reports = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
        let a = t.mul(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let c = t.add_bias(b, v[2])?;
        let s = t.sigmoid(c);
        let h = t.tanh(v[0]);
        let g = t.gelu(v[1]);
        let r = t.add(s, h)?;
        let r = t.add(r, g)?;
        let r = t.scale(r, 0.7)?;
        let sq = t.sum_squares(r);
        let p = project(t, r, 84)?;
        let total = t.add(sq, p)?;
        Ok(total)
    })
    .unwrap();
    assert!(max_error(&reports) < 1e-6, "{reports:?}");
}

#[test]
fn relu_and_log_gradients_away_from_kinks() {
    let x = Tensor::vector(vec![0.5, -0.3, 1.2, -2.0, 0.9]);
    let reports = check_inputs(&[x], DEFAULT_STEP, |t, v| {
        let r = t.relu(v[0]);
        let l = t.log_clamped(v[0], 1e-12);
        let a = project(t, r, 91)?;
        let b = project(t, l, 92)?;
        t.add(a, b)
    })
    .unwrap();
    assert!(max_error(&reports) < 1e-6, "{reports:?}");
}

#[test]
fn structural_op_gradients() {
    let inputs = [random(&[2, 4, 6], 101), random(&[2, 4, 3], 102), random(&[5, 6], 103)];
    let reports = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
        let cat = t.concat(&[v[0], v[1]])?; // [2,4,9]
        let sl = t.slice_last(cat, 2, 5)?; // [2,4,5]
        let steps: Vec<Var> = (0..4).rev().map(|i| t.select_time(sl, i)).collect::<Result<_, _>>()?;
        let st = t.stack_time(&steps)?; // reversed in time
        let heads = t.split_heads(v[0], 3)?; // [6,4,2]
        let merged = t.merge_heads(heads, 3)?;
        let mx = t.max_over_time(merged)?; // [2,6]
        let emb = t.gather_rows(v[2], &[0, 3, 3, 1])?;
        let flat = t.reshape(emb, vec![2, 12])?;
        let a = project(t, st, 104)?;
        let b = project(t, mx, 105)?;
        let c = project(t, flat, 106)?;
        let ab = t.add(a, b)?;
        t.add(ab, c)
    })
    .unwrap();
    assert!(max_error(&reports) < 1e-6, "{reports:?}");
}

#[test]
fn split_merge_heads_roundtrip() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 8], 7));
    let s = tape.split_heads(x, 4).unwrap();
    assert_eq!(tape.shape(s), &[8, 3, 2]);
    let m = tape.merge_heads(s, 4).unwrap();
    assert_eq!(tape.value(m), tape.value(x));
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let loss = tape.sum_squares(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(&tape, x).unwrap().data(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let unrelated = tape.leaf(Tensor::vector(vec![3.0, 4.0, 5.0]));
    let loss = tape.sum(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(&tape, unrelated).unwrap().data(), &[0.0, 0.0, 0.0]);

    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Rank { .. })));
}

#[test]
fn backward_into_accumulates_across_calls() {
    let mut store = crate::params::ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -1.0]));
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.sum_squares(w);
        tape.backward_into(loss, &mut store).unwrap();
    }
    assert_eq!(store.grad(id).data(), &[4.0, -4.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..6) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let data = values[..rows * cols].to_vec();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn random_linear_gradients(seed in 0u64..1000, m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        let inputs = [random(&[m, k], seed), random(&[k, n], seed + 1), random(&[n], seed + 2)];
        let reports = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let y = t.tanh(y);
            project(t, y, seed + 3)
        }).unwrap();
        prop_assert!(max_error(&reports) < 1e-5);
    }
}
