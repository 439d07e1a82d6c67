use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dualmask::numcore::{gradcheck, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn masked_mse_ignores_inactive_frames() {
    let mut r = rng(1);
    let target = Tensor::randn(&[4, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let pred = tape.leaf(Tensor::randn(&[4, 3], 1.0, &mut r));
    let loss = tape.masked_mse(pred, &target, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let g = tape.backward(loss).unwrap().get(pred);
    for f in [1, 3] {
        assert!(g.data()[f * 3..(f + 1) * 3].iter().all(|&v| v == 0.0));
    }
    assert!(g.data()[..3].iter().any(|&v| v != 0.0));
}

#[test]
fn masked_mse_matches_hand_value() {
    let mut tape = Tape::new();
    let pred = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 5.0, 5.0]).unwrap());
    let target = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let loss = tape.masked_mse(pred, &target, &[1.0, 0.0]).unwrap();
    assert_eq!(tape.value(loss).item().unwrap(), 2.5);
}

#[test]
fn unused_leaves_get_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::full(&[2], 1.0));
    let b = tape.leaf(Tensor::full(&[2], 3.0));
    let s = tape.sum(a);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(b).data(), &[0.0, 0.0]);
    assert_eq!(g.get(a).data(), &[1.0, 1.0]);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.avg_pool2d(a, 2).is_err());
}

#[test]
fn gradcheck_of_a_composite_is_tight() {
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng(2));
    let err = gradcheck(
        |tape, v| {
            let t = tape.tanh(v);
            let s = tape.softmax(t)?;
            let m = tape.mul(s, v)?;
            Ok(tape.sum(m))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..7) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[rows, cols], 10.0, &mut rng(seed)));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_inverts_upsampling(seed in 0u64..1000, factor in 1usize..4) {
        let x = Tensor::randn(&[2, 2, 3, 2], 1.0, &mut rng(seed));
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let up = tape.upsample2d(v, factor).unwrap();
        let down = tape.avg_pool2d(up, factor).unwrap();
        prop_assert!(tape.value(down).max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes(seed in 0u64..1000) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[4, 8], 3.0, &mut rng(seed)));
        let g = tape.leaf(Tensor::full(&[8], 1.0));
        let b = tape.leaf(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn depthwise_conv3d_commutes_with_frame_shift(seed in 0u64..200) {
        let mut r = rng(seed);
        // signal on frames 1..=2 of 5, so a shift by one frame stays clear of the border
        let mut x = Tensor::zeros(&[5, 3, 3, 2]);
        let inner = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut r);
        let per = 3 * 3 * 2;
        x.data_mut()[per..3 * per].copy_from_slice(inner.data());
        let mut shifted = Tensor::zeros(&[5, 3, 3, 2]);
        shifted.data_mut()[2 * per..4 * per].copy_from_slice(inner.data());
        let k = Tensor::randn(&[3, 3, 3, 2], 1.0, &mut r);
        let b = Tensor::zeros(&[2]);
        let conv = |input: &Tensor| {
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.leaf(input.clone()), tape.leaf(k.clone()), tape.leaf(b.clone()));
            let y = tape.depthwise_conv3d(xv, kv, bv).unwrap();
            tape.value(y).clone()
        };
        let (y, ys) = (conv(&x), conv(&shifted));
        for f in 0..4 {
            for i in 0..per {
                prop_assert!((y.data()[f * per + i] - ys.data()[(f + 1) * per + i]).abs() < 1e-12);
            }
        }
    }
}
