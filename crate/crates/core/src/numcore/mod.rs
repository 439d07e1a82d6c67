//! Dense `f64` tensors and reverse-mode gradients for the operation set the
//! denoiser needs.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Weights of a scaled dot-product self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub out: Var,
}

/// Multi-head self-attention over the rows of `tokens[S, d]`.
pub fn self_attention(
    tape: &mut Tape,
    tokens: Var,
    weights: AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let width = match *tape.value(tokens).shape() {
        [_, d] => d,
        ref s => return Err(Error::shape("self_attention", format!("tokens {s:?}"))),
    };
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape(
            "self_attention",
            format!("width {width} not divisible by {heads} heads"),
        ));
    }
    let head_width = width / heads;
    let q = tape.matmul(tokens, weights.query)?;
    let k = tape.matmul(tokens, weights.key)?;
    let v = tape.matmul(tokens, weights.value)?;
    let scale = 1.0 / (head_width as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let start = h * head_width;
            (
                tape.slice_last(q, start, head_width)?,
                tape.slice_last(k, start, head_width)?,
                tape.slice_last(v, start, head_width)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_last(&outputs)?
    };
    tape.matmul(merged, weights.out)
}

/// Maximum relative error between the tape gradient of scalar `f` at `x` and
/// central finite differences with step `eps`.
///
/// The error at each coordinate is `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    x.ensure_finite("gradcheck input")?;
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input)?;
    tape.value(out).ensure_finite("gradcheck output")?;
    let analytic = tape.backward(out)?.get(input);

    let eval = |point: &Tensor, index: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck finite difference".into(),
                index,
            });
        }
        Ok(value)
    };

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe, i)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe, i)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[7, 5], 3.0, &mut rng(1)));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_of_constant_field_is_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 4, 6, 3], 0.37));
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn pool_then_upsample_restores_block_constant_field() {
        let mut r = rng(2);
        let coarse = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let c = tape.leaf(coarse);
        let fine = tape.upsample2d(c, 2).unwrap();
        let pooled = tape.avg_pool2d(fine, 2).unwrap();
        let back = tape.upsample2d(pooled, 2).unwrap();
        assert!(tape.value(back).max_abs_diff(tape.value(fine)).unwrap() < 1e-15);
    }

    #[test]
    fn identity_channel_kernel_is_identity() {
        let x = Tensor::randn(&[3, 2, 2, 5], 1.0, &mut rng(3));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let k = tape.leaf(Tensor::from_vec(vec![0.0, 1.0, 0.0]));
        let b = tape.leaf(Tensor::zeros(&[5]));
        let y = tape.channel_conv1d(xv, k, b).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn identity_conv3d_kernel_is_identity() {
        let x = Tensor::randn(&[3, 4, 4, 2], 1.0, &mut rng(4));
        let mut kernel = Tensor::zeros(&[3, 3, 3, 2]);
        let center = ((3 + 1) * 3 + 1) * 2;
        kernel.data_mut()[center] = 1.0;
        kernel.data_mut()[center + 1] = 1.0;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let k = tape.leaf(kernel);
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.depthwise_conv3d(xv, k, b).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = Tensor::randn(&[10, 16], 2.5, &mut rng(5));
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let g = tape.leaf(Tensor::full(&[16], 1.0));
        let b = tape.leaf(Tensor::zeros(&[16]));
        let y = tape.layer_norm(xv, g, b, 1e-9).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let img = tape.leaf(Tensor::zeros(&[1, 3, 4, 1]));
        let err = tape.avg_pool2d(img, 2).unwrap_err().to_string();
        assert!(err.contains("avg_pool2d"), "{err}");
        let k = tape.leaf(Tensor::zeros(&[2]));
        let bias = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.channel_conv1d(a, k, bias).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng(6)));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap().get(p);
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_input() {
        let x = Tensor::randn(&[5], 1.0, &mut rng(7));
        let mut tape = Tape::new();
        let p = tape.leaf(x.clone());
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap().get(p);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[2, 2], 1.0));
        let q = tape.leaf(Tensor::full(&[3], 1.0));
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert!(!grads.is_touched(q));
        assert_eq!(grads.get(q), Tensor::zeros(&[3]));
    }

    #[test]
    fn masked_mse_rejects_empty_mask() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(tape.masked_mse(p, &Tensor::zeros(&[2, 3]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gradcheck_sum_of_squares_is_tight() {
        // central differences are exact on quadratics; a wide step keeps
        // cancellation error out of the comparison
        let x = Tensor::randn(&[6], 1.0, &mut rng(8));
        let err = gradcheck(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn gradcheck_reports_non_finite_input() {
        let x = Tensor::from_vec(vec![1.0, f64::NAN]);
        let err = gradcheck(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }
}
