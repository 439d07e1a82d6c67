use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dualmask::diffusion::{ddim_from, forward_noise, masked_loss, masked_loss_value, DiffusionSchedule, Pinning};
use dualmask::masks::LossMask;
use dualmask::numcore::{Tape, Tensor};
use dualmask::{Error, Result};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn schedule_endpoints_and_monotonicity() {
    let s = DiffusionSchedule::default();
    assert_eq!(s.steps(), 200);
    assert_eq!(s.alpha_bar(0), 1.0);
    for t in 1..=s.steps() {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert!(s.alpha_bar(t) > 0.0);
    }
    let sub = s.sub_schedule(25).unwrap();
    assert_eq!(sub.len(), 26);
    assert_eq!((sub[0], sub[25]), (200, 0));
    assert!(sub.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(s.sub_schedule(1).unwrap(), vec![200, 0]);
    assert!(s.sub_schedule(0).is_err());
}

#[test]
fn forward_noise_moments_match_closed_form() {
    let s = DiffusionSchedule::default();
    let t = 60;
    let a = s.alpha_bar(t);
    let x = Tensor::full(&[1], 0.8);
    let mut r = rng(3);
    let n = 200_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let eps = Tensor::randn(&[1], 1.0, &mut r);
        let v = forward_noise(&x, t, &eps, &s).unwrap().x_t.data()[0];
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    let se = ((1.0 - a) / n as f64).sqrt();
    assert!((mean - a.sqrt() * 0.8).abs() < 5.0 * se, "mean {mean}");
    assert!((var - (1.0 - a)).abs() < 0.02 * (1.0 - a), "var {var}");
}

#[test]
fn masked_loss_has_no_gradient_on_inactive_frames() {
    let mut r = rng(4);
    let eps = Tensor::randn(&[3, 2, 2, 1], 1.0, &mut r);
    let mask = LossMask {
        active: vec![true, false, true],
    };
    let mut tape = Tape::new();
    let pred = tape.leaf(Tensor::randn(&[3, 2, 2, 1], 1.0, &mut r));
    let loss = masked_loss(&mut tape, pred, &eps, &mask).unwrap();
    let value = tape.value(loss).item().unwrap();
    assert_eq!(value, masked_loss_value(tape.value(pred), &eps, &mask).unwrap());
    let g = tape.backward(loss).unwrap().get(pred);
    assert!(g.data()[4..8].iter().all(|&v| v == 0.0));
}

#[test]
fn pinned_frames_land_on_known_values() {
    let s = DiffusionSchedule::default();
    let mut r = rng(5);
    let known = Tensor::randn(&[4, 2, 2, 1], 0.2, &mut r).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let keep = [true, false, false, true];
    let start = Tensor::randn(&[4, 2, 2, 1], 1.0, &mut r);
    let wild = |x: &Tensor, _t: usize| -> Result<Tensor> { Ok(x.map(|v| 0.3 * v.sin())) };
    let pin = Pinning { keep: &keep, known: &known };
    let out = ddim_from(&wild, start, &s, 10, Some(&pin)).unwrap();
    for f in [0, 3] {
        for i in f * 4..(f + 1) * 4 {
            assert_eq!(out.data()[i], known.data()[i]);
        }
    }
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn non_finite_prediction_names_the_step() {
    let s = DiffusionSchedule::default();
    let start = Tensor::zeros(&[3, 2, 2, 1]);
    let bad = |x: &Tensor, t: usize| -> Result<Tensor> {
        Ok(if t < 150 { x.map(|_| f64::NAN) } else { x.clone() })
    };
    match ddim_from(&bad, start, &s, 4, None) {
        Err(Error::NonFinite { context, .. }) => assert!(context.contains("ddim step 2 (t = 100)"), "{context}"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}
