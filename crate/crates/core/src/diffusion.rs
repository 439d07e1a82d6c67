//! Forward noising, the masked training loss and a deterministic DDIM sampler.

use rand::Rng;

use crate::error::{Error, Result};
use crate::masks::LossMask;
use crate::numcore::{Tape, Tensor, Var};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Cumulative signal coefficients `ᾱ_t` for `t = 0..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear β ramp over `steps` steps. The ramp endpoints are quoted for a
    /// 1000-step chain and rescaled by `1000 / steps`, which keeps the terminal
    /// signal level comparable at shorter chain lengths.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config {
                key: "diffusion.steps".into(),
                reason: "must be positive".into(),
            });
        }
        if !(0.0 < beta_start && beta_start <= beta_end) {
            return Err(Error::Config {
                key: "diffusion.beta".into(),
                reason: format!("need 0 < start <= end, got [{beta_start}, {beta_end}]"),
            });
        }
        let scale = 1000.0 / steps as f64;
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            let beta = ((beta_start + frac * (beta_end - beta_start)) * scale).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let sched = DiffusionSchedule { alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    /// Schedule from explicit coefficients; `alpha_bar[0]` must be 1.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let sched = DiffusionSchedule { alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        let a = &self.alpha_bar;
        if a.len() < 2 || a[0] != 1.0 {
            return Err(Error::invalid("schedule must start at alpha_bar = 1"));
        }
        if a.windows(2).any(|w| !(w[1] < w[0]) || !(w[1] > 0.0)) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing in (0, 1]"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Evenly spaced timesteps from `steps()` down to 0, `n + 1` entries.
    pub fn sub_schedule(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(Error::invalid(format!(
                "sampling steps {n} outside [1, {total}]"
            )));
        }
        Ok((0..=n)
            .map(|i| ((total * (n - i)) as f64 / n as f64).round() as usize)
            .collect())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub x_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// `x_t = √ᾱ_t·x + √(1-ᾱ_t)·ε`.
pub fn forward_noise(x: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<NoisySample> {
    if x.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_noise",
            format!("x {:?} vs noise {:?}", x.shape(), eps.shape()),
        ));
    }
    if t > sched.steps() {
        return Err(Error::invalid(format!(
            "timestep {t} beyond schedule of {} steps",
            sched.steps()
        )));
    }
    let x_t = mix(x, eps, sched.alpha_bar(t));
    Ok(NoisySample {
        x_t,
        t,
        eps: eps.clone(),
    })
}

fn mix(x: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shapes checked by caller")
}

/// Mean squared error over the elements of loss-mask-active frames.
pub fn masked_loss(tape: &mut Tape, eps_hat: Var, eps: &Tensor, mask: &LossMask) -> Result<Var> {
    tape.masked_mse(eps_hat, eps, &mask.weights())
}

/// Value-only form of [`masked_loss`].
pub fn masked_loss_value(eps_hat: &Tensor, eps: &Tensor, mask: &LossMask) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(eps_hat.clone());
    let loss = masked_loss(&mut tape, v, eps, mask)?;
    tape.value(loss).item()
}

/// Anything that predicts the injected noise from `x_t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// Known frames written back into the trajectory at every step.
#[derive(Clone, Debug)]
pub struct Pinning<'a> {
    pub keep: &'a [bool],
    pub known: &'a Tensor,
}

fn pin_frames(x: &mut Tensor, pin: &Pinning, noise: &Tensor, alpha_bar: f64) {
    let frames = pin.keep.len();
    let per = x.len() / frames;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let known = pin.known.data();
    let noise = noise.data();
    for (f, _) in pin.keep.iter().enumerate().filter(|(_, k)| **k) {
        for i in f * per..(f + 1) * per {
            x.data_mut()[i] = a * known[i] + b * noise[i];
        }
    }
}

/// Deterministic (η = 0) DDIM from an explicit starting point `x_T`.
///
/// With `pin`, kept frames follow the forward-noised known frames with the
/// starting noise, so they land exactly on the known values at `t = 0`.
pub fn ddim_from<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_start: Tensor,
    sched: &DiffusionSchedule,
    n_steps: usize,
    pin: Option<&Pinning>,
) -> Result<Tensor> {
    let times = sched.sub_schedule(n_steps)?;
    if let Some(p) = pin {
        if p.known.shape() != x_start.shape() || p.keep.is_empty() || x_start.len() % p.keep.len() != 0
            || x_start.shape().first() != Some(&p.keep.len())
        {
            return Err(Error::shape(
                "ddim_sample",
                format!("pinning {:?} / {} frames vs x {:?}", p.known.shape(), p.keep.len(), x_start.shape()),
            ));
        }
    }
    let noise = x_start.clone();
    let mut x = x_start;
    if let Some(p) = pin {
        pin_frames(&mut x, p, &noise, sched.alpha_bar(times[0]));
    }
    for (step, pair) in times.windows(2).enumerate() {
        let (t, next) = (pair[0], pair[1]);
        let eps = predictor.predict(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(Error::shape(
                "ddim_sample",
                format!("prediction {:?} vs x {:?}", eps.shape(), x.shape()),
            ));
        }
        let a_t = sched.alpha_bar(t);
        let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let x0: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| (x - sb * e) / sa)
            .collect();
        let x0 = Tensor::new(x.shape().to_vec(), x0)?;
        x = mix(&x0, &eps, sched.alpha_bar(next));
        if let Some(p) = pin {
            pin_frames(&mut x, p, &noise, sched.alpha_bar(next));
        }
        if let Some(i) = x.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("ddim step {step} (t = {t})"),
                index: i,
            });
        }
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}

/// DDIM from standard normal noise of the given shape.
pub fn ddim_sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    shape: &[usize],
    sched: &DiffusionSchedule,
    n_steps: usize,
    pin: Option<&Pinning>,
    rng: &mut R,
) -> Result<Tensor> {
    let start = Tensor::randn(shape, 1.0, rng);
    ddim_from(predictor, start, sched, n_steps, pin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schedule_reaches_low_signal() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 200);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(200) < 0.01);
    }

    #[test]
    fn forward_noise_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let e = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let s = DiffusionSchedule::default();
        assert_eq!(forward_noise(&x, 0, &e, &s).unwrap().x_t, x);
        let zero = Tensor::zeros(&[2, 3]);
        let got = forward_noise(&zero, 50, &e, &s).unwrap().x_t;
        let b = (1.0 - s.alpha_bar(50)).sqrt();
        for (g, e) in got.data().iter().zip(e.data()) {
            assert_eq!(*g, b * e);
        }
        assert!(forward_noise(&x, 0, &Tensor::zeros(&[3, 2]), &s).is_err());
    }

    #[test]
    fn sub_schedule_spans_the_chain() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.sub_schedule(1).unwrap(), vec![200, 0]);
        let t = s.sub_schedule(25).unwrap();
        assert_eq!(t.len(), 26);
        assert_eq!((t[0], t[25]), (200, 0));
        assert!(t.windows(2).all(|w| w[0] > w[1]));
        assert!(s.sub_schedule(201).is_err());
    }

    #[test]
    fn masked_loss_restricts_to_active_frames() {
        let pred = Tensor::new(vec![2, 2], vec![1.0, 1.0, 9.0, -4.0]).unwrap();
        let target = Tensor::zeros(&[2, 2]);
        let mask = LossMask {
            active: vec![true, false],
        };
        assert_eq!(masked_loss_value(&pred, &target, &mask).unwrap(), 1.0);
        let none = LossMask {
            active: vec![false, false],
        };
        assert!(masked_loss_value(&pred, &target, &none).is_err());
    }

    #[test]
    fn pinned_frames_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let known = Tensor::randn(&[3, 2, 2, 1], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let keep = [true, false, true];
        let pin = Pinning {
            keep: &keep,
            known: &known,
        };
        let s = DiffusionSchedule::default();
        let zero = |x: &Tensor, _t: usize| Ok(Tensor::zeros(x.shape()));
        let out = ddim_sample(&zero, &[3, 2, 2, 1], &s, 10, Some(&pin), &mut rng).unwrap();
        assert_eq!(&out.data()[..4], &known.data()[..4]);
        assert_eq!(&out.data()[8..], &known.data()[8..]);
    }

    #[test]
    fn non_finite_prediction_names_step() {
        let s = DiffusionSchedule::default();
        let bad = |x: &Tensor, _t: usize| Ok(Tensor::full(x.shape(), f64::NAN));
        let err = ddim_from(&bad, Tensor::zeros(&[1, 2]), &s, 5, None).unwrap_err();
        assert!(err.to_string().contains("ddim step 0"), "{err}");
    }
}
