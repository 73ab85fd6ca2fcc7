use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::wsdt::ModelConfig;

fn moments(img: &Image<f64>) -> (f64, f64) {
    let n = img.data().len() as f64;
    let mean = img.data().iter().sum::<f64>() / n;
    let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

// Draws needed so that a 1 % error on the mean sits ≥ 4 standard errors out.
fn draws_for(mean: f64, var: f64) -> usize {
    let n = (4.0 * var.sqrt() / (0.01 * mean.abs())).powi(2);
    (n.ceil() as usize).max(100_000)
}

fn constant_field(n: usize, v: f64) -> Image<f64> {
    Image::filled(n, 1, 1, v)
}

#[test]
fn default_schedule_invariants() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 4);
    for t in 0..4 {
        assert!(s.posterior_variance(t) <= s.beta(t) + 1e-15);
        let (c0, ct) = s.posterior_coefficients(t);
        assert!(c0 > 0.0 && ct >= 0.0);
    }
    assert!((s.alpha(0) - 0.9801).abs() < 1e-15);
    assert!((s.alpha(2) - 0.25).abs() < 1e-15);
    // step 0 posterior collapses onto the prediction
    assert_eq!(s.posterior_coefficients(0), (1.0, 0.0));
    assert_eq!(s.posterior_variance(0), 0.0);
}

#[test]
fn schedule_validation() {
    assert!(NoiseSchedule::new(vec![]).is_err());
    assert!(NoiseSchedule::new(vec![0.99, 0.99, 0.01]).is_err());
    assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.01]).is_err());
    assert!(NoiseSchedule::new(vec![0.9, 0.01]).is_err());
    assert!(NoiseSchedule::new(vec![0.97, 0.02]).is_err());
    assert!(NoiseSchedule::new(vec![0.5]).is_ok());
    let json = serde_json::to_string(&NoiseSchedule::default()).unwrap();
    let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
    assert_eq!(back, NoiseSchedule::default());
    assert!(serde_json::from_str::<NoiseSchedule>(r#"{"alpha_bar":[0.5,0.7]}"#).is_err());
}

#[test]
fn forward_sample_limits_and_mean() {
    let s = NoiseSchedule::new(vec![0.25]).unwrap();
    let ones = Image::<f64>::filled(3, 3, 1, 1.0);
    let zero = Image::zeros(3, 3, 1);
    let out = forward_sample_with(&ones, &zero, 0, &s).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.5));

    let near_one = NoiseSchedule::new(vec![1.0 - 1e-15]).unwrap();
    let img = Image::from_fn(4, 4, 2, |y, x, c| (y + 2 * x + c) as f64 / 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_sample(&img, 0, &near_one, &mut rng).unwrap();
    assert!(out.max_abs_diff(&img).unwrap() < 1e-6);

    let e = forward_sample(&img, 4, &NoiseSchedule::default(), &mut rng).unwrap_err();
    assert!(matches!(e, Error::Contract(_)));
}

#[test]
fn forward_sample_monte_carlo() {
    let s = NoiseSchedule::default();
    let i0 = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in 0..s.steps() {
        let (m, v) = (s.alpha_bar(t).sqrt() * i0, 1.0 - s.alpha_bar(t));
        let n = draws_for(m, v);
        let out = forward_sample(&constant_field(n, i0), t, &s, &mut rng).unwrap();
        let (mean, var) = moments(&out);
        assert!((mean - m).abs() <= 0.01 * m, "t={t} mean {mean} vs {m}");
        assert!((var - v).abs() <= 0.02 * v, "t={t} var {var} vs {v}");
    }
}

#[test]
fn posterior_chain_consistency() {
    let s = NoiseSchedule::default();
    let i0 = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in 1..s.steps() {
        let (m, v) = (s.alpha_bar(t - 1).sqrt() * i0, 1.0 - s.alpha_bar(t - 1));
        let n = draws_for(m, v);
        let x0 = constant_field(n, i0);
        let it = forward_sample(&x0, t, &s, &mut rng).unwrap();
        let prev = posterior_sample(&it, &x0, t, &s, &mut rng).unwrap();
        let (mean, var) = moments(&prev);
        assert!((mean - m).abs() <= 0.02 * m, "t={t} mean {mean} vs {m}");
        assert!((var - v).abs() <= 0.02 * v, "t={t} var {var} vs {v}");
    }
}

#[test]
fn posterior_zero_noise_is_mean() {
    let s = NoiseSchedule::default();
    let it = Image::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64 - 1.5);
    let x0 = Image::from_fn(2, 2, 1, |y, x, _| 0.3 * (x as f64) - 0.1 * y as f64);
    for t in 1..4 {
        let a = posterior_sample_with(&it, &x0, &Image::zeros(2, 2, 1), t, &s).unwrap();
        let b = posterior_mean(&it, &x0, t, &s).unwrap();
        assert_eq!(a, b);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = posterior_sample(&it, &x0, 0, &s, &mut rng).unwrap_err();
    assert!(matches!(e, Error::Contract(_)));
}

#[test]
fn spectrum_noise_is_white() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Image<f64> = standard_normal(256, 256, 2, &mut rng);
    let spec = crate::wavelet::mdwt(&noise, 3).unwrap();
    let (m, v) = moments(spec.packed());
    assert!(m.abs() < 0.01);
    assert!((v - 1.0).abs() < 0.02);
}

struct Counting {
    calls: Cell<usize>,
    value: f64,
}

impl Denoiser<f64> for Counting {
    fn hr_dims(&self) -> (usize, usize, usize) {
        (4, 4, 1)
    }
    fn lr_dims(&self) -> (usize, usize, usize) {
        (2, 2, 1)
    }
    fn steps(&self) -> usize {
        4
    }
    fn denoise(&self, noisy: &Image<f64>, _: &Image<f64>, _: usize) -> Result<Image<f64>> {
        self.calls.set(self.calls.get() + 1);
        Ok(noisy.map(|_| self.value))
    }
}

#[test]
fn sampler_uses_t_evaluations_and_clamps() {
    let m = Counting {
        calls: Cell::new(0),
        value: 3.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = sr_sample(&Image::zeros(2, 2, 1), &m, &NoiseSchedule::default(), &mut rng).unwrap();
    assert_eq!(m.calls.get(), 4);
    assert!(out.data().iter().all(|&v| v == 1.0));
}

#[test]
fn sampler_geometry_errors() {
    let m = Counting {
        calls: Cell::new(0),
        value: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let e = sr_sample(&Image::zeros(3, 2, 1), &m, &NoiseSchedule::default(), &mut rng).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    let short = NoiseSchedule::new(vec![0.995, 0.02]).unwrap();
    let e = sr_sample(&Image::zeros(2, 2, 1), &m, &short, &mut rng).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}

#[test]
fn single_step_is_one_pass_on_noise() {
    let cfg = ModelConfig {
        steps: 1,
        ..ModelConfig::tiny()
    };
    let mut model = Wsdt::<f64>::new(cfg, 7).unwrap();
    model.randomize(0.3, 8);
    let s = NoiseSchedule::new(vec![0.5]).unwrap();
    let lr = Image::from_fn(4, 4, 3, |y, x, c| ((y + x + c) as f64 * 0.1).sin());
    let out = sr_sample(&lr, &model, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let noise = standard_normal(8, 8, 3, &mut ChaCha8Rng::seed_from_u64(9));
    let direct = model.forward(&noise, &lr, 0).unwrap().clamp(-1.0, 1.0);
    assert_eq!(out, direct);
}

#[test]
fn sampler_determinism_and_zero_heads() {
    let s = NoiseSchedule::default();
    let lr = Image::from_fn(4, 4, 3, |y, x, c| ((y * x + c) as f32 * 0.2).cos());
    let fresh = Wsdt::<f32>::new(ModelConfig::tiny(), 10).unwrap();
    let out = sr_sample(&lr, &fresh, &s, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut model = fresh.clone();
    model.randomize(0.2, 12);
    let a = sr_sample(&lr, &model, &s, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let b = sr_sample(&lr, &model, &s, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    assert_eq!(a, b);
    let c = sr_sample(&lr, &model, &s, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    assert_ne!(a, c);
}
