//! Adversarial few-step training: a time-conditioned discriminator on
//! `(I_{t-1}, I_t)` pairs plus pixel- and spectrum-domain L1 reconstruction.

mod discriminator;
mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use discriminator::{DiscConfig, Discriminator};
pub use synth::{generate_synth, Degradation, Pair, Pattern, SynthSpec};

use crate::diffusion::{forward_sample, forward_sample_with, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::wavelet::mdwt;
use crate::wsdt::{ModelConfig, Wsdt};

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(L_pixel, L_fre)`: mean absolute error in pixels and in the `J`-level
/// packed spectrum.
pub fn loss_recon<T: Scalar>(pred: &Image<T>, target: &Image<T>, levels: usize) -> Result<(T, T)> {
    pred.same_dims(target)?;
    let n = T::c(pred.data().len() as f64);
    let diff = pred.zip_map(target, |a, b| a - b)?;
    let pixel = diff.data().iter().map(|v| v.abs()).sum::<T>() / n;
    let spec = mdwt(&diff, levels)?;
    let fre = spec.packed().data().iter().map(|v| v.abs()).sum::<T>() / n;
    Ok((pixel, fre))
}

/// `(L_D, L_G)` from the real and fake logits (non-saturating pair).
pub fn loss_adv(real_logit: f64, fake_logit: f64) -> (f64, f64) {
    (softplus(-real_logit) + softplus(fake_logit), softplus(-fake_logit))
}

/// `(L_D, L_G)` for one pair set, evaluated through the discriminator.
pub fn loss_adv_pairs<T: Scalar>(
    disc: &Discriminator,
    params: &ParamStore<T>,
    real_prev: &Image<T>,
    fake_prev: &Image<T>,
    current: &Image<T>,
    t: usize,
) -> Result<(f64, f64)> {
    real_prev.same_dims(fake_prev)?;
    real_prev.same_dims(current)?;
    let ctx = current.to_tensor();
    let real = disc.logit(params, &real_prev.to_tensor(), &ctx, t)?;
    let fake = disc.logit(params, &fake_prev.to_tensor(), &ctx, t)?;
    Ok(loss_adv(real.to_f64_lossy(), fake.to_f64_lossy()))
}

/// Tape versions of the reconstruction losses; `pred` is `H×W×C`.
pub fn recon_on_tape<T: Scalar>(
    g: &mut Graph<'_, T>,
    pred: Var,
    target: &Image<T>,
    levels: usize,
) -> Result<(Var, Var)> {
    let tgt = g.constant(target.to_tensor());
    let diff = g.tape.sub(pred, tgt)?;
    let a = g.tape.abs(diff);
    let pixel = g.tape.mean(a);
    let spec = g.tape.mdwt(diff, levels)?;
    let s = g.tape.abs(spec);
    let fre = g.tape.mean(s);
    Ok((pixel, fre))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one, eps) = (T::one(), T::c(self.eps));
        let lr = T::c(self.lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the adversarial generator loss.
    pub alpha: f64,
    /// Weight of the pixel L1 loss.
    pub beta: f64,
    /// Weight of the spectrum L1 loss.
    pub gamma: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub upscale: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Linear warm-up length in steps.
    #[serde(default)]
    pub warmup: u64,
    #[serde(default)]
    pub discriminator: DiscConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay to zero at `iterations`.
    Cosine,
}

fn default_betas() -> (f64, f64) {
    (0.5, 0.9)
}

impl TrainConfig {
    /// Defaults for a given model geometry.
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lr_g: 2e-4,
            lr_d: 1e-4,
            batch_size: 4,
            iterations: 1000,
            seed: 0,
            upscale: model.upscale,
            height: model.height,
            width: model.width,
            adam_betas: default_betas(),
            lr_schedule: LrSchedule::Constant,
            warmup: 0,
            discriminator: DiscConfig::default(),
        }
    }

    /// Learning-rate multiplier for step `k` (0-based).
    pub fn lr_factor(&self, k: u64) -> f64 {
        let warm = if k < self.warmup {
            (k + 1) as f64 / self.warmup as f64
        } else {
            1.0
        };
        let decay = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let p = (k as f64 / self.iterations.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        };
        warm * decay
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "loss weight {name} = {v} must be finite and ≥ 0"
                )));
            }
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("learning rate {name} = {v} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if (self.upscale, self.height, self.width) != (model.upscale, model.height, model.width) {
            return Err(Error::config(format!(
                "training geometry {}×{} at {}× does not match model {}×{} at {}×",
                self.height, self.width, self.upscale, model.height, model.width, model.upscale
            )));
        }
        model.validate()?;
        Ok(())
    }
}

/// Losses of one training step (batch means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub iteration: u64,
    pub l_d: f64,
    pub l_adv_g: f64,
    pub l_pixel: f64,
    pub l_fre: f64,
    /// `α·L_adv^G + β·L_pixel + γ·L_fre`.
    pub l_g: f64,
}

/// Generator, discriminator and optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T> {
    pub generator: Wsdt<T>,
    pub discriminator: Discriminator,
    pub disc_params: ParamStore<T>,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    /// Number of completed steps.
    pub iteration: u64,
}

/// One training example after noising.
struct Noised<T> {
    t: usize,
    /// `I_t`.
    current: Image<T>,
    /// Real `I_{t-1}` (the clean image at `t = 0`).
    real_prev: Image<T>,
    /// Posterior noise for the fake `Ĩ_{t-1}`.
    eps: Image<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate(&model)?;
        if schedule.steps() != model.steps {
            return Err(Error::config(format!(
                "schedule has {} steps, model expects {}",
                schedule.steps(),
                model.steps
            )));
        }
        let generator = Wsdt::new(model, config.seed)?;
        let mut disc_params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let discriminator = Discriminator::new(
            &mut disc_params,
            &config.discriminator,
            (model.height, model.width, model.channels),
            model.steps,
            &mut rng,
        )?;
        let (b1, b2) = config.adam_betas;
        Ok(Self {
            opt_g: Adam::new(&generator.params, config.lr_g, b1, b2),
            opt_d: Adam::new(&disc_params, config.lr_d, b1, b2),
            generator,
            discriminator,
            disc_params,
            schedule,
            config,
            iteration: 0,
        })
    }

    /// Randomness of step `k` depends only on `(seed, k)`, so a resumed run
    /// continues the exact trajectory.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iteration);
        rng
    }

    fn noise(&self, hr: &Image<T>, rng: &mut ChaCha8Rng) -> Result<Noised<T>> {
        let s = &self.schedule;
        let t = rng.random_range(0..s.steps());
        let (h, w, c) = hr.dims();
        // Joint draw: I_{t-1} ~ q(·|I_0), then I_t ~ q(·|I_{t-1}).
        let real_prev = if t == 0 {
            hr.clone()
        } else {
            forward_sample(hr, t - 1, s, rng)?
        };
        let a = T::c(s.alpha(t).sqrt());
        let b = T::c((1.0 - s.alpha(t)).sqrt());
        let step_noise = standard_normal(h, w, c, rng);
        let current = real_prev.zip_map(&step_noise, |x, e| a * x + b * e)?;
        let eps = standard_normal(h, w, c, rng);
        Ok(Noised {
            t,
            current,
            real_prev,
            eps,
        })
    }

    /// Runs one discriminator update followed by one generator update on a
    /// batch drawn from `data`.
    pub fn step(&mut self, data: &[Pair<T>]) -> Result<StepLosses> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let mut rng = self.step_rng();
        let cfg = self.config.clone();
        let levels = self.generator.config().levels;
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let noised = batch
            .iter()
            .map(|&i| self.noise(&data[i].hr, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let inv_b = 1.0 / cfg.batch_size as f64;

        // Generator forward passes, kept on their tapes for the G update.
        let mut graphs = Vec::with_capacity(batch.len());
        for (&i, n) in batch.iter().zip(&noised) {
            let mut g = Graph::new(&self.generator.params, true);
            let x0 = self.generator.arch.forward(&mut g, &n.current, &data[i].lr, n.t)?;
            let fake = self.fake_prev(&mut g, x0, n)?;
            graphs.push((g, x0, fake));
        }

        // Discriminator update on real vs detached fake pairs.
        let l_d = {
            let mut g = Graph::new(&self.disc_params, true);
            let mut total = None;
            for ((gg, _, fake), n) in graphs.iter().zip(&noised) {
                let ctx = g.constant(n.current.to_tensor());
                let real = g.constant(n.real_prev.to_tensor());
                let fk = g.constant(gg.value(*fake).clone());
                let lr_ = self.discriminator.forward(&mut g, real, ctx, n.t)?;
                let lf_ = self.discriminator.forward(&mut g, fk, ctx, n.t)?;
                let nr = g.tape.scale(lr_, -T::one());
                let a = g.tape.softplus(nr);
                let b = g.tape.softplus(lf_);
                let s = g.tape.add(a, b)?;
                total = Some(match total {
                    None => s,
                    Some(acc) => g.tape.add(acc, s)?,
                });
            }
            let total = total.expect("non-empty batch");
            let loss = g.tape.scale(total, T::c(inv_b));
            let loss = g.tape.sum(loss);
            let l_d = finite(g.value(loss).item()?.to_f64_lossy(), "L_D", self.iteration)?;
            let grads = g.backward(loss)?;
            self.opt_d.lr = cfg.lr_d * cfg.lr_factor(self.iteration);
            self.opt_d.update(&mut self.disc_params, &grads)?;
            l_d
        };

        // Generator update through the updated discriminator.
        let mut grads_g: Option<Vec<Tensor<T>>> = None;
        let (mut l_adv, mut l_pix, mut l_fre) = (0.0, 0.0, 0.0);
        for (((mut g, x0, fake), n), &i) in graphs.into_iter().zip(&noised).zip(&batch) {
            let (pixel, fre) = recon_on_tape(&mut g, x0, &data[i].hr, levels)?;
            l_pix += g.value(pixel).item()?.to_f64_lossy() * inv_b;
            l_fre += g.value(fre).item()?.to_f64_lossy() * inv_b;
            let wp = g.tape.scale(pixel, T::c(cfg.beta * inv_b));
            let wf = g.tape.scale(fre, T::c(cfg.gamma * inv_b));
            let mut loss = g.tape.add(wp, wf)?;
            let (adv, dfake) = self.adversarial_grad(g.value(fake), &n.current, n.t)?;
            l_adv += adv * inv_b;
            if cfg.alpha > 0.0 {
                // Splice dL_adv/dĨ_{t-1} from the discriminator graph.
                let seed = g.constant(dfake.map(|v| v * T::c(cfg.alpha * inv_b)));
                let prod = g.tape.mul(fake, seed)?;
                let surrogate = g.tape.sum(prod);
                loss = g.tape.add(loss, surrogate)?;
            }
            let grads = g.backward(loss)?;
            match grads_g.as_mut() {
                None => grads_g = Some(grads),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let it = self.iteration;
        finite(l_adv, "L_adv^G", it)?;
        finite(l_pix, "L_pixel", it)?;
        finite(l_fre, "L_fre", it)?;
        let grads = grads_g.expect("non-empty batch");
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numerical(format!(
                "iteration {it}: non-finite generator gradient"
            )));
        }
        self.opt_g.lr = cfg.lr_g * cfg.lr_factor(it);
        self.opt_g.update(&mut self.generator.params, &grads)?;
        self.iteration += 1;
        Ok(StepLosses {
            iteration: it,
            l_d,
            l_adv_g: l_adv,
            l_pixel: l_pix,
            l_fre,
            l_g: cfg.alpha * l_adv + cfg.beta * l_pix + cfg.gamma * l_fre,
        })
    }

    /// `Ĩ_{t-1}` on the generator tape: the posterior draw around `Ĩ_0`, or
    /// `Ĩ_0` itself at `t = 0`.
    fn fake_prev(&self, g: &mut Graph<'_, T>, x0: Var, n: &Noised<T>) -> Result<Var> {
        if n.t == 0 {
            return Ok(x0);
        }
        let s = &self.schedule;
        let (c0, ct) = s.posterior_coefficients(n.t);
        let sd = s.posterior_variance(n.t).sqrt();
        let rest = n.current.zip_map(&n.eps, |y, e| T::c(ct) * y + T::c(sd) * e)?;
        let scaled = g.tape.scale(x0, T::c(c0));
        let rest = g.constant(rest.to_tensor());
        g.tape.add(scaled, rest)
    }

    /// `L_adv^G = softplus(−D(Ĩ_{t-1}, I_t, t))` and its gradient with respect
    /// to `Ĩ_{t-1}`, with discriminator weights frozen.
    fn adversarial_grad(&self, fake: &Tensor<T>, current: &Image<T>, t: usize) -> Result<(f64, Tensor<T>)> {
        let mut g = Graph::new(&self.disc_params, false);
        let f = g.tape.variable(fake.clone());
        let ctx = g.constant(current.to_tensor());
        let logit = self.discriminator.forward(&mut g, f, ctx, t)?;
        let neg = g.tape.scale(logit, -T::one());
        let sp = g.tape.softplus(neg);
        let loss = g.tape.sum(sp);
        let value = g.value(loss).item()?.to_f64_lossy();
        g.tape.backward(loss)?;
        let grad = g.tape.grad(f).unwrap_or_else(|| Tensor::zeros(fake.shape()));
        Ok((value, grad))
    }

    /// Deterministic reconstruction check used by tests and tooling: the
    /// generator's `Ĩ_0` for `hr` noised at step `t` with noise from `seed`.
    pub fn predict_clean(&self, pair: &Pair<T>, t: usize, seed: u64) -> Result<Image<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = pair.hr.dims();
        let eps = standard_normal(h, w, c, &mut rng);
        let it = forward_sample_with(&pair.hr, &eps, t, &self.schedule)?;
        self.generator.forward(&it, &pair.lr, t)
    }
}

fn finite(v: f64, what: &str, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("iteration {iteration}: {what} is {v}")))
    }
}

#[cfg(test)]
mod tests;
