//! Few-step Gaussian diffusion with an `x_0`-predicting denoiser.
//!
//! `alpha_bar[t]` is the cumulative signal coefficient, so
//! `q(I_t | I_0) = N(√ᾱ_t I_0, (1 − ᾱ_t) I)`. Index `-1` is the clean image
//! (`ᾱ_{-1} = 1`), which makes step 0 a regular step: its posterior mean is
//! the denoiser's own prediction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::wsdt::Wsdt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRepr {
    alpha_bar: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        Self::new(r.alpha_bar)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { alpha_bar: s.alpha_bar }
    }
}

impl Default for NoiseSchedule {
    /// `T = 4`, `√ᾱ = [0.99, 0.8, 0.4, 0.1]`.
    fn default() -> Self {
        Self {
            alpha_bar: vec![0.9801, 0.64, 0.16, 0.01],
        }
    }
}

impl NoiseSchedule {
    /// Requires `ᾱ_t ∈ (0, 1)` strictly decreasing. With two or more steps
    /// the chain must also start nearly clean (`√ᾱ_0 ≥ 0.99`) and end nearly
    /// pure noise (`ᾱ_{T-1} ≤ 0.05`).
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::config("noise schedule needs at least one step"));
        }
        if let Some(a) = alpha_bar.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::config(format!("alpha_bar entry {a} outside (0, 1)")));
        }
        if let Some(w) = alpha_bar.windows(2).find(|w| w[1] >= w[0]) {
            return Err(Error::config(format!(
                "alpha_bar must be strictly decreasing, found {} then {}",
                w[0], w[1]
            )));
        }
        let t = alpha_bar.len();
        if t >= 2 && (alpha_bar[0].sqrt() < 0.99 - 1e-12 || alpha_bar[t - 1] > 0.05) {
            return Err(Error::config(format!(
                "alpha_bar must start ≥ 0.9801 and end ≤ 0.05, got {} … {}",
                alpha_bar[0],
                alpha_bar[t - 1]
            )));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t`; `t = -1` is encoded as `None` and yields 1.
    fn ab(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Per-step `α_t = ᾱ_t / ᾱ_{t-1}`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.ab(t.checked_sub(1))
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t-1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let prev = self.ab(t.checked_sub(1));
        (1.0 - prev) / (1.0 - self.alpha_bar[t]) * self.beta(t)
    }

    /// Posterior mean coefficients `(c_0, c_t)` on `Ĩ_0` and `I_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let prev = self.ab(t.checked_sub(1));
        let denom = 1.0 - self.alpha_bar[t];
        (
            prev.sqrt() * self.beta(t) / denom,
            self.alpha(t).sqrt() * (1.0 - prev) / denom,
        )
    }

    fn check_step(&self, t: usize, lo: usize, op: &str) -> Result<()> {
        if t < lo || t >= self.steps() {
            return Err(Error::contract(format!(
                "{op}: step {t} outside [{lo}, {})",
                self.steps()
            )));
        }
        Ok(())
    }
}

fn normal_like<T: Scalar>(like: &Image<T>, rng: &mut impl Rng) -> Image<T> {
    let (h, w, c) = like.dims();
    standard_normal(h, w, c, rng)
}

/// `i.i.d. N(0, 1)` image.
pub fn standard_normal<T: Scalar>(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Image<T> {
    Image::from_fn(h, w, c, |_, _, _| T::c(rng.sample::<f64, _>(StandardNormal)))
}

/// `I_t = √ᾱ_t I_0 + √(1 − ᾱ_t) ε` with the given `ε`.
pub fn forward_sample_with<T: Scalar>(i0: &Image<T>, eps: &Image<T>, t: usize, s: &NoiseSchedule) -> Result<Image<T>> {
    s.check_step(t, 0, "forward_sample")?;
    let (a, b) = (T::c(s.alpha_bar(t).sqrt()), T::c((1.0 - s.alpha_bar(t)).sqrt()));
    i0.zip_map(eps, |x, e| a * x + b * e)
}

pub fn forward_sample<T: Scalar>(i0: &Image<T>, t: usize, s: &NoiseSchedule, rng: &mut impl Rng) -> Result<Image<T>> {
    s.check_step(t, 0, "forward_sample")?;
    forward_sample_with(i0, &normal_like(i0, rng), t, s)
}

/// Mean of `q(I_{t-1} | I_t, Ĩ_0)`. Valid for every `t`, including 0 where it
/// equals `Ĩ_0`.
pub fn posterior_mean<T: Scalar>(i_t: &Image<T>, x0: &Image<T>, t: usize, s: &NoiseSchedule) -> Result<Image<T>> {
    s.check_step(t, 0, "posterior_mean")?;
    let (c0, ct) = s.posterior_coefficients(t);
    let (c0, ct) = (T::c(c0), T::c(ct));
    x0.zip_map(i_t, |x, y| c0 * x + ct * y)
}

/// Posterior draw with explicit standard-normal noise `ε`.
pub fn posterior_sample_with<T: Scalar>(
    i_t: &Image<T>,
    x0: &Image<T>,
    eps: &Image<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Image<T>> {
    s.check_step(t, 1, "posterior_sample")?;
    let mean = posterior_mean(i_t, x0, t, s)?;
    let sd = T::c(s.posterior_variance(t).sqrt());
    mean.zip_map(eps, |m, e| m + sd * e)
}

/// Draws `Ĩ_{t-1} ~ q(I_{t-1} | I_t, Ĩ_0)` for `1 ≤ t < T`.
pub fn posterior_sample<T: Scalar>(
    i_t: &Image<T>,
    x0: &Image<T>,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Image<T>> {
    s.check_step(t, 1, "posterior_sample")?;
    posterior_sample_with(i_t, x0, &normal_like(i_t, rng), t, s)
}

/// Anything that predicts `Ĩ_0` from `(I_t, I_lr, t)`.
pub trait Denoiser<T> {
    /// `(H, W, C)` of the HR output.
    fn hr_dims(&self) -> (usize, usize, usize);
    /// `(h, w, C)` of the LR condition.
    fn lr_dims(&self) -> (usize, usize, usize);
    fn steps(&self) -> usize;
    fn denoise(&self, noisy: &Image<T>, lr: &Image<T>, t: usize) -> Result<Image<T>>;
}

impl<T: Scalar> Denoiser<T> for Wsdt<T> {
    fn hr_dims(&self) -> (usize, usize, usize) {
        let c = self.config();
        (c.height, c.width, c.channels)
    }

    fn lr_dims(&self) -> (usize, usize, usize) {
        let c = self.config();
        let (h, w) = c.lr_size();
        (h, w, c.channels)
    }

    fn steps(&self) -> usize {
        self.config().steps
    }

    fn denoise(&self, noisy: &Image<T>, lr: &Image<T>, t: usize) -> Result<Image<T>> {
        self.forward(noisy, lr, t)
    }
}

/// Conditional super-resolution: starts from noise at step `T-1`, alternates
/// denoising and posterior draws down to step 1, then maps the step-0 sample
/// through the denoiser once more. `T` model evaluations in total; output is
/// clamped to `[-1, 1]`.
pub fn sr_sample<T: Scalar, M: Denoiser<T> + ?Sized>(
    lr: &Image<T>,
    model: &M,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Image<T>> {
    if lr.dims() != model.lr_dims() {
        return Err(Error::config(format!(
            "LR image {:?} does not match model LR geometry {:?}",
            lr.dims(),
            model.lr_dims()
        )));
    }
    if s.steps() != model.steps() {
        return Err(Error::config(format!(
            "schedule has {} steps, model was built for {}",
            s.steps(),
            model.steps()
        )));
    }
    let (h, w, c) = model.hr_dims();
    let mut x = standard_normal(h, w, c, rng);
    for t in (1..s.steps()).rev() {
        let x0 = model.denoise(&x, lr, t)?;
        x = if t == 1 {
            posterior_mean(&x, &x0, t, s)?
        } else {
            posterior_sample(&x, &x0, t, s, rng)?
        };
    }
    let out = model.denoise(&x, lr, 0)?;
    if !out.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite value in sampled image".into()));
    }
    Ok(out.clamp(-T::one(), T::one()))
}

#[cfg(test)]
mod tests;
