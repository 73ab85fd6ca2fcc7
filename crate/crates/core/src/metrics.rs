//! PSNR, SSIM and the consistency score. Inputs are images in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.same_dims(b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of a single-channel plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let (c1, c2) = ((K1 * 1.0f64).powi(2), (K2 * 1.0f64).powi(2));
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter(a, h, w, &k);
    let mu_b = filter(b, h, w, &k);
    let aa = filter(&prod(|x, _| x * x), h, w, &k);
    let bb = filter(&prod(|_, y| y * y), h, w, &k);
    let ab = filter(&prod(|x, y| x * y), h, w, &k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5, `L = 1`), averaged
/// over channels.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.same_dims(b)?;
    let (h, w, c) = a.dims();
    if h < WINDOW || w < WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs at least {WINDOW}×{WINDOW}, got {h}×{w}"
        )));
    }
    let plane = |img: &Image<T>, ch: usize| -> Vec<f64> {
        img.data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|v| v.to_f64_lossy())
            .collect()
    };
    Ok((0..c)
        .map(|ch| ssim_plane(&plane(a, ch), &plane(b, ch), h, w))
        .sum::<f64>()
        / c as f64)
}

/// `MSE(box_down_N(sr), lr) × 10⁵`.
pub fn consistency<T: Scalar>(sr: &Image<T>, lr: &Image<T>, upscale: usize) -> Result<f64> {
    let (h, w, c) = sr.dims();
    if lr.dims() != (h / upscale.max(1), w / upscale.max(1), c) || upscale == 0 || h % upscale != 0 || w % upscale != 0
    {
        return Err(Error::dim(format!(
            "SR {:?} is not {upscale}× LR {:?}",
            sr.dims(),
            lr.dims()
        )));
    }
    Ok(mse(&sr.box_downsample(upscale)?, lr)? * 1e5)
}

/// Maps `[-1, 1]` to `[0, 1]`.
pub fn to_unit<T: Scalar>(img: &Image<T>) -> Image<T> {
    let half = T::c(0.5);
    img.map(|v| (v + T::one()) * half)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub cons: f64,
}

impl MetricReport {
    /// All three metrics for `[0, 1]` images.
    pub fn evaluate<T: Scalar>(sr: &Image<T>, hr: &Image<T>, lr: &Image<T>, upscale: usize) -> Result<Self> {
        Ok(Self {
            psnr: psnr(sr, hr)?,
            ssim: ssim(sr, hr)?,
            cons: consistency(sr, lr, upscale)?,
        })
    }

    /// Component-wise mean.
    pub fn mean(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(Self {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            cons: reports.iter().map(|r| r.cons).sum::<f64>() / n,
        })
    }

    /// `psnr=… ssim=… cons=…` lines, one per metric.
    pub fn to_key_values(&self) -> String {
        format!("psnr={:.6}\nssim={:.6}\ncons={:.6}\n", self.psnr, self.ssim, self.cons)
    }
}
