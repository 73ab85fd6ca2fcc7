//! Deterministic synthetic HR/LR pairs for desk-scale experiments.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Linear colour ramps.
    Gradient,
    /// Anti-aliased ellipses and rectangles.
    Shapes,
    /// Oriented sinusoidal textures.
    Sinusoid,
    /// Smooth random fields (low-pass Fourier sums).
    Noise,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Gradient, Pattern::Shapes, Pattern::Sinusoid, Pattern::Noise];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    /// Exact `N×N` block mean.
    #[default]
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "three")]
    pub channels: usize,
    pub upscale: usize,
    #[serde(default = "all_patterns")]
    pub patterns: Vec<Pattern>,
    #[serde(default)]
    pub degradation: Degradation,
}

fn three() -> usize {
    3
}

fn all_patterns() -> Vec<Pattern> {
    Pattern::ALL.to_vec()
}

impl SynthSpec {
    pub fn new(seed: u64, count: usize, height: usize, width: usize, upscale: usize) -> Self {
        Self {
            seed,
            count,
            height,
            width,
            channels: 3,
            upscale,
            patterns: all_patterns(),
            degradation: Degradation::Box,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config(
                "synthetic images need non-zero height, width and channels",
            ));
        }
        if self.upscale == 0 || self.height % self.upscale != 0 || self.width % self.upscale != 0 {
            return Err(Error::config(format!(
                "synthetic size {}×{} not divisible by upscale {}",
                self.height, self.width, self.upscale
            )));
        }
        if self.patterns.is_empty() {
            return Err(Error::config("synthetic pattern mix is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub hr: Image<T>,
    pub lr: Image<T>,
}

impl<T: Scalar> Pair<T> {
    /// Builds the pair from an HR image with the given degradation.
    pub fn from_hr(hr: Image<T>, upscale: usize, degradation: Degradation) -> Result<Self> {
        let lr = match degradation {
            Degradation::Box => hr.box_downsample(upscale)?,
        };
        Ok(Self { hr, lr })
    }
}

/// Image `i` of the set depends only on `(seed, i)`.
pub fn generate_synth<T: Scalar>(spec: &SynthSpec) -> Result<Vec<Pair<T>>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let hr = render(&spec.patterns, spec.height, spec.width, spec.channels, &mut rng).cast();
            Pair::from_hr(hr, spec.upscale, spec.degradation)
        })
        .collect()
}

/// Layers the enabled patterns: a ramp (or flat) background, then each other
/// pattern with probability ½, at least one layer in total.
fn render(patterns: &[Pattern], h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image<f64> {
    let has = |p| patterns.contains(&p);
    let mut img = if has(Pattern::Gradient) {
        gradient(h, w, c, rng).map(|v| 0.6 * v)
    } else {
        let base = colour(c, rng);
        Image::from_fn(h, w, c, |_, _, ch| 0.5 * base[ch])
    };
    let layers: Vec<Pattern> = patterns.iter().copied().filter(|p| *p != Pattern::Gradient).collect();
    let mut chosen: Vec<Pattern> = layers.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    if chosen.is_empty() && !has(Pattern::Gradient) {
        chosen.push(layers[rng.random_range(0..layers.len())]);
    }
    for p in chosen {
        match p {
            Pattern::Shapes => draw_shapes(&mut img, rng),
            Pattern::Sinusoid => add(&mut img, &sinusoid(h, w, c, rng), 0.35),
            Pattern::Noise => add(&mut img, &smooth_noise(h, w, c, rng), 0.35),
            Pattern::Gradient => unreachable!(),
        }
    }
    img.clamp(-1.0, 1.0)
}

fn add(img: &mut Image<f64>, layer: &Image<f64>, weight: f64) {
    for (a, b) in img.data_mut().iter_mut().zip(layer.data()) {
        *a += weight * b;
    }
}

/// Normalised coordinates in `[0, 1)` at pixel centres.
fn coords(y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
    ((y + 0.5) / h as f64, (x + 0.5) / w as f64)
}

fn colour(c: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(-0.9..0.9)).collect()
}

fn gradient(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Image<f64> {
    let (a, b) = (colour(c, rng), colour(c, rng));
    let theta = rng.random_range(0.0..2.0 * PI);
    let (dy, dx) = (theta.sin(), theta.cos());
    Image::from_fn(h, w, c, |y, x, ch| {
        let (v, u) = coords(y as f64, x as f64, h, w);
        // projection onto the ramp direction, mapped to [0, 1]
        let s = ((v - 0.5) * dy + (u - 0.5) * dx) / std::f64::consts::SQRT_2 + 0.5;
        a[ch] + (b[ch] - a[ch]) * s
    })
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, v: f64, u: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((v - cy) / ry).powi(2) + ((u - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => v >= y0 && v <= y1 && u >= x0 && u <= x1,
        }
    }
}

/// Coverage estimated on a 4×4 sub-pixel grid.
const SUPERSAMPLE: usize = 4;

fn draw_shapes(img: &mut Image<f64>, rng: &mut impl Rng) {
    let (h, w, c) = img.dims();
    let n = rng.random_range(1..=3);
    for _ in 0..n {
        let fill = colour(c, rng);
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy: rng.random_range(0.15..0.85),
                cx: rng.random_range(0.15..0.85),
                ry: rng.random_range(0.08..0.3),
                rx: rng.random_range(0.08..0.3),
            }
        } else {
            let (y0, x0) = (rng.random_range(0.05..0.7), rng.random_range(0.05..0.7));
            Shape::Rect {
                y0,
                x0,
                y1: y0 + rng.random_range(0.1..0.3),
                x1: x0 + rng.random_range(0.1..0.3),
            }
        };
        for y in 0..h {
            for x in 0..w {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let off = |s: usize| (s as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let (v, u) = coords(y as f64 + off(sy), x as f64 + off(sx), h, w);
                        hits += usize::from(shape.contains(v, u));
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for (ch, f) in fill.iter().enumerate() {
                    let old = img.get(y, x, ch);
                    img.set(y, x, ch, old + a * (f - old));
                }
            }
        }
    }
}

fn sinusoid(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Image<f64> {
    let waves: Vec<_> = (0..rng.random_range(1..=3))
        .map(|_| {
            // periods between a quarter of the image and the full image
            let cycles = rng.random_range(1.0..4.0);
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (cycles * theta.sin(), cycles * theta.cos(), phase, colour(c, rng))
        })
        .collect();
    let scale = 1.0 / waves.len() as f64;
    Image::from_fn(h, w, c, |y, x, ch| {
        let (v, u) = coords(y as f64, x as f64, h, w);
        waves
            .iter()
            .map(|(fy, fx, ph, amp)| scale * amp[ch] / 0.9 * (2.0 * PI * (fy * v + fx * u) + ph).sin())
            .sum::<f64>()
    })
}

fn smooth_noise(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Image<f64> {
    const MAX_FREQ: i32 = 3;
    let mut terms = Vec::new();
    for ky in 0..=MAX_FREQ {
        for kx in -MAX_FREQ..=MAX_FREQ {
            if ky == 0 && kx <= 0 {
                continue;
            }
            let decay = 1.0 / (1.0 + (ky * ky + kx * kx) as f64);
            let amps: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0) * decay).collect();
            terms.push((ky as f64, kx as f64, rng.random_range(0.0..2.0 * PI), amps));
        }
    }
    Image::from_fn(h, w, c, |y, x, ch| {
        let (v, u) = coords(y as f64, x as f64, h, w);
        terms
            .iter()
            .map(|(ky, kx, ph, a)| a[ch] * (2.0 * PI * (ky * v + kx * u) + ph).cos())
            .sum::<f64>()
    })
}
