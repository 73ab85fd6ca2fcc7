use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Init, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::wsdt::timestep_sinusoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    /// Output channels per strided layer.
    pub widths: Vec<usize>,
    /// Stride (= kernel size) per layer.
    pub strides: Vec<usize>,
    /// Width of the timestep sinusoid fed to every layer.
    pub time_dim: usize,
    pub slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 64],
            strides: vec![2, 2, 2],
            time_dim: 32,
            slope: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    /// Acts on patches of the candidate (or of the previous features).
    main: Linear,
    /// First layer only: acts on patches of the context image.
    context: Option<ParamId>,
    time: Linear,
    grid: (usize, usize),
    index: Arc<[usize]>,
}

/// Time-conditioned pair discriminator. Each layer is a non-overlapping
/// strided convolution (patchify + matmul); the first one sees the channel
/// concatenation of candidate and context, realised as two weight blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    layers: Vec<Layer>,
    out: Linear,
    height: usize,
    width: usize,
    channels: usize,
    time_dim: usize,
    steps: usize,
    slope: f64,
}

/// Gather index turning an `h×w×c` grid into `(h/s·w/s) × (s·s·c)` patches.
fn patch_index(h: usize, w: usize, c: usize, s: usize) -> Arc<[usize]> {
    let (gh, gw) = (h / s, w / s);
    let mut idx = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..s {
                for dx in 0..s {
                    let base = ((py * s + dy) * w + px * s + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx.into()
}

impl Discriminator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &DiscConfig,
        dims: (usize, usize, usize),
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (height, width, channels) = dims;
        if cfg.widths.is_empty() || cfg.widths.len() != cfg.strides.len() {
            return Err(Error::config(
                "discriminator needs matching, non-empty widths and strides",
            ));
        }
        if cfg.time_dim == 0 || cfg.time_dim % 2 != 0 {
            return Err(Error::config("discriminator time_dim must be even and positive"));
        }
        let (mut h, mut w, mut c) = (height, width, channels);
        let mut layers = Vec::new();
        for (i, (&width_out, &s)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            if s == 0 || h % s != 0 || w % s != 0 {
                return Err(Error::config(format!(
                    "discriminator layer {i}: {h}×{w} grid not divisible by stride {s}"
                )));
            }
            let fan_in = s * s * c;
            let name = format!("disc.{i}");
            // the first layer sees 2·fan_in concatenated inputs
            let fan = if i == 0 { 2 * fan_in } else { fan_in };
            let init = Init::Xavier {
                fan_in: fan,
                fan_out: width_out,
            };
            let main = Linear::new(store, &format!("{name}.main"), fan_in, width_out, init, rng);
            let context = (i == 0).then(|| store.init(format!("{name}.context"), &[fan_in, width_out], init, rng));
            let time = Linear::xavier(store, &format!("{name}.time"), cfg.time_dim, width_out, rng);
            let index = patch_index(h, w, c, s);
            h /= s;
            w /= s;
            c = width_out;
            layers.push(Layer {
                main,
                context,
                time,
                grid: (h, w),
                index,
            });
        }
        let out = Linear::xavier(store, "disc.out", c, 1, rng);
        Ok(Self {
            layers,
            out,
            height,
            width,
            channels,
            time_dim: cfg.time_dim,
            steps,
            slope: cfg.slope,
        })
    }

    /// Logit `D(candidate, context, t)` as a `1×1` variable. Both images are
    /// `H×W×C` variables.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, candidate: Var, context: Var, t: usize) -> Result<Var> {
        if t >= self.steps {
            return Err(Error::contract(format!("timestep {t} outside [0, {})", self.steps)));
        }
        let dims = [self.height, self.width, self.channels];
        for v in [candidate, context] {
            if g.value(v).shape() != dims {
                return Err(Error::dim(format!(
                    "discriminator expects {dims:?}, got {:?}",
                    g.value(v).shape()
                )));
            }
        }
        let temb = g.constant(timestep_sinusoid(t, self.time_dim));
        let mut x = candidate;
        for layer in &self.layers {
            let (gh, gw) = layer.grid;
            let fan_in = layer.index.len() / (gh * gw);
            let patches = g.tape.gather(x, layer.index.clone(), &[gh * gw, fan_in])?;
            let mut h = layer.main.forward(g, patches)?;
            if let Some(ctx) = layer.context {
                let cp = g.tape.gather(context, layer.index.clone(), &[gh * gw, fan_in])?;
                let w = g.param(ctx);
                let hc = g.tape.matmul(cp, w)?;
                h = g.tape.add(h, hc)?;
            }
            let tb = layer.time.forward(g, temb)?;
            h = g.tape.add_row(h, tb)?;
            x = g.tape.leaky_relu(h, T::c(self.slope));
        }
        let n = g.value(x).shape()[0];
        let pool = g.constant(Tensor::full(&[1, n], T::c(1.0 / n as f64)));
        let pooled = g.tape.matmul(pool, x)?;
        self.out.forward(g, pooled)
    }

    /// Value-only logit.
    pub fn logit<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        candidate: &Tensor<T>,
        context: &Tensor<T>,
        t: usize,
    ) -> Result<T> {
        let mut g = Graph::new(params, false);
        let (a, b) = (g.constant(candidate.clone()), g.constant(context.clone()));
        let l = self.forward(&mut g, a, b, t)?;
        g.value(l)
            .data()
            .first()
            .copied()
            .ok_or_else(|| Error::contract("empty logit"))
    }
}
