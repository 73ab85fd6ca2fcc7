//! The wavelet-spectrum denoising transformer.
//!
//! `I_t` → packed spectrum → tokens → LF elementary decoder over `[LR | LF]`
//! → HF detail decoder over `[LR | LF | HF]` → heads → spectrum → `Ĩ_0`.
//! The LF head decodes the sum of the elementary tokens and the LF residual
//! tokens produced by the detail decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::image::Image;
use crate::masks::{build_high_mask, build_m_low, AttentionMask, HfVisibility};
use crate::nn::{chunk_row, modulate, Graph, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::tokenizer::{plan_patches, OutputHeads, PatchEmbedding, PatchGeometry, PatchPlan};
use crate::wavelet::{level_for_scale, mdwt};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// HR image height.
    pub height: usize,
    /// HR image width.
    pub width: usize,
    pub channels: usize,
    /// Upscale factor `N`; the LR condition is `H/N × W/N`.
    pub upscale: usize,
    /// Wavelet levels `J`; must equal `ceil(log2 N)`.
    pub levels: usize,
    pub p_min: usize,
    pub lr_patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth_le: usize,
    pub depth_hd: usize,
    pub mlp_ratio: usize,
    /// Diffusion steps `T`; timesteps are `0..T`.
    pub steps: usize,
    #[serde(default)]
    pub hf_visibility: HfVisibility,
}

impl ModelConfig {
    /// Full-size defaults at 128×128, 8×.
    pub fn standard() -> Self {
        Self {
            height: 128,
            width: 128,
            channels: 3,
            upscale: 8,
            levels: 3,
            p_min: 2,
            lr_patch: 2,
            dim: 256,
            heads: 4,
            depth_le: 6,
            depth_hd: 6,
            mlp_ratio: 4,
            steps: 4,
            hf_visibility: HfVisibility::CrossLevel,
        }
    }

    /// CPU-sized preset: 64×64 at 8×, D=128, two blocks per decoder.
    pub fn desk() -> Self {
        Self {
            height: 64,
            width: 64,
            dim: 128,
            depth_le: 2,
            depth_hd: 2,
            ..Self::standard()
        }
    }

    /// Smallest useful configuration, for gradient and mask checks.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 3,
            upscale: 2,
            levels: 1,
            p_min: 2,
            lr_patch: 2,
            dim: 16,
            heads: 2,
            depth_le: 1,
            depth_hd: 1,
            mlp_ratio: 2,
            steps: 4,
            hf_visibility: HfVisibility::CrossLevel,
        }
    }

    pub fn lr_size(&self) -> (usize, usize) {
        (self.height / self.upscale.max(1), self.width / self.upscale.max(1))
    }

    pub fn geometry(&self) -> PatchGeometry {
        let (lr_height, lr_width) = self.lr_size();
        PatchGeometry {
            height: self.height,
            width: self.width,
            channels: self.channels,
            levels: self.levels,
            p_min: self.p_min,
            lr_height,
            lr_width,
            lr_patch: self.lr_patch,
            dim: self.dim,
        }
    }

    pub fn validate(&self) -> Result<PatchPlan> {
        let j = level_for_scale(self.upscale).map_err(|e| Error::config(e.to_string()))?;
        if self.levels != j {
            return Err(Error::config(format!(
                "levels = {} but upscale {} requires {j}",
                self.levels, self.upscale
            )));
        }
        if self.height % self.upscale != 0 || self.width % self.upscale != 0 {
            return Err(Error::config(format!(
                "{}×{} is not divisible by upscale {}",
                self.height, self.width, self.upscale
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth_le == 0 || self.depth_hd == 0 || self.mlp_ratio == 0 || self.steps == 0 {
            return Err(Error::config("depths, mlp_ratio and steps must be at least 1"));
        }
        plan_patches(&self.geometry())
    }
}

/// Sinusoidal embedding of a timestep: `D/2` sines then `D/2` cosines at
/// frequencies `10000^{-k/(D/2)}`.
pub fn timestep_sinusoid<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        out[k] = T::c((t as f64 * w).sin());
        out[half + k] = T::c((t as f64 * w).cos());
    }
    Tensor::new(&[1, dim], out).expect("sinusoid shape")
}

/// Sinusoid followed by a two-layer MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
    pub steps: usize,
}

impl TimestepEmbedder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let init = Init::Normal { std: 0.02 };
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, init, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, init, rng),
            dim,
            steps,
        }
    }

    /// `1×D` embedding of `t`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, t: usize) -> Result<Var> {
        if t >= self.steps {
            return Err(Error::contract(format!("timestep {t} outside 0..{}", self.steps)));
        }
        let s = g.constant(timestep_sinusoid(t, self.dim));
        let h = self.fc1.forward(g, s)?;
        let h = g.tape.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-LN transformer block with AdaLN-Zero modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct TransBlock {
    pub modulation: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            // all six modulation vectors, gates included, start at zero
            modulation: Linear::zeros(store, &format!("{name}.modulation"), dim, 6 * dim, rng),
            q: Linear::xavier(store, &format!("{name}.attn.q"), dim, dim, rng),
            k: Linear::xavier(store, &format!("{name}.attn.k"), dim, dim, rng),
            v: Linear::xavier(store, &format!("{name}.attn.v"), dim, dim, rng),
            out: Linear::xavier(store, &format!("{name}.attn.out"), dim, dim, rng),
            fc1: Linear::xavier(store, &format!("{name}.mlp.fc1"), dim, hidden, rng),
            fc2: Linear::xavier(store, &format!("{name}.mlp.fc2"), hidden, dim, rng),
            heads,
        }
    }

    /// `cond` is the `1×D` conditioning row (`SiLU` of the timestep embedding).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: &AttentionMask, cond: Var) -> Result<Var> {
        let m = self.modulation.forward(g, cond)?;
        let p = chunk_row(g, m, 6)?;
        let (shift_a, scale_a, gate_a, shift_m, scale_m, gate_m) = (p[0], p[1], p[2], p[3], p[4], p[5]);

        let h = g.tape.layer_norm(x, None, None)?;
        let h = modulate(g, h, shift_a, scale_a)?;
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let a = g.tape.attention(q, k, v, mask, self.heads)?;
        let a = self.out.forward(g, a)?;
        let a = g.tape.mul_row(a, gate_a)?;
        let x = g.tape.add(x, a)?;

        let h = g.tape.layer_norm(x, None, None)?;
        let h = modulate(g, h, shift_m, scale_m)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.tape.gelu(h);
        let h = self.fc2.forward(g, h)?;
        let h = g.tape.mul_row(h, gate_m)?;
        g.tape.add(x, h)
    }
}

/// Parameter layout of the network (no values).
#[derive(Clone, Debug, PartialEq)]
pub struct WsdtArch {
    pub config: ModelConfig,
    pub plan: PatchPlan,
    pub embed: PatchEmbedding,
    pub time: TimestepEmbedder,
    pub ledec: Vec<TransBlock>,
    pub hddec: Vec<TransBlock>,
    pub heads: OutputHeads,
    pub low_mask: AttentionMask,
    pub high_mask: AttentionMask,
}

/// Outputs of the detail decoder.
#[derive(Clone, Copy, Debug)]
pub struct DetailTokens {
    /// Final LR tokens (unused downstream).
    pub lr: Var,
    /// LF residual tokens.
    pub lf_residual: Var,
    pub hf: Var,
}

impl WsdtArch {
    /// LF elementary decoder: returns `(f̃_lr, f̃_Le)`.
    pub fn ledec_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, lr: Var, lf: Var, cond: Var) -> Result<(Var, Var)> {
        let (n_lr, n_lf) = (self.plan.lr_tokens(), self.plan.lf_tokens());
        check_rows(g, lr, n_lr, "LR")?;
        check_rows(g, lf, n_lf, "LF")?;
        let mut x = g.tape.concat(&[lr, lf])?;
        for b in &self.ledec {
            x = b.forward(g, x, &self.low_mask, cond)?;
        }
        let lr = g.tape.slice_rows(x, 0, n_lr)?;
        let lf = g.tape.slice_rows(x, n_lr, n_lr + n_lf)?;
        Ok((lr, lf))
    }

    /// HF detail decoder over `[f̃_lr, f̃_Le, F_H]`.
    pub fn hddec_forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        lr: Var,
        lf: Var,
        hf: Var,
        cond: Var,
    ) -> Result<DetailTokens> {
        let (n_lr, n_lf, n_hf) = (self.plan.lr_tokens(), self.plan.lf_tokens(), self.plan.hf_tokens());
        check_rows(g, lr, n_lr, "LR")?;
        check_rows(g, lf, n_lf, "LF")?;
        check_rows(g, hf, n_hf, "HF")?;
        let mut x = g.tape.concat(&[lr, lf, hf])?;
        for b in &self.hddec {
            x = b.forward(g, x, &self.high_mask, cond)?;
        }
        Ok(DetailTokens {
            lr: g.tape.slice_rows(x, 0, n_lr)?,
            lf_residual: g.tape.slice_rows(x, n_lr, n_lr + n_lf)?,
            hf: g.tape.slice_rows(x, n_lr + n_lf, n_lr + n_lf + n_hf)?,
        })
    }

    /// Full denoising pass on the tape. Returns `Ĩ_0` as an `H×W×C` variable.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, noisy: &Image<T>, lr: &Image<T>, t: usize) -> Result<Var> {
        let c = &self.config;
        if noisy.dims() != (c.height, c.width, c.channels) {
            return Err(Error::config(format!(
                "noisy image {:?} does not match model {}×{}×{}",
                noisy.dims(),
                c.height,
                c.width,
                c.channels
            )));
        }
        let spectrum = mdwt(noisy, c.levels).stage("mdwt")?;
        let tokens = self.embed.forward(g, &self.plan, &spectrum, lr).stage("tokenize")?;
        let temb = self.time.forward(g, t).stage("timestep")?;
        let cond = g.tape.silu(temb);
        let hf = g.tape.concat(&tokens[2..]).stage("tokenize")?;
        let (lr_t, lf_e) = self.ledec_forward(g, tokens[0], tokens[1], cond).stage("ledec")?;
        let detail = self.hddec_forward(g, lr_t, lf_e, hf, cond).stage("hddec")?;
        let lf = g.tape.add(lf_e, detail.lf_residual).stage("detokenize")?;
        let spec = self
            .heads
            .forward(g, &self.plan, lf, detail.hf, temb)
            .stage("detokenize")?;
        g.tape.imdwt(spec, c.levels).stage("imdwt")
    }
}

fn check_rows<T: Scalar>(g: &Graph<'_, T>, v: Var, rows: usize, what: &str) -> Result<()> {
    let s = g.value(v).shape();
    if s.len() != 2 || s[0] != rows {
        return Err(Error::contract(format!(
            "{what} block has shape {s:?}, layout expects {rows} tokens"
        )));
    }
    Ok(())
}

/// Network parameters together with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Wsdt<T> {
    pub arch: WsdtArch,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Wsdt<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let plan = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = PatchEmbedding::new(&mut store, &plan, &mut rng);
        let time = TimestepEmbedder::new(&mut store, "time", config.dim, config.steps, &mut rng);
        let ledec = (0..config.depth_le)
            .map(|i| {
                TransBlock::new(
                    &mut store,
                    &format!("ledec.{i}"),
                    config.dim,
                    config.heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect();
        let hddec = (0..config.depth_hd)
            .map(|i| {
                TransBlock::new(
                    &mut store,
                    &format!("hddec.{i}"),
                    config.dim,
                    config.heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect();
        let heads = OutputHeads::new(&mut store, &plan, &mut rng);
        let low_mask = build_m_low(&plan.low_layout())?;
        let high_mask = build_high_mask(&plan.layout(), config.hf_visibility)?;
        Ok(Self {
            arch: WsdtArch {
                config,
                plan,
                embed,
                time,
                ledec,
                hddec,
                heads,
                low_mask,
                high_mask,
            },
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Predicts the clean image `Ĩ_0` from `I_t`.
    pub fn forward(&self, noisy: &Image<T>, lr: &Image<T>, t: usize) -> Result<Image<T>> {
        let mut g = Graph::new(&self.params, false);
        let out = self.arch.forward(&mut g, noisy, lr, t)?;
        Image::from_tensor(g.value(out))
    }

    /// Replaces every parameter with a draw from `U(-scale, scale)`.
    pub fn randomize(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let shape = self.params.get(id).shape().to_vec();
            *self.params.get_mut(id) = Tensor::from_fn(&shape, |_| T::c(rng.random_range(-scale..scale)));
        }
    }
}
