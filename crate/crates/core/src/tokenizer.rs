//! Pyramid tokenization of a packed wavelet spectrum plus the LR condition,
//! and the inverse mapping from decoder tokens back to a spectrum.
//!
//! A level-`j` sub-band is cut into patches of side `p_min·2^{J−j}`, so every
//! spectrum token covers the same `p_min·2^J` pixel square of the image and
//! all sub-bands share one patch grid. Each directional sub-band is its own
//! token stream with its own projection.
//!
//! Token order: LR, LF, then HF streams for levels `J…1`, sub-bands V, H, D
//! within a level, row-major inside each stream.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::masks::{Segment, SegmentLayout};
use crate::nn::{chunk_row, modulate, Graph, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::wavelet::{band_origin, SubBand, WaveletSpectrum};

/// 4-D token coordinate `[level j, sub-band d, row, col]`.
pub type Position = [usize; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchScheme {
    /// Level-dependent patch sizes with a shared grid.
    Pyramid,
    /// One patch size for every sub-band (grids differ per level).
    Uniform(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Lr,
    Lf,
    Hf { level: usize, band: SubBand },
}

/// One token stream: a source region cut into a grid of square patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stream {
    pub kind: StreamKind,
    pub patch: usize,
    pub grid: (usize, usize),
    /// Top-left corner of the source region (packed spectrum or LR image).
    pub origin: (usize, usize),
}

impl Stream {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        self.patch * self.patch * channels
    }

    pub fn segment(&self) -> Segment {
        match self.kind {
            StreamKind::Lr => Segment::Lr,
            StreamKind::Lf => Segment::Lf,
            StreamKind::Hf { level, .. } => Segment::Hf { level },
        }
    }

    pub fn is_spectrum(&self) -> bool {
        self.kind != StreamKind::Lr
    }

    fn position(&self, levels: usize, gy: usize, gx: usize) -> Position {
        match self.kind {
            StreamKind::Lr => [0, 0, gy, gx],
            StreamKind::Lf => [levels, 0, gy, gx],
            StreamKind::Hf { level, band } => [level, band.position_index(), gy, gx],
        }
    }

    /// Flat source indices of every patch element, patch-major then
    /// `(py, px, c)` row-major. `src_width` is the source row length in pixels.
    fn source_index(&self, src_width: usize, channels: usize) -> Vec<usize> {
        let p = self.patch;
        let mut idx = Vec::with_capacity(self.tokens() * self.patch_len(channels));
        for gy in 0..self.grid.0 {
            for gx in 0..self.grid.1 {
                for py in 0..p {
                    for px in 0..p {
                        let y = self.origin.0 + gy * p + py;
                        let x = self.origin.1 + gx * p + px;
                        for c in 0..channels {
                            idx.push((y * src_width + x) * channels + c);
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Inputs to [`plan_patches`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: usize,
    pub p_min: usize,
    pub lr_height: usize,
    pub lr_width: usize,
    pub lr_patch: usize,
    pub dim: usize,
}

/// Complete token layout for one image geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    geometry: PatchGeometry,
    scheme: PatchScheme,
    streams: Vec<Stream>,
}

fn divides(what: &str, value: usize, by: usize) -> Result<usize> {
    if by == 0 || value == 0 || value % by != 0 {
        return Err(Error::config(format!("{what} = {value} is not divisible by {by}")));
    }
    Ok(value / by)
}

/// Pyramid plan for `geometry`.
pub fn plan_patches(geometry: &PatchGeometry) -> Result<PatchPlan> {
    PatchPlan::new(geometry, PatchScheme::Pyramid)
}

impl PatchPlan {
    pub fn new(geometry: &PatchGeometry, scheme: PatchScheme) -> Result<Self> {
        let g = *geometry;
        if g.levels == 0 {
            return Err(Error::config("levels must be at least 1"));
        }
        if g.channels == 0 {
            return Err(Error::config("channels must be at least 1"));
        }
        if g.dim == 0 || g.dim % 8 != 0 {
            return Err(Error::config(format!(
                "embedding dim D = {} must be a positive multiple of 8",
                g.dim
            )));
        }
        let block = 1usize << g.levels;
        let lf_h = divides("height", g.height, block)?;
        let lf_w = divides("width", g.width, block)?;
        let mut streams = vec![Stream {
            kind: StreamKind::Lr,
            patch: g.lr_patch,
            grid: (
                divides("lr height", g.lr_height, g.lr_patch)?,
                divides("lr width", g.lr_width, g.lr_patch)?,
            ),
            origin: (0, 0),
        }];
        let patch_for = |level: usize| match scheme {
            PatchScheme::Pyramid => g.p_min << (g.levels - level),
            PatchScheme::Uniform(p) => p,
        };
        let lf_patch = patch_for(g.levels);
        streams.push(Stream {
            kind: StreamKind::Lf,
            patch: lf_patch,
            grid: (
                divides("LF sub-band height", lf_h, lf_patch)?,
                divides("LF sub-band width", lf_w, lf_patch)?,
            ),
            origin: (0, 0),
        });
        for level in (1..=g.levels).rev() {
            let p = patch_for(level);
            let (bh, bw) = (g.height >> level, g.width >> level);
            let grid = (
                divides(&format!("level-{level} sub-band height"), bh, p)?,
                divides(&format!("level-{level} sub-band width"), bw, p)?,
            );
            for band in SubBand::ALL {
                streams.push(Stream {
                    kind: StreamKind::Hf { level, band },
                    patch: p,
                    grid,
                    origin: band_origin(g.height, g.width, level, Some(band)),
                });
            }
        }
        Ok(Self {
            geometry: g,
            scheme,
            streams,
        })
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn scheme(&self) -> PatchScheme {
        self.scheme
    }

    pub fn levels(&self) -> usize {
        self.geometry.levels
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    pub fn lr_stream(&self) -> &Stream {
        &self.streams[0]
    }

    pub fn lf_stream(&self) -> &Stream {
        &self.streams[1]
    }

    pub fn hf_streams(&self) -> &[Stream] {
        &self.streams[2..]
    }

    /// Per-level patch sizes `p^j` for `j = 1..=J`.
    pub fn patch_sizes(&self) -> Vec<usize> {
        (1..=self.levels())
            .map(|j| {
                self.hf_streams()
                    .iter()
                    .find(|s| matches!(s.kind, StreamKind::Hf { level, .. } if level == j))
                    .map_or(0, |s| s.patch)
            })
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.streams.iter().map(Stream::tokens).sum()
    }

    pub fn lr_tokens(&self) -> usize {
        self.lr_stream().tokens()
    }

    pub fn lf_tokens(&self) -> usize {
        self.lf_stream().tokens()
    }

    pub fn hf_tokens(&self) -> usize {
        self.hf_streams().iter().map(Stream::tokens).sum()
    }

    /// Upscale factor implied by HR and LR sizes.
    pub fn upscale(&self) -> Result<usize> {
        let g = &self.geometry;
        let f = divides("height / lr height", g.height, g.lr_height)?;
        if g.width != f * g.lr_width {
            return Err(Error::config(format!(
                "non-uniform upscale: {}×{} from {}×{}",
                g.height, g.width, g.lr_height, g.lr_width
            )));
        }
        Ok(f)
    }

    pub fn layout(&self) -> SegmentLayout {
        let mut l = SegmentLayout::new();
        for s in &self.streams {
            l.push(s.segment(), s.tokens());
        }
        l
    }

    /// `[LR | LF]` layout of the LF elementary decoder.
    pub fn low_layout(&self) -> SegmentLayout {
        SegmentLayout::new()
            .with(Segment::Lr, self.lr_tokens())
            .with(Segment::Lf, self.lf_tokens())
    }

    pub fn positions(&self) -> Vec<Position> {
        let j = self.levels();
        self.streams
            .iter()
            .flat_map(|s| (0..s.grid.0).flat_map(move |gy| (0..s.grid.1).map(move |gx| s.position(j, gy, gx))))
            .collect()
    }

    /// Stream index and in-stream position of every token.
    pub fn token_origins(&self) -> Vec<(usize, usize, usize)> {
        self.streams
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.grid.0).flat_map(move |gy| (0..s.grid.1).map(move |gx| (si, gy, gx))))
            .collect()
    }

    /// Image-pixel rectangle `(y0, x0, h, w)` covered by token `token`.
    pub fn footprint(&self, token: usize) -> Result<(usize, usize, usize, usize)> {
        let (si, gy, gx) = *self
            .token_origins()
            .get(token)
            .ok_or_else(|| Error::contract(format!("token {token} out of range")))?;
        let s = &self.streams[si];
        let scale = match s.kind {
            StreamKind::Lr => self.upscale()?,
            StreamKind::Lf => 1 << self.levels(),
            StreamKind::Hf { level, .. } => 1 << level,
        };
        let side = s.patch * scale;
        Ok((gy * side, gx * side, side, side))
    }

    fn check_spectrum(&self, spectrum: &WaveletSpectrum<impl Scalar>) -> Result<()> {
        let g = &self.geometry;
        if spectrum.dims() != (g.height, g.width, g.channels) || spectrum.levels() != g.levels {
            return Err(Error::dim(format!(
                "spectrum {:?} with {} levels does not match plan {}×{}×{} with {} levels",
                spectrum.dims(),
                spectrum.levels(),
                g.height,
                g.width,
                g.channels,
                g.levels
            )));
        }
        Ok(())
    }

    fn check_lr(&self, lr: &Image<impl Scalar>) -> Result<()> {
        let g = &self.geometry;
        if lr.dims() != (g.lr_height, g.lr_width, g.channels) {
            return Err(Error::dim(format!(
                "LR image {:?} does not match plan {}×{}×{}",
                lr.dims(),
                g.lr_height,
                g.lr_width,
                g.channels
            )));
        }
        Ok(())
    }

    /// Flattened patches of one stream as a `tokens × p²C` matrix.
    fn patches<T: Scalar>(&self, stream: &Stream, src: &[T], src_width: usize) -> Tensor<T> {
        let c = self.channels();
        let data = stream.source_index(src_width, c).into_iter().map(|i| src[i]).collect();
        Tensor::new(&[stream.tokens(), stream.patch_len(c)], data).expect("patch matrix")
    }

    /// Patch matrices for every stream in token order.
    pub fn extract_patches<T: Scalar>(&self, spectrum: &WaveletSpectrum<T>, lr: &Image<T>) -> Result<Vec<Tensor<T>>> {
        self.check_spectrum(spectrum)?;
        self.check_lr(lr)?;
        Ok(self
            .streams
            .iter()
            .map(|s| match s.kind {
                StreamKind::Lr => self.patches(s, lr.data(), lr.width()),
                _ => self.patches(s, spectrum.packed().data(), self.geometry.width),
            })
            .collect())
    }

    /// For every element of the packed spectrum, its offset in the
    /// concatenation of the flattened spectrum-stream patch matrices.
    pub fn spectrum_gather_index(&self) -> Result<Arc<[usize]>> {
        let g = &self.geometry;
        let total = g.height * g.width * g.channels;
        let mut inverse = vec![usize::MAX; total];
        let mut off = 0;
        for s in self.streams.iter().filter(|s| s.is_spectrum()) {
            for (k, i) in s.source_index(g.width, g.channels).into_iter().enumerate() {
                if inverse[i] != usize::MAX {
                    return Err(Error::config(format!("spectrum element {i} covered twice")));
                }
                inverse[i] = off + k;
            }
            off += s.tokens() * s.patch_len(g.channels);
        }
        if inverse.iter().any(|&v| v == usize::MAX) {
            return Err(Error::config("spectrum streams do not tile the spectrum"));
        }
        Ok(inverse.into())
    }

    /// Inverse of the spectrum part of [`PatchPlan::extract_patches`].
    pub fn assemble_spectrum<T: Scalar>(&self, patches: &[Tensor<T>]) -> Result<WaveletSpectrum<T>> {
        let spec: Vec<&Stream> = self.streams.iter().filter(|s| s.is_spectrum()).collect();
        if patches.len() != spec.len() {
            return Err(Error::dim(format!(
                "expected {} spectrum streams, got {}",
                spec.len(),
                patches.len()
            )));
        }
        let c = self.channels();
        let mut flat = Vec::new();
        for (s, p) in spec.iter().zip(patches) {
            if p.shape() != [s.tokens(), s.patch_len(c)] {
                return Err(Error::dim(format!(
                    "stream {:?}: expected {}×{} patches, got {:?}",
                    s.kind,
                    s.tokens(),
                    s.patch_len(c),
                    p.shape()
                )));
            }
            flat.extend_from_slice(p.data());
        }
        let idx = self.spectrum_gather_index()?;
        let g = &self.geometry;
        let packed = Image::new(g.height, g.width, c, idx.iter().map(|&i| flat[i]).collect())?;
        WaveletSpectrum::from_packed(packed, g.levels)
    }
}

/// Sine-cosine encoding of a 4-D position: `D/4` dims per component, each a
/// block of `D/8` sines followed by `D/8` cosines at frequencies
/// `10000^{-k/(D/8)}`.
pub fn encode_position<T: Scalar>(pos: Position, dim: usize) -> Result<Vec<T>> {
    if dim == 0 || dim % 8 != 0 {
        return Err(Error::config(format!(
            "position encoding dim {dim} must be a positive multiple of 8"
        )));
    }
    let quarter = dim / 4;
    let half = quarter / 2;
    let mut out = Vec::with_capacity(dim);
    for &p in &pos {
        let p = p as f64;
        let freqs = (0..half).map(|k| 10000f64.powf(-(k as f64) / half as f64));
        out.extend(freqs.clone().map(|w| T::c((p * w).sin())));
        out.extend(freqs.map(|w| T::c((p * w).cos())));
    }
    Ok(out)
}

/// `n×D` table of encodings.
pub fn position_table<T: Scalar>(positions: &[Position], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        data.extend(encode_position::<T>(p, dim)?);
    }
    Tensor::new(&[positions.len(), dim], data)
}

/// Token embeddings with their 4-D positions and segment labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub embeddings: Tensor<T>,
    pub positions: Vec<Position>,
    pub layout: SegmentLayout,
}

/// Learned per-stream patch projections (kernel = stride = patch size).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    projections: Vec<Linear>,
}

impl PatchEmbedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, plan: &PatchPlan, rng: &mut impl Rng) -> Self {
        let c = plan.channels();
        let projections = plan
            .streams()
            .iter()
            .map(|s| {
                Linear::xavier(
                    store,
                    &format!("embed.{}", stream_name(s)),
                    s.patch_len(c),
                    plan.dim(),
                    rng,
                )
            })
            .collect();
        Self { projections }
    }

    pub fn projections(&self) -> &[Linear] {
        &self.projections
    }

    /// Projects every stream and adds the positional encodings. Returns one
    /// `tokens × D` variable per stream, in plan order.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        plan: &PatchPlan,
        spectrum: &WaveletSpectrum<T>,
        lr: &Image<T>,
    ) -> Result<Vec<Var>> {
        let patches = plan.extract_patches(spectrum, lr)?;
        let positions = plan.positions();
        let mut start = 0;
        let mut out = Vec::with_capacity(patches.len());
        for ((s, lin), p) in plan.streams().iter().zip(&self.projections).zip(patches) {
            let x = g.constant(p);
            let h = lin.forward(g, x)?;
            let pe = position_table::<T>(&positions[start..start + s.tokens()], plan.dim())?;
            let pe = g.constant(pe);
            out.push(g.tape.add(h, pe)?);
            start += s.tokens();
        }
        Ok(out)
    }
}

/// Embeds an image's spectrum and its LR condition as a token sequence.
pub fn tokenize<T: Scalar>(
    spectrum: &WaveletSpectrum<T>,
    lr: &Image<T>,
    plan: &PatchPlan,
    params: &ParamStore<T>,
    embedding: &PatchEmbedding,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new(params, false);
    let parts = embedding.forward(&mut g, plan, spectrum, lr)?;
    let all = g.tape.concat(&parts)?;
    Ok(TokenSequence {
        embeddings: g.value(all).clone(),
        positions: plan.positions(),
        layout: plan.layout(),
    })
}

pub(crate) fn stream_name(s: &Stream) -> String {
    match s.kind {
        StreamKind::Lr => "lr".into(),
        StreamKind::Lf => "lf".into(),
        StreamKind::Hf { level, band } => {
            let b = match band {
                SubBand::Vertical => "v",
                SubBand::Horizontal => "h",
                SubBand::Diagonal => "d",
            };
            format!("hf{level}{b}")
        }
    }
}

/// Per-stream time-conditioned output heads: AdaLN (shift/scale, no gate)
/// followed by a linear map to `p²C` coefficients per token.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputHeads {
    heads: Vec<(Linear, Linear)>,
}

impl OutputHeads {
    /// Heads start at zero, so an untrained model predicts the zero spectrum.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, plan: &PatchPlan, rng: &mut impl Rng) -> Self {
        let (d, c) = (plan.dim(), plan.channels());
        let heads = plan
            .streams()
            .iter()
            .filter(|s| s.is_spectrum())
            .map(|s| {
                let name = stream_name(s);
                (
                    Linear::zeros(store, &format!("head.{name}.modulation"), d, 2 * d, rng),
                    Linear::zeros(store, &format!("head.{name}.fc"), d, s.patch_len(c), rng),
                )
            })
            .collect();
        Self { heads }
    }

    pub fn heads(&self) -> &[(Linear, Linear)] {
        &self.heads
    }

    /// `lf` is `ñ×D` (elementary + residual), `hf` is all HF tokens in plan
    /// order, `temb` the `1×D` timestep embedding. Returns the packed
    /// spectrum as an `H×W×C` variable.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        plan: &PatchPlan,
        lf: Var,
        hf: Var,
        temb: Var,
    ) -> Result<Var> {
        let d = plan.dim();
        if g.value(lf).shape() != [plan.lf_tokens(), d] || g.value(hf).shape() != [plan.hf_tokens(), d] {
            return Err(Error::dim(format!(
                "detokenize: got LF {:?} and HF {:?}, plan expects {}×{d} and {}×{d}",
                g.value(lf).shape(),
                g.value(hf).shape(),
                plan.lf_tokens(),
                plan.hf_tokens()
            )));
        }
        let cond = g.tape.silu(temb);
        let mut flat = Vec::with_capacity(self.heads.len());
        let mut start = 0;
        for (i, (s, (modulation, fc))) in plan
            .streams()
            .iter()
            .filter(|s| s.is_spectrum())
            .zip(&self.heads)
            .enumerate()
        {
            let tokens = if i == 0 {
                lf
            } else {
                let v = g.tape.slice_rows(hf, start, start + s.tokens())?;
                start += s.tokens();
                v
            };
            let m = modulation.forward(g, cond)?;
            let parts = chunk_row(g, m, 2)?;
            let h = g.tape.layer_norm(tokens, None, None)?;
            let h = modulate(g, h, parts[0], parts[1])?;
            let y = fc.forward(g, h)?;
            let n = g.value(y).numel();
            flat.push(g.tape.reshape(y, &[n])?);
        }
        let all = g.tape.concat(&flat)?;
        let geo = plan.geometry();
        g.tape.gather(
            all,
            plan.spectrum_gather_index()?,
            &[geo.height, geo.width, geo.channels],
        )
    }
}

/// Decodes LF and HF tokens into a spectrum with the given heads and a
/// precomputed `1×D` timestep embedding.
pub fn detokenize<T: Scalar>(
    lf: &Tensor<T>,
    hf: &Tensor<T>,
    plan: &PatchPlan,
    params: &ParamStore<T>,
    heads: &OutputHeads,
    temb: &Tensor<T>,
) -> Result<WaveletSpectrum<T>> {
    let mut g = Graph::new(params, false);
    let (lf, hf, temb) = (g.constant(lf.clone()), g.constant(hf.clone()), g.constant(temb.clone()));
    let out = heads.forward(&mut g, plan, lf, hf, temb)?;
    let img = Image::from_tensor(g.value(out))?;
    WaveletSpectrum::from_packed(img, plan.levels())
}

#[cfg(test)]
mod tests;
