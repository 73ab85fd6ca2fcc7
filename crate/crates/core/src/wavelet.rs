//! Orthonormal Haar transform and multi-level Mallat packing.
//!
//! Sub-band naming: `vertical` (x_V) holds differences along the horizontal
//! axis, i.e. it responds to vertical edges; `horizontal` (x_H) holds
//! differences along the vertical axis. For a 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! x_L = (a + b + c + d) / 2      x_V = (a - b + c - d) / 2
//! x_H = (a + b - c - d) / 2      x_D = (a - b - c + d) / 2
//! ```
//!
//! The packed spectrum of a `J`-level decomposition keeps the image footprint.
//! Within the `(H/2^{j-1})×(W/2^{j-1})` top-left region, level `j` stores the
//! next region (or x_L^J) top-left, x_V^j top-right, x_H^j bottom-left and
//! x_D^j bottom-right.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Directional high-frequency sub-band of one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubBand {
    Vertical,
    Horizontal,
    Diagonal,
}

impl SubBand {
    /// Token ordering of the directional sub-bands within a level.
    pub const ALL: [SubBand; 3] = [SubBand::Vertical, SubBand::Horizontal, SubBand::Diagonal];

    /// Sub-band index used in the 4-D position (x_L = 0, x_V = 1, x_D = 2, x_H = 3).
    pub fn position_index(self) -> usize {
        match self {
            SubBand::Vertical => 1,
            SubBand::Diagonal => 2,
            SubBand::Horizontal => 3,
        }
    }

    /// Quadrant offset `(row, col)` in units of the sub-band size.
    fn quadrant(self) -> (usize, usize) {
        match self {
            SubBand::Vertical => (0, 1),
            SubBand::Horizontal => (1, 0),
            SubBand::Diagonal => (1, 1),
        }
    }
}

/// The four outputs of a single-level transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands<T> {
    pub low: Image<T>,
    pub vertical: Image<T>,
    pub horizontal: Image<T>,
    pub diagonal: Image<T>,
}

/// Packed multi-level spectrum of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletSpectrum<T> {
    levels: usize,
    packed: Image<T>,
}

/// Smallest `J` with `2^J ≥ factor`.
pub fn level_for_scale(factor: usize) -> Result<usize> {
    if factor < 2 {
        return Err(Error::contract(format!(
            "upscale factor must be at least 2, got {factor}"
        )));
    }
    Ok((usize::BITS - (factor - 1).leading_zeros()) as usize)
}

pub(crate) fn check_levels(height: usize, width: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::dim("wavelet levels must be at least 1"));
    }
    let block = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| Error::dim(format!("{levels} levels is too many")))?;
    if height % block != 0 || width % block != 0 || height == 0 || width == 0 {
        return Err(Error::dim(format!(
            "dims not divisible: {height}×{width} by 2^{levels} = {block}"
        )));
    }
    Ok(())
}

/// One analysis step on the top-left `rh×rw` region of a `stride_w`-wide
/// buffer, writing the four quadrants back in place.
fn analyze_region<T: Scalar>(buf: &mut [T], stride_w: usize, c: usize, rh: usize, rw: usize, tmp: &mut Vec<T>) {
    let half = T::c(0.5);
    let (hh, hw) = (rh / 2, rw / 2);
    tmp.clear();
    tmp.resize(rh * rw * c, T::zero());
    let at = |y: usize, x: usize, ch: usize| (y * stride_w + x) * c + ch;
    let put = |y: usize, x: usize, ch: usize| (y * rw + x) * c + ch;
    for y in 0..hh {
        for x in 0..hw {
            for ch in 0..c {
                let a = buf[at(2 * y, 2 * x, ch)];
                let b = buf[at(2 * y, 2 * x + 1, ch)];
                let cc = buf[at(2 * y + 1, 2 * x, ch)];
                let d = buf[at(2 * y + 1, 2 * x + 1, ch)];
                tmp[put(y, x, ch)] = (a + b + cc + d) * half;
                tmp[put(y, x + hw, ch)] = (a - b + cc - d) * half;
                tmp[put(y + hh, x, ch)] = (a + b - cc - d) * half;
                tmp[put(y + hh, x + hw, ch)] = (a - b - cc + d) * half;
            }
        }
    }
    for y in 0..rh {
        let dst = y * stride_w * c;
        buf[dst..dst + rw * c].copy_from_slice(&tmp[y * rw * c..(y + 1) * rw * c]);
    }
}

fn synthesize_region<T: Scalar>(buf: &mut [T], stride_w: usize, c: usize, rh: usize, rw: usize, tmp: &mut Vec<T>) {
    let half = T::c(0.5);
    let (hh, hw) = (rh / 2, rw / 2);
    tmp.clear();
    tmp.resize(rh * rw * c, T::zero());
    let at = |y: usize, x: usize, ch: usize| (y * stride_w + x) * c + ch;
    let put = |y: usize, x: usize, ch: usize| (y * rw + x) * c + ch;
    for y in 0..hh {
        for x in 0..hw {
            for ch in 0..c {
                let l = buf[at(y, x, ch)];
                let v = buf[at(y, x + hw, ch)];
                let h = buf[at(y + hh, x, ch)];
                let d = buf[at(y + hh, x + hw, ch)];
                tmp[put(2 * y, 2 * x, ch)] = (l + v + h + d) * half;
                tmp[put(2 * y, 2 * x + 1, ch)] = (l - v + h - d) * half;
                tmp[put(2 * y + 1, 2 * x, ch)] = (l + v - h - d) * half;
                tmp[put(2 * y + 1, 2 * x + 1, ch)] = (l - v - h + d) * half;
            }
        }
    }
    for y in 0..rh {
        let dst = y * stride_w * c;
        buf[dst..dst + rw * c].copy_from_slice(&tmp[y * rw * c..(y + 1) * rw * c]);
    }
}

/// Packed multi-level analysis on a raw `H×W×C` buffer. Dimensions must
/// already be validated with [`check_levels`].
pub(crate) fn mdwt_raw<T: Scalar>(src: &[T], h: usize, w: usize, c: usize, levels: usize) -> Vec<T> {
    let mut buf = src.to_vec();
    let mut tmp = Vec::new();
    for l in 0..levels {
        analyze_region(&mut buf, w, c, h >> l, w >> l, &mut tmp);
    }
    buf
}

pub(crate) fn imdwt_raw<T: Scalar>(src: &[T], h: usize, w: usize, c: usize, levels: usize) -> Vec<T> {
    let mut buf = src.to_vec();
    let mut tmp = Vec::new();
    for l in (0..levels).rev() {
        synthesize_region(&mut buf, w, c, h >> l, w >> l, &mut tmp);
    }
    buf
}

fn crop<T: Scalar>(img: &Image<T>, y0: usize, x0: usize, h: usize, w: usize) -> Image<T> {
    Image::from_fn(h, w, img.channels(), |y, x, c| img.get(y0 + y, x0 + x, c))
}

fn paste<T: Scalar>(dst: &mut Image<T>, src: &Image<T>, y0: usize, x0: usize) {
    for y in 0..src.height() {
        for x in 0..src.width() {
            for c in 0..src.channels() {
                dst.set(y0 + y, x0 + x, c, src.get(y, x, c));
            }
        }
    }
}

/// Single-level orthonormal Haar analysis.
pub fn dwt2d<T: Scalar>(image: &Image<T>) -> Result<SubBands<T>> {
    let (h, w, c) = image.dims();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!("dwt2d needs even dims, got {h}×{w}")));
    }
    let packed = Image::new(h, w, c, mdwt_raw(image.data(), h, w, c, 1))?;
    let (hh, hw) = (h / 2, w / 2);
    Ok(SubBands {
        low: crop(&packed, 0, 0, hh, hw),
        vertical: crop(&packed, 0, hw, hh, hw),
        horizontal: crop(&packed, hh, 0, hh, hw),
        diagonal: crop(&packed, hh, hw, hh, hw),
    })
}

/// Single-level synthesis; exact inverse of [`dwt2d`].
pub fn idwt2d<T: Scalar>(bands: &SubBands<T>) -> Result<Image<T>> {
    let (hh, hw, c) = bands.low.dims();
    for b in [&bands.vertical, &bands.horizontal, &bands.diagonal] {
        bands.low.same_dims(b)?;
    }
    let mut packed = Image::zeros(2 * hh, 2 * hw, c);
    paste(&mut packed, &bands.low, 0, 0);
    paste(&mut packed, &bands.vertical, 0, hw);
    paste(&mut packed, &bands.horizontal, hh, 0);
    paste(&mut packed, &bands.diagonal, hh, hw);
    Image::new(2 * hh, 2 * hw, c, imdwt_raw(packed.data(), 2 * hh, 2 * hw, c, 1))
}

/// `levels`-level Mallat decomposition packed into one spectrum.
pub fn mdwt<T: Scalar>(image: &Image<T>, levels: usize) -> Result<WaveletSpectrum<T>> {
    let (h, w, c) = image.dims();
    check_levels(h, w, levels)?;
    Ok(WaveletSpectrum {
        levels,
        packed: Image::new(h, w, c, mdwt_raw(image.data(), h, w, c, levels))?,
    })
}

/// Inverse of [`mdwt`].
pub fn imdwt<T: Scalar>(spectrum: &WaveletSpectrum<T>) -> Result<Image<T>> {
    let (h, w, c) = spectrum.packed.dims();
    check_levels(h, w, spectrum.levels)?;
    Image::new(h, w, c, imdwt_raw(spectrum.packed.data(), h, w, c, spectrum.levels))
}

impl<T: Scalar> WaveletSpectrum<T> {
    /// Wraps an already packed array, validating the layout dimensions.
    pub fn from_packed(packed: Image<T>, levels: usize) -> Result<Self> {
        check_levels(packed.height(), packed.width(), levels)?;
        Ok(Self { levels, packed })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, levels: usize) -> Result<Self> {
        Self::from_packed(Image::zeros(height, width, channels), levels)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn packed(&self) -> &Image<T> {
        &self.packed
    }

    pub fn into_packed(self) -> Image<T> {
        self.packed
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.packed.dims()
    }

    /// Size of the level-`level` sub-bands.
    pub fn band_size(&self, level: usize) -> (usize, usize) {
        (self.packed.height() >> level, self.packed.width() >> level)
    }

    /// Top-left corner of a sub-band in the packed layout.
    /// `None` selects the LF band x_L^J.
    pub fn band_origin(&self, level: usize, band: Option<SubBand>) -> (usize, usize) {
        band_origin(self.packed.height(), self.packed.width(), level, band)
    }

    /// The LF sub-band x_L^J.
    pub fn low(&self) -> Image<T> {
        let (h, w) = self.band_size(self.levels);
        crop(&self.packed, 0, 0, h, w)
    }

    /// A directional sub-band at `level` (1 = finest).
    pub fn band(&self, level: usize, band: SubBand) -> Result<Image<T>> {
        if level == 0 || level > self.levels {
            return Err(Error::contract(format!("level {level} outside 1..={}", self.levels)));
        }
        let (h, w) = self.band_size(level);
        let (y0, x0) = self.band_origin(level, Some(band));
        Ok(crop(&self.packed, y0, x0, h, w))
    }
}

/// Top-left corner of a sub-band in an `h×w` packed spectrum.
pub fn band_origin(h: usize, w: usize, level: usize, band: Option<SubBand>) -> (usize, usize) {
    match band {
        None => (0, 0),
        Some(b) => {
            let (qy, qx) = b.quadrant();
            (qy * (h >> level), qx * (w >> level))
        }
    }
}
