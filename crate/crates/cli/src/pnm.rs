//! Binary PGM (P5) and PPM (P6) with `maxval = 255`.

use std::path::Path;

use wsdt::image::Image;
use wsdt::{Error, Result};

/// A decoded raster. `header` keeps the exact header bytes (including
/// comments) so a file can be rewritten byte for byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub header: Vec<u8>,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad or missing {what} in PNM header")))
    }
}

impl Pnm {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => {
                return Err(Error::Format(
                    "unsupported image format: expected binary PGM (P5) or PPM (P6)".into(),
                ))
            }
        };
        let mut c = Cursor { bytes, pos: 2 };
        let width = c.number("width")?;
        let height = c.number("height")?;
        let maxval = c.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!(
                "unsupported maxval {maxval}, only 255 is accepted"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::Format("PNM header not terminated by whitespace".into()));
        }
        let start = c.pos + 1;
        let len = width * height * channels;
        if width == 0 || height == 0 {
            return Err(Error::Format("PNM image has a zero dimension".into()));
        }
        let pixels = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::Format(format!("PNM raster truncated: need {len} bytes")))?
            .to_vec();
        if bytes.len() != start + len {
            return Err(Error::Format("trailing bytes after PNM raster".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            header: bytes[..start].to_vec(),
            pixels,
        })
    }

    /// Canonical header for new files.
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        let magic = match channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Format(format!("cannot store {c} channels as PNM"))),
        };
        if pixels.len() != width * height * channels {
            return Err(Error::dim("PNM pixel count does not match dimensions"));
        }
        Ok(Self {
            width,
            height,
            channels,
            header: format!("{magic}\n{width} {height}\n255\n").into_bytes(),
            pixels,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header.clone();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    /// Pixels mapped to `[-1, 1]`.
    pub fn to_image(&self) -> Image<f32> {
        let data = self.pixels.iter().map(|&b| f32::from(b) / 127.5 - 1.0).collect();
        Image::new(self.height, self.width, self.channels, data).expect("consistent raster")
    }

    /// Pixels mapped to `[0, 1]`, the range metrics are computed in.
    pub fn to_unit_image(&self) -> Image<f32> {
        let data = self.pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
        Image::new(self.height, self.width, self.channels, data).expect("consistent raster")
    }

    /// Quantises an image in `[-1, 1]`.
    pub fn from_image(img: &Image<f32>) -> Result<Self> {
        let (h, w, c) = img.dims();
        Self::new(w, h, c, img.data().iter().map(|&v| to_byte(v)).collect())
    }
}

pub fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}
