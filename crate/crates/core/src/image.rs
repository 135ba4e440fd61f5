//! Grayscale image patches in [-1, 1] and their 8-bit PNG interchange form.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndcore::NdArray;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Where a patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Real,
    Synthetic,
    Generated,
    Repainted,
}

/// A single-channel `[1,H,W]` raster with values clamped to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pixels: NdArray<f32>,
    kind: PatchKind,
}

impl ImagePatch {
    /// Wraps a `[1,H,W]` (or `[H,W]`) array, clamping to [-1, 1].
    pub fn new(pixels: NdArray<f32>, kind: PatchKind) -> Result<Self> {
        let pixels = match *pixels.shape() {
            [h, w] => pixels.reshape([1, h, w])?,
            [1, _, _] => pixels,
            ref s => return Err(Error::invalid(format!("patch must be [1,H,W], got {s:?}"))),
        };
        if !pixels.is_finite() {
            return Err(Error::invalid("patch contains non-finite values"));
        }
        Ok(Self {
            pixels: pixels.map(|v| v.clamp(-1.0, 1.0)),
            kind,
        })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>, kind: PatchKind) -> Result<Self> {
        Self::new(NdArray::new([1, height, width], data)?, kind)
    }

    pub fn filled(height: usize, width: usize, value: f32, kind: PatchKind) -> Self {
        Self {
            pixels: NdArray::full([1, height, width], value.clamp(-1.0, 1.0)),
            kind,
        }
    }

    pub fn kind(&self) -> PatchKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: PatchKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &NdArray<f32> {
        &self.pixels
    }

    pub fn data(&self) -> &[f32] {
        self.pixels.data()
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels.data()[y * self.width() + x]
    }

    /// Stacks equally sized patches into an `[N,1,H,W]` batch.
    pub fn stack(patches: &[ImagePatch]) -> Result<NdArray<f32>> {
        let items: Vec<NdArray<f32>> = patches
            .iter()
            .map(|p| p.pixels.clone().reshape([1, 1, p.height(), p.width()]))
            .collect::<ndcore::Result<_>>()?;
        Ok(NdArray::stack_batch(&items)?)
    }

    /// Splits an `[N,1,H,W]` batch into patches (clamping each).
    pub fn unstack(batch: &NdArray<f32>, kind: PatchKind) -> Result<Vec<ImagePatch>> {
        let (n, c, h, w) = batch.dims4("unstack")?;
        if c != 1 {
            return Err(Error::invalid(format!("expected 1 channel, got {c}")));
        }
        batch
            .data()
            .chunks_exact(h * w)
            .take(n)
            .map(|d| ImagePatch::from_vec(h, w, d.to_vec(), kind))
            .collect()
    }

    /// 8-bit encoding `round((p + 1) * 127.5)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data()
            .iter()
            .map(|&p| ((p as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8], kind: PatchKind) -> Result<Self> {
        let data = bytes
            .iter()
            .map(|&b| (b as f64 / 127.5 - 1.0) as f32)
            .collect();
        Self::from_vec(height, width, data, kind)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.width(), self.height(), &self.to_u8())
    }

    pub fn load_png(path: &Path, kind: PatchKind) -> Result<Self> {
        let (w, h, bytes) = read_gray_png(path)?;
        Self::from_u8(h, w, &bytes, kind)
    }
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads any 8/16-bit PNG as 8-bit luminance, returning `(width, height, bytes)`.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let file = File::open(path).at(path)?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png {
        path: path.to_path_buf(),
        msg: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let gray = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
            buf.chunks_exact(channels).map(|p| p[0]).collect()
        }
        png::ColorType::Rgb | png::ColorType::Rgba => buf
            .chunks_exact(channels)
            .map(|p| ((p[0] as u32 + p[1] as u32 + p[2] as u32 + 1) / 3) as u8)
            .collect(),
        png::ColorType::Indexed => {
            return Err(Error::Png {
                path: path.to_path_buf(),
                msg: "unexpanded palette".into(),
            })
        }
    };
    Ok((w, h, gray))
}
