//! Image decoding/encoding, bicubic resampling, and the PSNR metric.
//!
//! Pixel values live in [0, 1]. Quantization on write is clamp then
//! round-half-up; PSNR is computed on the float values, before any
//! quantization. Supported containers: 8-bit PNG (gray/RGB), binary
//! PGM (P5) and PPM (P6).

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use image::ImageEncoder;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major H x W x C.
    pub data: Vec<f32>,
}

impl ImageBuffer {
    /// Strict constructor: every value must already be finite and in [0, 1].
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dims must be >= 1".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image data",
                &[height, width, channels],
                &[data.len()],
            ));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Image("pixel value outside [0, 1]".into()));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constructor for model output: clamps into [0, 1], rejects non-finite.
    pub fn from_values_clamped(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image assembly".into()));
        }
        let clamped = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(height, width, channels, clamped)
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor {
            shape: vec![self.height, self.width, self.channels],
            data: self.data.iter().map(|&v| S::from_f64(v as f64)).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Clamp to [0, 1] then round half up onto the 8-bit scale.
pub fn quantize_u8(v: f32) -> u8 {
    ((v.clamp(0.0, 1.0) as f64) * 255.0).round() as u8
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        read_png(&bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        read_pnm(&bytes)
    } else {
        Err(Error::Image(format!(
            "{}: unsupported format (expected PNG, PGM, or PPM)",
            path.display()
        )))
    }
}

fn read_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("png decode: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        image::DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        image::DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(Error::Image(format!(
                "unsupported png layout {:?} (only 8-bit gray/RGB)",
                other.color()
            )))
        }
    };
    let data = raw.iter().map(|&u| u as f32 / 255.0).collect();
    ImageBuffer::new(h, w, channels, data)
}

fn read_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => unreachable!("dispatched on magic"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_digit() => break,
                _ => return Err(Error::Image("corrupt pnm header".into())),
            }
        }
        let mut v = 0usize;
        while let Some(b) = bytes.get(pos) {
            if !b.is_ascii_digit() {
                break;
            }
            v = v * 10 + (b - b'0') as usize;
            pos += 1;
        }
        *field = v;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!(
            "unsupported pnm bit depth (maxval {maxval}, want 255)"
        )));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Image("corrupt pnm header".into())),
    }
    let need = w * h * channels;
    let raw = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Image("truncated pnm payload".into()))?;
    let data = raw.iter().map(|&u| u as f32 / 255.0).collect();
    ImageBuffer::new(h, w, channels, data)
}

/// Writes PNG/PGM/PPM chosen by extension, quantizing clamp-then-round.
pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => {
            let color = match img.channels {
                1 => image::ExtendedColorType::L8,
                _ => image::ExtendedColorType::Rgb8,
            };
            let file = fs::File::create(path)?;
            image::codecs::png::PngEncoder::new(std::io::BufWriter::new(file))
                .write_image(&bytes, img.width as u32, img.height as u32, color)
                .map_err(|e| Error::Image(format!("png encode: {e}")))?;
        }
        "pgm" | "ppm" => {
            let magic = match (ext.as_str(), img.channels) {
                ("pgm", 1) => "P5",
                ("ppm", 3) => "P6",
                _ => {
                    return Err(Error::Image(format!(
                        "{} channels do not fit .{ext}",
                        img.channels
                    )))
                }
            };
            let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&bytes);
            fs::write(path, out)?;
        }
        other => {
            return Err(Error::Image(format!(
                "unsupported output extension `.{other}`"
            )))
        }
    }
    Ok(())
}

/// Catmull-Rom cubic convolution kernel (parameter a = -0.5).
pub fn cubic_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Per-output-pixel source taps for one axis: 4 clamped indices + weights.
/// Output pixel i samples source coordinate (i + 0.5) * src/dst - 0.5.
pub fn resample_taps(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let s = (i as f64 + 0.5) * ratio - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for (k, off) in (-1i64..=2).enumerate() {
                let raw = base as i64 + off;
                idx[k] = raw.clamp(0, src_len as i64 - 1) as usize;
                w[k] = cubic_kernel(frac - off as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling with edge clamping; output clamped to [0,1].
pub fn bicubic_resize(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be >= 1".into()));
    }
    let (h, w, c) = (img.height, img.width, img.channels);

    // horizontal pass, f64 intermediate, no mid-pass clamping
    let col_taps = resample_taps(w, out_w);
    let mut mid = vec![0f64; h * out_w * c];
    for row in 0..h {
        let src_row = &img.data[row * w * c..(row + 1) * w * c];
        for (o, (idx, wt)) in col_taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * src_row[idx[k] * c + ch] as f64;
                }
                mid[(row * out_w + o) * c + ch] = acc;
            }
        }
    }

    // vertical pass
    let row_taps = resample_taps(h, out_h);
    let mut out = vec![0f32; out_h * out_w * c];
    for (o, (idx, wt)) in row_taps.iter().enumerate() {
        for col in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * mid[(idx[k] * out_w + col) * c + ch];
                }
                out[(o * out_w + col) * c + ch] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageBuffer::new(out_h, out_w, c, out)
}

/// Peak signal-to-noise ratio on the [0, 1] scale, in decibels.
/// Identical images return +infinity.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.height != b.height || a.width != b.width || a.channels != b.channels {
        return Err(Error::shape(
            "psnr",
            &[a.height, a.width, a.channels],
            &[b.height, b.width, b.channels],
        ));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
