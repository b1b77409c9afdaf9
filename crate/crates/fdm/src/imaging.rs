//! PNG output for tensors in `[−1, 1]`, contact sheets and metadata sidecars.

use std::path::Path;

use anyhow::{bail, Context};
use fdm_core::{Shape, Tensor};
use image::{ExtendedColorType, ImageEncoder};

use crate::formats::write_atomic;

/// Maps `[−1, 1]` to `0..=255`, clamping, rounding half away from zero.
pub fn to_u8(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Interleaved 8-bit pixels of a 1- or 3-channel tensor.
pub fn to_pixels(t: &Tensor) -> anyhow::Result<(Vec<u8>, ExtendedColorType)> {
    let s = t.shape();
    let color = match s.channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        c => bail!("PNG output supports 1 or 3 channels, not {c}"),
    };
    let plane = s.plane();
    let mut px = Vec::with_capacity(s.numel());
    for p in 0..plane {
        for c in 0..s.channels {
            px.push(to_u8(t.channel(c)[p]));
        }
    }
    Ok((px, color))
}

pub fn encode_png(t: &Tensor) -> anyhow::Result<Vec<u8>> {
    let (px, color) = to_pixels(t)?;
    let s = t.shape();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&px, s.width as u32, s.height as u32, color)
        .context("encoding PNG")?;
    Ok(out)
}

pub fn write_png(path: &Path, t: &Tensor) -> anyhow::Result<()> {
    let bytes = encode_png(t)?;
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

/// Nearest-neighbour upscaling by an integer factor.
pub fn upscale(t: &Tensor, factor: usize) -> Tensor {
    let s = t.shape();
    let big = Shape::new(s.channels, s.height * factor, s.width * factor);
    let mut out = Tensor::zeros(big);
    for c in 0..s.channels {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..big.height {
            for x in 0..big.width {
                dst[y * big.width + x] = src[(y / factor) * s.width + x / factor];
            }
        }
    }
    out
}

/// Tiles equally shaped images into a grid with a one-pixel border of −1.
/// Tiles smaller than `tile` are upscaled by nearest neighbour first.
pub fn contact_sheet(images: &[Tensor], columns: usize, tile: usize) -> anyhow::Result<Tensor> {
    let Some(first) = images.first() else {
        bail!("contact sheet needs at least one image");
    };
    let s = first.shape();
    if images.iter().any(|t| t.shape() != s) {
        bail!("contact sheet images differ in shape");
    }
    let factor = (tile / s.height.max(s.width)).max(1);
    let (th, tw) = (s.height * factor, s.width * factor);
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let sheet_shape = Shape::new(s.channels, rows * (th + 1) + 1, columns * (tw + 1) + 1);
    let mut sheet = Tensor::full(sheet_shape, -1.0);
    for (i, img) in images.iter().enumerate() {
        let big = upscale(img, factor);
        let (oy, ox) = (1 + (i / columns) * (th + 1), 1 + (i % columns) * (tw + 1));
        for c in 0..s.channels {
            let src = big.channel(c);
            let dst = sheet.channel_mut(c);
            for y in 0..th {
                let row = (oy + y) * sheet_shape.width + ox;
                dst[row..row + tw].copy_from_slice(&src[y * tw..(y + 1) * tw]);
            }
        }
    }
    Ok(sheet)
}

/// Writes `value` as pretty JSON next to `path` (`foo.png` → `foo.json`).
pub fn write_sidecar(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let side = path.with_extension("json");
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(&side, text.as_bytes()).with_context(|| format!("writing {}", side.display()))
}
