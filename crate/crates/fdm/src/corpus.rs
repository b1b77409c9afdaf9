//! Training corpora: the in-tree synthetic blob generator and PNG directory
//! ingestion, plus the per-channel moments used to judge generated samples.

use std::path::Path;

use anyhow::{bail, Context};
use fdm_core::{seeded, uniform, Shape, Tensor};
use image::imageops::FilterType;
use sha2::{Digest, Sha256};

use crate::config::{hex, CorpusSource};

/// Gaussian blobs over a linear colour gradient, values in `[−1, 1]`.
/// Image `i` depends only on `(seed, i)` through one sequential stream.
pub fn blobs(n: usize, size: usize, channels: usize, seed: u64) -> Vec<Tensor> {
    let mut r = seeded(seed);
    let shape = Shape::new(channels, size, size);
    let s = size as f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = || uniform(&mut r);
        let c0: Vec<f64> = (0..channels).map(|_| 1.6 * u() - 0.8).collect();
        let c1: Vec<f64> = (0..channels).map(|_| 1.6 * u() - 0.8).collect();
        let theta = std::f64::consts::TAU * u();
        let (ct, st) = (theta.cos(), theta.sin());
        let count = 1 + (3.0 * u()) as usize;
        let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..count)
            .map(|_| {
                let cy = s * (0.15 + 0.7 * u());
                let cx = s * (0.15 + 0.7 * u());
                let sigma = s * (0.08 + 0.12 * u());
                let color = (0..channels).map(|_| 2.0 * u() - 1.0).collect();
                (cy, cx, sigma, color)
            })
            .collect();
        let mut img = Tensor::zeros(shape);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let g = (((fx - s / 2.0) * ct + (fy - s / 2.0) * st) / s + 0.5).clamp(0.0, 1.0);
                let mut px: Vec<f64> = (0..channels).map(|c| c0[c] * (1.0 - g) + c1[c] * g).collect();
                for (cy, cx, sigma, color) in &blobs {
                    let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                    let w = (-d2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..channels {
                        px[c] = px[c] * (1.0 - w) + color[c] * w;
                    }
                }
                for (c, v) in px.into_iter().enumerate() {
                    img.channel_mut(c)[y * size + x] = v.clamp(-1.0, 1.0) as f32;
                }
            }
        }
        out.push(img);
    }
    out
}

/// Center-crops to a square, resizes to `size` and scales to `[−1, 1]`.
pub fn ingest_image(img: &image::DynamicImage, size: usize, channels: usize) -> anyhow::Result<Tensor> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped.resize_exact(size as u32, size as u32, FilterType::Triangle);
    let mut t = Tensor::zeros(Shape::new(channels, size, size));
    match channels {
        1 => {
            let g = resized.to_luma8();
            for (i, p) in g.pixels().enumerate() {
                t.data_mut()[i] = p.0[0] as f32 / 127.5 - 1.0;
            }
        }
        3 => {
            let rgb = resized.to_rgb8();
            let plane = size * size;
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    t.data_mut()[c * plane + i] = p.0[c] as f32 / 127.5 - 1.0;
                }
            }
        }
        _ => bail!("image ingestion supports 1 or 3 channels, not {channels}"),
    }
    Ok(t)
}

/// All `.png` files of a directory in name order.
pub fn load_dir(dir: &Path, size: usize, channels: usize) -> anyhow::Result<Vec<Tensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading corpus directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = image::open(p).with_context(|| format!("decoding {}", p.display()))?;
            ingest_image(&img, size, channels)
        })
        .collect()
}

pub fn load(source: &CorpusSource, size: usize, channels: usize, seed: u64) -> anyhow::Result<Vec<Tensor>> {
    let data = match source {
        CorpusSource::Blobs { n, size: s } => {
            if *s != size {
                bail!("blob size {s} differs from the image size {size}");
            }
            blobs(*n, size, channels, seed)
        }
        CorpusSource::Dir(dir) => load_dir(dir, size, channels)?,
    };
    if data.is_empty() {
        bail!("corpus is empty");
    }
    Ok(data)
}

/// SHA-256 over every tensor's shape and little-endian data.
pub fn corpus_hash(data: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for t in data {
        let s = t.shape();
        for d in [s.channels, s.height, s.width] {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Per-channel pixel mean and channel covariance over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Row-major `C × C`.
    pub cov: Vec<f64>,
}

impl Moments {
    pub fn of(data: &[Tensor]) -> Self {
        let c = data[0].shape().channels;
        let plane = data[0].shape().plane();
        let count = (data.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        for t in data {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += t.channel(ch).iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut cov = vec![0.0; c * c];
        for t in data {
            for p in 0..plane {
                for i in 0..c {
                    let di = t.channel(i)[p] as f64 - mean[i];
                    for j in 0..c {
                        cov[i * c + j] += di * (t.channel(j)[p] as f64 - mean[j]);
                    }
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= count - 1.0);
        Self { mean, cov }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(max_c |μ̂_c − μ_c| / σ_c, ‖Σ̂ − Σ‖_F / ‖Σ‖_F)` against `reference`.
    pub fn relative_errors(&self, reference: &Moments) -> (f64, f64) {
        let c = reference.channels();
        let mean_err = (0..c)
            .map(|i| (self.mean[i] - reference.mean[i]).abs() / reference.cov[i * c + i].sqrt())
            .fold(0.0, f64::max);
        let diff: f64 = self
            .cov
            .iter()
            .zip(&reference.cov)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let norm: f64 = reference.cov.iter().map(|b| b * b).sum();
        (mean_err, (diff / norm).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let a = blobs(8, 16, 3, 5);
        let b = blobs(8, 16, 3, 5);
        assert_eq!(corpus_hash(&a), corpus_hash(&b));
        assert_ne!(corpus_hash(&a), corpus_hash(&blobs(8, 16, 3, 6)));
        assert!(a.iter().all(|t| t.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        // a prefix of a larger corpus is the smaller corpus
        assert_eq!(blobs(4, 16, 3, 5)[..], a[..4]);
    }

    #[test]
    fn moments_of_constant_images() {
        let shape = Shape::new(2, 2, 2);
        let data = vec![Tensor::full(shape, 0.5), Tensor::full(shape, -0.5)];
        let m = Moments::of(&data);
        assert!(m.mean.iter().all(|v| v.abs() < 1e-12));
        let var = 8.0 * 0.25 / 7.0;
        for (i, v) in m.cov.iter().enumerate() {
            assert!((v - var).abs() < 1e-12, "{i}: {v}");
        }
        assert_eq!(m.relative_errors(&m), (0.0, 0.0));
    }

    #[test]
    fn ingestion_crops_and_scales() {
        let mut img = image::RgbImage::new(6, 4);
        for (x, _, p) in img.enumerate_pixels_mut() {
            *p = if x == 0 || x == 5 { image::Rgb([0, 0, 0]) } else { image::Rgb([255, 255, 255]) };
        }
        let t = ingest_image(&image::DynamicImage::ImageRgb8(img), 4, 3).unwrap();
        assert_eq!(t.shape(), Shape::new(3, 4, 4));
        assert!(t.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }
}
