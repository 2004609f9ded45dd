//! Stand-ins for the semantic vision encoder and the causal video VAE.
//!
//! Both are fixed linear maps. The latent codec folds `rt x rs x rs` pixel
//! blocks into channels and mixes them with an orthonormal separable DCT, so
//! decoding is the exact transpose. The first frame forms a temporal group
//! of its own; later frames are grouped `rt` at a time. Short groups are
//! zero padded.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gemm, Tensor};
use crate::sequence::Layout;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{what}: extent {extent} not divisible by {factor}")]
    Divisibility {
        what: &'static str,
        extent: usize,
        factor: usize,
    },
    #[error("visual array needs at least one frame and 3 channels, got {frames} x {channels}")]
    BadArray { frames: usize, channels: usize },
    #[error("latent shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("raw visual file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `frames x height x width x 3` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualArray {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl VisualArray {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, EncoderError> {
        if frames == 0 || data.len() != frames * height * width * CHANNELS {
            return Err(EncoderError::BadArray {
                frames,
                channels: CHANNELS,
            });
        }
        Ok(VisualArray {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VisualArray {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * CHANNELS],
        }
    }

    fn index(&self, f: usize, y: usize, x: usize) -> usize {
        ((f * self.height + y) * self.width + x) * CHANNELS
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [f64; 3] {
        let i = self.index(f, y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, f: usize, y: usize, x: usize, rgb: [f64; 3]) {
        let i = self.index(f, y, x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn frame(&self, f: usize) -> VisualArray {
        let n = self.height * self.width * CHANNELS;
        VisualArray {
            frames: 1,
            height: self.height,
            width: self.width,
            data: self.data[f * n..(f + 1) * n].to_vec(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn mean_abs_diff(&self, other: &VisualArray) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Latent spatial down-sampling `rs`.
    pub latent_spatial: usize,
    /// Latent temporal down-sampling `rt`.
    pub latent_temporal: usize,
    /// Semantic patch size before merging.
    pub vit_patch: usize,
    pub vit_temporal: usize,
    pub vit_merge: usize,
    pub seed: u64,
    /// Multiplier from codec coefficients to the latents the backbone sees,
    /// bringing them to roughly unit variance so the flow target is not
    /// dwarfed by the unit Gaussian source. The codec itself is unscaled.
    pub latent_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            latent_spatial: 4,
            latent_temporal: 2,
            vit_patch: 8,
            vit_temporal: 2,
            vit_merge: 2,
            seed: 0x5eed,
            latent_scale: 5.0,
        }
    }
}

impl EncoderConfig {
    /// Down-sampling ratios of the full-size encoders (16x/4x latent,
    /// 14x/2x patching with a 2x2 merge).
    pub fn paper_scale() -> Self {
        EncoderConfig {
            latent_spatial: 16,
            latent_temporal: 4,
            vit_patch: 14,
            vit_temporal: 2,
            vit_merge: 2,
            seed: 0x5eed,
            latent_scale: 5.0,
        }
    }

    pub fn latent_channels(&self) -> usize {
        CHANNELS * self.latent_spatial * self.latent_spatial * self.latent_temporal
    }

    pub fn latent_frames(&self, frames: usize) -> usize {
        1 + (frames - 1).div_ceil(self.latent_temporal)
    }

    pub fn vit_features(&self) -> usize {
        CHANNELS * self.vit_patch * self.vit_patch * self.vit_temporal * self.vit_merge * self.vit_merge
    }

    /// Semantic token grid for a `frames x height x width` input.
    pub fn semantic_layout(&self, frames: usize, height: usize, width: usize) -> Result<Layout, EncoderError> {
        let cell = self.vit_patch * self.vit_merge;
        for (what, extent) in [("semantic height", height), ("semantic width", width)] {
            if extent % cell != 0 || extent == 0 {
                return Err(EncoderError::Divisibility {
                    what,
                    extent,
                    factor: cell,
                });
            }
        }
        Ok(Layout::new(frames.div_ceil(self.vit_temporal), height / cell, width / cell))
    }

    pub fn latent_layout(&self, frames: usize, height: usize, width: usize) -> Result<Layout, EncoderError> {
        let rs = self.latent_spatial;
        for (what, extent) in [("latent height", height), ("latent width", width)] {
            if extent % rs != 0 || extent == 0 {
                return Err(EncoderError::Divisibility {
                    what,
                    extent,
                    factor: rs,
                });
            }
        }
        Ok(Layout::new(self.latent_frames(frames), height / rs, width / rs))
    }
}

/// Continuous latent tokens, `[T*H*W, c]` in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub layout: Layout,
    /// Pixel frames the grid decodes to.
    pub frames: usize,
    pub tokens: Tensor,
}

/// Orthonormal DCT-II matrix, row `k` is basis vector `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

fn kron(a: &[f64], na: usize, b: &[f64], nb: usize) -> Vec<f64> {
    let n = na * nb;
    let mut out = vec![0.0; n * n];
    for i in 0..na {
        for j in 0..na {
            for k in 0..nb {
                for l in 0..nb {
                    out[(i * nb + k) * n + j * nb + l] = a[i * na + j] * b[k * nb + l];
                }
            }
        }
    }
    out
}

/// Fixed encoders; construction is deterministic in the config seed.
#[derive(Clone, Debug)]
pub struct ToyEncoders {
    pub config: EncoderConfig,
    model_dim: usize,
    /// `[c, c]` orthonormal mixing, applied as `latent = patch * mix^T`.
    mix: Vec<f64>,
    /// `[vit_features, model_dim]` with orthonormal columns.
    projection: Vec<f64>,
}

impl ToyEncoders {
    pub fn new(config: EncoderConfig, model_dim: usize) -> Self {
        let rs = config.latent_spatial;
        let rt = config.latent_temporal;
        // patch vector order is [dt][dy][dx][color]
        let color = dct_matrix(CHANNELS);
        let mix = kron(&dct_matrix(rt), rt, &kron(&dct_matrix(rs), rs, &kron(&dct_matrix(rs), rs, &color, CHANNELS), rs * CHANNELS), rs * rs * CHANNELS);
        let projection = orthonormal_columns(config.vit_features(), model_dim, config.seed);
        ToyEncoders {
            config,
            model_dim,
            mix,
            projection,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels()
    }

    /// Patch flattening with `vit_temporal` frame grouping (the last frame
    /// repeats when the count is odd), a `vit_merge x vit_merge` spatial merge,
    /// and a fixed projection to the model dimension.
    pub fn semantic_encode(&self, v: &VisualArray) -> Result<(Tensor, Layout), EncoderError> {
        let layout = self.config.semantic_layout(v.frames, v.height, v.width)?;
        let p = self.config.vit_patch;
        let merge = self.config.vit_merge;
        let tt = self.config.vit_temporal;
        let features = self.config.vit_features();
        let mut raw = Vec::with_capacity(layout.volume() * features);
        for t in 0..layout.t {
            for gy in 0..layout.h {
                for gx in 0..layout.w {
                    for my in 0..merge {
                        for mx in 0..merge {
                            for dt in 0..tt {
                                let f = (t * tt + dt).min(v.frames - 1);
                                for dy in 0..p {
                                    for dx in 0..p {
                                        let y = (gy * merge + my) * p + dy;
                                        let x = (gx * merge + mx) * p + dx;
                                        raw.extend_from_slice(&v.pixel(f, y, x));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let n = layout.volume();
        let mut out = vec![0.0; n * self.model_dim];
        gemm(n, features, self.model_dim, &raw, false, &self.projection, false, 0.0, &mut out);
        let tokens = Tensor::new(vec![n, self.model_dim], out).expect("semantic token shape");
        Ok((tokens, layout))
    }

    pub fn latent_encode(&self, v: &VisualArray) -> Result<LatentGrid, EncoderError> {
        let layout = self.config.latent_layout(v.frames, v.height, v.width)?;
        let c = self.latent_channels();
        let rs = self.config.latent_spatial;
        let n = layout.volume();
        let mut patches = vec![0.0; n * c];
        for (token, patch) in patches.chunks_mut(c).enumerate() {
            let (t, gy, gx) = layout.coord(token);
            for (dt, frame) in self.group_frames(t).into_iter().enumerate() {
                if frame >= v.frames {
                    continue;
                }
                for dy in 0..rs {
                    for dx in 0..rs {
                        let at = ((dt * rs + dy) * rs + dx) * CHANNELS;
                        patch[at..at + CHANNELS].copy_from_slice(&v.pixel(frame, gy * rs + dy, gx * rs + dx));
                    }
                }
            }
        }
        let mut out = vec![0.0; n * c];
        gemm(n, c, c, &patches, false, &self.mix, true, 0.0, &mut out);
        Ok(LatentGrid {
            layout,
            frames: v.frames,
            tokens: Tensor::new(vec![n, c], out).expect("latent shape"),
        })
    }

    pub fn latent_decode(&self, l: &LatentGrid) -> Result<VisualArray, EncoderError> {
        let c = self.latent_channels();
        let n = l.layout.volume();
        if l.tokens.shape() != [n, c] || l.layout.t != self.config.latent_frames(l.frames) {
            return Err(EncoderError::Shape {
                expected: vec![n, c],
                got: l.tokens.shape().to_vec(),
            });
        }
        let rs = self.config.latent_spatial;
        let mut patches = vec![0.0; n * c];
        gemm(n, c, c, l.tokens.data(), false, &self.mix, false, 0.0, &mut patches);
        let mut v = VisualArray::zeros(l.frames, l.layout.h * rs, l.layout.w * rs);
        for (token, patch) in patches.chunks(c).enumerate() {
            let (t, gy, gx) = l.layout.coord(token);
            for (dt, frame) in self.group_frames(t).into_iter().enumerate() {
                if frame >= l.frames {
                    continue;
                }
                for dy in 0..rs {
                    for dx in 0..rs {
                        let at = ((dt * rs + dy) * rs + dx) * CHANNELS;
                        v.set_pixel(frame, gy * rs + dy, gx * rs + dx, [patch[at], patch[at + 1], patch[at + 2]]);
                    }
                }
            }
        }
        Ok(v)
    }

    /// Codec latents multiplied by `latent_scale`: the payload of clean
    /// latent blocks and the flow target.
    pub fn model_latents(&self, v: &VisualArray) -> Result<LatentGrid, EncoderError> {
        let mut grid = self.latent_encode(v)?;
        grid.tokens.data_mut().iter_mut().for_each(|x| *x *= self.config.latent_scale);
        Ok(grid)
    }

    /// Inverse of `model_latents`.
    pub fn decode_model_latents(&self, l: &LatentGrid) -> Result<VisualArray, EncoderError> {
        let mut grid = l.clone();
        grid.tokens.data_mut().iter_mut().for_each(|x| *x /= self.config.latent_scale);
        self.latent_decode(&grid)
    }

    /// Pixel frame for each temporal slot of latent group `t`; slots past
    /// the first frame of group 0 are padding.
    fn group_frames(&self, t: usize) -> Vec<usize> {
        let rt = self.config.latent_temporal;
        if t == 0 {
            let mut frames = vec![usize::MAX; rt];
            frames[0] = 0;
            frames
        } else {
            (0..rt).map(|dt| 1 + (t - 1) * rt + dt).collect()
        }
    }
}

/// Random matrix with orthonormal columns via modified Gram-Schmidt.
fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in {rows} dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Tensor::randn(&[cols, rows], 1.0, &mut rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let mut v = g.row(k).to_vec();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (k, b) in basis.iter().enumerate() {
        for (r, &x) in b.iter().enumerate() {
            out[r * cols + k] = x;
        }
    }
    out
}

const RAW_MAGIC: [u8; 4] = *b"LNCV";

/// Writes the raw format: eight little-endian f32 header values
/// `(magic, F, H, W, channels, rs, rt, reserved)` followed by the pixels.
pub fn write_raw(path: &Path, v: &VisualArray, cfg: &EncoderConfig) -> Result<(), EncoderError> {
    let mut bytes = Vec::with_capacity(32 + v.data.len() * 4);
    bytes.extend_from_slice(&RAW_MAGIC);
    for h in [v.frames, v.height, v.width, CHANNELS, cfg.latent_spatial, cfg.latent_temporal, 0] {
        bytes.extend_from_slice(&(h as f32).to_le_bytes());
    }
    for &x in &v.data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<(VisualArray, usize, usize), EncoderError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 || bytes[..4] != RAW_MAGIC {
        return Err(EncoderError::Format("missing magic".into()));
    }
    let word = |i: usize| f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
    let header: Vec<usize> = (1..8).map(|i| word(i) as usize).collect();
    let (frames, height, width, channels, rs, rt) = (header[0], header[1], header[2], header[3], header[4], header[5]);
    if channels != CHANNELS {
        return Err(EncoderError::Format(format!("expected 3 channels, got {channels}")));
    }
    let count = frames * height * width * channels;
    if bytes.len() != 32 + 4 * count {
        return Err(EncoderError::Format(format!("expected {count} pixels, file holds {}", (bytes.len() - 32) / 4)));
    }
    let data = (0..count).map(|i| word(8 + i) as f64).collect();
    Ok((VisualArray::new(frames, height, width, data)?, rs, rt))
}

/// 8-bit binary PPM with all frames side by side.
pub fn write_ppm(path: &Path, v: &VisualArray) -> Result<(), EncoderError> {
    let w = v.width * v.frames;
    let mut bytes = format!("P6\n{} {}\n255\n", w, v.height).into_bytes();
    for y in 0..v.height {
        for f in 0..v.frames {
            for x in 0..v.width {
                for ch in v.pixel(f, y, x) {
                    bytes.push((ch.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn random_array(frames: usize, h: usize, w: usize, seed: u64) -> VisualArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * h * w * 3).map(|_| rng.random::<f64>()).collect();
        VisualArray::new(frames, h, w, data).unwrap()
    }

    #[test]
    fn mixing_matrix_is_orthonormal() {
        let enc = ToyEncoders::new(EncoderConfig::default(), 16);
        let c = enc.latent_channels();
        assert_eq!(c, 96);
        let mut gram = vec![0.0; c * c];
        gemm(c, c, c, &enc.mix, false, &enc.mix, true, 0.0, &mut gram);
        for i in 0..c {
            for j in 0..c {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i * c + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_gives_identical_semantic_tokens() {
        let enc = ToyEncoders::new(EncoderConfig::default(), 32);
        let mut v = VisualArray::zeros(1, 32, 32);
        v.data.iter_mut().for_each(|x| *x = 0.5);
        let (tokens, layout) = enc.semantic_encode(&v).unwrap();
        // 32x32 with 8px patches is a 4x4 grid; the 2x2 merge leaves 2x2
        assert_eq!(layout, Layout::new(1, 2, 2));
        assert_eq!(tokens.shape(), &[4, 32]);
        for r in 1..4 {
            assert_eq!(tokens.row(r), tokens.row(0));
        }
    }

    #[test]
    fn semantic_encoding_is_deterministic() {
        let v = random_array(3, 16, 16, 4);
        let a = ToyEncoders::new(EncoderConfig::default(), 32).semantic_encode(&v).unwrap();
        let b = ToyEncoders::new(EncoderConfig::default(), 32).semantic_encode(&v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1, Layout::new(2, 1, 1));
    }

    #[test]
    fn divisibility_is_checked() {
        let enc = ToyEncoders::new(EncoderConfig::default(), 32);
        let v = VisualArray::zeros(1, 18, 16);
        assert!(matches!(enc.latent_encode(&v), Err(EncoderError::Divisibility { .. })));
        assert!(matches!(enc.semantic_encode(&v), Err(EncoderError::Divisibility { .. })));
    }

    #[test]
    fn causal_temporal_grouping() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.latent_frames(1), 1);
        let paper = EncoderConfig::paper_scale();
        // frame 0 alone, then frames 1..=4 together
        assert_eq!(paper.latent_frames(5), 2);
        assert_eq!(paper.latent_frames(6), 3);
        assert_eq!(cfg.latent_frames(4), 3);
        let l = paper.latent_layout(5, 64, 48).unwrap();
        assert_eq!(l, Layout::new(2, 4, 3));
        assert_eq!(paper.semantic_layout(4, 56, 28).unwrap(), Layout::new(2, 2, 1));
    }

    #[test]
    fn paper_ratios_round_trip() {
        let enc = ToyEncoders::new(EncoderConfig::paper_scale(), 16);
        let v = random_array(5, 32, 16, 8);
        let l = enc.latent_encode(&v).unwrap();
        assert_eq!(l.tokens.shape(), &[4, 3 * 16 * 16 * 4]);
        assert!(enc.latent_decode(&l).unwrap().mean_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn model_latents_are_scaled_codec_latents() {
        let enc = ToyEncoders::new(EncoderConfig::default(), 16);
        let v = random_array(3, 8, 12, 5);
        let raw = enc.latent_encode(&v).unwrap();
        let scaled = enc.model_latents(&v).unwrap();
        let k = enc.config.latent_scale;
        assert!(raw.tokens.data().iter().zip(scaled.tokens.data()).all(|(a, b)| (a * k - b).abs() < 1e-12));
        assert!(enc.decode_model_latents(&scaled).unwrap().mean_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn decode_rejects_wrong_shape() {
        let enc = ToyEncoders::new(EncoderConfig::default(), 16);
        let bad = LatentGrid {
            layout: Layout::new(1, 2, 2),
            frames: 1,
            tokens: Tensor::zeros(&[4, 5]),
        };
        assert!(matches!(enc.latent_decode(&bad), Err(EncoderError::Shape { .. })));
    }

    #[test]
    fn raw_and_ppm_files() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_array(2, 8, 4, 9);
        let path = dir.path().join("x.raw");
        write_raw(&path, &v, &EncoderConfig::default()).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"LNCV");
        assert_eq!(bytes.len(), 32 + 4 * 2 * 8 * 4 * 3);
        let (back, rs, rt) = read_raw(&path).unwrap();
        assert_eq!((rs, rt), (4, 2));
        assert!(back.mean_abs_diff(&v) < 1e-7);
        write_ppm(&dir.path().join("x.ppm"), &v).unwrap();
        let ppm = fs::read(dir.path().join("x.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
        fs::write(&path, b"nope").unwrap();
        assert!(read_raw(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn latent_round_trip_and_energy(frames in 1usize..7, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
            let enc = ToyEncoders::new(EncoderConfig::default(), 16);
            let v = random_array(frames, h * 4, w * 4, seed);
            let l = enc.latent_encode(&v).unwrap();
            prop_assert_eq!(l.layout, Layout::new(1 + (frames - 1).div_ceil(2), h, w));
            let back = enc.latent_decode(&l).unwrap();
            prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| (a - b).abs() < 1e-10));
            prop_assert!((l.tokens.norm_sq().sqrt() - v.norm()).abs() < 1e-9);
        }
    }
}
