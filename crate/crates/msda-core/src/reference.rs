//! Reference multi-scale deformable attention: slow, obviously correct, and
//! the oracle every optimized path is judged against.
//!
//! Sampling convention (pinned, because nothing else about this operator is
//! as easy to get silently wrong): locations are normalized `(x, y)` in
//! [0, 1]², x along the width axis. A location maps to image coordinates
//! `w_im = x·W − 0.5`, `h_im = y·H − 0.5` (align-corners-false), and the value
//! is bilinearly interpolated over the 2×2 neighborhood of
//! `(floor(h_im), floor(w_im))` with out-of-bounds corners reading zero.
//!
//! All arithmetic is f32 regardless of storage dtype.

use crate::pyramid::{FeaturePyramid, Layout, LevelSpec, SamplingTensors};
use crate::tensor::{Dtype, Tensor};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Train,
}

/// Problem geometry plus precision settings shared by both kernel families.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdaConfig {
    pub batch: usize,
    pub queries: usize,
    pub heads: usize,
    /// Channels per head; `heads * channels` is the embedding dim.
    pub channels: usize,
    pub levels: Vec<LevelSpec>,
    /// Sampling points per (query, head, level).
    pub points: usize,
    pub mode: Mode,
    /// Storage dtype of the train-mode sampled-value cache.
    pub saved_dtype: Dtype,
}

impl MsdaConfig {
    pub fn new(
        batch: usize,
        queries: usize,
        heads: usize,
        channels: usize,
        levels: Vec<LevelSpec>,
        points: usize,
        mode: Mode,
    ) -> MsdaConfig {
        MsdaConfig {
            batch,
            queries,
            heads,
            channels,
            levels,
            points,
            mode,
            saved_dtype: Dtype::F32,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.heads * self.channels
    }

    pub fn total_pixels(&self) -> usize {
        crate::pyramid::total_pixels(&self.levels)
    }
}

#[derive(Debug, Error)]
pub enum MsdaError {
    #[error("shape mismatch on {axis} axis of {tensor}: expected {expected}, got {actual}")]
    Shape {
        tensor: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("pyramid must be channel-last here, got {0:?}")]
    WrongLayout(Layout),
    #[error("sampling location is not finite")]
    NonFiniteLocation,
    #[error("level data has {actual} elements, geometry says {expected}")]
    LevelSize { expected: usize, actual: usize },
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f32),
    #[error("saved forward has {actual} elements, config requires {expected}")]
    SavedMismatch { expected: usize, actual: usize },
}

/// Per-point bilinear sample cache written by the train-mode forward pass:
/// entry `(b, q, h, l, p, c)` is the interpolated value at that sampling point.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedForward {
    pub sampled: Tensor,
}

/// Gradients with respect to the three MSDA inputs, always f32.
///
/// `grad_value` mirrors the channel-last pyramid storage shape
/// `(batch, total_pixels, heads, channels)`; the other two mirror the
/// sampling tensors exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdaGrads {
    pub grad_value: Tensor,
    pub grad_locations: Tensor,
    pub grad_weights: Tensor,
}

/// The four corner taps of one bilinear sample.
///
/// `offsets` are flat indices into the level's H×W map, valid only where the
/// matching `in_bounds` flag is set. `weights` are the bilinear corner weights
/// in order (top-left, top-right, bottom-left, bottom-right).
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub offsets: [usize; 4],
    pub weights: [f32; 4],
    pub in_bounds: [bool; 4],
    /// Fractional parts (λw, λh) of the image-space coordinate.
    pub frac: (f32, f32),
}

impl BilinearTaps {
    /// Resolves a normalized location against an H×W map.
    pub fn at(height: usize, width: usize, x: f32, y: f32) -> BilinearTaps {
        let w_im = x * width as f32 - 0.5;
        let h_im = y * height as f32 - 0.5;
        let w0 = w_im.floor();
        let h0 = h_im.floor();
        let lw = w_im - w0;
        let lh = h_im - h0;
        let w0 = w0 as i64;
        let h0 = h0 as i64;
        let (h_n, w_n) = (height as i64, width as i64);

        let mut offsets = [0usize; 4];
        let mut in_bounds = [false; 4];
        for (k, (dh, dw)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let r = h0 + dh;
            let c = w0 + dw;
            if r >= 0 && r < h_n && c >= 0 && c < w_n {
                offsets[k] = (r * w_n + c) as usize;
                in_bounds[k] = true;
            }
        }
        let weights = [
            (1.0 - lh) * (1.0 - lw),
            (1.0 - lh) * lw,
            lh * (1.0 - lw),
            lh * lw,
        ];
        BilinearTaps {
            offsets,
            weights,
            in_bounds,
            frac: (lw, lh),
        }
    }

    /// Interpolated value over a flat H×W map; out-of-bounds corners read zero.
    pub fn sample(&self, map: &[f32]) -> f32 {
        let mut acc = 0.0f32;
        for k in 0..4 {
            if self.in_bounds[k] {
                acc += self.weights[k] * map[self.offsets[k]];
            }
        }
        acc
    }
}

/// Bilinear interpolation of a single-channel H×W map at a normalized
/// location, zero padding outside the map.
pub fn bilinear_sample(
    map: &[f32],
    height: usize,
    width: usize,
    x: f32,
    y: f32,
) -> Result<f32, MsdaError> {
    if map.len() != height * width {
        return Err(MsdaError::LevelSize {
            expected: height * width,
            actual: map.len(),
        });
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(MsdaError::NonFiniteLocation);
    }
    Ok(BilinearTaps::at(height, width, x, y).sample(map))
}

/// Validates that pyramid, sampling tensors and config agree on every axis.
pub fn check_shapes(
    p: &FeaturePyramid,
    s: &SamplingTensors,
    cfg: &MsdaConfig,
) -> Result<(), MsdaError> {
    fn axis(
        tensor: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    ) -> Result<(), MsdaError> {
        if expected == actual {
            Ok(())
        } else {
            Err(MsdaError::Shape {
                tensor,
                axis,
                expected,
                actual,
            })
        }
    }
    axis("pyramid", "batch", cfg.batch, p.batch())?;
    axis("pyramid", "heads", cfg.heads, p.heads())?;
    axis("pyramid", "channels", cfg.channels, p.channels())?;
    axis("pyramid", "pixels", cfg.total_pixels(), p.total_pixels())?;
    if p.levels() != cfg.levels.as_slice() {
        return Err(MsdaError::Shape {
            tensor: "pyramid",
            axis: "levels",
            expected: cfg.levels.len(),
            actual: p.levels().len(),
        });
    }
    axis("locations", "batch", cfg.batch, s.batch())?;
    axis("locations", "queries", cfg.queries, s.queries())?;
    axis("locations", "heads", cfg.heads, s.heads())?;
    axis("locations", "levels", cfg.levels.len(), s.levels())?;
    axis("locations", "points", cfg.points, s.points())?;
    Ok(())
}

fn check_grad_output(cfg: &MsdaConfig, grad_output: &Tensor) -> Result<(), MsdaError> {
    let d = grad_output.dims();
    let ok = d.len() == 3 && d[0] == cfg.batch && d[1] == cfg.queries && d[2] == cfg.embed_dim();
    if !ok {
        return Err(MsdaError::Shape {
            tensor: "grad_output",
            axis: "embed",
            expected: cfg.embed_dim(),
            actual: d.last().copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// Reference forward pass over a channel-last pyramid.
///
/// `output[b, q, h·C + c] = Σ_{l,p} weight[b,q,h,l,p] · sample(level l, head h,
/// channel c, location[b,q,h,l,p])`. In train mode the per-point samples are
/// also returned for the backward pass.
pub fn msda_forward_ref(
    p: &FeaturePyramid,
    s: &SamplingTensors,
    cfg: &MsdaConfig,
) -> Result<(Tensor, Option<SavedForward>), MsdaError> {
    if p.layout() != Layout::ChannelLast {
        return Err(MsdaError::WrongLayout(p.layout()));
    }
    check_shapes(p, s, cfg)?;

    let value = p.storage().to_f32_vec();
    let locs = s.locations.to_f32_vec();
    let weights = s.weights.to_f32_vec();

    let (b_n, q_n, h_n, c_n) = (cfg.batch, cfg.queries, cfg.heads, cfg.channels);
    let l_n = cfg.levels.len();
    let p_n = cfg.points;
    let pixels = cfg.total_pixels();
    let embed = cfg.embed_dim();

    let mut out = vec![0.0f32; b_n * q_n * embed];
    let mut saved = if cfg.mode == Mode::Train {
        Some(vec![0.0f32; b_n * q_n * h_n * l_n * p_n * c_n])
    } else {
        None
    };

    for b in 0..b_n {
        for q in 0..q_n {
            for h in 0..h_n {
                for (li, level) in cfg.levels.iter().enumerate() {
                    for pt in 0..p_n {
                        let sp = (((b * q_n + q) * h_n + h) * l_n + li) * p_n + pt;
                        let x = locs[sp * 2];
                        let y = locs[sp * 2 + 1];
                        let aw = weights[sp];
                        let taps = BilinearTaps::at(level.height, level.width, x, y);
                        for c in 0..c_n {
                            let mut sample = 0.0f32;
                            for k in 0..4 {
                                if taps.in_bounds[k] {
                                    let pix = level.offset + taps.offsets[k];
                                    let v = value[((b * pixels + pix) * h_n + h) * c_n + c];
                                    sample += taps.weights[k] * v;
                                }
                            }
                            out[(b * q_n + q) * embed + h * c_n + c] += aw * sample;
                            if let Some(ref mut sv) = saved {
                                sv[sp * c_n + c] = sample;
                            }
                        }
                    }
                }
            }
        }
    }

    let output = Tensor::from_f32(vec![b_n, q_n, embed], out).expect("output shape");
    let saved = saved.map(|sv| SavedForward {
        sampled: Tensor::from_f32_values(
            vec![b_n, q_n, h_n, l_n, p_n, c_n],
            cfg.saved_dtype,
            &sv,
        )
        .expect("saved shape"),
    });
    Ok((output, saved))
}

/// Reference backward pass.
///
/// For each sampling point with attention weight `a`, fractional parts
/// `(λw, λh)`, corner values `p̂` (zero when out of bounds) and upstream
/// gradient `g_c`:
///
/// - `grad_weights = Σ_c g_c · sample_c`
/// - `grad_loc_x = a · Σ_c g_c · [(1−λh)(p̂01−p̂00) + λh(p̂11−p̂10)] · W`
/// - `grad_loc_y = a · Σ_c g_c · [(1−λw)(p̂10−p̂00) + λw(p̂11−p̂01)] · H`
/// - `grad_value[corner] += a · corner_weight · g_c` for in-bounds corners
///
/// Out-of-bounds corners contribute nothing anywhere: their pixels do not
/// exist, so they are invisible to both the value and the location gradient.
pub fn msda_backward_ref(
    p: &FeaturePyramid,
    s: &SamplingTensors,
    cfg: &MsdaConfig,
    grad_output: &Tensor,
) -> Result<MsdaGrads, MsdaError> {
    if p.layout() != Layout::ChannelLast {
        return Err(MsdaError::WrongLayout(p.layout()));
    }
    check_shapes(p, s, cfg)?;
    check_grad_output(cfg, grad_output)?;

    let value = p.storage().to_f32_vec();
    let locs = s.locations.to_f32_vec();
    let weights = s.weights.to_f32_vec();
    let gout = grad_output.to_f32_vec();

    let (b_n, q_n, h_n, c_n) = (cfg.batch, cfg.queries, cfg.heads, cfg.channels);
    let l_n = cfg.levels.len();
    let p_n = cfg.points;
    let pixels = cfg.total_pixels();
    let embed = cfg.embed_dim();

    let mut grad_value = vec![0.0f32; b_n * pixels * h_n * c_n];
    let mut grad_locations = vec![0.0f32; b_n * q_n * h_n * l_n * p_n * 2];
    let mut grad_weights = vec![0.0f32; b_n * q_n * h_n * l_n * p_n];

    for b in 0..b_n {
        for q in 0..q_n {
            for h in 0..h_n {
                for (li, level) in cfg.levels.iter().enumerate() {
                    for pt in 0..p_n {
                        let sp = (((b * q_n + q) * h_n + h) * l_n + li) * p_n + pt;
                        let x = locs[sp * 2];
                        let y = locs[sp * 2 + 1];
                        let aw = weights[sp];
                        let taps = BilinearTaps::at(level.height, level.width, x, y);
                        let (lw, lh) = taps.frac;

                        let mut gw = 0.0f32;
                        let mut gx = 0.0f32;
                        let mut gy = 0.0f32;
                        for c in 0..c_n {
                            let g = gout[(b * q_n + q) * embed + h * c_n + c];
                            // Corner values with zero padding.
                            let mut pv = [0.0f32; 4];
                            for k in 0..4 {
                                if taps.in_bounds[k] {
                                    let pix = level.offset + taps.offsets[k];
                                    pv[k] = value[((b * pixels + pix) * h_n + h) * c_n + c];
                                }
                            }
                            let sample = taps.weights[0] * pv[0]
                                + taps.weights[1] * pv[1]
                                + taps.weights[2] * pv[2]
                                + taps.weights[3] * pv[3];
                            gw += g * sample;
                            gx += g * ((1.0 - lh) * (pv[1] - pv[0]) + lh * (pv[3] - pv[2]));
                            gy += g * ((1.0 - lw) * (pv[2] - pv[0]) + lw * (pv[3] - pv[1]));
                            for k in 0..4 {
                                if taps.in_bounds[k] {
                                    let pix = level.offset + taps.offsets[k];
                                    grad_value[((b * pixels + pix) * h_n + h) * c_n + c] +=
                                        aw * taps.weights[k] * g;
                                }
                            }
                        }
                        grad_weights[sp] = gw;
                        grad_locations[sp * 2] = aw * gx * level.width as f32;
                        grad_locations[sp * 2 + 1] = aw * gy * level.height as f32;
                    }
                }
            }
        }
    }

    Ok(MsdaGrads {
        grad_value: Tensor::from_f32(vec![b_n, pixels, h_n, c_n], grad_value).expect("shape"),
        grad_locations: Tensor::from_f32(vec![b_n, q_n, h_n, l_n, p_n, 2], grad_locations)
            .expect("shape"),
        grad_weights: Tensor::from_f32(vec![b_n, q_n, h_n, l_n, p_n], grad_weights)
            .expect("shape"),
    })
}
