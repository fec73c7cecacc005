//! Feature pyramids: per-level geometry, storage layouts, and layout transforms.
//!
//! A pyramid stacks L feature maps (levels) along one flattened pixel axis.
//! Three storage layouts exist:
//!
//! - `ChannelLast`: `(batch, total_pixels, heads, channels)` — the layout the
//!   reference kernel consumes.
//! - `PixelLast`: `(batch, heads, channels, total_pixels)` — pixel axis last,
//!   so one `(b, h, c)` slice is a contiguous stack of H×W maps.
//! - `PixelLastPadded`: as `PixelLast` but every map row is stored at stride
//!   `width + 1` with the extra column zero-filled, so a two-element read at
//!   column `width - 1` stays inside the row and picks up an exact zero.

use crate::tensor::{checked_len, Dtype, Tensor, TensorData, TensorError};
use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Geometry of one pyramid level within the flattened pixel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub height: usize,
    pub width: usize,
    /// Index of this level's first pixel in the flattened (unpadded) pixel axis.
    pub offset: usize,
}

impl LevelSpec {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Pixels occupied in the padded layout (one extra column per row).
    pub fn padded_pixels(&self) -> usize {
        self.height * (self.width + 1)
    }
}

/// Builds cumulative-offset level specs from (height, width) pairs.
pub fn build_levels(shapes: &[(usize, usize)]) -> Result<Vec<LevelSpec>, PyramidError> {
    if shapes.is_empty() {
        return Err(PyramidError::NoLevels);
    }
    let mut levels = Vec::with_capacity(shapes.len());
    let mut offset = 0usize;
    for (i, &(h, w)) in shapes.iter().enumerate() {
        if h == 0 || w == 0 {
            return Err(PyramidError::ZeroLevelExtent { level: i });
        }
        levels.push(LevelSpec {
            height: h,
            width: w,
            offset,
        });
        offset = offset
            .checked_add(h.checked_mul(w).ok_or(PyramidError::SizeOverflow)?)
            .ok_or(PyramidError::SizeOverflow)?;
    }
    Ok(levels)
}

/// Offset of each level's first pixel in the padded pixel axis.
pub fn padded_offsets(levels: &[LevelSpec]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(levels.len());
    let mut acc = 0usize;
    for l in levels {
        offs.push(acc);
        acc += l.padded_pixels();
    }
    offs
}

pub fn total_pixels(levels: &[LevelSpec]) -> usize {
    levels.iter().map(LevelSpec::pixels).sum()
}

pub fn total_padded_pixels(levels: &[LevelSpec]) -> usize {
    levels.iter().map(LevelSpec::padded_pixels).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    ChannelLast,
    PixelLast,
    PixelLastPadded,
}

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("level {level} has a zero extent")]
    ZeroLevelExtent { level: usize },
    #[error("pyramid extents overflow the addressable element count")]
    SizeOverflow,
    #[error("batch, heads and channels must all be >= 1")]
    ZeroCount,
    #[error("expected layout {expected:?}, got {actual:?}")]
    WrongLayout { expected: Layout, actual: Layout },
    #[error("storage holds {actual} elements, layout requires {expected}")]
    StorageMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Content generator for [`make_pyramid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    Zeros,
    /// Element i of the channel-last buffer holds the value `i`.
    Sequential,
    /// Uniform values in [-1, 1) from a ChaCha8 stream seeded with the given seed.
    RandomSeeded(u64),
}

/// Multi-level value tensor plus the geometry needed to index it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<LevelSpec>,
    batch: usize,
    heads: usize,
    channels: usize,
    layout: Layout,
    storage: Tensor,
}

impl FeaturePyramid {
    /// Wraps existing storage, validating the element count against the layout.
    pub fn new(
        levels: Vec<LevelSpec>,
        batch: usize,
        heads: usize,
        channels: usize,
        layout: Layout,
        storage: Tensor,
    ) -> Result<FeaturePyramid, PyramidError> {
        if batch == 0 || heads == 0 || channels == 0 {
            return Err(PyramidError::ZeroCount);
        }
        if levels.is_empty() {
            return Err(PyramidError::NoLevels);
        }
        let pixels = match layout {
            Layout::ChannelLast | Layout::PixelLast => total_pixels(&levels),
            Layout::PixelLastPadded => total_padded_pixels(&levels),
        };
        let expected = batch
            .checked_mul(pixels)
            .and_then(|n| n.checked_mul(heads))
            .and_then(|n| n.checked_mul(channels))
            .ok_or(PyramidError::SizeOverflow)?;
        if storage.len() != expected {
            return Err(PyramidError::StorageMismatch {
                expected,
                actual: storage.len(),
            });
        }
        Ok(FeaturePyramid {
            levels,
            batch,
            heads,
            channels,
            layout,
            storage,
        })
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn storage(&self) -> &Tensor {
        &self.storage
    }

    pub fn dtype(&self) -> Dtype {
        self.storage.dtype()
    }

    pub fn total_pixels(&self) -> usize {
        total_pixels(&self.levels)
    }

    pub fn total_padded_pixels(&self) -> usize {
        total_padded_pixels(&self.levels)
    }

    /// Flat storage index for `(b, pix, h, c)` in the channel-last layout.
    pub fn channel_last_index(&self, b: usize, pix: usize, h: usize, c: usize) -> usize {
        ((b * self.total_pixels() + pix) * self.heads + h) * self.channels + c
    }
}

/// Builds a channel-last pyramid with deterministic content.
pub fn make_pyramid(
    batch: usize,
    heads: usize,
    channels: usize,
    level_shapes: &[(usize, usize)],
    dtype: Dtype,
    fill: Fill,
) -> Result<FeaturePyramid, PyramidError> {
    if batch == 0 || heads == 0 || channels == 0 {
        return Err(PyramidError::ZeroCount);
    }
    let levels = build_levels(level_shapes)?;
    let pixels = total_pixels(&levels);
    let dims = vec![batch, pixels, heads, channels];
    let n = checked_len(&dims).map_err(|_| PyramidError::SizeOverflow)?;

    let storage = match fill {
        Fill::Zeros => Tensor::zeros(dims, dtype)?,
        Fill::Sequential => {
            let values: Vec<f32> = (0..n).map(|i| i as f32).collect();
            Tensor::from_f32_values(dims, dtype, &values)?
        }
        Fill::RandomSeeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Tensor::from_f32_values(dims, dtype, &values)?
        }
    };
    FeaturePyramid::new(levels, batch, heads, channels, Layout::ChannelLast, storage)
}

/// Rearranges a channel-last pyramid so the pixel axis comes last.
///
/// With `padded` set, each map row gains one trailing zero column so a
/// contiguous `(x0, x1)` pair read at the right edge lands on an exact zero
/// instead of the next row's first pixel.
pub fn to_pixel_last(p: &FeaturePyramid, padded: bool) -> Result<FeaturePyramid, PyramidError> {
    if p.layout != Layout::ChannelLast {
        return Err(PyramidError::WrongLayout {
            expected: Layout::ChannelLast,
            actual: p.layout,
        });
    }
    let (layout, out_pixels) = if padded {
        (Layout::PixelLastPadded, p.total_padded_pixels())
    } else {
        (Layout::PixelLast, p.total_pixels())
    };
    let storage = match p.storage.data() {
        TensorData::F32(src) => TensorData::F32(scatter_pixel_last(p, src, out_pixels, padded, 0.0)),
        TensorData::F16(src) => {
            TensorData::F16(scatter_pixel_last(p, src, out_pixels, padded, f16::ZERO))
        }
    };
    let dims = vec![p.batch, p.heads, p.channels, out_pixels];
    FeaturePyramid::new(
        p.levels.clone(),
        p.batch,
        p.heads,
        p.channels,
        layout,
        Tensor::new(dims, storage)?,
    )
}

/// Inverse of [`to_pixel_last`] for both padded and unpadded inputs.
pub fn to_channel_last(p: &FeaturePyramid) -> Result<FeaturePyramid, PyramidError> {
    if p.layout == Layout::ChannelLast {
        return Err(PyramidError::WrongLayout {
            expected: Layout::PixelLast,
            actual: p.layout,
        });
    }
    let padded = p.layout == Layout::PixelLastPadded;
    let storage = match p.storage.data() {
        TensorData::F32(src) => TensorData::F32(gather_channel_last(p, src, padded)),
        TensorData::F16(src) => TensorData::F16(gather_channel_last(p, src, padded)),
    };
    let pixels = p.total_pixels();
    let dims = vec![p.batch, pixels, p.heads, p.channels];
    FeaturePyramid::new(
        p.levels.clone(),
        p.batch,
        p.heads,
        p.channels,
        Layout::ChannelLast,
        Tensor::new(dims, storage)?,
    )
}

fn scatter_pixel_last<T: Copy>(
    p: &FeaturePyramid,
    src: &[T],
    out_pixels: usize,
    padded: bool,
    zero: T,
) -> Vec<T> {
    let (b_n, h_n, c_n) = (p.batch, p.heads, p.channels);
    let in_pixels = p.total_pixels();
    let pad_offs = padded_offsets(&p.levels);
    let mut out = vec![zero; b_n * h_n * c_n * out_pixels];
    for b in 0..b_n {
        for (li, level) in p.levels.iter().enumerate() {
            let row_stride = if padded { level.width + 1 } else { level.width };
            let out_level = if padded { pad_offs[li] } else { level.offset };
            for row in 0..level.height {
                for col in 0..level.width {
                    let pix_in = level.offset + row * level.width + col;
                    let pix_out = out_level + row * row_stride + col;
                    let src_base = (b * in_pixels + pix_in) * h_n * c_n;
                    for h in 0..h_n {
                        for c in 0..c_n {
                            let dst = ((b * h_n + h) * c_n + c) * out_pixels + pix_out;
                            out[dst] = src[src_base + h * c_n + c];
                        }
                    }
                }
            }
        }
    }
    out
}

fn gather_channel_last<T: Copy + Default>(p: &FeaturePyramid, src: &[T], padded: bool) -> Vec<T> {
    let (b_n, h_n, c_n) = (p.batch, p.heads, p.channels);
    let out_pixels = total_pixels(&p.levels);
    let in_pixels = src.len() / (b_n * h_n * c_n);
    let pad_offs = padded_offsets(&p.levels);
    let mut out = vec![T::default(); b_n * out_pixels * h_n * c_n];
    for b in 0..b_n {
        for (li, level) in p.levels.iter().enumerate() {
            let row_stride = if padded { level.width + 1 } else { level.width };
            let in_level = if padded { pad_offs[li] } else { level.offset };
            for row in 0..level.height {
                for col in 0..level.width {
                    let pix_in = in_level + row * row_stride + col;
                    let pix_out = level.offset + row * level.width + col;
                    let dst_base = (b * out_pixels + pix_out) * h_n * c_n;
                    for h in 0..h_n {
                        for c in 0..c_n {
                            let s = ((b * h_n + h) * c_n + c) * in_pixels + pix_in;
                            out[dst_base + h * c_n + c] = src[s];
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("locations must have shape (batch, queries, heads, levels, points, 2), got {0:?}")]
    LocationShape(Vec<usize>),
    #[error("weights shape {weights:?} does not match locations shape {locations:?}")]
    ShapeMismatch {
        locations: Vec<usize>,
        weights: Vec<usize>,
    },
    #[error("non-finite value at flat index {index} of {tensor}")]
    NonFinite { tensor: &'static str, index: usize },
}

/// Sampling locations and attention weights for every (batch, query, head,
/// level, point).
///
/// Location coordinates are normalized to [0, 1]² and ordered `(x, y)` with x
/// along the width axis — mixing this up silently breaks correctness, so it is
/// validated nowhere and documented everywhere. Out-of-range locations are
/// legal and resolve through zero padding. Weight normalization is a caller
/// convention, not enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingTensors {
    pub locations: Tensor,
    pub weights: Tensor,
}

impl SamplingTensors {
    /// Validates shapes and finiteness.
    pub fn new(locations: Tensor, weights: Tensor) -> Result<SamplingTensors, SamplingError> {
        let ld = locations.dims().to_vec();
        if ld.len() != 6 || ld[5] != 2 {
            return Err(SamplingError::LocationShape(ld));
        }
        let wd = weights.dims().to_vec();
        if wd != ld[..5] {
            return Err(SamplingError::ShapeMismatch {
                locations: ld,
                weights: wd,
            });
        }
        for (i, v) in locations.to_f32_vec().iter().enumerate() {
            if !v.is_finite() {
                return Err(SamplingError::NonFinite {
                    tensor: "locations",
                    index: i,
                });
            }
        }
        for (i, v) in weights.to_f32_vec().iter().enumerate() {
            if !v.is_finite() {
                return Err(SamplingError::NonFinite {
                    tensor: "weights",
                    index: i,
                });
            }
        }
        Ok(SamplingTensors { locations, weights })
    }

    pub fn batch(&self) -> usize {
        self.locations.dims()[0]
    }

    pub fn queries(&self) -> usize {
        self.locations.dims()[1]
    }

    pub fn heads(&self) -> usize {
        self.locations.dims()[2]
    }

    pub fn levels(&self) -> usize {
        self.locations.dims()[3]
    }

    pub fn points(&self) -> usize {
        self.locations.dims()[4]
    }
}
