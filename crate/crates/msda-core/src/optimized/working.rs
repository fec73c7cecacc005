//! Internal f32 pixel-last working copies of the value pyramid.
//!
//! The optimized kernels gather from `(batch, heads, channels, pixels)` so a
//! single `(b, h, c)` map slice stays hot for a whole chunk. F16 storage is
//! widened exactly once here; when the caller already supplies a matching f32
//! pixel-last pyramid the buffer is borrowed instead of copied.

use crate::pyramid::{padded_offsets, FeaturePyramid, Layout, LevelSpec};
use crate::tensor::TensorData;
use std::borrow::Cow;

pub(crate) struct GatherSource<'a> {
    pub data: Cow<'a, [f32]>,
    /// Length of the pixel axis in this layout.
    pub pix_stride: usize,
    /// First-pixel offset of each level in this layout.
    pub level_offsets: Vec<usize>,
}

impl<'a> GatherSource<'a> {
    /// One `(b, h, c)` map stack covering the whole pixel axis.
    #[inline]
    pub fn slice(&self, b: usize, h: usize, c: usize, heads: usize, channels: usize) -> &[f32] {
        let base = ((b * heads + h) * channels + c) * self.pix_stride;
        &self.data[base..base + self.pix_stride]
    }
}

/// Prepares the gather source in the requested paddedness from any input
/// layout.
pub(crate) fn gather_source(p: &FeaturePyramid, padded: bool) -> GatherSource<'_> {
    let levels = p.levels();
    let (pix_stride, level_offsets) = layout_geometry(levels, padded);

    match (p.layout(), p.storage().data()) {
        // Exact layout match on f32 storage: borrow.
        (Layout::PixelLast, TensorData::F32(v)) if !padded => GatherSource {
            data: Cow::Borrowed(v),
            pix_stride,
            level_offsets,
        },
        (Layout::PixelLastPadded, TensorData::F32(v)) if padded => GatherSource {
            data: Cow::Borrowed(v),
            pix_stride,
            level_offsets,
        },
        _ => GatherSource {
            data: Cow::Owned(build_pixel_last_f32(p, padded)),
            pix_stride,
            level_offsets,
        },
    }
}

pub(crate) fn layout_geometry(levels: &[LevelSpec], padded: bool) -> (usize, Vec<usize>) {
    if padded {
        (
            crate::pyramid::total_padded_pixels(levels),
            padded_offsets(levels),
        )
    } else {
        (
            crate::pyramid::total_pixels(levels),
            levels.iter().map(|l| l.offset).collect(),
        )
    }
}

fn build_pixel_last_f32(p: &FeaturePyramid, padded: bool) -> Vec<f32> {
    let levels = p.levels();
    let (b_n, h_n, c_n) = (p.batch(), p.heads(), p.channels());
    let (out_pixels, out_offsets) = layout_geometry(levels, padded);
    let mut out = vec![0.0f32; b_n * h_n * c_n * out_pixels];

    match p.layout() {
        Layout::ChannelLast => {
            let src = p.storage();
            let in_pixels = p.total_pixels();
            for b in 0..b_n {
                for (li, level) in levels.iter().enumerate() {
                    let out_stride = if padded { level.width + 1 } else { level.width };
                    for row in 0..level.height {
                        for col in 0..level.width {
                            let pix_in = level.offset + row * level.width + col;
                            let pix_out = out_offsets[li] + row * out_stride + col;
                            let src_base = (b * in_pixels + pix_in) * h_n * c_n;
                            for h in 0..h_n {
                                for c in 0..c_n {
                                    out[((b * h_n + h) * c_n + c) * out_pixels + pix_out] =
                                        src.get(src_base + h * c_n + c);
                                }
                            }
                        }
                    }
                }
            }
        }
        Layout::PixelLast | Layout::PixelLastPadded => {
            let in_padded = p.layout() == Layout::PixelLastPadded;
            let (in_pixels, in_offsets) = layout_geometry(levels, in_padded);
            let src = p.storage();
            for bhc in 0..b_n * h_n * c_n {
                for (li, level) in levels.iter().enumerate() {
                    let in_stride = if in_padded { level.width + 1 } else { level.width };
                    let out_stride = if padded { level.width + 1 } else { level.width };
                    for row in 0..level.height {
                        for col in 0..level.width {
                            let pix_in = in_offsets[li] + row * in_stride + col;
                            let pix_out = out_offsets[li] + row * out_stride + col;
                            out[bhc * out_pixels + pix_out] = src.get(bhc * in_pixels + pix_in);
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{make_pyramid, to_pixel_last, Fill};
    use crate::tensor::Dtype;

    #[test]
    fn borrows_matching_f32_layouts() {
        let p = make_pyramid(1, 2, 3, &[(2, 4)], Dtype::F32, Fill::RandomSeeded(1)).unwrap();
        let pl = to_pixel_last(&p, true).unwrap();
        let src = gather_source(&pl, true);
        assert!(matches!(src.data, Cow::Borrowed(_)));
        let src = gather_source(&pl, false);
        assert!(matches!(src.data, Cow::Owned(_)));
    }

    #[test]
    fn channel_last_and_pixel_last_inputs_agree() {
        let p = make_pyramid(2, 2, 2, &[(3, 5), (2, 2)], Dtype::F16, Fill::RandomSeeded(9))
            .unwrap();
        let pl = to_pixel_last(&p, false).unwrap();
        for padded in [false, true] {
            let a = gather_source(&p, padded);
            let b = gather_source(&pl, padded);
            assert_eq!(a.data.as_ref(), b.data.as_ref());
            // Pad columns are exactly zero.
            if padded {
                for (li, level) in p.levels().iter().enumerate() {
                    for bhc in 0..8 {
                        for row in 0..level.height {
                            let pad = bhc * a.pix_stride
                                + a.level_offsets[li]
                                + row * (level.width + 1)
                                + level.width;
                            assert_eq!(a.data[pad], 0.0);
                        }
                    }
                }
            }
        }
    }
}
