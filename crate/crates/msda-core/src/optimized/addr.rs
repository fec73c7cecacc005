//! Corner address generation: turns one sampling location into clamped flat
//! indices and effective corner weights, separated from the gather/scatter
//! passes so the hot loops stay branch-free.
//!
//! Out-of-bounds corners get weight exactly 0 and a clamped (valid) index, so
//! a gather may always read its four slots; the weight kills the value. The
//! fused pair path keeps pair bases inside each row: at the left edge
//! (w0 = −1) the surviving right corner's weight moves to the first pair slot,
//! and at the right edge the padded column supplies an exact zero.

use crate::pyramid::LevelSpec;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Corners {
    pub w0: i64,
    pub lw: f32,
    pub lh: f32,
    /// Rows of the 2×2 neighborhood, clamped into the map.
    pub trow: usize,
    pub brow: usize,
    /// Validity of top/bottom row and left/right column.
    pub vt: bool,
    pub vb: bool,
    pub vl: bool,
    pub vr: bool,
    width: usize,
}

pub(crate) fn corners(level: &LevelSpec, x: f32, y: f32) -> Corners {
    let w_im = x * level.width as f32 - 0.5;
    let h_im = y * level.height as f32 - 0.5;
    let w0f = w_im.floor();
    let h0f = h_im.floor();
    let lw = w_im - w0f;
    let lh = h_im - h0f;
    let (h_n, w_n) = (level.height as i64, level.width as i64);
    // `as` saturates for huge floats; clamping to just outside the map keeps
    // the +1 arithmetic overflow-free without changing any validity test.
    let w0 = (w0f as i64).clamp(-2, w_n);
    let h0 = (h0f as i64).clamp(-2, h_n);
    Corners {
        w0,
        lw,
        lh,
        trow: h0.clamp(0, h_n - 1) as usize,
        brow: (h0 + 1).clamp(0, h_n - 1) as usize,
        vt: h0 >= 0 && h0 < h_n,
        vb: h0 + 1 >= 0 && h0 + 1 < h_n,
        vl: w0 >= 0 && w0 < w_n,
        vr: w0 + 1 >= 0 && w0 + 1 < w_n,
        width: level.width,
    }
}

impl Corners {
    /// Bilinear corner weights zeroed where the corner is out of bounds,
    /// in order (top-left, top-right, bottom-left, bottom-right).
    #[inline]
    pub fn effective_weights(&self) -> [f32; 4] {
        let (lw, lh) = (self.lw, self.lh);
        [
            if self.vt && self.vl { (1.0 - lh) * (1.0 - lw) } else { 0.0 },
            if self.vt && self.vr { (1.0 - lh) * lw } else { 0.0 },
            if self.vb && self.vl { lh * (1.0 - lw) } else { 0.0 },
            if self.vb && self.vr { lh * lw } else { 0.0 },
        ]
    }

    /// 1.0 for in-bounds corners, 0.0 otherwise. The location gradient needs
    /// masked corner values even where the bilinear weight is legitimately 0.
    #[inline]
    pub fn masks(&self) -> [f32; 4] {
        [
            if self.vt && self.vl { 1.0 } else { 0.0 },
            if self.vt && self.vr { 1.0 } else { 0.0 },
            if self.vb && self.vl { 1.0 } else { 0.0 },
            if self.vb && self.vr { 1.0 } else { 0.0 },
        ]
    }

    /// Pair bases for the fused two-element read in a padded row of stride
    /// `width + 1`, with `level_offset` in the padded pixel axis.
    #[inline]
    pub fn fused_bases(&self, level_offset: usize) -> (usize, usize) {
        let stride = self.width + 1;
        let bcol = self.w0.clamp(0, self.width as i64 - 1) as usize;
        (
            level_offset + self.trow * stride + bcol,
            level_offset + self.brow * stride + bcol,
        )
    }

    /// Effective weights rearranged for the fused pair slots: at w0 = −1 the
    /// pair base clamps to column 0, which is the right corner, so its weight
    /// moves to the first slot.
    #[inline]
    pub fn fused_weights(&self) -> [f32; 4] {
        let e = self.effective_weights();
        if self.w0 == -1 {
            [e[1], 0.0, e[3], 0.0]
        } else {
            e
        }
    }

    /// Four individually clamped corner indices in an unpadded row of stride
    /// `width`, with `level_offset` in the unpadded pixel axis.
    #[inline]
    pub fn scalar_indices(&self, level_offset: usize) -> [usize; 4] {
        let w = self.width;
        let cl = self.w0.clamp(0, w as i64 - 1) as usize;
        let cr = (self.w0 + 1).clamp(0, w as i64 - 1) as usize;
        [
            level_offset + self.trow * w + cl,
            level_offset + self.trow * w + cr,
            level_offset + self.brow * w + cl,
            level_offset + self.brow * w + cr,
        ]
    }
}
