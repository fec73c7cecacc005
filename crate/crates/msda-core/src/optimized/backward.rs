//! Tiled, data-parallel MSDA backward.
//!
//! The location and weight gradients are disjoint-write like the forward
//! output. The value gradient is the hotspot: every sampling point
//! scatter-adds into up to four data-dependent pixels. It accumulates in an
//! internal `(batch, heads, pixels, channels)` buffer so the merged (x0, x1)
//! write-out is one contiguous `2·channels`-float read-modify-write, then
//! transposes to the channel-last result shape.
//!
//! Two scatter schedules exist. Atomic: all workers write concurrently with
//! compare-exchange adds (nondeterministic summation order). Staggered: the
//! pixel axis is cut into `workers` row-aligned shards; workers buffer
//! contributions per shard, and execution proceeds in rotating rounds where
//! round `r` gives worker `i` exclusive ownership of shard `(i + r) % workers`
//! — bit-deterministic for a fixed worker count.
//!
//! A provided [`SavedForward`] replaces the recomputation of per-point
//! samples for the weights gradient. The corner reads for the location and
//! value gradients run either way: corner values cannot be recovered from the
//! stored samples.

use super::addr::corners;
use super::working::{gather_source, layout_geometry, GatherSource};
use super::{plan, row_to_shard, split_ranges, KernelPlan, OptError, OptFlags, ScatterStrategy};
use crate::pyramid::{FeaturePyramid, SamplingTensors};
use crate::reference::{check_shapes, MsdaConfig, MsdaError, MsdaGrads, SavedForward};
use crate::tensor::Tensor;
use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Barrier;

/// (batch, query) rows per staggered block; bounds the contribution-buffer
/// footprint between drain rounds.
const BLOCK_BQ: usize = 64;

/// Optimized backward pass; all three gradients match
/// [`msda_backward_ref`](crate::reference::msda_backward_ref) within 1e-5
/// relative.
pub fn msda_backward_opt(
    p: &FeaturePyramid,
    s: &SamplingTensors,
    cfg: &MsdaConfig,
    flags: &OptFlags,
    grad_output: &Tensor,
    saved: Option<&SavedForward>,
) -> Result<MsdaGrads, OptError> {
    run_backward(p, s, cfg, flags, grad_output, saved).map(|(grads, _)| grads)
}

/// Internal entry point that also surfaces the scatter buffer, so tests can
/// check that pad columns stay zero.
pub(crate) fn run_backward(
    p: &FeaturePyramid,
    s: &SamplingTensors,
    cfg: &MsdaConfig,
    flags: &OptFlags,
    grad_output: &Tensor,
    saved: Option<&SavedForward>,
) -> Result<(MsdaGrads, ScatterBuffer), OptError> {
    check_shapes(p, s, cfg)?;
    let god = grad_output.dims();
    if god != [cfg.batch, cfg.queries, cfg.embed_dim()] {
        return Err(MsdaError::Shape {
            tensor: "grad_output",
            axis: "embed",
            expected: cfg.embed_dim(),
            actual: god.last().copied().unwrap_or(0),
        }
        .into());
    }
    let saved_vals: Option<Vec<f32>> = match saved {
        Some(sv) => {
            let expected = [
                cfg.batch,
                cfg.queries,
                cfg.heads,
                cfg.levels.len(),
                cfg.points,
                cfg.channels,
            ];
            if sv.sampled.dims() != expected {
                return Err(MsdaError::SavedMismatch {
                    expected: expected.iter().product(),
                    actual: sv.sampled.len(),
                }
                .into());
            }
            Some(sv.sampled.to_f32_vec())
        }
        None => None,
    };

    let kplan = plan(cfg, flags)?;
    let src = gather_source(p, false);
    let locs = s.locations.to_f32_vec();
    let aws = s.weights.to_f32_vec();
    let gout = grad_output.to_f32_vec();

    let (b_n, q_n, h_n, c_n) = (cfg.batch, cfg.queries, cfg.heads, cfg.channels);
    let l_n = cfg.levels.len();
    let p_n = cfg.points;
    let pixels = cfg.total_pixels();
    let (scatter_pixels, scatter_offsets) = layout_geometry(&cfg.levels, kplan.scatter_padded);

    let mut grad_buf = vec![0.0f32; b_n * h_n * scatter_pixels * c_n];
    let mut grad_locations = vec![0.0f32; b_n * q_n * h_n * l_n * p_n * 2];
    let mut grad_weights = vec![0.0f32; b_n * q_n * h_n * l_n * p_n];

    let ctx = WorkerCtx {
        src: &src,
        locs: &locs,
        aws: &aws,
        gout: &gout,
        saved: saved_vals.as_deref(),
        cfg,
        kplan: &kplan,
        scatter_offsets: &scatter_offsets,
        scatter_pixels,
        scatter_fused: flags.scatter_fusion,
    };

    let active: Vec<Range<usize>> = kplan
        .worker_ranges
        .iter()
        .filter(|r| !r.is_empty())
        .cloned()
        .collect();
    let sp_row = h_n * l_n * p_n;

    match (&kplan.scatter, active.len()) {
        (_, 0) => {}
        (_, 1) => {
            // One worker owns everything: plain adds, no synchronization.
            let r = active[0].clone();
            let mut sink = DirectSink { buf: &mut grad_buf };
            let mut bufs = BwdBufs::new(max_chunk(&kplan));
            compute_span(
                &ctx,
                r.clone(),
                &mut grad_locations[r.start * sp_row * 2..r.end * sp_row * 2],
                &mut grad_weights[r.start * sp_row..r.end * sp_row],
                r.start,
                &mut bufs,
                &mut sink,
                None,
            );
        }
        (ScatterStrategy::Atomic, _) => {
            let atomics = atomic_view(&mut grad_buf);
            scoped_workers(
                &active,
                &mut grad_locations,
                &mut grad_weights,
                sp_row,
                |_, r, gl, gw| {
                    let mut sink = AtomicSink { buf: atomics };
                    let mut bufs = BwdBufs::new(max_chunk(&kplan));
                    compute_span(&ctx, r.clone(), gl, gw, r.start, &mut bufs, &mut sink, None);
                },
            );
        }
        (ScatterStrategy::Staggered { shards }, _) => {
            let row_shard = row_to_shard(&cfg.levels, kplan.scatter_padded, shards);
            let level_row_start = level_row_starts(cfg);
            let shared = SharedGrad {
                ptr: grad_buf.as_mut_ptr(),
                len: grad_buf.len(),
            };
            let barrier = Barrier::new(active.len());
            let global_blocks = active
                .iter()
                .map(|r| r.len().div_ceil(BLOCK_BQ))
                .max()
                .unwrap_or(0);
            let rec_width = if flags.scatter_fusion { 2 * c_n } else { c_n };

            scoped_workers(
                &active,
                &mut grad_locations,
                &mut grad_weights,
                sp_row,
                |worker_id, r, gl, gw| {
                    staggered_worker(
                        &ctx,
                        r.clone(),
                        gl,
                        gw,
                        &shared,
                        &barrier,
                        &StaggerParams {
                            worker_id,
                            n_shards: shards.len(),
                            global_blocks,
                            rec_width,
                            row_shard: &row_shard,
                            level_row_start: &level_row_start,
                        },
                    );
                },
            );
        }
    }

    let grad_value = transpose_to_channel_last(
        &grad_buf,
        cfg,
        scatter_pixels,
        &scatter_offsets,
        kplan.scatter_padded,
        kplan.worker_ranges.len(),
    );

    let grads = MsdaGrads {
        grad_value: Tensor::from_f32(vec![b_n, pixels, h_n, c_n], grad_value).expect("shape"),
        grad_locations: Tensor::from_f32(vec![b_n, q_n, h_n, l_n, p_n, 2], grad_locations)
            .expect("shape"),
        grad_weights: Tensor::from_f32(vec![b_n, q_n, h_n, l_n, p_n], grad_weights)
            .expect("shape"),
    };
    Ok((
        grads,
        ScatterBuffer {
            data: grad_buf,
            padded: kplan.scatter_padded,
            pixels: scatter_pixels,
        },
    ))
}

/// The internal (batch, heads, pixels, channels) accumulation buffer. Only
/// tests inspect it; the public API returns the transposed gradient.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct ScatterBuffer {
    pub data: Vec<f32>,
    pub padded: bool,
    pub pixels: usize,
}

fn max_chunk(kplan: &KernelPlan) -> usize {
    kplan.chunk_len.iter().copied().max().unwrap_or(8)
}

/// Spawns one scoped thread per active range, handing each its disjoint
/// grad-location/grad-weight row slices and its worker index.
fn scoped_workers<F>(
    active: &[Range<usize>],
    grad_locations: &mut [f32],
    grad_weights: &mut [f32],
    sp_row: usize,
    work: F,
) where
    F: Fn(usize, &Range<usize>, &mut [f32], &mut [f32]) + Sync,
{
    let mut gl_rest: &mut [f32] = grad_locations;
    let mut gw_rest: &mut [f32] = grad_weights;
    std::thread::scope(|scope| {
        for (i, r) in active.iter().enumerate() {
            let (gl, tail) = gl_rest.split_at_mut(r.len() * sp_row * 2);
            gl_rest = tail;
            let (gw, tail) = gw_rest.split_at_mut(r.len() * sp_row);
            gw_rest = tail;
            let work = &work;
            scope.spawn(move || work(i, r, gl, gw));
        }
    });
}

fn level_row_starts(cfg: &MsdaConfig) -> Vec<usize> {
    let mut starts = Vec::with_capacity(cfg.levels.len());
    let mut acc = 0usize;
    for l in &cfg.levels {
        starts.push(acc);
        acc += l.height;
    }
    starts
}

struct WorkerCtx<'a> {
    src: &'a GatherSource<'a>,
    locs: &'a [f32],
    aws: &'a [f32],
    gout: &'a [f32],
    saved: Option<&'a [f32]>,
    cfg: &'a MsdaConfig,
    kplan: &'a KernelPlan,
    /// Level offsets in the scatter buffer's pixel axis.
    scatter_offsets: &'a [usize],
    scatter_pixels: usize,
    scatter_fused: bool,
}

/// Destination for grad-value contributions in the direct and atomic modes.
trait ScatterSink {
    /// Fused pair: elements `base + c` and `base + channels + c` are the same
    /// channel of two horizontally adjacent pixels.
    fn pair_add(&mut self, base: usize, c: usize, channels: usize, left: f32, right: f32);
    /// One corner, one channel.
    fn corner_add(&mut self, base: usize, c: usize, v: f32);
}

struct DirectSink<'a> {
    buf: &'a mut [f32],
}

impl ScatterSink for DirectSink<'_> {
    #[inline]
    fn pair_add(&mut self, base: usize, c: usize, channels: usize, left: f32, right: f32) {
        self.buf[base + c] += left;
        self.buf[base + channels + c] += right;
    }
    #[inline]
    fn corner_add(&mut self, base: usize, c: usize, v: f32) {
        self.buf[base + c] += v;
    }
}

struct AtomicSink<'a> {
    buf: &'a [AtomicU32],
}

impl ScatterSink for AtomicSink<'_> {
    #[inline]
    fn pair_add(&mut self, base: usize, c: usize, channels: usize, left: f32, right: f32) {
        atomic_add(&self.buf[base + c], left);
        atomic_add(&self.buf[base + channels + c], right);
    }
    #[inline]
    fn corner_add(&mut self, base: usize, c: usize, v: f32) {
        atomic_add(&self.buf[base + c], v);
    }
}

fn atomic_view(buf: &mut [f32]) -> &[AtomicU32] {
    // Same size and alignment as f32; the exclusive borrow rules out
    // concurrent non-atomic access for the view's lifetime.
    unsafe { std::slice::from_raw_parts(buf.as_mut_ptr().cast::<AtomicU32>(), buf.len()) }
}

fn atomic_add(slot: &AtomicU32, v: f32) {
    let mut cur = slot.load(Ordering::Relaxed);
    loop {
        let new = (f32::from_bits(cur) + v).to_bits();
        match slot.compare_exchange_weak(cur, new, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return,
            Err(actual) => cur = actual,
        }
    }
}

/// Per-worker, per-shard contribution buffers for the staggered schedule.
struct Buckets {
    /// Flat (bh·pixels + pix) base per record; the drain multiplies by the
    /// channel count.
    base: Vec<Vec<u32>>,
    vals: Vec<Vec<f32>>,
    rec_width: usize,
}

impl Buckets {
    fn new(n_shards: usize, rec_width: usize) -> Buckets {
        Buckets {
            base: vec![Vec::new(); n_shards],
            vals: vec![Vec::new(); n_shards],
            rec_width,
        }
    }

    /// Allocates a zeroed record, returning (shard, value offset).
    #[inline]
    fn alloc(&mut self, shard: usize, base: u32) -> (u32, u32) {
        self.base[shard].push(base);
        let off = self.vals[shard].len();
        self.vals[shard].resize(off + self.rec_width, 0.0);
        (shard as u32, off as u32)
    }

    fn clear(&mut self) {
        for (b, v) in self.base.iter_mut().zip(&mut self.vals) {
            b.clear();
            v.clear();
        }
    }
}

struct SharedGrad {
    ptr: *mut f32,
    len: usize,
}

// Writes go only through shard ranges that rounds assign to exactly one
// worker at a time, with barriers ordering the rounds.
unsafe impl Sync for SharedGrad {}

struct StaggerParams<'a> {
    worker_id: usize,
    n_shards: usize,
    global_blocks: usize,
    rec_width: usize,
    row_shard: &'a [u32],
    level_row_start: &'a [usize],
}

/// Chunk working buffers for the backward pass.
struct BwdBufs {
    /// Gather corner indices (clamped, unpadded pixel-last).
    gi: [Vec<u32>; 4],
    /// Effective corner weights (zeroed out of bounds).
    ew: [Vec<f32>; 4],
    /// In-bounds masks as 0.0/1.0.
    mask: [Vec<f32>; 4],
    lw: Vec<f32>,
    lh: Vec<f32>,
    aw: Vec<f32>,
    /// Global (b·Q + q) row for grad_output.
    grow: Vec<u32>,
    /// Worker-local sampling-point index for grad_weights/grad_locations.
    sp_local: Vec<u32>,
    /// Global saved-sample base (sp · channels) when a SavedForward is used.
    saved_base: Vec<u32>,
    /// Scatter targets: fused pair bases in slots 0..2, else corner bases.
    sc: [Vec<u32>; 4],
    /// Left-edge slot swap marker for the fused scatter pair.
    swap: Vec<bool>,
    gw_acc: Vec<f32>,
    gx_acc: Vec<f32>,
    gy_acc: Vec<f32>,
    /// Staggered record handles (shard, value offset); shard u32::MAX means
    /// no record (out-of-bounds corner).
    rec: [Vec<(u32, u32)>; 4],
}

impl BwdBufs {
    fn new(max_chunk: usize) -> BwdBufs {
        let z32 = || vec![0u32; max_chunk];
        let zf = || vec![0.0f32; max_chunk];
        let zh = || vec![(0u32, 0u32); max_chunk];
        BwdBufs {
            gi: [z32(), z32(), z32(), z32()],
            ew: [zf(), zf(), zf(), zf()],
            mask: [zf(), zf(), zf(), zf()],
            lw: zf(),
            lh: zf(),
            aw: zf(),
            grow: z32(),
            sp_local: z32(),
            saved_base: z32(),
            sc: [z32(), z32(), z32(), z32()],
            swap: vec![false; max_chunk],
            gw_acc: zf(),
            gx_acc: zf(),
            gy_acc: zf(),
            rec: [zh(), zh(), zh(), zh()],
        }
    }
}

/// Chunk walker over one (batch, query) span. Contributions go to `sink`
/// immediately, or into `buckets` when the staggered schedule provides them.
#[allow(clippy::too_many_arguments)]
fn compute_span<S: ScatterSink>(
    ctx: &WorkerCtx<'_>,
    bq_range: Range<usize>,
    gl: &mut [f32],
    gw: &mut [f32],
    local_base: usize,
    bufs: &mut BwdBufs,
    sink: &mut S,
    mut buckets: Option<(&mut Buckets, &StaggerParams<'_>)>,
) {
    let cfg = ctx.cfg;
    let (q_n, h_n, c_n, p_n) = (cfg.queries, cfg.heads, cfg.channels, cfg.points);
    let l_n = cfg.levels.len();
    let embed = h_n * c_n;
    let sp_row = h_n * l_n * p_n;

    let mut seg_start = bq_range.start;
    while seg_start < bq_range.end {
        let b = seg_start / q_n;
        let seg_end = bq_range.end.min((b + 1) * q_n);
        let q0 = seg_start - b * q_n;
        let seg_queries = seg_end - seg_start;

        for h in 0..h_n {
            let bh_base = (b * h_n + h) * ctx.scatter_pixels;
            for (li, level) in cfg.levels.iter().enumerate() {
                let chunk_len = ctx.kplan.chunk_len[li];
                let goff = ctx.src.level_offsets[li];
                let soff = ctx.scatter_offsets[li];
                let entries = seg_queries * p_n;
                let (w_f, h_f) = (level.width as f32, level.height as f32);

                let mut chunk_start = 0usize;
                while chunk_start < entries {
                    let n = chunk_len.min(entries - chunk_start);

                    // Address generation.
                    for e in 0..n {
                        let ge = chunk_start + e;
                        let q = q0 + ge / p_n;
                        let pt = ge % p_n;
                        let bq = b * q_n + q;
                        let sp = ((bq * h_n + h) * l_n + li) * p_n + pt;
                        let cg = corners(level, ctx.locs[2 * sp], ctx.locs[2 * sp + 1]);
                        let si = cg.scalar_indices(goff);
                        let ew = cg.effective_weights();
                        let m = cg.masks();
                        for k in 0..4 {
                            bufs.gi[k][e] = si[k] as u32;
                            bufs.ew[k][e] = ew[k];
                            bufs.mask[k][e] = m[k];
                        }
                        bufs.lw[e] = cg.lw;
                        bufs.lh[e] = cg.lh;
                        bufs.aw[e] = ctx.aws[sp];
                        bufs.grow[e] = bq as u32;
                        bufs.sp_local[e] = (sp - local_base * sp_row) as u32;
                        if ctx.saved.is_some() {
                            bufs.saved_base[e] = (sp * c_n) as u32;
                        }
                        bufs.gw_acc[e] = 0.0;
                        bufs.gx_acc[e] = 0.0;
                        bufs.gy_acc[e] = 0.0;

                        if ctx.scatter_fused {
                            let (st, sb) = cg.fused_bases(soff);
                            bufs.sc[0][e] = (bh_base + st) as u32;
                            bufs.sc[1][e] = (bh_base + sb) as u32;
                            bufs.swap[e] = cg.w0 == -1;
                        } else {
                            let sci = cg.scalar_indices(soff);
                            for k in 0..4 {
                                bufs.sc[k][e] = (bh_base + sci[k]) as u32;
                            }
                        }
                        if let Some((buckets, par)) = buckets.as_mut() {
                            let grow_t = par.level_row_start[li] + cg.trow;
                            let grow_b = par.level_row_start[li] + cg.brow;
                            if ctx.scatter_fused {
                                let shard_t = par.row_shard[grow_t] as usize;
                                let shard_b = par.row_shard[grow_b] as usize;
                                bufs.rec[0][e] = buckets.alloc(shard_t, bufs.sc[0][e]);
                                bufs.rec[1][e] = buckets.alloc(shard_b, bufs.sc[1][e]);
                            } else {
                                let rows = [grow_t, grow_t, grow_b, grow_b];
                                for k in 0..4 {
                                    bufs.rec[k][e] = if bufs.mask[k][e] != 0.0 {
                                        let shard = par.row_shard[rows[k]] as usize;
                                        buckets.alloc(shard, bufs.sc[k][e])
                                    } else {
                                        (u32::MAX, 0)
                                    };
                                }
                            }
                        }
                    }

                    // One pass per channel over the materialized addresses.
                    for c in 0..c_n {
                        let map = ctx.src.slice(b, h, c, h_n, c_n);
                        let oc = h * c_n + c;
                        for e in 0..n {
                            let g = ctx.gout[bufs.grow[e] as usize * embed + oc];
                            let d0 = map[bufs.gi[0][e] as usize];
                            let d1 = map[bufs.gi[1][e] as usize];
                            let d2 = map[bufs.gi[2][e] as usize];
                            let d3 = map[bufs.gi[3][e] as usize];
                            let sampled = match ctx.saved {
                                Some(sv) => sv[bufs.saved_base[e] as usize + c],
                                None => {
                                    bufs.ew[0][e] * d0
                                        + bufs.ew[1][e] * d1
                                        + bufs.ew[2][e] * d2
                                        + bufs.ew[3][e] * d3
                                }
                            };
                            bufs.gw_acc[e] += g * sampled;

                            let v0 = bufs.mask[0][e] * d0;
                            let v1 = bufs.mask[1][e] * d1;
                            let v2 = bufs.mask[2][e] * d2;
                            let v3 = bufs.mask[3][e] * d3;
                            let (lw, lh) = (bufs.lw[e], bufs.lh[e]);
                            bufs.gx_acc[e] += g * ((1.0 - lh) * (v1 - v0) + lh * (v3 - v2));
                            bufs.gy_acc[e] += g * ((1.0 - lw) * (v2 - v0) + lw * (v3 - v1));

                            let amt = bufs.aw[e] * g;
                            match buckets.as_mut() {
                                None => {
                                    if ctx.scatter_fused {
                                        let fw = fused_pair_weights(bufs, e);
                                        sink.pair_add(
                                            bufs.sc[0][e] as usize * c_n,
                                            c,
                                            c_n,
                                            fw[0] * amt,
                                            fw[1] * amt,
                                        );
                                        sink.pair_add(
                                            bufs.sc[1][e] as usize * c_n,
                                            c,
                                            c_n,
                                            fw[2] * amt,
                                            fw[3] * amt,
                                        );
                                    } else {
                                        for k in 0..4 {
                                            if bufs.mask[k][e] != 0.0 {
                                                sink.corner_add(
                                                    bufs.sc[k][e] as usize * c_n,
                                                    c,
                                                    bufs.ew[k][e] * amt,
                                                );
                                            }
                                        }
                                    }
                                }
                                Some((buckets, _)) => {
                                    if ctx.scatter_fused {
                                        let fw = fused_pair_weights(bufs, e);
                                        let (sh, off) = bufs.rec[0][e];
                                        let vals = &mut buckets.vals[sh as usize];
                                        vals[off as usize + c] = fw[0] * amt;
                                        vals[off as usize + c_n + c] = fw[1] * amt;
                                        let (sh, off) = bufs.rec[1][e];
                                        let vals = &mut buckets.vals[sh as usize];
                                        vals[off as usize + c] = fw[2] * amt;
                                        vals[off as usize + c_n + c] = fw[3] * amt;
                                    } else {
                                        for k in 0..4 {
                                            let (sh, off) = bufs.rec[k][e];
                                            if sh != u32::MAX {
                                                buckets.vals[sh as usize][off as usize + c] =
                                                    bufs.ew[k][e] * amt;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }

                    // Fold the per-entry accumulators into the worker-local
                    // gradient rows.
                    for e in 0..n {
                        let sl = bufs.sp_local[e] as usize;
                        gw[sl] = bufs.gw_acc[e];
                        gl[2 * sl] = bufs.aw[e] * bufs.gx_acc[e] * w_f;
                        gl[2 * sl + 1] = bufs.aw[e] * bufs.gy_acc[e] * h_f;
                    }

                    chunk_start += n;
                }
            }
        }
        seg_start = seg_end;
    }
}

/// Effective weights rearranged for the fused scatter pair slots: at the left
/// edge the pair base clamps to column 0, so the right corner's weight moves
/// to the first slot.
#[inline]
fn fused_pair_weights(bufs: &BwdBufs, e: usize) -> [f32; 4] {
    if bufs.swap[e] {
        [bufs.ew[1][e], 0.0, bufs.ew[3][e], 0.0]
    } else {
        [bufs.ew[0][e], bufs.ew[1][e], bufs.ew[2][e], bufs.ew[3][e]]
    }
}

struct NullSink;

impl ScatterSink for NullSink {
    fn pair_add(&mut self, _: usize, _: usize, _: usize, _: f32, _: f32) {}
    fn corner_add(&mut self, _: usize, _: usize, _: f32) {}
}

/// Staggered worker: alternates block compute phases (buffering contributions
/// per shard) with `n_shards` drain rounds in which it exclusively owns shard
/// `(worker_id + round) % n_shards`.
fn staggered_worker(
    ctx: &WorkerCtx<'_>,
    bq_range: Range<usize>,
    gl: &mut [f32],
    gw: &mut [f32],
    shared: &SharedGrad,
    barrier: &Barrier,
    params: &StaggerParams<'_>,
) {
    let mut bufs = BwdBufs::new(max_chunk(ctx.kplan));
    let mut buckets = Buckets::new(params.n_shards, params.rec_width);
    let sp_row = ctx.cfg.heads * ctx.cfg.levels.len() * ctx.cfg.points;
    let c_n = ctx.cfg.channels;
    let mut no_sink = NullSink;

    for block in 0..params.global_blocks {
        let blk_start = bq_range.start + block * BLOCK_BQ;
        if blk_start < bq_range.end {
            let blk_end = bq_range.end.min(blk_start + BLOCK_BQ);
            let gl_off = (blk_start - bq_range.start) * sp_row * 2;
            let gl_end = (blk_end - bq_range.start) * sp_row * 2;
            let gw_off = (blk_start - bq_range.start) * sp_row;
            let gw_end = (blk_end - bq_range.start) * sp_row;
            compute_span(
                ctx,
                blk_start..blk_end,
                &mut gl[gl_off..gl_end],
                &mut gw[gw_off..gw_end],
                blk_start,
                &mut bufs,
                &mut no_sink,
                Some((&mut buckets, params)),
            );
        }
        barrier.wait();

        for round in 0..params.n_shards {
            let shard = (params.worker_id + round) % params.n_shards;
            drain_bucket(&buckets, shard, shared, c_n);
            barrier.wait();
        }
        buckets.clear();
    }
}

/// Applies one shard's buffered contributions. The caller guarantees
/// exclusive ownership of the shard's index range for the round, so the adds
/// are plain. Fused records cover `2·channels` contiguous elements, corner
/// records `channels`.
fn drain_bucket(buckets: &Buckets, shard: usize, shared: &SharedGrad, channels: usize) {
    let bases = &buckets.base[shard];
    let vals = &buckets.vals[shard];
    let rw = buckets.rec_width;
    for (i, &base) in bases.iter().enumerate() {
        let dst = base as usize * channels;
        debug_assert!(dst + rw <= shared.len);
        let src = &vals[i * rw..(i + 1) * rw];
        for (j, &v) in src.iter().enumerate() {
            unsafe { *shared.ptr.add(dst + j) += v };
        }
    }
}

fn transpose_to_channel_last(
    grad_buf: &[f32],
    cfg: &MsdaConfig,
    scatter_pixels: usize,
    scatter_offsets: &[usize],
    padded: bool,
    workers: usize,
) -> Vec<f32> {
    let (b_n, h_n, c_n) = (cfg.batch, cfg.heads, cfg.channels);
    let pixels = cfg.total_pixels();

    // Unpadded pixel → scatter-buffer pixel.
    let pixmap: Vec<u32> = if padded {
        let mut m = vec![0u32; pixels];
        for (li, level) in cfg.levels.iter().enumerate() {
            for row in 0..level.height {
                for col in 0..level.width {
                    m[level.offset + row * level.width + col] =
                        (scatter_offsets[li] + row * (level.width + 1) + col) as u32;
                }
            }
        }
        m
    } else {
        (0..pixels as u32).collect()
    };

    let mut out = vec![0.0f32; b_n * pixels * h_n * c_n];
    let active: Vec<_> = split_ranges(b_n * pixels, workers.max(1))
        .into_iter()
        .filter(|r| !r.is_empty())
        .collect();

    let run = |range: Range<usize>, dst: &mut [f32]| {
        for (row, bp) in range.clone().enumerate() {
            let b = bp / pixels;
            let pix = bp - b * pixels;
            let spix = pixmap[pix] as usize;
            for h in 0..h_n {
                let src = ((b * h_n + h) * scatter_pixels + spix) * c_n;
                let d = row * h_n * c_n + h * c_n;
                dst[d..d + c_n].copy_from_slice(&grad_buf[src..src + c_n]);
            }
        }
    };

    if active.len() <= 1 {
        if let Some(r) = active.first() {
            let span = r.start * h_n * c_n..r.end * h_n * c_n;
            run(r.clone(), &mut out[span]);
        }
    } else {
        let mut rest: &mut [f32] = &mut out;
        std::thread::scope(|scope| {
            for r in &active {
                let (mine, tail) = rest.split_at_mut(r.len() * h_n * c_n);
                rest = tail;
                let run = &run;
                let r = r.clone();
                scope.spawn(move || run(r, mine));
            }
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_grad_output, random_instance, LocationStyle};
    use crate::optimized::msda_forward_opt;
    use crate::pyramid::build_levels;
    use crate::reference::{msda_backward_ref, Mode};
    use crate::tensor::Dtype;

    /// Worst deviation relative to the reference tensor's scale:
    /// max_i |a_i − r_i| / max(|r_i|, max_abs(r)).
    fn max_rel_err(r: &[f32], a: &[f32]) -> f32 {
        let scale = r.iter().fold(0.0f32, |m, &v| m.max(v.abs())).max(1e-30);
        r.iter()
            .zip(a)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(scale))
            .fold(0.0, f32::max)
    }

    fn grads_close(r: &MsdaGrads, a: &MsdaGrads, tol: f32) {
        let gv = max_rel_err(r.grad_value.as_f32(), a.grad_value.as_f32());
        let gloc = max_rel_err(r.grad_locations.as_f32(), a.grad_locations.as_f32());
        let gw = max_rel_err(r.grad_weights.as_f32(), a.grad_weights.as_f32());
        assert!(gv <= tol, "grad_value rel err {gv}");
        assert!(gloc <= tol, "grad_locations rel err {gloc}");
        assert!(gw <= tol, "grad_weights rel err {gw}");
    }

    fn mixed_cfg(mode: Mode) -> MsdaConfig {
        MsdaConfig::new(
            2,
            9,
            2,
            4,
            build_levels(&[(4, 4), (2, 2)]).unwrap(),
            3,
            mode,
        )
    }

    #[test]
    fn matches_reference_for_all_flag_combinations() {
        let cfg = mixed_cfg(Mode::Inference);
        let (p, s) = random_instance(&cfg, Dtype::F32, 21, LocationStyle::WideWithLattice);
        let g = random_grad_output(&cfg, 22);
        let expected = msda_backward_ref(&p, &s, &cfg, &g).unwrap();
        for flags in OptFlags::all_combinations(3) {
            let got = msda_backward_opt(&p, &s, &cfg, &flags, &g, None).unwrap();
            let res = std::panic::catch_unwind(|| grads_close(&expected, &got, 1e-5));
            if let Err(e) = res {
                panic!("flags {flags:?}: {:?}", e.downcast_ref::<String>());
            }
        }
    }

    #[test]
    fn saved_and_recompute_paths_agree() {
        let cfg = mixed_cfg(Mode::Train);
        let (p, s) = random_instance(&cfg, Dtype::F32, 31, LocationStyle::Wide);
        let g = random_grad_output(&cfg, 32);
        let flags = OptFlags {
            workers: 2,
            ..OptFlags::default()
        };
        let (_, saved) = msda_forward_opt(&p, &s, &cfg, &flags).unwrap();
        let with_saved =
            msda_backward_opt(&p, &s, &cfg, &flags, &g, saved.as_ref()).unwrap();
        let recomputed = msda_backward_opt(&p, &s, &cfg, &flags, &g, None).unwrap();
        grads_close(&with_saved, &recomputed, 1e-6);
    }

    #[test]
    fn staggered_backward_is_bit_deterministic() {
        let cfg = mixed_cfg(Mode::Inference);
        let (p, s) = random_instance(&cfg, Dtype::F32, 41, LocationStyle::Wide);
        let g = random_grad_output(&cfg, 42);
        let flags = OptFlags {
            workers: 8,
            staggered_write: true,
            ..OptFlags::default()
        };
        let a = msda_backward_opt(&p, &s, &cfg, &flags, &g, None).unwrap();
        let b = msda_backward_opt(&p, &s, &cfg, &flags, &g, None).unwrap();
        assert_eq!(a.grad_value.as_f32(), b.grad_value.as_f32());
        assert_eq!(a.grad_locations.as_f32(), b.grad_locations.as_f32());
        assert_eq!(a.grad_weights.as_f32(), b.grad_weights.as_f32());
    }

    #[test]
    fn worker_counts_agree_within_tolerance() {
        let cfg = mixed_cfg(Mode::Inference);
        let (p, s) = random_instance(&cfg, Dtype::F32, 51, LocationStyle::Wide);
        let g = random_grad_output(&cfg, 52);
        let base = msda_backward_opt(
            &p,
            &s,
            &cfg,
            &OptFlags {
                workers: 1,
                ..OptFlags::default()
            },
            &g,
            None,
        )
        .unwrap();
        for workers in [2, 8] {
            let got = msda_backward_opt(
                &p,
                &s,
                &cfg,
                &OptFlags {
                    workers,
                    ..OptFlags::default()
                },
                &g,
                None,
            )
            .unwrap();
            grads_close(&base, &got, 1e-5);
        }
    }

    #[test]
    fn saved_shape_mismatch_is_an_input_error() {
        let cfg = mixed_cfg(Mode::Train);
        let (p, s) = random_instance(&cfg, Dtype::F32, 61, LocationStyle::InUnit);
        let g = random_grad_output(&cfg, 62);
        let bad = SavedForward {
            sampled: Tensor::zeros(vec![1, 1, 1, 1, 1, 1], Dtype::F32).unwrap(),
        };
        let err = msda_backward_opt(&p, &s, &cfg, &OptFlags::default(), &g, Some(&bad));
        assert!(matches!(
            err,
            Err(OptError::Msda(MsdaError::SavedMismatch { .. }))
        ));
    }

    #[test]
    fn pad_columns_stay_zero_after_backward() {
        let cfg = mixed_cfg(Mode::Inference);
        let (p, s) = random_instance(&cfg, Dtype::F32, 81, LocationStyle::Wide);
        let g = random_grad_output(&cfg, 82);
        for workers in [1, 4] {
            for staggered in [false, true] {
                let flags = OptFlags {
                    workers,
                    staggered_write: staggered,
                    scatter_fusion: true,
                    ..OptFlags::default()
                };
                let (_, buf) = run_backward(&p, &s, &cfg, &flags, &g, None).unwrap();
                assert!(buf.padded);
                let bh = cfg.batch * cfg.heads;
                let offsets = crate::pyramid::padded_offsets(&cfg.levels);
                for i in 0..bh {
                    for (li, level) in cfg.levels.iter().enumerate() {
                        for row in 0..level.height {
                            let pad_pix =
                                offsets[li] + row * (level.width + 1) + level.width;
                            for c in 0..cfg.channels {
                                let v =
                                    buf.data[(i * buf.pixels + pad_pix) * cfg.channels + c];
                                assert!(
                                    v == 0.0 && v.to_bits() == 0,
                                    "pad leaked at bh {i} level {li} row {row}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_grad_output_zeroes_everything() {
        let cfg = mixed_cfg(Mode::Inference);
        let (p, s) = random_instance(&cfg, Dtype::F32, 71, LocationStyle::Wide);
        let g = Tensor::zeros(vec![2, 9, 8], Dtype::F32).unwrap();
        let grads = msda_backward_opt(&p, &s, &cfg, &OptFlags::default(), &g, None).unwrap();
        assert!(grads.grad_value.as_f32().iter().all(|&v| v == 0.0));
        assert!(grads.grad_locations.as_f32().iter().all(|&v| v == 0.0));
        assert!(grads.grad_weights.as_f32().iter().all(|&v| v == 0.0));
    }
}
