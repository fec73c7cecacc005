//! Cache-aware MSDA kernels.
//!
//! Every memory-access optimization sits behind its own [`OptFlags`] toggle so
//! the ablation harness can measure each one in isolation:
//!
//! - `gather_fusion`: fetch the horizontally adjacent corner pair (x0, x1) as
//!   one contiguous two-element read from a padded pixel-last layout, instead
//!   of four independent scalar corner fetches from the unpadded layout. The
//!   pad column makes the pair read correct at the right edge of every row.
//! - `adaptive_veclen`: per level, process sampling points in the largest
//!   power-of-two chunks whose working buffers still fit the tile budget next
//!   to that level's single-channel map.
//! - `scatter_fusion`: combine the two corner contributions sharing a map row
//!   into one contiguous read-modify-write on the gradient buffer.
//! - `staggered_write`: schedule concurrent writers over disjoint destination
//!   shards in rotating phases instead of contending through atomic adds.
//!
//! Flags change time, never results (beyond the stated tolerance).

mod addr;
mod backward;
mod forward;
mod working;

pub use backward::msda_backward_opt;
pub use forward::msda_forward_opt;

use crate::pyramid::LevelSpec;
use crate::reference::{Mode, MsdaConfig, MsdaError};
use std::ops::Range;
use thiserror::Error;

/// Default tile budget: 192 KiB of fast local memory to plan against.
pub const DEFAULT_TILE_BUDGET: usize = 192 * 1024;

/// Chunk lengths are powers of two in this range (sampling points per inner
/// pass).
pub const MIN_CHUNK: usize = 8;
pub const MAX_CHUNK: usize = 4096;

/// Optimization toggles plus the resources the planner divides up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptFlags {
    pub adaptive_veclen: bool,
    pub gather_fusion: bool,
    pub staggered_write: bool,
    pub scatter_fusion: bool,
    pub tile_budget_bytes: usize,
    pub workers: usize,
}

impl Default for OptFlags {
    fn default() -> Self {
        OptFlags {
            adaptive_veclen: true,
            gather_fusion: true,
            staggered_write: true,
            scatter_fusion: true,
            tile_budget_bytes: DEFAULT_TILE_BUDGET,
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        }
    }
}

impl OptFlags {
    /// All sixteen on/off combinations of the four toggles, with the given
    /// worker count and the default budget.
    pub fn all_combinations(workers: usize) -> Vec<OptFlags> {
        (0..16)
            .map(|bits| OptFlags {
                adaptive_veclen: bits & 1 != 0,
                gather_fusion: bits & 2 != 0,
                staggered_write: bits & 4 != 0,
                scatter_fusion: bits & 8 != 0,
                tile_budget_bytes: DEFAULT_TILE_BUDGET,
                workers,
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(
        "tile budget of {budget} bytes cannot hold one row of level {level} \
         ({row_bytes} bytes in f32) plus minimum chunk buffers ({buffer_bytes} bytes)"
    )]
    BudgetTooSmall {
        level: usize,
        budget: usize,
        row_bytes: usize,
        buffer_bytes: usize,
    },
    #[error("config has no levels")]
    NoLevels,
}

#[derive(Debug, Error)]
pub enum OptError {
    #[error(transparent)]
    Msda(#[from] MsdaError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// How backward distributes grad-value writes among workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScatterStrategy {
    /// Pixel space is split into `workers` row-aligned shards; execution
    /// proceeds in `workers` rounds, and in round `r` worker `i` exclusively
    /// owns shard `(i + r) % workers`, draining the contributions it buffered
    /// for that shard. Deterministic for a fixed worker count.
    Staggered {
        /// Half-open pixel ranges (in the scatter buffer's pixel axis), one
        /// per worker, cut at map-row boundaries so a fused pair never
        /// straddles two shards.
        shards: Vec<Range<usize>>,
    },
    /// All workers scatter concurrently through atomic adds. Summation order
    /// is nondeterministic; compare results by tolerance only.
    Atomic,
}

/// Execution plan for one kernel invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelPlan {
    /// Sampling points per inner pass, one entry per level.
    pub chunk_len: Vec<usize>,
    /// Gather-source layout per level: padded stride or plain.
    pub gather_padded: Vec<bool>,
    /// Contiguous ranges of the flattened (batch, query) space, one per
    /// worker; empty ranges are legal when there are more workers than rows.
    pub worker_ranges: Vec<Range<usize>>,
    /// Scatter-buffer layout for backward.
    pub scatter_padded: bool,
    pub scatter: ScatterStrategy,
}

/// Bytes of chunk working buffers per sampling point: four corner indices,
/// four corner weights, the attention weight and the sampled-value staging
/// slot, all four bytes wide. Train mode stages the per-channel saved samples
/// on top, which is what shortens train-mode chunks.
fn per_entry_bytes(mode: Mode, channels: usize) -> usize {
    let base = 4 * 4 + 4 * 4 + 4 + 4;
    match mode {
        Mode::Inference => base,
        Mode::Train => base + 4 * channels,
    }
}

fn prev_power_of_two(x: usize) -> usize {
    debug_assert!(x >= 1);
    1 << (usize::BITS - 1 - x.leading_zeros())
}

/// Adaptive chunk length for one level: the largest power of two in
/// [`MIN_CHUNK`, `MAX_CHUNK`] whose buffers fit the budget next to the
/// level's resident working set (the single-channel f32 map when it fits,
/// otherwise one map row).
fn level_chunk(level: &LevelSpec, budget: usize, per_entry: usize) -> Result<usize, PlanError> {
    let map_bytes = level.pixels() * 4;
    let row_bytes = level.width * 4;
    let min_buffers = MIN_CHUNK * per_entry;

    let resident = if map_bytes + min_buffers <= budget {
        map_bytes
    } else {
        row_bytes
    };
    if resident + min_buffers > budget {
        return Err(PlanError::BudgetTooSmall {
            level: 0, // caller fills in the index
            budget,
            row_bytes,
            buffer_bytes: min_buffers,
        });
    }
    let fit = (budget - resident) / per_entry;
    Ok(prev_power_of_two(fit).clamp(MIN_CHUNK, MAX_CHUNK))
}

/// Builds the execution plan for `cfg` under `flags`. Deterministic.
pub fn plan(cfg: &MsdaConfig, flags: &OptFlags) -> Result<KernelPlan, PlanError> {
    if cfg.levels.is_empty() {
        return Err(PlanError::NoLevels);
    }
    let per_entry = per_entry_bytes(cfg.mode, cfg.channels);
    let budget = flags.tile_budget_bytes;

    let mut adaptive = Vec::with_capacity(cfg.levels.len());
    for (i, level) in cfg.levels.iter().enumerate() {
        let chunk = level_chunk(level, budget, per_entry).map_err(|e| match e {
            PlanError::BudgetTooSmall {
                budget,
                row_bytes,
                buffer_bytes,
                ..
            } => PlanError::BudgetTooSmall {
                level: i,
                budget,
                row_bytes,
                buffer_bytes,
            },
            other => other,
        })?;
        adaptive.push(chunk);
    }

    let chunk_len = if flags.adaptive_veclen {
        adaptive
    } else {
        // Fixed constant for every level: the smallest level's adaptive choice.
        let smallest = cfg
            .levels
            .iter()
            .enumerate()
            .min_by_key(|(_, l)| l.pixels())
            .map(|(i, _)| i)
            .expect("at least one level");
        vec![adaptive[smallest]; cfg.levels.len()]
    };

    let workers = flags.workers.max(1);
    let bq = cfg.batch * cfg.queries;
    let worker_ranges = split_ranges(bq, workers);

    let scatter = if flags.staggered_write && workers > 1 {
        ScatterStrategy::Staggered {
            shards: shard_pixel_space(&cfg.levels, flags.scatter_fusion, workers),
        }
    } else {
        ScatterStrategy::Atomic
    };

    Ok(KernelPlan {
        chunk_len,
        gather_padded: vec![flags.gather_fusion; cfg.levels.len()],
        worker_ranges,
        scatter_padded: flags.scatter_fusion,
        scatter,
    })
}

/// Splits `n` rows into `parts` contiguous near-equal ranges.
pub(crate) fn split_ranges(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let base = n / parts;
    let extra = n % parts;
    let mut ranges = Vec::with_capacity(parts);
    let mut start = 0usize;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        ranges.push(start..start + len);
        start += len;
    }
    ranges
}

/// Cuts the (padded or unpadded) pixel axis into `shards` ranges aligned to
/// map-row starts, balanced by pixel count.
fn shard_pixel_space(levels: &[LevelSpec], padded: bool, shards: usize) -> Vec<Range<usize>> {
    // Row start offsets across all levels, plus the total as a sentinel.
    let mut row_starts = Vec::new();
    let mut acc = 0usize;
    for l in levels {
        let stride = if padded { l.width + 1 } else { l.width };
        for _ in 0..l.height {
            row_starts.push(acc);
            acc += stride;
        }
    }
    row_starts.push(acc);
    let total = acc;
    let rows = row_starts.len() - 1;

    let mut bounds = Vec::with_capacity(shards + 1);
    bounds.push(0usize);
    let mut row = 0usize;
    for s in 1..shards {
        let target = total * s / shards;
        while row < rows && row_starts[row] < target {
            row += 1;
        }
        bounds.push(row_starts[row.min(rows)]);
    }
    bounds.push(total);
    bounds.windows(2).map(|w| w[0]..w[1]).collect()
}

/// Maps every global map row to its shard, for O(1) record routing.
pub(crate) fn row_to_shard(
    levels: &[LevelSpec],
    padded: bool,
    shards: &[Range<usize>],
) -> Vec<u32> {
    let mut table = Vec::new();
    let mut acc = 0usize;
    let mut shard = 0usize;
    for l in levels {
        let stride = if padded { l.width + 1 } else { l.width };
        for _ in 0..l.height {
            while shard + 1 < shards.len() && acc >= shards[shard].end {
                shard += 1;
            }
            table.push(shard as u32);
            acc += stride;
        }
    }
    table
}
