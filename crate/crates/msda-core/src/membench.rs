//! Gather/scatter microbenchmarks over access granularity, working-set size
//! and writer contention.
//!
//! These recast an accelerator-style memory analysis for a cache-hierarchy
//! machine: "cache-resident" versus "memory-resident" is expressed through the
//! working-set size, access granularity is 1 or 2 consecutive elements
//! (unmerged vs merged x0/x1 pairs), and scatter contention comes from worker
//! threads atomically adding into one shared destination.
//!
//! Every run is self-validating: the gather checksum must equal a sequential
//! replay of the same seeded index streams, and scatter-add must conserve the
//! total added value exactly (integer mode) or within 1e-3 (f32 mode).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKind {
    GatherCacheResident,
    GatherMemResident,
    ScatterAdd {
        /// Integer adds conserve exactly; f32 adds check within 1e-3.
        float: bool,
    },
}

impl BenchKind {
    pub fn label(&self) -> &'static str {
        match self {
            BenchKind::GatherCacheResident => "gather_cache",
            BenchKind::GatherMemResident => "gather_mem",
            BenchKind::ScatterAdd { float: false } => "scatter_add",
            BenchKind::ScatterAdd { float: true } => "scatter_add_f32",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSpec {
    pub kind: BenchKind,
    pub element_bytes: usize,
    /// Elements per access: 1 (unmerged) or 2 (merged adjacent pair).
    pub group: usize,
    pub working_set_bytes: usize,
    /// Total accesses across all workers.
    pub accesses: usize,
    pub workers: usize,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("group must be 1 or 2, got {0}")]
    BadGroup(usize),
    #[error("element_bytes must be 4 or 8, got {0}")]
    BadElementBytes(usize),
    #[error("accesses must be positive")]
    ZeroAccesses,
    #[error("workers must be positive")]
    ZeroWorkers,
    #[error(
        "working set of {working_set_bytes} bytes holds fewer than {group} elements \
         of {element_bytes} bytes"
    )]
    WorkingSetTooSmall {
        working_set_bytes: usize,
        element_bytes: usize,
        group: usize,
    },
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub elapsed_seconds: f64,
    pub bytes_moved: u64,
    pub bandwidth_bps: f64,
    /// Per-worker bandwidth over each worker's own loop time.
    pub per_worker_bps: Vec<f64>,
    pub checksum: u64,
    pub checksum_ok: bool,
}

fn validate(spec: &BenchSpec) -> Result<usize, BenchError> {
    if spec.group != 1 && spec.group != 2 {
        return Err(BenchError::BadGroup(spec.group));
    }
    if spec.element_bytes != 4 && spec.element_bytes != 8 {
        return Err(BenchError::BadElementBytes(spec.element_bytes));
    }
    if spec.accesses == 0 {
        return Err(BenchError::ZeroAccesses);
    }
    if spec.workers == 0 {
        return Err(BenchError::ZeroWorkers);
    }
    let elements = spec.working_set_bytes / spec.element_bytes;
    if elements < spec.group {
        return Err(BenchError::WorkingSetTooSmall {
            working_set_bytes: spec.working_set_bytes,
            element_bytes: spec.element_bytes,
            group: spec.group,
        });
    }
    Ok(elements)
}

/// Per-worker access counts summing exactly to the total.
fn worker_shares(total: usize, workers: usize) -> Vec<usize> {
    let base = total / workers;
    let extra = total % workers;
    (0..workers)
        .map(|w| base + usize::from(w < extra))
        .collect()
}

/// Seeded random pair-base indices, one stream per worker.
fn index_stream(spec: &BenchSpec, worker: usize, count: usize, elements: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(worker as u64));
    let top = (elements - spec.group) as u32;
    (0..count).map(|_| rng.gen_range(0..=top)).collect()
}

/// Random-index reads of `group` contiguous elements, accumulated into a
/// checksum the optimizer cannot elide.
pub fn run_gather(spec: &BenchSpec) -> Result<BenchReport, BenchError> {
    let elements = validate(spec)?;

    // Deterministic buffer content (values are arbitrary; the checksum replay
    // is what validates the run).
    let buf: Vec<u64> = {
        let mut x = spec.seed | 1;
        (0..elements)
            .map(|_| {
                x = x.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(27);
                x
            })
            .collect()
    };
    let narrow: Vec<u32>;
    let buf32: Option<&[u32]> = if spec.element_bytes == 4 {
        narrow = buf.iter().map(|&v| v as u32).collect();
        Some(&narrow)
    } else {
        None
    };

    let shares = worker_shares(spec.accesses, spec.workers);
    let streams: Vec<Vec<u32>> = shares
        .iter()
        .enumerate()
        .map(|(w, &n)| index_stream(spec, w, n, elements))
        .collect();

    let gather32 = |idx: &[u32], data: &[u32]| -> u64 {
        let mut sum = 0u64;
        if spec.group == 2 {
            for &i in idx {
                let i = i as usize;
                sum = sum
                    .wrapping_add(data[i] as u64)
                    .wrapping_add(data[i + 1] as u64);
            }
        } else {
            for &i in idx {
                sum = sum.wrapping_add(data[i as usize] as u64);
            }
        }
        sum
    };
    let gather64 = |idx: &[u32], data: &[u64]| -> u64 {
        let mut sum = 0u64;
        if spec.group == 2 {
            for &i in idx {
                let i = i as usize;
                sum = sum.wrapping_add(data[i]).wrapping_add(data[i + 1]);
            }
        } else {
            for &i in idx {
                sum = sum.wrapping_add(data[i as usize]);
            }
        }
        sum
    };

    let mut per_worker_secs = vec![0.0f64; spec.workers];
    let checksum = AtomicU64::new(0);

    let start = Instant::now();
    if spec.workers == 1 {
        let t = Instant::now();
        let sum = match buf32 {
            Some(d) => gather32(&streams[0], black_box(d)),
            None => gather64(&streams[0], black_box(&buf)),
        };
        checksum.fetch_add(sum, Ordering::Relaxed);
        per_worker_secs[0] = t.elapsed().as_secs_f64();
    } else {
        let secs: Vec<f64> = std::thread::scope(|scope| {
            let handles: Vec<_> = streams
                .iter()
                .map(|idx| {
                    let checksum = &checksum;
                    let buf = &buf;
                    scope.spawn(move || {
                        let t = Instant::now();
                        let sum = match buf32 {
                            Some(d) => gather32(idx, black_box(d)),
                            None => gather64(idx, black_box(buf)),
                        };
                        checksum.fetch_add(sum, Ordering::Relaxed);
                        t.elapsed().as_secs_f64()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        per_worker_secs = secs;
    }
    let elapsed = start.elapsed().as_secs_f64();

    // Sequential replay over the same streams.
    let mut expected = 0u64;
    for idx in &streams {
        expected = expected.wrapping_add(match buf32 {
            Some(d) => gather32(idx, d),
            None => gather64(idx, &buf),
        });
    }
    let checksum = checksum.load(Ordering::Relaxed);

    let bytes_moved = (spec.accesses * spec.group * spec.element_bytes) as u64;
    Ok(BenchReport {
        spec: *spec,
        elapsed_seconds: elapsed,
        bytes_moved,
        bandwidth_bps: bytes_moved as f64 / elapsed.max(1e-12),
        per_worker_bps: shares
            .iter()
            .zip(&per_worker_secs)
            .map(|(&n, &s)| (n * spec.group * spec.element_bytes) as f64 / s.max(1e-12))
            .collect(),
        checksum,
        checksum_ok: checksum == expected,
    })
}

/// Random-index atomic adds of `group` contiguous elements into one shared
/// destination. The conservation checksum is the final buffer sum.
pub fn run_scatter_add(spec: &BenchSpec) -> Result<BenchReport, BenchError> {
    let elements = validate(spec)?;
    let float = match spec.kind {
        BenchKind::ScatterAdd { float } => float,
        _ => false,
    };

    let shares = worker_shares(spec.accesses, spec.workers);
    let streams: Vec<Vec<u32>> = shares
        .iter()
        .enumerate()
        .map(|(w, &n)| index_stream(spec, w, n, elements))
        .collect();

    let dest: Vec<AtomicU32> = (0..elements).map(|_| AtomicU32::new(0)).collect();
    let group = spec.group;

    let scatter = |idx: &[u32], dest: &[AtomicU32]| {
        if float {
            for &i in idx {
                let i = i as usize;
                for slot in &dest[i..i + group] {
                    // f32 add via compare-exchange.
                    let mut cur = slot.load(Ordering::Relaxed);
                    loop {
                        let new = (f32::from_bits(cur) + 1.0).to_bits();
                        match slot.compare_exchange_weak(
                            cur,
                            new,
                            Ordering::Relaxed,
                            Ordering::Relaxed,
                        ) {
                            Ok(_) => break,
                            Err(actual) => cur = actual,
                        }
                    }
                }
            }
        } else {
            for &i in idx {
                let i = i as usize;
                for slot in &dest[i..i + group] {
                    slot.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    };

    let mut per_worker_secs = vec![0.0f64; spec.workers];
    let start = Instant::now();
    if spec.workers == 1 {
        let t = Instant::now();
        scatter(&streams[0], black_box(&dest));
        per_worker_secs[0] = t.elapsed().as_secs_f64();
    } else {
        let secs: Vec<f64> = std::thread::scope(|scope| {
            let handles: Vec<_> = streams
                .iter()
                .map(|idx| {
                    let dest = &dest;
                    scope.spawn(move || {
                        let t = Instant::now();
                        scatter(idx, black_box(dest));
                        t.elapsed().as_secs_f64()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        per_worker_secs = secs;
    }
    let elapsed = start.elapsed().as_secs_f64();

    let expected = (spec.accesses * spec.group) as u64;
    let (checksum, checksum_ok) = if float {
        let total: f64 = dest
            .iter()
            .map(|s| f32::from_bits(s.load(Ordering::Relaxed)) as f64)
            .sum();
        let ok = (total - expected as f64).abs() <= 1e-3 * expected as f64;
        (total.round() as u64, ok)
    } else {
        let total: u64 = dest
            .iter()
            .map(|s| s.load(Ordering::Relaxed) as u64)
            .sum();
        (total, total == expected)
    };

    let bytes_moved = (spec.accesses * spec.group * spec.element_bytes) as u64;
    Ok(BenchReport {
        spec: *spec,
        elapsed_seconds: elapsed,
        bytes_moved,
        bandwidth_bps: bytes_moved as f64 / elapsed.max(1e-12),
        per_worker_bps: shares
            .iter()
            .zip(&per_worker_secs)
            .map(|(&n, &s)| (n * spec.group * spec.element_bytes) as f64 / s.max(1e-12))
            .collect(),
        checksum,
        checksum_ok,
    })
}

pub fn run(spec: &BenchSpec) -> Result<BenchReport, BenchError> {
    match spec.kind {
        BenchKind::GatherCacheResident | BenchKind::GatherMemResident => run_gather(spec),
        BenchKind::ScatterAdd { .. } => run_scatter_add(spec),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub warmup: usize,
    pub timed: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { warmup: 3, timed: 10 }
    }
}

/// One sweep cell after warm-up discard and median-of-n timing.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub spec: BenchSpec,
    pub median_seconds: f64,
    pub bandwidth_bps: f64,
    pub per_worker_bps: f64,
    pub checksum: u64,
    pub checksum_ok: bool,
}

/// Runs each cell `warmup + timed` times, discards the warm-up runs and
/// reports the median elapsed time. A cell error does not abort the sweep.
pub fn sweep(specs: &[BenchSpec], opts: SweepOptions) -> Vec<(BenchSpec, Result<SweepRow, BenchError>)> {
    specs
        .iter()
        .map(|spec| (*spec, sweep_cell(spec, opts)))
        .collect()
}

fn sweep_cell(spec: &BenchSpec, opts: SweepOptions) -> Result<SweepRow, BenchError> {
    for _ in 0..opts.warmup {
        run(spec)?;
    }
    let mut elapsed = Vec::with_capacity(opts.timed.max(1));
    let mut checksum = 0u64;
    let mut checksum_ok = true;
    for _ in 0..opts.timed.max(1) {
        let rep = run(spec)?;
        elapsed.push(rep.elapsed_seconds);
        checksum = rep.checksum;
        checksum_ok &= rep.checksum_ok;
    }
    elapsed.sort_by(f64::total_cmp);
    let median = elapsed[elapsed.len() / 2];
    let bytes = (spec.accesses * spec.group * spec.element_bytes) as f64;
    Ok(SweepRow {
        spec: *spec,
        median_seconds: median,
        bandwidth_bps: bytes / median.max(1e-12),
        per_worker_bps: bytes / median.max(1e-12) / spec.workers as f64,
        checksum,
        checksum_ok,
    })
}

pub const CSV_HEADER: &str = "kind,group,working_set_bytes,workers,median_seconds,bandwidth_bps,checksum_ok";

/// Fixed-schema CSV over successful sweep rows.
pub fn write_csv<W: std::io::Write>(
    rows: &[(BenchSpec, Result<SweepRow, BenchError>)],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (spec, row) in rows {
        if let Ok(r) = row {
            writeln!(
                out,
                "{},{},{},{},{:.9},{:.3},{}",
                spec.kind.label(),
                spec.group,
                spec.working_set_bytes,
                spec.workers,
                r.median_seconds,
                r.bandwidth_bps,
                r.checksum_ok
            )?;
        }
    }
    Ok(())
}
