//! Tiled, data-parallel MSDA forward.
//!
//! Work is partitioned over (batch, query) rows; each worker owns disjoint
//! output rows, so the pass needs no synchronization beyond the final join.
//! Per (batch, head, level), sampling entries are processed in planned chunks:
//! an address-generation pass materializes corner indices and weights into
//! flat arrays, then one gather-and-accumulate pass per channel runs over them
//! branch-free while that channel's map stays cache-resident.

use super::addr::corners;
use super::working::{gather_source, GatherSource};
use super::{plan, KernelPlan, OptError, OptFlags};
use crate::pyramid::{FeaturePyramid, SamplingTensors};
use crate::reference::{check_shapes, Mode, MsdaConfig, SavedForward};
use crate::tensor::Tensor;

/// Optimized forward pass. Accepts the pyramid in any layout (channel-last
/// inputs are transformed internally) and matches [`msda_forward_ref`]
/// within 1e-5 relative in f32, 2e-3 with f16 storage.
///
/// [`msda_forward_ref`]: crate::reference::msda_forward_ref
pub fn msda_forward_opt(
    p: &FeaturePyramid,
    s: &SamplingTensors,
    cfg: &MsdaConfig,
    flags: &OptFlags,
) -> Result<(Tensor, Option<SavedForward>), OptError> {
    check_shapes(p, s, cfg)?;
    let kplan = plan(cfg, flags)?;

    let src = gather_source(p, flags.gather_fusion);
    let locs = s.locations.to_f32_vec();
    let aws = s.weights.to_f32_vec();

    let (b_n, q_n) = (cfg.batch, cfg.queries);
    let embed = cfg.embed_dim();
    let saved_row = cfg.heads * cfg.levels.len() * cfg.points * cfg.channels;

    let mut out = vec![0.0f32; b_n * q_n * embed];
    let mut saved = match cfg.mode {
        Mode::Train => Some(vec![0.0f32; b_n * q_n * saved_row]),
        Mode::Inference => None,
    };

    let active: Vec<_> = kplan
        .worker_ranges
        .iter()
        .filter(|r| !r.is_empty())
        .cloned()
        .collect();

    if active.len() <= 1 {
        if let Some(r) = active.first() {
            forward_worker(
                &src,
                &locs,
                &aws,
                cfg,
                &kplan,
                flags.gather_fusion,
                r.clone(),
                &mut out[r.start * embed..r.end * embed],
                saved
                    .as_mut()
                    .map(|sv| &mut sv[r.start * saved_row..r.end * saved_row]),
            );
        }
    } else {
        // Hand each worker its disjoint row slices.
        let mut out_rest: &mut [f32] = &mut out;
        let mut saved_rest: Option<&mut [f32]> = saved.as_deref_mut();
        std::thread::scope(|scope| {
            for r in &active {
                let (out_mine, tail) = out_rest.split_at_mut((r.end - r.start) * embed);
                out_rest = tail;
                let saved_mine = match saved_rest.take() {
                    Some(sv) => {
                        let (mine, tail) = sv.split_at_mut((r.end - r.start) * saved_row);
                        saved_rest = Some(tail);
                        Some(mine)
                    }
                    None => None,
                };
                let (src, locs, aws, kplan) = (&src, &locs, &aws, &kplan);
                let r = r.clone();
                scope.spawn(move || {
                    forward_worker(
                        src,
                        locs,
                        aws,
                        cfg,
                        kplan,
                        flags.gather_fusion,
                        r,
                        out_mine,
                        saved_mine,
                    );
                });
            }
        });
    }

    let output = Tensor::from_f32(vec![b_n, q_n, embed], out).expect("output shape");
    let saved = saved.map(|sv| SavedForward {
        sampled: Tensor::from_f32_values(
            vec![
                b_n,
                q_n,
                cfg.heads,
                cfg.levels.len(),
                cfg.points,
                cfg.channels,
            ],
            cfg.saved_dtype,
            &sv,
        )
        .expect("saved shape"),
    });
    Ok((output, saved))
}

/// Chunk working buffers, allocated once per worker at the largest planned
/// chunk length.
struct ChunkBufs {
    idx: [Vec<u32>; 4],
    w: [Vec<f32>; 4],
    aw: Vec<f32>,
    /// Worker-local output row per entry.
    orow: Vec<u32>,
    /// Worker-local saved offset per entry (train mode).
    soff: Vec<u32>,
    smp: Vec<f32>,
    stage: Vec<f32>,
}

impl ChunkBufs {
    fn new(max_chunk: usize, channels: usize, train: bool) -> ChunkBufs {
        let z32 = || vec![0u32; max_chunk];
        let zf = || vec![0.0f32; max_chunk];
        ChunkBufs {
            idx: [z32(), z32(), z32(), z32()],
            w: [zf(), zf(), zf(), zf()],
            aw: zf(),
            orow: z32(),
            soff: if train { z32() } else { Vec::new() },
            smp: zf(),
            stage: if train {
                vec![0.0f32; max_chunk * channels]
            } else {
                Vec::new()
            },
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_worker(
    src: &GatherSource<'_>,
    locs: &[f32],
    aws: &[f32],
    cfg: &MsdaConfig,
    kplan: &KernelPlan,
    fusion: bool,
    bq_range: std::ops::Range<usize>,
    out: &mut [f32],
    mut saved: Option<&mut [f32]>,
) {
    let (q_n, h_n, c_n, p_n) = (cfg.queries, cfg.heads, cfg.channels, cfg.points);
    let l_n = cfg.levels.len();
    let embed = h_n * c_n;
    let saved_row = h_n * l_n * p_n * c_n;
    let train = saved.is_some();

    let max_chunk = kplan.chunk_len.iter().copied().max().unwrap_or(8);
    let mut bufs = ChunkBufs::new(max_chunk, c_n, train);

    let mut seg_start = bq_range.start;
    while seg_start < bq_range.end {
        let b = seg_start / q_n;
        let seg_end = bq_range.end.min((b + 1) * q_n);
        let q0 = seg_start - b * q_n;
        let seg_queries = seg_end - seg_start;

        for h in 0..h_n {
            for (li, level) in cfg.levels.iter().enumerate() {
                let chunk_len = kplan.chunk_len[li];
                let goff = src.level_offsets[li];
                let entries = seg_queries * p_n;

                let mut chunk_start = 0usize;
                while chunk_start < entries {
                    let n = chunk_len.min(entries - chunk_start);

                    // Address generation: corner indices and weights per entry.
                    for e in 0..n {
                        let ge = chunk_start + e;
                        let q = q0 + ge / p_n;
                        let pt = ge % p_n;
                        let bq = b * q_n + q;
                        let sp = (((bq * h_n) + h) * l_n + li) * p_n + pt;
                        let cg = corners(level, locs[2 * sp], locs[2 * sp + 1]);
                        if fusion {
                            let (it, ib) = cg.fused_bases(goff);
                            let fw = cg.fused_weights();
                            bufs.idx[0][e] = it as u32;
                            bufs.idx[1][e] = ib as u32;
                            for k in 0..4 {
                                bufs.w[k][e] = fw[k];
                            }
                        } else {
                            let si = cg.scalar_indices(goff);
                            let ew = cg.effective_weights();
                            for k in 0..4 {
                                bufs.idx[k][e] = si[k] as u32;
                                bufs.w[k][e] = ew[k];
                            }
                        }
                        bufs.aw[e] = aws[sp];
                        bufs.orow[e] = (bq - bq_range.start) as u32;
                        if train {
                            let local_row = bq - bq_range.start;
                            bufs.soff[e] = (local_row * saved_row
                                + (((h * l_n) + li) * p_n + pt) * c_n)
                                as u32;
                        }
                    }

                    // One gather pass per channel over the materialized
                    // addresses; the (b, h, c) map stays hot for the chunk.
                    for c in 0..c_n {
                        let map = src.slice(b, h, c, h_n, c_n);
                        if fusion {
                            for e in 0..n {
                                let it = bufs.idx[0][e] as usize;
                                let ib = bufs.idx[1][e] as usize;
                                bufs.smp[e] = bufs.w[0][e] * map[it]
                                    + bufs.w[1][e] * map[it + 1]
                                    + bufs.w[2][e] * map[ib]
                                    + bufs.w[3][e] * map[ib + 1];
                            }
                        } else {
                            for e in 0..n {
                                bufs.smp[e] = bufs.w[0][e] * map[bufs.idx[0][e] as usize]
                                    + bufs.w[1][e] * map[bufs.idx[1][e] as usize]
                                    + bufs.w[2][e] * map[bufs.idx[2][e] as usize]
                                    + bufs.w[3][e] * map[bufs.idx[3][e] as usize];
                            }
                        }
                        let oc = h * c_n + c;
                        for e in 0..n {
                            out[bufs.orow[e] as usize * embed + oc] += bufs.aw[e] * bufs.smp[e];
                        }
                        if train {
                            for e in 0..n {
                                bufs.stage[e * c_n + c] = bufs.smp[e];
                            }
                        }
                    }

                    // Drain the saved-sample staging buffer contiguously per
                    // entry (the train-mode extra IO).
                    if let Some(sv) = saved.as_deref_mut() {
                        for e in 0..n {
                            let dst = bufs.soff[e] as usize;
                            sv[dst..dst + c_n].copy_from_slice(&bufs.stage[e * c_n..(e + 1) * c_n]);
                        }
                    }

                    chunk_start += n;
                }
            }
        }
        seg_start = seg_end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_instance, LocationStyle};
    use crate::pyramid::build_levels;
    use crate::reference::msda_forward_ref;
    use crate::tensor::Dtype;

    /// Worst deviation relative to the reference tensor's scale.
    fn max_rel_err(r: &[f32], a: &[f32]) -> f32 {
        let scale = r.iter().fold(0.0f32, |m, &v| m.max(v.abs())).max(1e-30);
        r.iter()
            .zip(a)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(scale))
            .fold(0.0, f32::max)
    }

    #[test]
    fn matches_reference_on_a_mixed_instance() {
        let cfg = MsdaConfig::new(
            2,
            9,
            2,
            4,
            build_levels(&[(4, 4), (2, 2)]).unwrap(),
            3,
            Mode::Train,
        );
        let (p, s) = random_instance(&cfg, Dtype::F32, 42, LocationStyle::WideWithLattice);
        let (ref_out, ref_saved) = msda_forward_ref(&p, &s, &cfg).unwrap();
        for flags in OptFlags::all_combinations(3) {
            let (opt_out, opt_saved) = msda_forward_opt(&p, &s, &cfg, &flags).unwrap();
            assert!(
                max_rel_err(ref_out.as_f32(), opt_out.as_f32()) <= 1e-5,
                "flags {flags:?}"
            );
            let rs = ref_saved.as_ref().unwrap().sampled.to_f32_vec();
            let os = opt_saved.as_ref().unwrap().sampled.to_f32_vec();
            assert!(max_rel_err(&rs, &os) <= 1e-5, "saved mismatch {flags:?}");
        }
    }

    #[test]
    fn worker_counts_agree() {
        let cfg = MsdaConfig::new(
            1,
            33,
            2,
            2,
            build_levels(&[(5, 7)]).unwrap(),
            2,
            Mode::Inference,
        );
        let (p, s) = random_instance(&cfg, Dtype::F32, 7, LocationStyle::Wide);
        let base = {
            let flags = OptFlags {
                workers: 1,
                ..OptFlags::default()
            };
            msda_forward_opt(&p, &s, &cfg, &flags).unwrap().0
        };
        for workers in [2, 8, 64] {
            let flags = OptFlags {
                workers,
                ..OptFlags::default()
            };
            let out = msda_forward_opt(&p, &s, &cfg, &flags).unwrap().0;
            assert!(max_rel_err(base.as_f32(), out.as_f32()) <= 1e-5);
        }
    }

    #[test]
    fn f16_storage_matches_reference_loosely() {
        let cfg = MsdaConfig::new(
            1,
            6,
            2,
            4,
            build_levels(&[(3, 5), (2, 2)]).unwrap(),
            2,
            Mode::Inference,
        );
        let (p, s) = random_instance(&cfg, Dtype::F16, 8, LocationStyle::Wide);
        let (ref_out, _) = msda_forward_ref(&p, &s, &cfg).unwrap();
        let (opt_out, _) = msda_forward_opt(&p, &s, &cfg, &OptFlags::default()).unwrap();
        assert!(max_rel_err(ref_out.as_f32(), opt_out.as_f32()) <= 2e-3);
    }

    #[test]
    fn accepts_pixel_last_inputs() {
        let cfg = MsdaConfig::new(
            1,
            5,
            2,
            3,
            build_levels(&[(4, 6)]).unwrap(),
            2,
            Mode::Inference,
        );
        let (p, s) = random_instance(&cfg, Dtype::F32, 13, LocationStyle::InUnit);
        let flags = OptFlags::default();
        let from_cl = msda_forward_opt(&p, &s, &cfg, &flags).unwrap().0;
        for padded in [false, true] {
            let pl = crate::pyramid::to_pixel_last(&p, padded).unwrap();
            let from_pl = msda_forward_opt(&pl, &s, &cfg, &flags).unwrap().0;
            assert_eq!(from_cl.as_f32(), from_pl.as_f32());
        }
    }

    #[test]
    fn right_edge_probe_identical_with_and_without_fusion() {
        // Locations that put w0 on the last column with λw > 0: the padded
        // pair read must agree exactly with the scalar path.
        let levels = build_levels(&[(2, 4)]).unwrap();
        let cfg = MsdaConfig::new(1, 4, 1, 1, levels.clone(), 1, Mode::Inference);
        let p = crate::pyramid::make_pyramid(
            1,
            1,
            1,
            &[(2, 4)],
            Dtype::F32,
            crate::pyramid::Fill::Sequential,
        )
        .unwrap();
        let w = levels[0].width as f32;
        let x = ((w - 1.0) + 0.4 + 0.5) / w;
        let locs: Vec<f32> = (0..4).flat_map(|q| [x, 0.1 + 0.2 * q as f32]).collect();
        let s = SamplingTensors::new(
            Tensor::from_f32(vec![1, 4, 1, 1, 1, 2], locs).unwrap(),
            Tensor::from_f32(vec![1, 4, 1, 1, 1], vec![1.0; 4]).unwrap(),
        )
        .unwrap();
        let fused = msda_forward_opt(
            &p,
            &s,
            &cfg,
            &OptFlags {
                gather_fusion: true,
                ..OptFlags::default()
            },
        )
        .unwrap()
        .0;
        let scalar = msda_forward_opt(
            &p,
            &s,
            &cfg,
            &OptFlags {
                gather_fusion: false,
                ..OptFlags::default()
            },
        )
        .unwrap()
        .0;
        assert_eq!(fused.as_f32(), scalar.as_f32());
    }

    #[test]
    fn shape_errors_propagate() {
        let cfg = MsdaConfig::new(
            1,
            5,
            2,
            3,
            build_levels(&[(4, 6)]).unwrap(),
            2,
            Mode::Inference,
        );
        let (p, s) = random_instance(&cfg, Dtype::F32, 1, LocationStyle::InUnit);
        let mut bad = cfg.clone();
        bad.heads = 3;
        assert!(msda_forward_opt(&p, &s, &bad, &OptFlags::default()).is_err());
    }
}
