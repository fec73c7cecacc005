//! Seeded random problem instances for tests, verification and benchmarks.
//!
//! Everything here is deterministic for a fixed seed (ChaCha8 streams), which
//! is what makes the correctness fixtures reproducible across runs.

use crate::pyramid::{make_pyramid, FeaturePyramid, Fill, SamplingTensors};
use crate::reference::MsdaConfig;
use crate::tensor::{Dtype, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The canonical benchmark configuration: a 1024² image through five pyramid
/// levels (256² down to 16²), 8 heads × 32 channels, 4 sampling points, one
/// query per pixel — 87296 queries over 87296 × 32 essential input elements.
pub fn paper_config(mode: crate::reference::Mode) -> MsdaConfig {
    let levels = crate::pyramid::build_levels(&[
        (256, 256),
        (128, 128),
        (64, 64),
        (32, 32),
        (16, 16),
    ])
    .expect("static shapes");
    let queries = crate::pyramid::total_pixels(&levels);
    MsdaConfig::new(1, queries, 8, 32, levels, 4, mode)
}

/// How sampling locations are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocationStyle {
    /// Uniform over [0, 1]².
    InUnit,
    /// Uniform over [-0.2, 1.2]²: exercises the zero-padding paths.
    Wide,
    /// Wide, but a quarter of the points are snapped exactly onto the integer
    /// lattice of image coordinates (λ = 0), where the location gradient is
    /// one-sided.
    WideWithLattice,
    /// Image-space coordinates land at least `margin` away from the integer
    /// lattice in both axes, so central finite differences never straddle a
    /// derivative kink. Cells from one pixel outside the map up to the last
    /// in-bounds pixel are all reachable.
    OffLattice { margin: f32 },
}

/// Draws sampling locations and attention weights for `cfg`.
pub fn random_sampling(cfg: &MsdaConfig, seed: u64, style: LocationStyle) -> SamplingTensors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_n = cfg.levels.len();
    let n_points = cfg.batch * cfg.queries * cfg.heads * l_n * cfg.points;

    let mut locations = Vec::with_capacity(n_points * 2);
    for i in 0..n_points {
        let level = &cfg.levels[(i / cfg.points) % l_n];
        let (w, h) = (level.width, level.height);
        let (x, y) = match style {
            LocationStyle::InUnit => (rng.gen_range(0.0f32..=1.0), rng.gen_range(0.0f32..=1.0)),
            LocationStyle::Wide => (
                rng.gen_range(-0.2f32..=1.2),
                rng.gen_range(-0.2f32..=1.2),
            ),
            LocationStyle::WideWithLattice => {
                let x = rng.gen_range(-0.2f32..=1.2);
                let y = rng.gen_range(-0.2f32..=1.2);
                if rng.gen_bool(0.25) {
                    // Snap image coordinates onto integers: x·W − 0.5 = k.
                    let kx = (x * w as f32 - 0.5).round();
                    let ky = (y * h as f32 - 0.5).round();
                    ((kx + 0.5) / w as f32, (ky + 0.5) / h as f32)
                } else {
                    (x, y)
                }
            }
            LocationStyle::OffLattice { margin } => {
                let kx = rng.gen_range(-1i64..w as i64) as f32;
                let ky = rng.gen_range(-1i64..h as i64) as f32;
                let fx = rng.gen_range(margin..=1.0 - margin);
                let fy = rng.gen_range(margin..=1.0 - margin);
                (((kx + fx) + 0.5) / w as f32, ((ky + fy) + 0.5) / h as f32)
            }
        };
        locations.push(x);
        locations.push(y);
    }

    let weights: Vec<f32> = (0..n_points).map(|_| rng.gen_range(0.0f32..1.0)).collect();

    SamplingTensors::new(
        Tensor::from_f32(
            vec![cfg.batch, cfg.queries, cfg.heads, l_n, cfg.points, 2],
            locations,
        )
        .expect("locations shape"),
        Tensor::from_f32(
            vec![cfg.batch, cfg.queries, cfg.heads, l_n, cfg.points],
            weights,
        )
        .expect("weights shape"),
    )
    .expect("generated sampling tensors are finite")
}

/// Uniform [-1, 1) upstream gradient of the forward output shape.
pub fn random_grad_output(cfg: &MsdaConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.batch * cfg.queries * cfg.embed_dim();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::from_f32(vec![cfg.batch, cfg.queries, cfg.embed_dim()], data).expect("shape")
}

/// Pyramid + sampling tensors for `cfg`, three independent seed streams.
pub fn random_instance(
    cfg: &MsdaConfig,
    dtype: Dtype,
    seed: u64,
    style: LocationStyle,
) -> (FeaturePyramid, SamplingTensors) {
    let shapes: Vec<(usize, usize)> = cfg.levels.iter().map(|l| (l.height, l.width)).collect();
    let p = make_pyramid(
        cfg.batch,
        cfg.heads,
        cfg.channels,
        &shapes,
        dtype,
        Fill::RandomSeeded(seed ^ 0x9e37_79b9_7f4a_7c15),
    )
    .expect("pyramid from config");
    let s = random_sampling(cfg, seed.wrapping_mul(0x2545_f491_4f6c_dd1d), style);
    (p, s)
}
