//! Oracle equivalence of the optimized kernels across flag combinations,
//! dtypes and location styles. The acceptance suite runs the full 200-instance
//! sweep; this is the fast per-crate version.

use msda_core::fixtures::{random_grad_output, random_instance, LocationStyle};
use msda_core::optimized::{msda_backward_opt, msda_forward_opt, OptFlags};
use msda_core::pyramid::build_levels;
use msda_core::reference::{msda_backward_ref, msda_forward_ref, Mode, MsdaConfig};
use msda_core::tensor::Dtype;

fn max_scale_err(r: &[f32], a: &[f32]) -> f32 {
    let scale = r.iter().fold(0.0f32, |m, &v| m.max(v.abs())).max(1e-30);
    r.iter()
        .zip(a)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(scale))
        .fold(0.0, f32::max)
}

fn instance_cfg(seed: u64, mode: Mode) -> MsdaConfig {
    // Vary the geometry with the seed.
    let shapes: Vec<(usize, usize)> = match seed % 4 {
        0 => vec![(4, 4), (2, 2)],
        1 => vec![(5, 7)],
        2 => vec![(8, 3), (3, 8), (1, 1)],
        _ => vec![(6, 6), (3, 3), (2, 2)],
    };
    MsdaConfig::new(
        1 + (seed as usize % 2),
        3 + (seed as usize % 7),
        1 + (seed as usize % 3),
        1 + (seed as usize % 5),
        build_levels(&shapes).unwrap(),
        1 + (seed as usize % 4),
        mode,
    )
}

#[test]
fn forward_and_backward_match_reference_across_the_flag_lattice() {
    let combos = OptFlags::all_combinations(3);
    for seed in 0..32u64 {
        let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Inference };
        let cfg = instance_cfg(seed, mode);
        let dtype = if seed % 5 == 0 { Dtype::F16 } else { Dtype::F32 };
        let tol = if dtype == Dtype::F16 { 2e-3 } else { 1e-5 };
        let style = match seed % 3 {
            0 => LocationStyle::Wide,
            1 => LocationStyle::WideWithLattice,
            _ => LocationStyle::InUnit,
        };
        let (p, s) = random_instance(&cfg, dtype, seed, style);
        let g = random_grad_output(&cfg, seed ^ 0xabcd);

        let (ref_out, ref_saved) = msda_forward_ref(&p, &s, &cfg).unwrap();
        let ref_grads = msda_backward_ref(&p, &s, &cfg, &g).unwrap();

        let flags = &combos[(seed as usize) % combos.len()];
        let (opt_out, opt_saved) = msda_forward_opt(&p, &s, &cfg, flags).unwrap();
        assert!(
            max_scale_err(ref_out.as_f32(), opt_out.as_f32()) <= tol,
            "forward seed {seed} flags {flags:?}"
        );
        if let (Some(rs), Some(os)) = (&ref_saved, &opt_saved) {
            assert!(
                max_scale_err(&rs.sampled.to_f32_vec(), &os.sampled.to_f32_vec()) <= tol,
                "saved seed {seed}"
            );
        }

        let opt_grads = msda_backward_opt(&p, &s, &cfg, flags, &g, opt_saved.as_ref()).unwrap();
        for (name, r, a) in [
            ("grad_value", &ref_grads.grad_value, &opt_grads.grad_value),
            (
                "grad_locations",
                &ref_grads.grad_locations,
                &opt_grads.grad_locations,
            ),
            (
                "grad_weights",
                &ref_grads.grad_weights,
                &opt_grads.grad_weights,
            ),
        ] {
            assert!(
                max_scale_err(r.as_f32(), a.as_f32()) <= tol,
                "{name} seed {seed} flags {flags:?}"
            );
        }
    }
}

#[test]
fn boundary_sweep_fused_equals_unfused_on_every_column() {
    // Every w0 of a 32-wide level with λw > 0; fused (padded pair reads) and
    // unfused (scalar reads) must agree exactly.
    let levels = build_levels(&[(4, 32)]).unwrap();
    let width = levels[0].width;
    let cfg = MsdaConfig::new(1, width, 1, 2, levels, 1, Mode::Inference);
    let (p, _) = random_instance(&cfg, Dtype::F32, 7, LocationStyle::InUnit);
    let locs: Vec<f32> = (0..width)
        .flat_map(|w0| {
            let x = (w0 as f32 + 0.6 + 0.5) / width as f32;
            [x, 0.4]
        })
        .collect();
    let s = msda_core::SamplingTensors::new(
        msda_core::Tensor::from_f32(vec![1, width, 1, 1, 1, 2], locs).unwrap(),
        msda_core::Tensor::from_f32(vec![1, width, 1, 1, 1], vec![1.0; width]).unwrap(),
    )
    .unwrap();
    let on = msda_forward_opt(
        &p,
        &s,
        &cfg,
        &OptFlags {
            gather_fusion: true,
            workers: 2,
            ..OptFlags::default()
        },
    )
    .unwrap()
    .0;
    let off = msda_forward_opt(
        &p,
        &s,
        &cfg,
        &OptFlags {
            gather_fusion: false,
            workers: 2,
            ..OptFlags::default()
        },
    )
    .unwrap()
    .0;
    assert_eq!(on.as_f32(), off.as_f32());
}

#[test]
fn train_plan_shrinks_chunks_and_saved_path_matches() {
    let cfg = instance_cfg(3, Mode::Train);
    let (p, s) = random_instance(&cfg, Dtype::F32, 9, LocationStyle::Wide);
    let g = random_grad_output(&cfg, 10);
    let flags = OptFlags {
        workers: 4,
        ..OptFlags::default()
    };
    let (_, saved) = msda_forward_opt(&p, &s, &cfg, &flags).unwrap();
    let a = msda_backward_opt(&p, &s, &cfg, &flags, &g, saved.as_ref()).unwrap();
    let b = msda_backward_opt(&p, &s, &cfg, &flags, &g, None).unwrap();
    assert!(max_scale_err(a.grad_value.as_f32(), b.grad_value.as_f32()) <= 1e-6);
    assert!(max_scale_err(a.grad_locations.as_f32(), b.grad_locations.as_f32()) <= 1e-6);
    assert!(max_scale_err(a.grad_weights.as_f32(), b.grad_weights.as_f32()) <= 1e-6);
}
