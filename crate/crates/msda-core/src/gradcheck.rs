//! Central finite-difference gradient checking for the reference backward.
//!
//! The check perturbs every input component of a small instance, re-evaluates
//! the scalar `F(inputs) = ⟨grad_output, forward(inputs)⟩`, and compares the
//! quotient against the analytic gradient. Test locations are drawn off the
//! integer lattice so the difference quotient never straddles a kink of the
//! piecewise-bilinear sampling function.

use crate::fixtures::{random_grad_output, random_instance, LocationStyle};
use crate::pyramid::{FeaturePyramid, Layout, SamplingTensors};
use crate::reference::{msda_backward_ref, MsdaConfig, MsdaError, MsdaGrads};
use crate::tensor::{Dtype, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckTolerances {
    pub rel: f32,
    pub abs_floor: f32,
}

impl Default for GradCheckTolerances {
    fn default() -> Self {
        GradCheckTolerances {
            rel: 1e-3,
            abs_floor: 1e-5,
        }
    }
}

/// Worst deviation between one analytic gradient tensor and its
/// finite-difference counterpart.
#[derive(Debug, Clone, Copy)]
pub struct TensorDeviation {
    pub max_abs: f32,
    pub max_rel: f32,
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub value: TensorDeviation,
    pub locations: TensorDeviation,
    pub weights: TensorDeviation,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.value.pass && self.locations.pass && self.weights.pass
    }
}

/// Margin (in image-space pixels) kept between test locations and the integer
/// lattice. Must exceed the finite-difference step after the chain rule
/// (`step × max extent`).
const LATTICE_MARGIN: f32 = 0.1;

/// Runs the full gradient check on a seeded random instance of `cfg`.
///
/// Failures are results, not errors; only a non-positive step or an
/// inconsistent config produces `Err`.
pub fn grad_check(
    cfg: &MsdaConfig,
    seed: u64,
    step: f32,
    tol: GradCheckTolerances,
) -> Result<GradCheckReport, MsdaError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(MsdaError::BadStep(step));
    }
    let (p, s) = random_instance(
        cfg,
        Dtype::F32,
        seed,
        LocationStyle::OffLattice {
            margin: LATTICE_MARGIN,
        },
    );
    let g = random_grad_output(cfg, seed ^ 0x5bf0_3635);
    let analytic = msda_backward_ref(&p, &s, cfg, &g)?;
    let numeric = finite_difference_grads(&p, &s, cfg, &g, step)?;
    Ok(compare_grads(&analytic, &numeric, tol))
}

/// All three gradients of `⟨grad_output, forward⟩` by central differences.
/// O(#inputs) forward evaluations: only feasible on small instances.
///
/// The difference quotient is evaluated on a float64 mirror of the forward
/// (same sampling convention, straight-line triple loop). At step 1e-3 an f32
/// evaluation would bury the quotient in rounding noise an order of magnitude
/// above the 1e-5 absolute floor; in f64 the quotient is exact up to ~1e-13
/// because the sampled value is affine in each perturbed coordinate.
pub fn finite_difference_grads(
    p: &FeaturePyramid,
    s: &SamplingTensors,
    cfg: &MsdaConfig,
    grad_output: &Tensor,
    step: f32,
) -> Result<MsdaGrads, MsdaError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(MsdaError::BadStep(step));
    }
    if p.layout() != Layout::ChannelLast {
        return Err(MsdaError::WrongLayout(p.layout()));
    }
    crate::reference::check_shapes(p, s, cfg)?;
    let step = step as f64;

    let base_value: Vec<f64> = p.storage().to_f32_vec().iter().map(|&v| v as f64).collect();
    let base_locs: Vec<f64> = s.locations.to_f32_vec().iter().map(|&v| v as f64).collect();
    let base_weights: Vec<f64> = s.weights.to_f32_vec().iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = grad_output.to_f32_vec().iter().map(|&v| v as f64).collect();

    let eval = ScalarEval {
        cfg,
        grad_output: &g,
    };

    let central = |plus: f64, minus: f64| ((plus - minus) / (2.0 * step)) as f32;

    let mut grad_value = vec![0.0f32; base_value.len()];
    {
        let mut v = base_value.clone();
        for i in 0..v.len() {
            let orig = v[i];
            v[i] = orig + step;
            let fp = eval.run(&v, &base_locs, &base_weights);
            v[i] = orig - step;
            let fm = eval.run(&v, &base_locs, &base_weights);
            v[i] = orig;
            grad_value[i] = central(fp, fm);
        }
    }

    let mut grad_locations = vec![0.0f32; base_locs.len()];
    {
        let mut l = base_locs.clone();
        for i in 0..l.len() {
            let orig = l[i];
            l[i] = orig + step;
            let fp = eval.run(&base_value, &l, &base_weights);
            l[i] = orig - step;
            let fm = eval.run(&base_value, &l, &base_weights);
            l[i] = orig;
            grad_locations[i] = central(fp, fm);
        }
    }

    let mut grad_weights = vec![0.0f32; base_weights.len()];
    {
        let mut w = base_weights.clone();
        for i in 0..w.len() {
            let orig = w[i];
            w[i] = orig + step;
            let fp = eval.run(&base_value, &base_locs, &w);
            w[i] = orig - step;
            let fm = eval.run(&base_value, &base_locs, &w);
            w[i] = orig;
            grad_weights[i] = central(fp, fm);
        }
    }

    Ok(MsdaGrads {
        grad_value: Tensor::from_f32(p.storage().dims().to_vec(), grad_value).expect("shape"),
        grad_locations: Tensor::from_f32(s.locations.dims().to_vec(), grad_locations)
            .expect("shape"),
        grad_weights: Tensor::from_f32(s.weights.dims().to_vec(), grad_weights).expect("shape"),
    })
}

/// f64 evaluation of `⟨grad_output, forward(value, locations, weights)⟩`,
/// kept independent of the f32 kernel code it is used to check.
struct ScalarEval<'a> {
    cfg: &'a MsdaConfig,
    grad_output: &'a [f64],
}

impl ScalarEval<'_> {
    fn run(&self, value: &[f64], locs: &[f64], weights: &[f64]) -> f64 {
        let cfg = self.cfg;
        let (b_n, q_n, h_n, c_n) = (cfg.batch, cfg.queries, cfg.heads, cfg.channels);
        let l_n = cfg.levels.len();
        let p_n = cfg.points;
        let pixels = cfg.total_pixels();
        let embed = cfg.embed_dim();

        let mut total = 0.0f64;
        for b in 0..b_n {
            for q in 0..q_n {
                for h in 0..h_n {
                    for (li, level) in cfg.levels.iter().enumerate() {
                        let (h_i, w_i) = (level.height as i64, level.width as i64);
                        for pt in 0..p_n {
                            let sp = (((b * q_n + q) * h_n + h) * l_n + li) * p_n + pt;
                            let w_im = locs[sp * 2] * level.width as f64 - 0.5;
                            let h_im = locs[sp * 2 + 1] * level.height as f64 - 0.5;
                            let w0 = w_im.floor();
                            let h0 = h_im.floor();
                            let lw = w_im - w0;
                            let lh = h_im - h0;
                            let (w0, h0) = (w0 as i64, h0 as i64);
                            let aw = weights[sp];
                            for c in 0..c_n {
                                let mut sample = 0.0f64;
                                for (dh, dw, cw) in [
                                    (0, 0, (1.0 - lh) * (1.0 - lw)),
                                    (0, 1, (1.0 - lh) * lw),
                                    (1, 0, lh * (1.0 - lw)),
                                    (1, 1, lh * lw),
                                ] {
                                    let r = h0 + dh;
                                    let col = w0 + dw;
                                    if r >= 0 && r < h_i && col >= 0 && col < w_i {
                                        let pix = level.offset + (r * w_i + col) as usize;
                                        sample += cw
                                            * value[((b * pixels + pix) * h_n + h) * c_n + c];
                                    }
                                }
                                total += aw
                                    * sample
                                    * self.grad_output[(b * q_n + q) * embed + h * c_n + c];
                            }
                        }
                    }
                }
            }
        }
        total
    }
}

/// Component-wise comparison against the finite-difference side: a component
/// passes when `|a − n| ≤ abs_floor + rel · |n|`, and the reported relative
/// deviation is `|a − n| / |n|` wherever `|n|` clears the absolute floor.
pub fn compare_grads(
    analytic: &MsdaGrads,
    numeric: &MsdaGrads,
    tol: GradCheckTolerances,
) -> GradCheckReport {
    GradCheckReport {
        value: compare_tensor(&analytic.grad_value, &numeric.grad_value, tol),
        locations: compare_tensor(&analytic.grad_locations, &numeric.grad_locations, tol),
        weights: compare_tensor(&analytic.grad_weights, &numeric.grad_weights, tol),
    }
}

fn compare_tensor(a: &Tensor, n: &Tensor, tol: GradCheckTolerances) -> TensorDeviation {
    let av = a.as_f32();
    let nv = n.as_f32();
    debug_assert_eq!(av.len(), nv.len());
    let mut dev = TensorDeviation {
        max_abs: 0.0,
        max_rel: 0.0,
        worst_index: 0,
        pass: true,
    };
    for (i, (&x, &y)) in av.iter().zip(nv).enumerate() {
        let abs = (x - y).abs();
        if abs > dev.max_abs {
            dev.max_abs = abs;
            dev.worst_index = i;
        }
        if y.abs() >= tol.abs_floor {
            dev.max_rel = dev.max_rel.max(abs / y.abs());
        }
        if abs > tol.abs_floor + tol.rel * y.abs() {
            dev.pass = false;
        }
    }
    dev
}
