//! Shared test harness: finite-difference gradient oracle.

use mimic::nn::{shadow, Model, TrainMode};
use mimic::seed;
use mimic::Tensor;
use rand::Rng;

pub const FD_EPS: f32 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;

/// Central finite differences on the 64-bit shadow forward, compared with
/// the analytic gradients, on `coords` random coordinates per parameter
/// tensor. Returns the worst relative error seen.
pub fn fd_check(model: &Model, batch: &Tensor, targets: &Tensor, coords: usize, rng_seed: u64) -> f64 {
    let mut rng = seed::rng(rng_seed);
    let trace = model
        .forward_traced(batch, TrainMode::Train, &mut seed::rng(rng_seed ^ 0xd0d0))
        .unwrap();
    let masks = trace.dropout_masks();
    let grads = model.backward(&trace, targets).unwrap();

    let mut worst = 0.0f64;
    let layer_count = model.params.len();
    for li in 0..layer_count {
        let (wlen, blen) = match model.params[li].as_ref() {
            Some(p) => (p.weight.len(), p.bias.len()),
            None => continue,
        };
        for &is_bias in &[false, true] {
            let len = if is_bias { blen } else { wlen };
            for _ in 0..coords {
                let at = rng.gen_range(0..len);
                let mut probe = model.clone();
                let original = {
                    let p = probe.params[li].as_ref().unwrap();
                    if is_bias { p.bias.data()[at] } else { p.weight.data()[at] }
                };
                let set = |m: &mut Model, v: f32| {
                    let p = m.params[li].as_mut().unwrap();
                    let slot = if is_bias {
                        &mut p.bias.data_mut()[at]
                    } else {
                        &mut p.weight.data_mut()[at]
                    };
                    *slot = v;
                };
                set(&mut probe, original + FD_EPS);
                let plus = shadow::loss_f64(&probe, batch, targets, &masks);
                set(&mut probe, original - FD_EPS);
                let minus = shadow::loss_f64(&probe, batch, targets, &masks);
                let fd = (plus - minus) / (2.0 * FD_EPS as f64);

                let g = grads.layers[li].as_ref().unwrap();
                let analytic = if is_bias { g.bias.data()[at] } else { g.weight.data()[at] } as f64;
                let denom = analytic.abs().max(fd.abs()).max(1e-3);
                let rel = (analytic - fd).abs() / denom;
                worst = worst.max(rel);
            }
        }
    }
    worst
}
