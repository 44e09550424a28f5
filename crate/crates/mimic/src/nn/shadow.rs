//! 64-bit reference forward pass, written with naive loops and kept
//! independent of the GEMM-based training path. Used by the
//! finite-difference gradient checks.

use super::model::Model;
use super::spec::{ArchitectureSpec, LayerShape, LayerSpec};
use crate::tensor::Tensor;

/// Mean cross-entropy of the model on a batch, computed end to end in f64.
/// `dropout_masks` replays the masks recorded by a traced f32 forward pass
/// so that both paths evaluate the same stochastic function.
pub fn loss_f64(
    model: &Model,
    batch: &Tensor,
    targets: &Tensor,
    dropout_masks: &[Option<&[f32]>],
) -> f64 {
    let spec = model.spec();
    let n = batch.shape()[0];
    let probs = forward_f64(spec, &model.params, batch.data(), n, dropout_masks);
    let classes = spec.num_classes().unwrap();
    let mut total = 0.0f64;
    for (p, t) in probs.chunks(classes).zip(targets.data().chunks(classes)) {
        for (&pi, &ti) in p.iter().zip(t) {
            if ti != 0.0 {
                total -= ti as f64 * (pi + super::model::EPS_LOG as f64).ln();
            }
        }
    }
    total / n as f64
}

fn forward_f64(
    spec: &ArchitectureSpec,
    params: &[Option<super::model::Param>],
    batch: &[f32],
    n: usize,
    dropout_masks: &[Option<&[f32]>],
) -> Vec<f64> {
    let shapes = spec.validate().expect("validated spec");
    let mut cur: Vec<f64> = batch.iter().map(|&v| v as f64).collect();
    let mut prev = spec.input_layer_shape().unwrap();
    for (i, layer) in spec.layers.iter().enumerate() {
        cur = match *layer {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                out_channels,
                padding,
            } => {
                let (c, h, w) = dims3(prev);
                let p = params[i].as_ref().unwrap();
                let weight: Vec<f64> = p.weight.data().iter().map(|&v| v as f64).collect();
                let bias: Vec<f64> = p.bias.data().iter().map(|&v| v as f64).collect();
                let oh = h + 2 * padding - kernel_h + 1;
                let ow = w + 2 * padding - kernel_w + 1;
                let mut out = vec![0.0f64; n * out_channels * oh * ow];
                for s in 0..n {
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[oc];
                                for ci in 0..c {
                                    for ky in 0..kernel_h {
                                        for kx in 0..kernel_w {
                                            let sy = oy + ky;
                                            let sx = ox + kx;
                                            if sy < padding
                                                || sx < padding
                                                || sy >= h + padding
                                                || sx >= w + padding
                                            {
                                                continue;
                                            }
                                            let xv = cur[((s * c + ci) * h + (sy - padding)) * w
                                                + (sx - padding)];
                                            let wv = weight[((oc * c + ci) * kernel_h + ky)
                                                * kernel_w
                                                + kx];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                                out[((s * out_channels + oc) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                out
            }
            LayerSpec::MaxPool { window } => {
                let (c, h, w) = dims3(prev);
                let oh = h / window;
                let ow = w / window;
                let mut out = vec![0.0f64; n * c * oh * ow];
                for s in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                for ky in 0..window {
                                    for kx in 0..window {
                                        let v = cur[((s * c + ci) * h + oy * window + ky) * w
                                            + ox * window
                                            + kx];
                                        if v > best {
                                            best = v;
                                        }
                                    }
                                }
                                out[((s * c + ci) * oh + oy) * ow + ox] = best;
                            }
                        }
                    }
                }
                out
            }
            LayerSpec::Dense { width } => {
                let in_w = prev.elements();
                let p = params[i].as_ref().unwrap();
                let weight: Vec<f64> = p.weight.data().iter().map(|&v| v as f64).collect();
                let bias: Vec<f64> = p.bias.data().iter().map(|&v| v as f64).collect();
                let mut out = vec![0.0f64; n * width];
                for s in 0..n {
                    for o in 0..width {
                        let mut acc = bias[o];
                        for j in 0..in_w {
                            acc += cur[s * in_w + j] * weight[o * in_w + j];
                        }
                        out[s * width + o] = acc;
                    }
                }
                out
            }
            LayerSpec::Relu => cur.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Dropout { .. } => match dropout_masks.get(i).copied().flatten() {
                Some(mask) => cur
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| v * m as f64)
                    .collect(),
                None => cur,
            },
            LayerSpec::Softmax { num_classes } => {
                let mut out = cur;
                for row in out.chunks_mut(num_classes) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                out
            }
        };
        prev = shapes[i];
    }
    cur
}

fn dims3(s: LayerShape) -> (usize, usize, usize) {
    match s {
        LayerShape::Spatial {
            channels,
            height,
            width,
        } => (channels, height, width),
        LayerShape::Flat { .. } => panic!("expected spatial shape"),
    }
}
