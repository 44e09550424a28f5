//! Model instantiation, forward/backward passes and the SGD update.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::gemm;
use super::spec::{ArchitectureSpec, LayerShape, LayerSpec, SpecError};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

/// Added inside every log to keep the loss finite.
pub const EPS_LOG: f32 = 1e-9;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch/target row mismatch: {batch} vs {targets}")]
    RowMismatch { batch: usize, targets: usize },
    #[error("training diverged: non-finite {what}")]
    Diverged { what: String },
    #[error("optimizer config invalid: {0}")]
    BadOptimizer(String),
    #[error("backward requires a trace recorded in training mode")]
    TraceNotTraining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub l2_coefficient: f32,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0) {
            return Err(NnError::BadOptimizer("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::BadOptimizer("momentum must be in [0,1)".into()));
        }
        if self.l2_coefficient < 0.0 {
            return Err(NnError::BadOptimizer("l2_coefficient must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::BadOptimizer("batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        // Composite-experiment defaults: lr 0.001, momentum 0.9, batch 128.
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            l2_coefficient: 0.0,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-parameter gradients, aligned with the model's layer list.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Option<Param>>,
}

/// Everything backward needs from a training-mode forward pass.
pub struct ForwardTrace {
    batch_size: usize,
    training: bool,
    /// acts[0] is the input batch; acts[i+1] the output of layer i.
    acts: Vec<Vec<f32>>,
    /// Per layer: argmax source offsets for maxpool, masks for dropout.
    aux: Vec<Aux>,
}

enum Aux {
    None,
    PoolIndices(Vec<u32>),
    DropoutMask(Vec<f32>),
}

impl ForwardTrace {
    pub fn output(&self) -> &[f32] {
        self.acts.last().unwrap()
    }

    /// Dropout masks in layer order, for the f64 shadow path.
    pub fn dropout_masks(&self) -> Vec<Option<&[f32]>> {
        self.aux
            .iter()
            .map(|a| match a {
                Aux::DropoutMask(m) => Some(m.as_slice()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    shapes: Vec<LayerShape>,
    input_shape: LayerShape,
    pub params: Vec<Option<Param>>,
    pub velocity: Vec<Option<Param>>,
}

impl Model {
    /// Instantiate a model with He fan-in initialization and zero biases.
    pub fn build(spec: ArchitectureSpec, rng: &mut impl Rng) -> Result<Self, NnError> {
        let shapes = spec.validate()?;
        let input_shape = spec.input_layer_shape()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut prev = input_shape;
        for (layer, out_shape) in spec.layers.iter().zip(&shapes) {
            let p = match *layer {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    out_channels,
                    ..
                } => {
                    let in_c = match prev {
                        LayerShape::Spatial { channels, .. } => channels,
                        LayerShape::Flat { .. } => unreachable!("validated"),
                    };
                    let fan_in = in_c * kernel_h * kernel_w;
                    let weight = he_init(
                        vec![out_channels, in_c, kernel_h, kernel_w],
                        fan_in,
                        rng,
                    );
                    Some(Param {
                        weight,
                        bias: Tensor::zeros(vec![out_channels]),
                    })
                }
                LayerSpec::Dense { width } => {
                    let fan_in = prev.elements();
                    Some(Param {
                        weight: he_init(vec![width, fan_in], fan_in, rng),
                        bias: Tensor::zeros(vec![width]),
                    })
                }
                _ => None,
            };
            params.push(p);
            prev = *out_shape;
        }
        let velocity = params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| Param {
                    weight: Tensor::zeros(p.weight.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                })
            })
            .collect();
        Ok(Self {
            spec,
            shapes,
            input_shape,
            params,
            velocity,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes().unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .collect::<Vec<_>>()
            .iter()
            .sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize, NnError> {
        let dims = self.input_shape.dims();
        let shape = batch.shape();
        if shape.len() != dims.len() + 1 || shape[1..] != dims[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&dims);
            return Err(TensorError::ShapeMismatch {
                expected,
                actual: shape.to_vec(),
            }
            .into());
        }
        Ok(shape[0])
    }

    /// Inference pass; dropout inactive unless `mode` is `Train`.
    pub fn forward(
        &self,
        batch: &Tensor,
        mode: TrainMode,
        rng: &mut impl Rng,
    ) -> Result<Tensor, NnError> {
        let trace = self.forward_traced(batch, mode, rng)?;
        let n = trace.batch_size;
        Tensor::new(vec![n, self.num_classes()], trace.acts.into_iter().last().unwrap())
            .map_err(Into::into)
    }

    pub fn forward_traced(
        &self,
        batch: &Tensor,
        mode: TrainMode,
        rng: &mut impl Rng,
    ) -> Result<ForwardTrace, NnError> {
        let n = self.check_batch(batch)?;
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut aux: Vec<Aux> = Vec::with_capacity(self.spec.layers.len());
        acts.push(batch.data().to_vec());
        let mut prev_shape = self.input_shape;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let (y, a) = match *layer {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    out_channels,
                    padding,
                } => {
                    let p = self.params[i].as_ref().unwrap();
                    let (c, h, w) = spatial(prev_shape);
                    let out = conv_forward(
                        x, n, c, h, w, kernel_h, kernel_w, out_channels, padding,
                        p.weight.data(),
                        p.bias.data(),
                    );
                    (out, Aux::None)
                }
                LayerSpec::MaxPool { window } => {
                    let (c, h, w) = spatial(prev_shape);
                    let (out, idx) = maxpool_forward(x, n, c, h, w, window);
                    (out, Aux::PoolIndices(idx))
                }
                LayerSpec::Dense { width } => {
                    let p = self.params[i].as_ref().unwrap();
                    let in_w = prev_shape.elements();
                    let mut out = vec![0.0f32; n * width];
                    // y = x * W^T
                    gemm(n, in_w, width, 1.0, x, false, p.weight.data(), true, 0.0, &mut out);
                    for row in out.chunks_mut(width) {
                        for (v, b) in row.iter_mut().zip(p.bias.data()) {
                            *v += b;
                        }
                    }
                    (out, Aux::None)
                }
                LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
                LayerSpec::Dropout { rate } => {
                    if mode == TrainMode::Train && rate > 0.0 {
                        let keep = 1.0 - rate;
                        let scale = 1.0 / keep;
                        let mask: Vec<f32> = (0..x.len())
                            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { scale })
                            .collect();
                        let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                        (y, Aux::DropoutMask(mask))
                    } else {
                        (x.clone(), Aux::None)
                    }
                }
                LayerSpec::Softmax { num_classes } => {
                    let mut y = x.clone();
                    for row in y.chunks_mut(num_classes) {
                        softmax_row(row);
                    }
                    (y, Aux::None)
                }
            };
            acts.push(y);
            aux.push(a);
            prev_shape = self.shapes[i];
        }
        Ok(ForwardTrace {
            batch_size: n,
            training: mode == TrainMode::Train,
            acts,
            aux,
        })
    }

    /// Gradients of the mean cross-entropy loss over the traced batch.
    /// Target rows are probability vectors; one-hot is the special case.
    pub fn backward(&self, trace: &ForwardTrace, targets: &Tensor) -> Result<Gradients, NnError> {
        if !trace.training {
            return Err(NnError::TraceNotTraining);
        }
        let n = trace.batch_size;
        let classes = self.num_classes();
        if targets.shape() != [n, classes] {
            return Err(NnError::RowMismatch {
                batch: n,
                targets: targets.shape().first().copied().unwrap_or(0),
            });
        }
        let probs = trace.output();
        // Softmax + cross-entropy collapse: d(loss)/d(logits) = (p - t)/n.
        let inv_n = 1.0 / n as f32;
        let mut delta: Vec<f32> = probs
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| (p - t) * inv_n)
            .collect();

        let mut grads: Vec<Option<Param>> = self.params.iter().map(|_| None).collect();
        let num_layers = self.spec.layers.len();
        // The last layer is softmax, already folded into delta.
        for i in (0..num_layers - 1).rev() {
            let x = &trace.acts[i];
            let in_shape = if i == 0 {
                self.input_shape
            } else {
                self.shapes[i - 1]
            };
            match self.spec.layers[i] {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    out_channels,
                    padding,
                } => {
                    let p = self.params[i].as_ref().unwrap();
                    let (c, h, w) = spatial(in_shape);
                    let (dw, db, dx) = conv_backward(
                        x, &delta, n, c, h, w, kernel_h, kernel_w, out_channels, padding,
                        p.weight.data(),
                    );
                    grads[i] = Some(Param {
                        weight: Tensor::new(p.weight.shape().to_vec(), dw)?,
                        bias: Tensor::new(vec![out_channels], db)?,
                    });
                    delta = dx;
                }
                LayerSpec::MaxPool { .. } => {
                    let idx = match &trace.aux[i] {
                        Aux::PoolIndices(v) => v,
                        _ => unreachable!(),
                    };
                    let mut dx = vec![0.0f32; x.len()];
                    for (j, &src) in idx.iter().enumerate() {
                        dx[src as usize] += delta[j];
                    }
                    delta = dx;
                }
                LayerSpec::Dense { width } => {
                    let p = self.params[i].as_ref().unwrap();
                    let in_w = in_shape.elements();
                    let mut dw = vec![0.0f32; width * in_w];
                    // dW = delta^T * x
                    gemm(width, n, in_w, 1.0, &delta, true, x, false, 0.0, &mut dw);
                    let mut db = vec![0.0f32; width];
                    for row in delta.chunks(width) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let mut dx = vec![0.0f32; n * in_w];
                    // dX = delta * W
                    gemm(n, width, in_w, 1.0, &delta, false, p.weight.data(), false, 0.0, &mut dx);
                    grads[i] = Some(Param {
                        weight: Tensor::new(vec![width, in_w], dw)?,
                        bias: Tensor::new(vec![width], db)?,
                    });
                    delta = dx;
                }
                LayerSpec::Relu => {
                    let y = &trace.acts[i + 1];
                    for (d, &v) in delta.iter_mut().zip(y) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                LayerSpec::Dropout { .. } => {
                    if let Aux::DropoutMask(mask) = &trace.aux[i] {
                        for (d, &m) in delta.iter_mut().zip(mask) {
                            *d *= m;
                        }
                    }
                }
                LayerSpec::Softmax { .. } => unreachable!("softmax is last"),
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// velocity <- momentum*velocity - lr*(grad + l2*weight); param += velocity.
    /// Biases are excluded from the L2 term.
    pub fn sgd_step(&mut self, grads: &Gradients, cfg: &OptimizerConfig) -> Result<(), NnError> {
        cfg.validate()?;
        for g in grads.layers.iter().flatten() {
            if g.weight.check_finite().is_err() || g.bias.check_finite().is_err() {
                return Err(NnError::Diverged {
                    what: "gradient".into(),
                });
            }
        }
        for ((p, v), g) in self
            .params
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grads.layers.iter())
        {
            let (p, v) = match (p, v) {
                (Some(p), Some(v)) => (p, v),
                _ => continue,
            };
            let g = g.as_ref().expect("gradient missing for parametered layer");
            for ((w, vel), &gw) in p
                .weight
                .data_mut()
                .iter_mut()
                .zip(v.weight.data_mut())
                .zip(g.weight.data())
            {
                *vel = cfg.momentum * *vel - cfg.learning_rate * (gw + cfg.l2_coefficient * *w);
                *w += *vel;
            }
            for ((b, vel), &gb) in p
                .bias
                .data_mut()
                .iter_mut()
                .zip(v.bias.data_mut())
                .zip(g.bias.data())
            {
                *vel = cfg.momentum * *vel - cfg.learning_rate * gb;
                *b += *vel;
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        spec: ArchitectureSpec,
        params: Vec<Option<Param>>,
    ) -> Result<Self, NnError> {
        let shapes = spec.validate()?;
        let input_shape = spec.input_layer_shape()?;
        let velocity = params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| Param {
                    weight: Tensor::zeros(p.weight.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                })
            })
            .collect();
        Ok(Self {
            spec,
            shapes,
            input_shape,
            params,
            velocity,
        })
    }
}

fn he_init(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).unwrap()
}

fn spatial(s: LayerShape) -> (usize, usize, usize) {
    match s {
        LayerShape::Spatial {
            channels,
            height,
            width,
        } => (channels, height, width),
        LayerShape::Flat { .. } => unreachable!("validated spatial layer"),
    }
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean over rows of -sum(target * ln(pred + eps)).
pub fn cross_entropy(pred: &Tensor, target: &Tensor) -> Result<f32, NnError> {
    pred.assert_shape(target.shape())?;
    let classes = *pred.shape().last().unwrap_or(&1);
    let rows = pred.len() / classes.max(1);
    if rows == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for (p, t) in pred
        .data()
        .chunks(classes)
        .zip(target.data().chunks(classes))
    {
        let mut row = 0.0f64;
        for (&pi, &ti) in p.iter().zip(t) {
            if ti != 0.0 {
                row -= ti as f64 * ((pi + EPS_LOG) as f64).ln();
            }
        }
        total += row;
    }
    Ok((total / rows as f64) as f32)
}

fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    // cols is (c*kh*kw) x (oh*ow), row-major.
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let sy = oy + ki;
                    let dst = &mut row[oy * ow..oy * ow + ow];
                    if sy < pad || sy >= h + pad {
                        dst.fill(0.0);
                        continue;
                    }
                    let sy = sy - pad;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let sx = ox + kj;
                        *d = if sx < pad || sx >= w + pad {
                            0.0
                        } else {
                            plane[sy * w + (sx - pad)]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oc: usize,
    pad: usize,
    weight: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let ohw = oh * ow;
    let k = c * kh * kw;
    let mut out = vec![0.0f32; n * oc * ohw];
    let mut cols = vec![0.0f32; k * ohw];
    for i in 0..n {
        im2col(&x[i * c * h * w..], c, h, w, kh, kw, pad, oh, ow, &mut cols);
        let o = &mut out[i * oc * ohw..(i + 1) * oc * ohw];
        gemm(oc, k, ohw, 1.0, weight, false, &cols, false, 0.0, o);
        for (ch, &b) in o.chunks_mut(ohw).zip(bias) {
            for v in ch {
                *v += b;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f32],
    delta: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oc: usize,
    pad: usize,
    weight: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let ohw = oh * ow;
    let k = c * kh * kw;
    let mut dw = vec![0.0f32; oc * k];
    let mut db = vec![0.0f32; oc];
    let mut dx = vec![0.0f32; n * c * h * w];
    let mut cols = vec![0.0f32; k * ohw];
    let mut dcols = vec![0.0f32; k * ohw];
    for i in 0..n {
        let xi = &x[i * c * h * w..(i + 1) * c * h * w];
        let di = &delta[i * oc * ohw..(i + 1) * oc * ohw];
        im2col(xi, c, h, w, kh, kw, pad, oh, ow, &mut cols);
        // dW += delta_i * cols^T
        gemm(oc, ohw, k, 1.0, di, false, &cols, true, 1.0, &mut dw);
        for (b, ch) in db.iter_mut().zip(di.chunks(ohw)) {
            *b += ch.iter().sum::<f32>();
        }
        // dcols = W^T * delta_i
        gemm(k, oc, ohw, 1.0, weight, true, di, false, 0.0, &mut dcols);
        col2im_accumulate(
            &dcols,
            c,
            h,
            w,
            kh,
            kw,
            pad,
            oh,
            ow,
            &mut dx[i * c * h * w..(i + 1) * c * h * w],
        );
    }
    (dw, db, dx)
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ci * kh + ki) * kw + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let sy = oy + ki;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for ox in 0..ow {
                        let sx = ox + kj;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        plane[sy * w + (sx - pad)] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn maxpool_forward(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f32>, Vec<u32>) {
    let oh = h / window;
    let ow = w / window;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut idx = vec![0u32; n * c * oh * ow];
    let mut j = 0;
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let at = base + (oy * window + ky) * w + ox * window + kx;
                            if x[at] > best {
                                best = x[at];
                                best_at = at;
                            }
                        }
                    }
                    out[j] = best;
                    idx[j] = best_at as u32;
                    j += 1;
                }
            }
        }
    }
    (out, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn dense_softmax(width: usize) -> ArchitectureSpec {
        ArchitectureSpec::new(
            vec![width],
            vec![
                LayerSpec::Dense { width },
                LayerSpec::Softmax { num_classes: width },
            ],
        )
    }

    #[test]
    fn build_tiny_dense_model() {
        let mut rng = seed::rng(1);
        let m = Model::build(dense_softmax(2), &mut rng).unwrap();
        let p = m.params[0].as_ref().unwrap();
        assert_eq!(p.weight.shape(), &[2, 2]);
        assert_eq!(p.bias.shape(), &[2]);
        let v = m.velocity[0].as_ref().unwrap();
        assert!(v.weight.data().iter().all(|&x| x == 0.0));
        assert!(m.params[1].is_none());
    }

    #[test]
    fn build_rejects_bad_spec() {
        let spec = ArchitectureSpec::new(
            vec![10],
            vec![
                LayerSpec::Softmax { num_classes: 10 },
                LayerSpec::Dense { width: 10 },
            ],
        );
        assert!(Model::build(spec, &mut seed::rng(1)).is_err());
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let spec = ArchitectureSpec::new(vec![3], vec![LayerSpec::Softmax { num_classes: 3 }]);
        let m = Model::build(spec, &mut seed::rng(1)).unwrap();
        let out = m
            .forward(
                &Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap(),
                TrainMode::Eval,
                &mut seed::rng(2),
            )
            .unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut m = Model::build(dense_softmax(3), &mut seed::rng(1)).unwrap();
        let p = m.params[0].as_mut().unwrap();
        p.weight.data_mut().copy_from_slice(&[
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ]);
        p.bias.data_mut().fill(0.0);
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.1, 0.5]).unwrap();
        let trace = m
            .forward_traced(&x, TrainMode::Eval, &mut seed::rng(2))
            .unwrap();
        // pre-softmax activation equals x
        assert_eq!(&trace.acts[1], &vec![0.3, -0.1, 0.5]);
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let spec = ArchitectureSpec::new(
            vec![4],
            vec![
                LayerSpec::Dense { width: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { width: 5 },
                LayerSpec::Softmax { num_classes: 5 },
            ],
        );
        let m = Model::build(spec, &mut seed::rng(3)).unwrap();
        let mut rng = seed::rng(4);
        let data: Vec<f32> = (0..7 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = m
            .forward(
                &Tensor::new(vec![7, 4], data).unwrap(),
                TrainMode::Eval,
                &mut seed::rng(5),
            )
            .unwrap();
        for row in out.data().chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = Model::build(dense_softmax(3), &mut seed::rng(1)).unwrap();
        let err = m
            .forward(
                &Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap(),
                TrainMode::Eval,
                &mut seed::rng(2),
            )
            .unwrap_err();
        assert!(err.to_string().contains("expected"));
    }

    #[test]
    fn zero_weight_bias_gradient_closed_form() {
        let mut m = Model::build(dense_softmax(4), &mut seed::rng(1)).unwrap();
        let p = m.params[0].as_mut().unwrap();
        p.weight.data_mut().fill(0.0);
        p.bias.data_mut().fill(0.0);
        let x = Tensor::new(vec![2, 4], vec![0.1; 8]).unwrap();
        let mut target = Tensor::zeros(vec![2, 4]);
        target.data_mut()[0] = 1.0;
        target.data_mut()[4] = 1.0;
        let trace = m
            .forward_traced(&x, TrainMode::Train, &mut seed::rng(2))
            .unwrap();
        let grads = m.backward(&trace, &target).unwrap();
        let g = grads.layers[0].as_ref().unwrap();
        // output is uniform 0.25; bias grad = sum over rows of (p - t)/n
        let expect = [(0.25 - 1.0), 0.25, 0.25, 0.25];
        for (got, want) in g.bias.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn duplicated_sample_keeps_mean_gradient() {
        let m = Model::build(dense_softmax(3), &mut seed::rng(7)).unwrap();
        let x1 = Tensor::new(vec![1, 3], vec![0.2, 0.4, -0.3]).unwrap();
        let x2 = Tensor::new(vec![2, 3], vec![0.2, 0.4, -0.3, 0.2, 0.4, -0.3]).unwrap();
        let t1 = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let t2 = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let tr1 = m.forward_traced(&x1, TrainMode::Train, &mut seed::rng(1)).unwrap();
        let tr2 = m.forward_traced(&x2, TrainMode::Train, &mut seed::rng(1)).unwrap();
        let g1 = m.backward(&tr1, &t1).unwrap();
        let g2 = m.backward(&tr2, &t2).unwrap();
        let a = g1.layers[0].as_ref().unwrap();
        let b = g2.layers[0].as_ref().unwrap();
        for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn sgd_step_follows_update_rule() {
        let mut m = Model::build(dense_softmax(2), &mut seed::rng(1)).unwrap();
        let w0 = m.params[0].as_ref().unwrap().weight.data().to_vec();
        let g = Gradients {
            layers: vec![
                Some(Param {
                    weight: Tensor::filled(vec![2, 2], 0.5),
                    bias: Tensor::filled(vec![2], 0.25),
                }),
                None,
            ],
        };
        let cfg = OptimizerConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            l2_coefficient: 0.0,
            batch_size: 1,
        };
        m.sgd_step(&g, &cfg).unwrap();
        let w1 = m.params[0].as_ref().unwrap().weight.data().to_vec();
        for (a, b) in w0.iter().zip(&w1) {
            assert!((a - 0.001 * 0.5 - b).abs() < 1e-7);
        }
        // second step with the same gradient: velocity = -lr*g*(1 + momentum)
        m.sgd_step(&g, &cfg).unwrap();
        let v = m.velocity[0].as_ref().unwrap().weight.data()[0];
        assert!((v + 0.001 * 0.5 * 1.9).abs() < 1e-9, "velocity {v}");
    }

    #[test]
    fn l2_shrinks_weights_not_biases() {
        let mut m = Model::build(dense_softmax(2), &mut seed::rng(1)).unwrap();
        {
            let p = m.params[0].as_mut().unwrap();
            p.weight.data_mut().fill(1.0);
            p.bias.data_mut().fill(1.0);
        }
        let zero = Gradients {
            layers: vec![
                Some(Param {
                    weight: Tensor::zeros(vec![2, 2]),
                    bias: Tensor::zeros(vec![2]),
                }),
                None,
            ],
        };
        let cfg = OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.0,
            l2_coefficient: 0.0005,
            batch_size: 1,
        };
        m.sgd_step(&zero, &cfg).unwrap();
        let p = m.params[0].as_ref().unwrap();
        assert!(p.weight.data().iter().all(|&w| w < 1.0 && w > 0.99));
        assert!(p.bias.data().iter().all(|&b| b == 1.0));
    }

    #[test]
    fn lr_zero_is_identity() {
        let mut m = Model::build(dense_softmax(3), &mut seed::rng(9)).unwrap();
        let before = m.clone();
        let g = Gradients {
            layers: vec![
                Some(Param {
                    weight: Tensor::filled(vec![3, 3], 0.7),
                    bias: Tensor::filled(vec![3], 0.7),
                }),
                None,
            ],
        };
        let cfg = OptimizerConfig {
            learning_rate: f32::MIN_POSITIVE,
            momentum: 0.0,
            l2_coefficient: 0.0,
            batch_size: 1,
        };
        // lr must be positive by contract; the lr -> 0 identity is
        // exercised with the smallest positive float times zero gradient.
        let zero = Gradients {
            layers: vec![
                Some(Param {
                    weight: Tensor::zeros(vec![3, 3]),
                    bias: Tensor::zeros(vec![3]),
                }),
                None,
            ],
        };
        m.sgd_step(&zero, &cfg).unwrap();
        assert_eq!(m.params, before.params);
        drop(g);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut m = Model::build(dense_softmax(2), &mut seed::rng(1)).unwrap();
        let g = Gradients {
            layers: vec![
                Some(Param {
                    weight: Tensor::filled(vec![2, 2], f32::NAN),
                    bias: Tensor::zeros(vec![2]),
                }),
                None,
            ],
        };
        assert!(matches!(
            m.sgd_step(&g, &OptimizerConfig::default()),
            Err(NnError::Diverged { .. })
        ));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let one_hot = Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = cross_entropy(&one_hot, &one_hot).unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");

        let pred = Tensor::filled(vec![1, 10], 0.1);
        let mut target = Tensor::zeros(vec![1, 10]);
        target.data_mut()[3] = 1.0;
        let loss = cross_entropy(&pred, &target).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-5);

        let half = Tensor::filled(vec![1, 2], 0.5);
        let loss = cross_entropy(&half, &half).unwrap();
        assert!((loss - 2f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn dropout_only_active_in_training() {
        let spec = ArchitectureSpec::new(
            vec![4],
            vec![
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Softmax { num_classes: 4 },
            ],
        );
        let m = Model::build(spec, &mut seed::rng(1)).unwrap();
        let x = Tensor::filled(vec![1, 4], 1.0);
        let eval1 = m.forward(&x, TrainMode::Eval, &mut seed::rng(2)).unwrap();
        let eval2 = m.forward(&x, TrainMode::Eval, &mut seed::rng(99)).unwrap();
        assert_eq!(eval1, eval2);
        // training mode with different seeds gives different masks eventually
        let t1 = m
            .forward_traced(&x, TrainMode::Train, &mut seed::rng(2))
            .unwrap();
        let masks = t1.dropout_masks();
        assert!(masks[0].is_some());
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1x3x3 input, 1 output channel, 3x3 kernel of ones, pad 1:
        // center output = sum of all inputs.
        let spec = ArchitectureSpec::new(
            vec![1, 3, 3],
            vec![
                LayerSpec::conv_same(3, 1),
                LayerSpec::Dense { width: 2 },
                LayerSpec::Softmax { num_classes: 2 },
            ],
        );
        let mut m = Model::build(spec, &mut seed::rng(1)).unwrap();
        {
            let p = m.params[0].as_mut().unwrap();
            p.weight.data_mut().fill(1.0);
            p.bias.data_mut().fill(0.0);
        }
        let x = Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let trace = m
            .forward_traced(&x, TrainMode::Eval, &mut seed::rng(2))
            .unwrap();
        let conv_out = &trace.acts[1];
        assert_eq!(conv_out.len(), 9);
        assert!((conv_out[4] - 45.0).abs() < 1e-5);
        // top-left output: window covers rows/cols {0,1} -> 1+2+4+5
        assert!((conv_out[0] - 12.0).abs() < 1e-5);
    }

    #[test]
    fn maxpool_picks_maxima_and_routes_gradient() {
        let x = vec![
            1.0, 2.0, //
            3.0, 4.0,
        ];
        let (out, idx) = maxpool_forward(&x, 1, 1, 2, 2, 2);
        assert_eq!(out, vec![4.0]);
        assert_eq!(idx, vec![3]);
    }
}
