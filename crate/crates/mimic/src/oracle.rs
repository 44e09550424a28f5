//! The black-box mentor abstraction and its defense/trap wrappers.
//!
//! The attacker-facing surface is exactly `OracleInfo` plus `predict`;
//! nothing else about the wrapped model leaks through this module.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::nn::{Model, TrainMode};
use crate::seed;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("query rejected: expected input shape {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("capability: {0}")]
    Capability(String),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

/// Either a bare class label or a full probability vector; the entire
/// information channel between mentor and attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleResponse {
    Label(usize),
    Probabilities(Vec<f32>),
}

impl OracleResponse {
    /// The predicted class, regardless of response kind. Ties in a
    /// probability vector break toward the lowest index.
    pub fn label(&self) -> usize {
        match self {
            OracleResponse::Label(l) => *l,
            OracleResponse::Probabilities(p) => Tensor::argmax_row(p),
        }
    }

    pub fn probabilities(&self) -> Option<&[f32]> {
        match self {
            OracleResponse::Probabilities(p) => Some(p),
            OracleResponse::Label(_) => None,
        }
    }
}

pub trait Oracle: Send + Sync {
    fn info(&self) -> OracleInfo;
    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError>;
}

impl<T: Oracle + ?Sized> Oracle for &T {
    fn info(&self) -> OracleInfo {
        (**self).info()
    }
    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
        (**self).predict(input)
    }
}

impl<T: Oracle + ?Sized> Oracle for Box<T> {
    fn info(&self) -> OracleInfo {
        (**self).info()
    }
    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
        (**self).predict(input)
    }
}

/// Wraps a trained model; the model itself stays private.
pub struct ModelOracle {
    model: Model,
    info: OracleInfo,
}

impl ModelOracle {
    pub fn new(model: Model) -> Self {
        let info = OracleInfo {
            input_shape: model.spec().input_shape.clone(),
            num_classes: model.num_classes(),
        };
        Self { model, info }
    }
}

impl Oracle for ModelOracle {
    fn info(&self) -> OracleInfo {
        self.info.clone()
    }

    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
        if input.shape() != self.info.input_shape {
            return Err(OracleError::Shape {
                expected: self.info.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let batch = Tensor::new(shape, input.data().to_vec()).expect("shape product unchanged");
        // dropout is inert in eval mode, so the rng is never consulted
        let probs = self
            .model
            .forward(&batch, TrainMode::Eval, &mut seed::rng(0))
            .map_err(|e| OracleError::Capability(e.to_string()))?;
        Ok(OracleResponse::Probabilities(probs.into_data()))
    }
}

/// Strips responses down to the predicted class index.
pub struct LabelOnly<O> {
    inner: O,
}

pub fn wrap_label_only<O: Oracle>(inner: O) -> LabelOnly<O> {
    LabelOnly { inner }
}

impl<O: Oracle> Oracle for LabelOnly<O> {
    fn info(&self) -> OracleInfo {
        self.inner.info()
    }

    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
        Ok(OracleResponse::Label(self.inner.predict(input)?.label()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Max perturbation magnitude per class, in [0, 1).
    pub psi_scale: f32,
    pub seed: u64,
}

const PROB_FLOOR: f32 = 1e-6;
const MAX_REJECTIONS: usize = 100;

/// Adds zero-mean noise to the softmax vector, rejection-sampled until the
/// argmax is preserved, then renormalized.
pub struct PerturbedSoftmax<O> {
    inner: O,
    cfg: PerturbationConfig,
}

pub fn wrap_perturbed_softmax<O: Oracle>(inner: O, cfg: PerturbationConfig) -> PerturbedSoftmax<O> {
    assert!(
        (0.0..1.0).contains(&cfg.psi_scale),
        "psi_scale must be in [0,1)"
    );
    PerturbedSoftmax { inner, cfg }
}

impl<O: Oracle> Oracle for PerturbedSoftmax<O> {
    fn info(&self) -> OracleInfo {
        self.inner.info()
    }

    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
        let probs = match self.inner.predict(input)? {
            OracleResponse::Probabilities(p) => p,
            OracleResponse::Label(_) => {
                return Err(OracleError::Capability(
                    "perturbation wrapper needs a probability-bearing oracle".into(),
                ))
            }
        };
        if self.cfg.psi_scale == 0.0 {
            return Ok(OracleResponse::Probabilities(probs));
        }
        let target = Tensor::argmax_row(&probs);
        // per-call stream derived from (seed, input hash): concurrent
        // callers and call order cannot change the answer
        let mut rng = seed::rng(seed::derive2(
            self.cfg.seed,
            "psi",
            seed::hash_f32s(input.data()),
        ));
        for _ in 0..MAX_REJECTIONS {
            let mut candidate: Vec<f32> = probs
                .iter()
                .map(|&p| {
                    (p + rng.gen_range(-self.cfg.psi_scale..=self.cfg.psi_scale))
                        .clamp(PROB_FLOOR, 1.0)
                })
                .collect();
            let sum: f32 = candidate.iter().sum();
            for v in candidate.iter_mut() {
                *v /= sum;
            }
            if Tensor::argmax_row(&candidate) == target {
                return Ok(OracleResponse::Probabilities(candidate));
            }
        }
        eprintln!("warning: perturbation rejection limit reached, returning unperturbed softmax");
        Ok(OracleResponse::Probabilities(probs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    /// Patch pixel values, shape (C, ph, pw).
    pub patch: Tensor,
    /// Top-left placement (row, col).
    pub position: (usize, usize),
    pub trigger_label: usize,
    /// Probability mass put on the trigger label, in (0,1].
    pub confidence: f32,
}

/// Per-pixel tolerance for trigger detection: one 8-bit quantization step.
pub const TRIGGER_TOLERANCE: f32 = 1.0 / 255.0;

impl TriggerSpec {
    pub fn validate(&self, info: &OracleInfo) -> Result<(), String> {
        let ps = self.patch.shape();
        let is_ = &info.input_shape;
        if ps.len() != 3 || is_.len() != 3 {
            return Err("trigger patch and input must be (C,H,W)".into());
        }
        if ps[0] != is_[0]
            || self.position.0 + ps[1] > is_[1]
            || self.position.1 + ps[2] > is_[2]
        {
            return Err(format!(
                "patch {ps:?} at {:?} does not fit input {is_:?}",
                self.position
            ));
        }
        if self.trigger_label >= info.num_classes {
            return Err("trigger label out of range".into());
        }
        if !(0.0 < self.confidence && self.confidence <= 1.0) {
            return Err("confidence must be in (0,1]".into());
        }
        Ok(())
    }

    pub fn matches(&self, input: &Tensor) -> bool {
        let ps = self.patch.shape();
        let (c, ph, pw) = (ps[0], ps[1], ps[2]);
        let is_ = input.shape();
        let (h, w) = (is_[1], is_[2]);
        let (row, col) = self.position;
        for ci in 0..c {
            for py in 0..ph {
                for px in 0..pw {
                    let want = self.patch.data()[(ci * ph + py) * pw + px];
                    let got = input.data()[(ci * h + row + py) * w + col + px];
                    if (want - got).abs() > TRIGGER_TOLERANCE {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Copy of `input` with the patch stamped in at `position`.
    pub fn stamp(&self, input: &Tensor) -> Tensor {
        let ps = self.patch.shape();
        let (c, ph, pw) = (ps[0], ps[1], ps[2]);
        let is_ = input.shape();
        let (h, w) = (is_[1], is_[2]);
        let (row, col) = self.position;
        let mut out = input.clone();
        for ci in 0..c {
            for py in 0..ph {
                for px in 0..pw {
                    out.data_mut()[(ci * h + row + py) * w + col + px] =
                        self.patch.data()[(ci * ph + py) * pw + px];
                }
            }
        }
        out
    }

    /// A default 4x4 high-contrast trigger in the top-left corner.
    pub fn checker_4x4(channels: usize, trigger_label: usize) -> Self {
        let mut patch = Tensor::zeros(vec![channels, 4, 4]);
        for ci in 0..channels {
            for y in 0..4 {
                for x in 0..4 {
                    patch.data_mut()[(ci * 4 + y) * 4 + x] = ((x + y) % 2) as f32;
                }
            }
        }
        Self {
            patch,
            position: (0, 0),
            trigger_label,
            confidence: 0.99,
        }
    }
}

/// Hidden-key behavior: inputs carrying the trigger patch get a high
/// certainty response on an unrelated label; everything else passes through.
pub struct Watermarked<O> {
    inner: O,
    trigger: TriggerSpec,
}

pub fn wrap_watermark<O: Oracle>(inner: O, trigger: TriggerSpec) -> Watermarked<O> {
    trigger
        .validate(&inner.info())
        .expect("trigger spec must fit the oracle");
    Watermarked { inner, trigger }
}

impl<O: Oracle> Oracle for Watermarked<O> {
    fn info(&self) -> OracleInfo {
        self.inner.info()
    }

    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
        let info = self.inner.info();
        if input.shape() != info.input_shape {
            return Err(OracleError::Shape {
                expected: info.input_shape,
                actual: input.shape().to_vec(),
            });
        }
        if self.trigger.matches(input) {
            let k = info.num_classes;
            let rest = (1.0 - self.trigger.confidence) / (k.saturating_sub(1).max(1)) as f32;
            let mut probs = vec![rest; k];
            probs[self.trigger.trigger_label] = self.trigger.confidence;
            return Ok(OracleResponse::Probabilities(probs));
        }
        self.inner.predict(input)
    }
}

/// Counts queries passing through; used for query accounting.
pub struct Counting<O> {
    inner: O,
    count: AtomicU64,
}

impl<O: Oracle> Counting<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn queries(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl<O: Oracle> Oracle for Counting<O> {
    fn info(&self) -> OracleInfo {
        self.inner.info()
    }

    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(input)
    }
}
