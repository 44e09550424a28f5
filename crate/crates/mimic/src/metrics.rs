//! Accuracy, relative accuracy, student-mentor agreement, and the
//! watermark-evasion probe.

use std::fmt::Write as _;

use crate::data::LabeledDataset;
use crate::nn::{Model, NnError, TrainMode};
use crate::oracle::{Oracle, OracleError, TriggerSpec};
use crate::seed;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    Empty,
    #[error("mentor accuracy must be positive")]
    ZeroMentor,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
}

const EVAL_CHUNK: usize = 256;

/// Argmax predictions over a list of images, batched for throughput.
pub fn predict_labels(model: &Model, images: &[Tensor]) -> Result<Vec<usize>, MetricsError> {
    let mut labels = Vec::with_capacity(images.len());
    let classes = model.num_classes();
    for chunk in images.chunks(EVAL_CHUNK) {
        let batch = stack(chunk);
        let probs = model.forward(&batch, TrainMode::Eval, &mut seed::rng(0))?;
        for row in probs.data().chunks(classes) {
            labels.push(Tensor::argmax_row(row));
        }
    }
    Ok(labels)
}

/// Stack same-shape images into one (N, ...) batch tensor.
pub fn stack(images: &[Tensor]) -> Tensor {
    let shape = images[0].shape();
    let elems: usize = shape.iter().product();
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    let mut data = Vec::with_capacity(images.len() * elems);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(full, data).expect("uniform shapes")
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy(model: &Model, set: &LabeledDataset) -> Result<f64, MetricsError> {
    if set.is_empty() {
        return Err(MetricsError::Empty);
    }
    let predicted = predict_labels(model, &set.images)?;
    let hits = predicted
        .iter()
        .zip(&set.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// Student accuracy divided by mentor accuracy; may exceed 1.
pub fn relative_accuracy(student_acc: f64, mentor_acc: f64) -> Result<f64, MetricsError> {
    if mentor_acc <= 0.0 {
        return Err(MetricsError::ZeroMentor);
    }
    Ok(student_acc / mentor_acc)
}

/// Fraction of probe inputs where the student's argmax equals the oracle's
/// label.
pub fn agreement(
    student: &Model,
    oracle: &dyn Oracle,
    probe_inputs: &[Tensor],
) -> Result<f64, MetricsError> {
    if probe_inputs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let student_labels = predict_labels(student, probe_inputs)?;
    let mut hits = 0usize;
    for (input, &s) in probe_inputs.iter().zip(&student_labels) {
        if oracle.predict(input)?.label() == s {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe_inputs.len() as f64)
}

/// Stamp the trigger onto each base input and report the fraction the
/// model classifies as the trigger label.
pub fn watermark_activation_rate(
    model: &Model,
    trigger: &TriggerSpec,
    base_inputs: &[Tensor],
) -> Result<f64, MetricsError> {
    if base_inputs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let stamped: Vec<Tensor> = base_inputs.iter().map(|x| trigger.stamp(x)).collect();
    let labels = predict_labels(model, &stamped)?;
    let hits = labels.iter().filter(|&&l| l == trigger.trigger_label).count();
    Ok(hits as f64 / base_inputs.len() as f64)
}

/// Same probe run against an oracle instead of a local model.
pub fn watermark_activation_rate_oracle(
    oracle: &dyn Oracle,
    trigger: &TriggerSpec,
    base_inputs: &[Tensor],
) -> Result<f64, MetricsError> {
    if base_inputs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut hits = 0usize;
    for x in base_inputs {
        if oracle.predict(&trigger.stamp(x))?.label() == trigger.trigger_label {
            hits += 1;
        }
    }
    Ok(hits as f64 / base_inputs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub test_accuracy: f64,
    pub mentor_accuracy: f64,
    pub relative_accuracy: f64,
    pub agreement: f64,
    pub trigger_activation_student: f64,
    pub trigger_activation_mentor: f64,
    pub n_eval: usize,
}

impl EvalReport {
    /// key:value rendering, full precision.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "test_accuracy:{}", self.test_accuracy);
        let _ = writeln!(s, "mentor_accuracy:{}", self.mentor_accuracy);
        let _ = writeln!(s, "relative_accuracy:{}", self.relative_accuracy);
        let _ = writeln!(s, "agreement:{}", self.agreement);
        let _ = writeln!(s, "trigger_activation_student:{}", self.trigger_activation_student);
        let _ = writeln!(s, "trigger_activation_mentor:{}", self.trigger_activation_mentor);
        let _ = writeln!(s, "n_eval:{}", self.n_eval);
        s
    }

    pub const CSV_HEADER: &'static str = "test_accuracy,mentor_accuracy,relative_accuracy,agreement,trigger_activation_student,trigger_activation_mentor,n_eval";

    /// CSV row, 4 decimal places.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            self.test_accuracy,
            self.mentor_accuracy,
            self.relative_accuracy,
            self.agreement,
            self.trigger_activation_student,
            self.trigger_activation_mentor,
            self.n_eval
        )
    }
}
