//! Training loops: mentor training on labeled data, and the three
//! student pipelines (static soft-label, static hard-label, and
//! per-epoch composite regeneration).

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::composite::{epoch_stream, CompositeConfig, CompositeError};
use crate::data::{augment, AugmentPolicy, DataError, LabeledDataset, UnlabeledPool};
use crate::metrics::{self, MetricsError};
use crate::nn::{cross_entropy, ArchitectureSpec, Model, NnError, OptimizerConfig, TrainMode};
use crate::oracle::{Oracle, OracleError};
use crate::seed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config: {0}")]
    Config(String),
    #[error("oracle does not expose probabilities; soft-label mimicry needs them")]
    SoftUnavailable,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::nn::io::ModelIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    /// Supervised training of the victim on its own labeled data.
    MentorTrain,
    /// Static query set, full probability vectors as targets.
    StandardSoft,
    /// Static query set, argmax labels as one-hot targets.
    StandardHard,
    /// Fresh composite samples every epoch, argmax labels.
    CompositeHard,
}

impl PipelineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::MentorTrain => "mentor-train",
            PipelineMode::StandardSoft => "standard-soft",
            PipelineMode::StandardHard => "standard-hard",
            PipelineMode::CompositeHard => "composite-hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: PipelineMode,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Multiplicative decay applied every `lr_decay_step` epochs.
    pub lr_decay_gamma: f64,
    pub lr_decay_step: usize,
    pub augmentation: Option<AugmentPolicy>,
    pub composite: Option<CompositeConfig>,
    pub seed: u64,
}

impl RunConfig {
    /// Hard-label mimic recipe: no augmentation, no regularization.
    pub fn composite_defaults(seed: u64) -> Self {
        Self {
            mode: PipelineMode::CompositeHard,
            optimizer: OptimizerConfig {
                learning_rate: 0.001,
                momentum: 0.9,
                l2_coefficient: 0.0,
                batch_size: 128,
            },
            epochs: 40,
            lr_decay_gamma: 0.9,
            lr_decay_step: 10,
            augmentation: None,
            composite: Some(CompositeConfig { seed, ..CompositeConfig::default() }),
            seed,
        }
    }

    /// Supervised recipe: dropout handled by the architecture, L2 and
    /// augmentation here.
    pub fn standard_defaults(mode: PipelineMode, seed: u64) -> Self {
        Self {
            mode,
            optimizer: OptimizerConfig {
                learning_rate: 0.001,
                momentum: 0.9,
                l2_coefficient: 0.0005,
                batch_size: 128,
            },
            epochs: 40,
            lr_decay_gamma: 0.9,
            lr_decay_step: 10,
            augmentation: Some(AugmentPolicy::default()),
            composite: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        self.optimizer.validate()?;
        if let Some(a) = &self.augmentation {
            a.validate().map_err(TrainerError::Config)?;
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return Err(TrainerError::Config(format!(
                "lr_decay_gamma {} outside (0, 1]",
                self.lr_decay_gamma
            )));
        }
        if self.lr_decay_step == 0 {
            return Err(TrainerError::Config("lr_decay_step must be positive".into()));
        }
        match self.mode {
            PipelineMode::CompositeHard => {
                let c = self
                    .composite
                    .as_ref()
                    .ok_or_else(|| TrainerError::Config("composite-hard needs a composite config".into()))?;
                c.validate()?;
                if self.augmentation.is_some() {
                    return Err(TrainerError::Config(
                        "composite-hard regenerates data each epoch; augmentation is not used".into(),
                    ));
                }
                if self.optimizer.l2_coefficient != 0.0 {
                    return Err(TrainerError::Config(
                        "composite-hard runs without weight decay".into(),
                    ));
                }
            }
            _ => {
                if self.composite.is_some() {
                    return Err(TrainerError::Config(format!(
                        "{} does not take a composite config",
                        self.mode.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stepwise decay: base * gamma^(epoch / step), integer division.
pub fn lr_at(epoch: usize, base: f64, gamma: f64, step: usize) -> f64 {
    base * gamma.powi((epoch / step) as i32)
}

/// One epoch's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub agreement: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,train_loss,test_accuracy,agreement,wall_seconds";

    pub fn to_csv_row(&self) -> String {
        let agree = match self.agreement {
            Some(a) => format!("{a:.4}"),
            None => String::new(),
        };
        format!(
            "{},{:.6},{:.4},{:.4},{},{:.1}",
            self.epoch, self.lr, self.train_loss, self.test_accuracy, agree, self.wall_seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best test accuracy.
    pub model: Model,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(EpochRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            let _ = writeln!(s, "{}", r.to_csv_row());
        }
        s
    }
}

/// Training inputs for one epoch. Only constructible from labeled data,
/// oracle answers, or composite batches — never from the held-out test
/// set, which enters the loop solely through evaluation.
struct TrainData {
    x: Tensor,
    y: Tensor,
}

impl TrainData {
    fn rows(&self) -> usize {
        self.x.shape()[0]
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut y = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        y.data_mut()[i * classes + l] = 1.0;
    }
    y
}

fn gather_rows(x: &Tensor, indices: &[usize]) -> Tensor {
    let shape = x.shape();
    let row: usize = shape[1..].iter().product();
    let mut out_shape = vec![indices.len()];
    out_shape.extend_from_slice(&shape[1..]);
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(out_shape, data).expect("row gather preserves shape")
}

/// Query every pool image once and keep the answers as a fixed training
/// set. With `soft` the full probability vectors become the targets;
/// otherwise the argmax labels do.
pub fn build_static_mimic_set(
    oracle: &dyn Oracle,
    pool: &UnlabeledPool,
    soft: bool,
) -> Result<(Tensor, Tensor), TrainerError> {
    if pool.is_empty() {
        return Err(TrainerError::Config("query pool is empty".into()));
    }
    let classes = oracle.info().num_classes;
    let x = metrics::stack(&pool.images);
    let mut y = Tensor::zeros(vec![pool.len(), classes]);
    for (i, img) in pool.images.iter().enumerate() {
        let resp = oracle.predict(img)?;
        let row = &mut y.data_mut()[i * classes..(i + 1) * classes];
        if soft {
            match resp.probabilities() {
                Some(p) => row.copy_from_slice(p),
                None => return Err(TrainerError::SoftUnavailable),
            }
        } else {
            row[resp.label()] = 1.0;
        }
    }
    Ok((x, y))
}

fn apply_augmentation(
    x: &Tensor,
    policy: &AugmentPolicy,
    seed_val: u64,
    epoch: u64,
) -> Tensor {
    let shape = x.shape();
    let row: usize = shape[1..].iter().product();
    let img_shape = shape[1..].to_vec();
    let mut out = x.clone();
    for i in 0..shape[0] {
        let img = Tensor::new(img_shape.clone(), x.data()[i * row..(i + 1) * row].to_vec())
            .expect("row slice");
        let mut rng = seed::rng(seed::derive3(seed_val, "aug", epoch, i as u64));
        let aug = augment(&img, policy, &mut rng);
        out.data_mut()[i * row..(i + 1) * row].copy_from_slice(aug.data());
    }
    out
}

/// Shuffled mini-batch SGD over one epoch's data; returns mean loss.
fn run_epoch(
    model: &mut Model,
    data: &TrainData,
    opt: &OptimizerConfig,
    order_rng: &mut impl rand::Rng,
    dropout_rng: &mut impl rand::Rng,
) -> Result<f64, TrainerError> {
    let n = data.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(order_rng);
    let mut loss_sum = 0.0f64;
    for chunk in order.chunks(opt.batch_size) {
        let xb = gather_rows(&data.x, chunk);
        let yb = gather_rows(&data.y, chunk);
        let trace = model.forward_traced(&xb, TrainMode::Train, dropout_rng)?;
        let probs = Tensor::new(
            vec![chunk.len(), model.num_classes()],
            trace.output().to_vec(),
        )
        .expect("output shape");
        let loss = cross_entropy(&probs, &yb)? as f64;
        if !loss.is_finite() {
            return Err(NnError::Diverged { what: "training loss".into() }.into());
        }
        loss_sum += loss * chunk.len() as f64;
        let grads = model.backward(&trace, &yb)?;
        model.sgd_step(&grads, opt)?;
    }
    Ok(loss_sum / n as f64)
}

/// Shared outer loop: per-epoch data provider, stepped learning rate,
/// best-accuracy checkpointing.
fn fit(
    spec: ArchitectureSpec,
    cfg: &RunConfig,
    mut epoch_data: impl FnMut(u64) -> Result<TrainData, TrainerError>,
    test_set: &LabeledDataset,
    agreement_oracle: Option<&dyn Oracle>,
    checkpoint_dir: Option<&Path>,
    run_id: &str,
) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    let mut init_rng = seed::rng(seed::derive(cfg.seed, "init"));
    let mut model = Model::build(spec, &mut init_rng)?;
    let mut dropout_rng = seed::rng(seed::derive(cfg.seed, "dropout"));

    // Cache the oracle's answers on the test inputs once; agreement is
    // then a local comparison each epoch.
    let oracle_labels: Option<Vec<usize>> = match agreement_oracle {
        Some(o) => {
            let mut v = Vec::with_capacity(test_set.len());
            for img in &test_set.images {
                v.push(o.predict(img)?.label());
            }
            Some(v)
        }
        None => None,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY, model.clone());
    let mut final_accuracy = metrics::accuracy(&model, test_set)?;
    if cfg.epochs == 0 {
        best = (0, final_accuracy, model.clone());
    }
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let data = epoch_data(epoch as u64)?;
        let lr = lr_at(epoch, cfg.optimizer.learning_rate as f64, cfg.lr_decay_gamma, cfg.lr_decay_step);
        let opt = OptimizerConfig { learning_rate: lr as f32, ..cfg.optimizer };
        let mut order_rng = seed::rng(seed::derive2(cfg.seed, "order", epoch as u64));
        let train_loss = run_epoch(&mut model, &data, &opt, &mut order_rng, &mut dropout_rng)?;

        let test_accuracy = metrics::accuracy(&model, test_set)?;
        let agreement = match &oracle_labels {
            Some(labels) => {
                let predicted = metrics::predict_labels(&model, &test_set.images)?;
                let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
                Some(hits as f64 / labels.len() as f64)
            }
            None => None,
        };
        final_accuracy = test_accuracy;
        if test_accuracy > best.1 {
            best = (epoch, test_accuracy, model.clone());
        }
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("{run_id}-epoch{epoch}.mimic"));
            crate::nn::io::save_model(&model, &path)?;
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            test_accuracy,
            agreement,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    if cfg.epochs == 0 {
        // untouched initialization; "best" is just the starting point
        best.1 = final_accuracy;
    }
    Ok(TrainOutcome {
        model: best.2,
        best_epoch: best.0,
        best_accuracy: best.1,
        final_accuracy,
        history,
    })
}

/// Supervised training of the victim network on its own labeled data.
pub fn train_mentor(
    train: &LabeledDataset,
    test: &LabeledDataset,
    spec: ArchitectureSpec,
    cfg: &RunConfig,
    checkpoint_dir: Option<&Path>,
    run_id: &str,
) -> Result<TrainOutcome, TrainerError> {
    if cfg.mode != PipelineMode::MentorTrain {
        return Err(TrainerError::Config(format!(
            "train_mentor called with mode {}",
            cfg.mode.as_str()
        )));
    }
    if train.is_empty() {
        return Err(TrainerError::Config("training set is empty".into()));
    }
    let x = metrics::stack(&train.images);
    let y = one_hot(&train.labels, train.num_classes);
    let aug = cfg.augmentation.clone();
    let seed_val = cfg.seed;
    fit(
        spec,
        cfg,
        move |epoch| {
            let x_epoch = match &aug {
                Some(policy) => apply_augmentation(&x, policy, seed_val, epoch),
                None => x.clone(),
            };
            Ok(TrainData { x: x_epoch, y: y.clone() })
        },
        test,
        None,
        checkpoint_dir,
        run_id,
    )
}

/// Run one of the three student pipelines against a black-box oracle.
/// The test set is used for evaluation only; training data comes from
/// the pool (directly or mixed) and the oracle's answers.
pub fn run_pipeline(
    oracle: &dyn Oracle,
    pool: &UnlabeledPool,
    test_set: &LabeledDataset,
    student_spec: ArchitectureSpec,
    cfg: &RunConfig,
    checkpoint_dir: Option<&Path>,
    run_id: &str,
) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    match cfg.mode {
        PipelineMode::MentorTrain => Err(TrainerError::Config(
            "mentor training takes a labeled set; use train_mentor".into(),
        )),
        PipelineMode::StandardSoft | PipelineMode::StandardHard => {
            let soft = cfg.mode == PipelineMode::StandardSoft;
            let (x, y) = build_static_mimic_set(oracle, pool, soft)?;
            let aug = cfg.augmentation.clone();
            let seed_val = cfg.seed;
            fit(
                student_spec,
                cfg,
                move |epoch| {
                    let x_epoch = match &aug {
                        Some(policy) => apply_augmentation(&x, policy, seed_val, epoch),
                        None => x.clone(),
                    };
                    Ok(TrainData { x: x_epoch, y: y.clone() })
                },
                test_set,
                Some(oracle),
                checkpoint_dir,
                run_id,
            )
        }
        PipelineMode::CompositeHard => {
            let ccfg = cfg.composite.clone().expect("validated above");
            fit(
                student_spec,
                cfg,
                move |epoch| {
                    let batch = epoch_stream(oracle, pool, &ccfg, epoch)?;
                    Ok(TrainData { x: batch.x, y: batch.y })
                },
                test_set,
                Some(oracle),
                checkpoint_dir,
                run_id,
            )
        }
    }
}
