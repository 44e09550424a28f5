//! Per-epoch generation of composite samples labeled by the mentor's
//! argmax: convex mixtures of unlabeled pool images, one oracle query per
//! generated sample, a fresh batch every epoch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::UnlabeledPool;
use crate::oracle::{Oracle, OracleError};
use crate::seed;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("pool image shape {pool:?} does not match oracle input {oracle:?}")]
    PoolShape { pool: Vec<usize>, oracle: Vec<usize> },
    #[error("mix: images must share one shape")]
    MixShape,
    #[error("mix: weights sum to {sum}, expected 1")]
    WeightSum { sum: f32 },
    #[error("mix: {images} images but {weights} weights")]
    WeightCount { images: usize, weights: usize },
    #[error("ratio_quantum {0} does not divide 1 exactly")]
    BadQuantum(f32),
    #[error("k_way must be at least 2, got {0}")]
    BadKWay(usize),
    #[error("oracle query failed at sample {index}: {source}")]
    Query { index: usize, source: OracleError },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeConfig {
    /// Samples generated per epoch (N in the generation loop).
    pub n_samples: usize,
    /// Images per composite; 2 is the standard setting.
    pub k_way: usize,
    /// Grid step for mixing ratios; 1/100 matches random(100)/100.
    pub ratio_quantum: f32,
    pub seed: u64,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self {
            n_samples: 50_000,
            k_way: 2,
            ratio_quantum: 0.01,
            seed: 0,
        }
    }
}

impl CompositeConfig {
    pub fn validate(&self) -> Result<u32, CompositeError> {
        if self.k_way < 2 {
            return Err(CompositeError::BadKWay(self.k_way));
        }
        if !(self.ratio_quantum > 0.0) {
            return Err(CompositeError::BadQuantum(self.ratio_quantum));
        }
        let steps = (1.0 / self.ratio_quantum as f64).round();
        if steps < 1.0 || (steps * self.ratio_quantum as f64 - 1.0).abs() > 1e-6 {
            return Err(CompositeError::BadQuantum(self.ratio_quantum));
        }
        Ok(steps as u32)
    }
}

/// Pool indices and mixing weights behind one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub indices: Vec<usize>,
    pub weights: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeBatch {
    /// (n_samples, C, H, W)
    pub x: Tensor,
    /// One-hot rows, (n_samples, num_classes).
    pub y: Tensor,
    pub epoch_index: u64,
    pub provenance: Vec<Provenance>,
}

impl CompositeBatch {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Entrywise weighted sum of images under convex weights.
pub fn mix(images: &[&Tensor], weights: &[f32]) -> Result<Tensor, CompositeError> {
    if images.len() != weights.len() {
        return Err(CompositeError::WeightCount {
            images: images.len(),
            weights: weights.len(),
        });
    }
    let first = images.first().ok_or(CompositeError::MixShape)?;
    if images.iter().any(|t| t.shape() != first.shape()) {
        return Err(CompositeError::MixShape);
    }
    let sum: f32 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|&w| w < 0.0) {
        return Err(CompositeError::WeightSum { sum });
    }
    let mut out = Tensor::zeros(first.shape().to_vec());
    for (img, &w) in images.iter().zip(weights) {
        for (o, &v) in out.data_mut().iter_mut().zip(img.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// One epoch's worth of composite data: for each of N samples, draw pool
/// indices uniformly with replacement, draw grid-quantized convex weights,
/// mix, and label with the mentor's argmax. Exactly N oracle queries.
pub fn epoch_stream(
    oracle: &dyn Oracle,
    pool: &UnlabeledPool,
    cfg: &CompositeConfig,
    epoch: u64,
) -> Result<CompositeBatch, CompositeError> {
    let steps = cfg.validate()?;
    let info = oracle.info();
    let image_shape = match pool.image_shape() {
        Some(s) => s.to_vec(),
        None => return Err(CompositeError::EmptyPool),
    };
    if cfg.n_samples > 0 && image_shape != info.input_shape {
        return Err(CompositeError::PoolShape {
            pool: image_shape,
            oracle: info.input_shape,
        });
    }
    let elems: usize = image_shape.iter().product();
    let mut x = Tensor::zeros({
        let mut s = vec![cfg.n_samples];
        s.extend_from_slice(&image_shape);
        s
    });
    let mut y = Tensor::zeros(vec![cfg.n_samples, info.num_classes]);
    let mut provenance = Vec::with_capacity(cfg.n_samples);

    for i in 0..cfg.n_samples {
        // per-sample stream addressed by (seed, epoch, index)
        let mut rng = seed::rng(seed::derive3(cfg.seed, "composite", epoch, i as u64));
        let indices: Vec<usize> = (0..cfg.k_way).map(|_| rng.gen_range(0..pool.len())).collect();
        let weights = draw_weights(cfg.k_way, steps, cfg.ratio_quantum, &mut rng);
        let images: Vec<&Tensor> = indices.iter().map(|&j| &pool.images[j]).collect();
        let sample = mix(&images, &weights)?;
        let label = oracle
            .predict(&sample)
            .map_err(|source| CompositeError::Query { index: i, source })?
            .label();
        x.data_mut()[i * elems..(i + 1) * elems].copy_from_slice(sample.data());
        y.data_mut()[i * info.num_classes + label] = 1.0;
        provenance.push(Provenance {
            indices,
            weights,
            label,
        });
    }
    Ok(CompositeBatch {
        x,
        y,
        epoch_index: epoch,
        provenance,
    })
}

/// `epoch_stream` for epoch 0; the single-shot entry point.
pub fn generate_data(
    oracle: &dyn Oracle,
    pool: &UnlabeledPool,
    cfg: &CompositeConfig,
) -> Result<CompositeBatch, CompositeError> {
    epoch_stream(oracle, pool, cfg, 0)
}

fn draw_weights(k: usize, steps: u32, quantum: f32, rng: &mut impl Rng) -> Vec<f32> {
    if k == 2 {
        // p uniform on {0, q, 2q, ..., 1-q}
        let p = rng.gen_range(0..steps) as f32 * quantum;
        vec![p, 1.0 - p]
    } else {
        // flat Dirichlet, quantized to the grid and renormalized
        let raw: Vec<f64> = (0..k)
            .map(|_| -(rng.gen_range(f64::EPSILON..1.0)).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f32> = raw
            .iter()
            .map(|&g| {
                let frac = g / total;
                ((frac / quantum as f64).round() * quantum as f64) as f32
            })
            .collect();
        let sum: f32 = w.iter().sum();
        if sum > 0.0 {
            for v in w.iter_mut() {
                *v /= sum;
            }
        } else {
            w = vec![1.0 / k as f32; k];
        }
        w
    }
}

/// Write a batch as a raw-tensor container, a labeled manifest, and a
/// provenance sidecar (sample index, source indices, weights, label).
pub fn export_batch(batch: &CompositeBatch, dir: &Path, stem: &str) -> Result<(), CompositeError> {
    let shape = batch.x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let elems = c * h * w;
    let io_err = |path: PathBuf| move |source| CompositeError::Io { path, source };

    let raw_path = dir.join(format!("{stem}.raw"));
    let mut raw = fs::File::create(&raw_path).map_err(io_err(raw_path.clone()))?;
    for i in 0..n {
        let bytes: Vec<u8> = batch.x.data()[i * elems..(i + 1) * elems]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        raw.write_all(&bytes).map_err(io_err(raw_path.clone()))?;
    }

    let classes = batch.y.shape()[1];
    let manifest_path = dir.join(format!("{stem}.manifest"));
    let mut manifest = format!("{classes} {c} {h} {w}\n");
    for (i, p) in batch.provenance.iter().enumerate() {
        manifest.push_str(&format!("{stem}.raw@{i} {}\n", p.label));
    }
    fs::write(&manifest_path, manifest).map_err(io_err(manifest_path))?;

    let side_path = dir.join(format!("{stem}.provenance"));
    let mut side = String::from("sample indices weights label\n");
    for (i, p) in batch.provenance.iter().enumerate() {
        let idx: Vec<String> = p.indices.iter().map(|v| v.to_string()).collect();
        let wts: Vec<String> = p.weights.iter().map(|v| format!("{v}")).collect();
        side.push_str(&format!(
            "{i} {} {} {}\n",
            idx.join(","),
            wts.join(","),
            p.label
        ));
    }
    fs::write(&side_path, side).map_err(io_err(side_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleInfo, OracleResponse};

    /// Toy oracle: per-class fixed linear score, argmax label.
    struct LinearOracle {
        scores: Vec<Vec<f32>>,
        shape: Vec<usize>,
    }

    impl Oracle for LinearOracle {
        fn info(&self) -> OracleInfo {
            OracleInfo {
                input_shape: self.shape.clone(),
                num_classes: self.scores.len(),
            }
        }
        fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
            let scores: Vec<f32> = self
                .scores
                .iter()
                .map(|w| w.iter().zip(input.data()).map(|(a, b)| a * b).sum())
                .collect();
            Ok(OracleResponse::Label(Tensor::argmax_row(&scores)))
        }
    }

    fn two_pixel_pool() -> UnlabeledPool {
        UnlabeledPool {
            images: vec![
                Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(),
                Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap(),
            ],
            name: "two".into(),
        }
    }

    #[test]
    fn mix_degenerate_weight_returns_first_image() {
        let a = Tensor::filled(vec![1, 2, 2], 0.2);
        let b = Tensor::filled(vec![1, 2, 2], 0.9);
        let out = mix(&[&a, &b], &[1.0, 0.0]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn mix_identical_images_is_fixed_point() {
        let a = Tensor::filled(vec![1, 2, 2], 0.4);
        let out = mix(&[&a, &a], &[0.3, 0.7]).unwrap();
        for &v in out.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn mix_matches_ratio_formula() {
        let a = Tensor::filled(vec![1, 1, 1], 0.2);
        let b = Tensor::filled(vec![1, 1, 1], 0.8);
        let out = mix(&[&a, &b], &[0.75, 0.25]).unwrap();
        assert!((out.data()[0] - 0.35).abs() < 1e-6);
    }

    #[test]
    fn mix_rejects_bad_weights_and_shapes() {
        let a = Tensor::filled(vec![1, 2, 2], 0.5);
        let b = Tensor::filled(vec![1, 2, 3], 0.5);
        assert!(matches!(
            mix(&[&a, &b], &[0.5, 0.5]),
            Err(CompositeError::MixShape)
        ));
        let b = Tensor::filled(vec![1, 2, 2], 0.5);
        assert!(matches!(
            mix(&[&a, &b], &[0.6, 0.6]),
            Err(CompositeError::WeightSum { .. })
        ));
    }

    #[test]
    fn single_image_pool_degenerates() {
        let pool = UnlabeledPool {
            images: vec![Tensor::filled(vec![1, 1, 2], 0.5)],
            name: "one".into(),
        };
        let oracle = LinearOracle {
            scores: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            shape: vec![1, 1, 2],
        };
        let cfg = CompositeConfig {
            n_samples: 16,
            ..Default::default()
        };
        let batch = generate_data(&oracle, &pool, &cfg).unwrap();
        for p in &batch.provenance {
            assert_eq!(p.indices, vec![0, 0]);
            assert_eq!(p.label, batch.provenance[0].label);
        }
        for chunk in batch.x.data().chunks(2) {
            assert_eq!(chunk, &[0.5, 0.5]);
        }
    }

    #[test]
    fn labels_match_brute_force_over_the_p_grid() {
        let oracle = LinearOracle {
            scores: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            shape: vec![1, 1, 2],
        };
        let pool = two_pixel_pool();
        let cfg = CompositeConfig {
            n_samples: 500,
            seed: 77,
            ..Default::default()
        };
        let batch = generate_data(&oracle, &pool, &cfg).unwrap();
        for (i, p) in batch.provenance.iter().enumerate() {
            // brute-force evaluation of the linear score on the mixture
            let mut px = [0.0f32; 2];
            for (&idx, &w) in p.indices.iter().zip(&p.weights) {
                px[0] += w * pool.images[idx].data()[0];
                px[1] += w * pool.images[idx].data()[1];
            }
            let expect = if px[0] >= px[1] { 0 } else { 1 };
            assert_eq!(p.label, expect, "sample {i}: {p:?}");
            assert_eq!(batch.y.data()[i * 2 + p.label], 1.0);
        }
    }

    #[test]
    fn same_seed_and_epoch_bit_identical() {
        let oracle = LinearOracle {
            scores: vec![vec![1.0, -1.0], vec![-1.0, 1.0]],
            shape: vec![1, 1, 2],
        };
        let pool = two_pixel_pool();
        let cfg = CompositeConfig {
            n_samples: 100,
            seed: 5,
            ..Default::default()
        };
        let a = epoch_stream(&oracle, &pool, &cfg, 3).unwrap();
        let b = epoch_stream(&oracle, &pool, &cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_epochs_differ() {
        let oracle = LinearOracle {
            scores: vec![vec![1.0, -1.0], vec![-1.0, 1.0]],
            shape: vec![1, 1, 2],
        };
        let pool = two_pixel_pool();
        let cfg = CompositeConfig {
            n_samples: 100,
            seed: 5,
            ..Default::default()
        };
        let a = epoch_stream(&oracle, &pool, &cfg, 0).unwrap();
        let b = epoch_stream(&oracle, &pool, &cfg, 1).unwrap();
        assert_ne!(a.x, b.x);
    }

    #[test]
    fn zero_samples_no_queries() {
        use crate::oracle::Counting;
        let oracle = Counting::new(LinearOracle {
            scores: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            shape: vec![1, 1, 2],
        });
        let pool = two_pixel_pool();
        let cfg = CompositeConfig {
            n_samples: 0,
            ..Default::default()
        };
        let batch = generate_data(&oracle, &pool, &cfg).unwrap();
        assert!(batch.is_empty());
        assert_eq!(oracle.queries(), 0);
    }

    #[test]
    fn empty_pool_rejected() {
        let oracle = LinearOracle {
            scores: vec![vec![1.0]],
            shape: vec![1, 1, 1],
        };
        let pool = UnlabeledPool {
            images: vec![],
            name: "empty".into(),
        };
        assert!(matches!(
            generate_data(&oracle, &pool, &CompositeConfig::default()),
            Err(CompositeError::EmptyPool)
        ));
    }

    #[test]
    fn k_way_weights_are_convex() {
        let mut rng = seed::rng(12);
        for k in 3..6 {
            for _ in 0..50 {
                let w = draw_weights(k, 100, 0.01, &mut rng);
                assert_eq!(w.len(), k);
                let sum: f32 = w.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "sum {sum}");
                assert!(w.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn export_writes_loadable_container() {
        let oracle = LinearOracle {
            scores: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            shape: vec![1, 1, 2],
        };
        let pool = two_pixel_pool();
        let cfg = CompositeConfig {
            n_samples: 8,
            ..Default::default()
        };
        let batch = generate_data(&oracle, &pool, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_batch(&batch, dir.path(), "epoch0").unwrap();
        let loaded = crate::data::load_dataset(&dir.path().join("epoch0.manifest")).unwrap();
        match loaded {
            crate::data::DatasetFile::Labeled(d) => {
                assert_eq!(d.len(), 8);
                assert_eq!(d.num_classes, 2);
            }
            _ => panic!("expected labeled export"),
        }
        assert!(dir.path().join("epoch0.provenance").exists());
    }
}
