//! Manifest-driven dataset loading.
//!
//! A dataset is a text manifest plus one or more raw pixel containers.
//!
//! Manifest layout (whitespace separated):
//!   line 1:  num_classes channels height width      (num_classes 0 for pools)
//!   rows:    <source> [label]
//! where <source> is either `file.raw` (the whole file is one image) or
//! `file.raw@index` (image number `index` inside a container). Containers
//! hold unsigned 8-bit pixels, C*H*W per image, consecutively. Pixels are
//! scaled to [0,1] on load; row order is preserved.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("manifest {path} row {row}: {reason}")]
    Row {
        path: PathBuf,
        row: usize,
        reason: String,
    },
    #[error("empty dataset")]
    Empty,
    #[error("normalize: channel {channel} has non-positive std")]
    ZeroStd { channel: usize },
    #[error("downsample cannot upsample: {from}x{from_w} -> {to}x{to_w}")]
    Upsample {
        from: usize,
        from_w: usize,
        to: usize,
        to_w: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    pub images: Vec<Tensor>,
    pub name: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl UnlabeledPool {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }
}

#[derive(Debug)]
pub enum DatasetFile {
    Labeled(LabeledDataset),
    Pool(UnlabeledPool),
}

pub fn load_dataset(manifest_path: &Path) -> Result<DatasetFile, DataError> {
    let text = fs::read_to_string(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate().filter(|(_, l)| {
        let l = l.trim();
        !l.is_empty() && !l.starts_with('#')
    });
    let manifest_err = |reason: String| DataError::Manifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let (_, header) = lines
        .next()
        .ok_or_else(|| manifest_err("missing header line".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| manifest_err(format!("bad header '{header}'")))?;
    let [num_classes, c, h, w] = match head.as_slice() {
        &[a, b, c, d] => [a, b, c, d],
        _ => return Err(manifest_err("header needs num_classes channels height width".into())),
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(manifest_err("zero image dimension".into()));
    }
    let image_bytes = c * h * w;

    let mut images = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut containers: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for (lineno, line) in lines {
        let row = lineno + 1;
        let row_err = |reason: String| DataError::Row {
            path: manifest_path.to_path_buf(),
            row,
            reason,
        };
        let mut parts = line.split_whitespace();
        let source = parts.next().unwrap();
        let label = parts.next();
        if parts.next().is_some() {
            return Err(row_err("too many columns".into()));
        }
        let (file, index) = match source.split_once('@') {
            Some((f, i)) => (
                f,
                i.parse::<usize>()
                    .map_err(|_| row_err(format!("bad container index '{i}'")))?,
            ),
            None => (source, 0),
        };
        let full = dir.join(file);
        let bytes = match containers.iter().find(|(p, _)| p == &full) {
            Some((_, b)) => b,
            None => {
                let b = fs::read(&full).map_err(|source| DataError::Io {
                    path: full.clone(),
                    source,
                })?;
                containers.push((full.clone(), b));
                &containers.last().unwrap().1
            }
        };
        let offset = index * image_bytes;
        if offset + image_bytes > bytes.len() {
            return Err(row_err(format!(
                "image {index} overruns container {} ({} bytes)",
                full.display(),
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes[offset..offset + image_bytes]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        images.push(Tensor::new(vec![c, h, w], data).expect("length checked"));
        if let Some(l) = label {
            let l: usize = l
                .parse()
                .map_err(|_| row_err(format!("bad label '{l}'")))?;
            if l >= num_classes {
                return Err(row_err(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            labels.push(l);
        } else if !labels.is_empty() {
            return Err(row_err("missing label in a labeled manifest".into()));
        }
    }
    if images.is_empty() {
        return Err(DataError::Empty);
    }
    let name = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    if labels.is_empty() {
        Ok(DatasetFile::Pool(UnlabeledPool { images, name }))
    } else {
        if labels.len() != images.len() {
            return Err(manifest_err("mixed labeled and unlabeled rows".into()));
        }
        if num_classes == 0 {
            return Err(manifest_err("labeled manifest with num_classes 0".into()));
        }
        Ok(DatasetFile::Labeled(LabeledDataset {
            images,
            labels,
            num_classes,
            name,
        }))
    }
}

fn write_container(
    dir: &Path,
    stem: &str,
    images: &[Tensor],
) -> Result<(String, Vec<usize>), DataError> {
    let file = format!("{stem}.raw");
    let path = dir.join(&file);
    let io_err = |source| DataError::Io {
        path: path.clone(),
        source,
    };
    let mut f = fs::File::create(&path).map_err(io_err)?;
    let mut shape = None;
    for img in images {
        if let Some(s) = &shape {
            assert_eq!(*s, img.shape(), "container images must share one shape");
        } else {
            shape = Some(img.shape().to_vec());
        }
        let bytes: Vec<u8> = img
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok((file, shape.unwrap_or_default()))
}

/// Write a labeled dataset as container + manifest; returns the manifest path.
pub fn save_labeled(set: &LabeledDataset, dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    let (file, shape) = write_container(dir, stem, &set.images)?;
    let manifest = dir.join(format!("{stem}.manifest"));
    let mut text = format!(
        "{} {} {} {}\n",
        set.num_classes, shape[0], shape[1], shape[2]
    );
    for (i, label) in set.labels.iter().enumerate() {
        text.push_str(&format!("{file}@{i} {label}\n"));
    }
    fs::write(&manifest, text).map_err(|source| DataError::Io {
        path: manifest.clone(),
        source,
    })?;
    Ok(manifest)
}

/// Write an unlabeled pool as container + manifest; returns the manifest path.
pub fn save_pool(pool: &UnlabeledPool, dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    let (file, shape) = write_container(dir, stem, &pool.images)?;
    let manifest = dir.join(format!("{stem}.manifest"));
    let mut text = format!("0 {} {} {}\n", shape[0], shape[1], shape[2]);
    for i in 0..pool.images.len() {
        text.push_str(&format!("{file}@{i}\n"));
    }
    fs::write(&manifest, text).map_err(|source| DataError::Io {
        path: manifest.clone(),
        source,
    })?;
    Ok(manifest)
}
