//! Model file format.
//!
//! Layout: magic bytes `MIMIC01`, a u32-LE length-prefixed canonical text
//! rendering of the architecture, then each parameter tensor (layer order,
//! weights before biases) as u32-LE rank, u32-LE dims, f32-LE values.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{Model, Param};
use super::spec::ArchitectureSpec;
use crate::tensor::Tensor;
use thiserror::Error;

const MAGIC_PREFIX: &[u8; 5] = b"MIMIC";
const VERSION: &[u8; 2] = b"01";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found} (supported: 01)")]
    UnsupportedVersion { found: String },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("spec error: {0}")]
    Spec(#[from] super::spec::SpecError),
    #[error("model error: {0}")]
    Model(String),
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_PREFIX)?;
    w.write_all(VERSION)?;
    let text = model.spec().to_canonical_text();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for p in model.params.iter().flatten() {
        write_tensor(&mut w, &p.weight)?;
        write_tensor(&mut w, &p.bias)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, ModelIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| ModelIoError::Corrupt("truncated header".into()))?;
    if &magic[..5] != MAGIC_PREFIX {
        return Err(ModelIoError::BadMagic);
    }
    if &magic[5..] != VERSION {
        return Err(ModelIoError::UnsupportedVersion {
            found: String::from_utf8_lossy(&magic[5..]).into_owned(),
        });
    }
    let text_len = read_u32(&mut r)? as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text)
        .map_err(|_| ModelIoError::Corrupt("truncated spec text".into()))?;
    let text =
        String::from_utf8(text).map_err(|_| ModelIoError::Corrupt("spec not utf-8".into()))?;
    let spec = ArchitectureSpec::parse_canonical(&text)?;
    spec.validate()?;

    let mut params = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        use super::spec::LayerSpec;
        let has_params = matches!(layer, LayerSpec::Conv { .. } | LayerSpec::Dense { .. });
        if has_params {
            let weight = read_tensor(&mut r)?;
            let bias = read_tensor(&mut r)?;
            params.push(Some(Param { weight, bias }));
        } else {
            params.push(None);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelIoError::Corrupt("trailing bytes after parameters".into()));
    }
    let model = Model::from_parts(spec, params).map_err(|e| ModelIoError::Model(e.to_string()))?;
    // Shape congruence with the spec is implied by construction; verify the
    // stored tensors actually match what the spec demands.
    for p in model.params.iter().flatten() {
        p.weight
            .check_finite()
            .map_err(|e| ModelIoError::Corrupt(e.to_string()))?;
    }
    Ok(model)
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<(), ModelIoError> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor, ModelIoError> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(ModelIoError::Corrupt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| ModelIoError::Corrupt("truncated tensor data".into()))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| ModelIoError::Corrupt(e.to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelIoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| ModelIoError::Corrupt("truncated integer".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchitectureSpec, Model, TrainMode};
    use crate::seed;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn round_trip_model() -> Model {
        let spec = ArchitectureSpec::small_cnn(vec![1, 8, 8], (2, 3), 6, 4, 0.0);
        Model::build(spec, &mut seed::rng(11)).unwrap()
    }

    #[test]
    fn save_load_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mimic");
        let model = round_trip_model();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let mut rng = seed::rng(3);
        let data: Vec<f32> = (0..2 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::new(vec![2, 1, 8, 8], data).unwrap();
        let a = model.forward(&x, TrainMode::Eval, &mut seed::rng(5)).unwrap();
        let b = loaded.forward(&x, TrainMode::Eval, &mut seed::rng(5)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mimic");
        save_model(&round_trip_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(ModelIoError::BadMagic)));
    }

    #[test]
    fn newer_version_is_a_versioned_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mimic");
        save_model(&round_trip_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[5] = b'0';
        bytes[6] = b'2';
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(ModelIoError::UnsupportedVersion { found }) => assert_eq!(found, "02"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mimic");
        save_model(&round_trip_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_model(&path), Err(ModelIoError::Corrupt(_))));
    }
}
