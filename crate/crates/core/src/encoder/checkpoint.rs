use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parameter_layout, EncoderConfig, EncoderParams};
use crate::binio::{Reader, Truncated, Writer};
use crate::tensor::{AdamState, Tensor};

const MAGIC: &[u8; 4] = b"SWMC";
const VERSION: u32 = 1;
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("checkpoint config block: {0}")]
    Config(String),
    #[error("tensor `{name}` has shape {found:?}, config implies {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),
}

impl From<Truncated> for CheckpointError {
    fn from(t: Truncated) -> Self {
        CheckpointError::Truncated(t.0)
    }
}

/// Model state at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub epoch: u64,
    /// Training configuration text, stored verbatim.
    pub config_echo: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    init_seed: u64,
    epoch: u64,
    config_echo: Option<String>,
    optimizer: Option<OptimizerHeader>,
    tensor_count: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

fn write_tensor(w: &mut Writer, name: &str, t: &Tensor<f32>) {
    w.str(name);
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32s(t.data());
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let p = &ckpt.params;
    let mut records: Vec<(String, &Tensor<f32>)> = p
        .params
        .iter()
        .chain(p.buffers.iter())
        .map(|(k, v)| (k.clone(), v))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        records.extend(opt.first_moment.iter().map(|(k, v)| (format!("{FIRST_MOMENT}{k}"), v)));
        records.extend(opt.second_moment.iter().map(|(k, v)| (format!("{SECOND_MOMENT}{k}"), v)));
    }
    let header = Header {
        encoder: p.config.clone(),
        init_seed: p.init_seed,
        epoch: ckpt.epoch,
        config_echo: ckpt.config_echo.clone(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            step_count: o.step_count,
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
        }),
        tensor_count: records.len() as u64,
    };
    let mut w = Writer::new(MAGIC, VERSION);
    w.str(&serde_json::to_string(&header).expect("header serializes"));
    for (name, t) in &records {
        write_tensor(&mut w, name, t);
    }
    // write-then-rename so a crash never leaves a half-written best checkpoint
    let tmp = path.with_extension("tmp");
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, &w.buf).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let text = r
        .str("config block")?
        .ok_or_else(|| CheckpointError::Config("not UTF-8".into()))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let layout = parameter_layout(&header.encoder).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let specs: BTreeMap<&str, _> = layout.iter().map(|s| (s.name.as_str(), s)).collect();

    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for k in 0..header.tensor_count {
        let name = r
            .str(&format!("record {k} name"))?
            .ok_or_else(|| CheckpointError::Config(format!("record {k}: name is not UTF-8")))?;
        let rank = r.u32(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32(&format!("{name} dims"))? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| CheckpointError::Truncated(format!("{name}: absurd shape {shape:?}")))?;
        let data = r.f32s(n, &format!("{name} values"))?;

        let (base, slot) = if let Some(b) = name.strip_prefix(FIRST_MOMENT) {
            (b, Some(&mut first))
        } else if let Some(b) = name.strip_prefix(SECOND_MOMENT) {
            (b, Some(&mut second))
        } else {
            (name.as_str(), None)
        };
        let spec = specs
            .get(base)
            .ok_or_else(|| CheckpointError::UnexpectedTensor(name.clone()))?;
        if slot.is_some() && !spec.role.trainable() {
            return Err(CheckpointError::UnexpectedTensor(name.clone()));
        }
        if shape != spec.shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: spec.shape.clone(),
                found: shape,
            });
        }
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let target = match slot {
            Some(m) => m,
            None if spec.role.trainable() => &mut params,
            None => &mut buffers,
        };
        if target.insert(base.to_string(), t).is_some() {
            return Err(CheckpointError::UnexpectedTensor(name));
        }
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()));
    }
    for spec in &layout {
        let present = if spec.role.trainable() {
            params.contains_key(&spec.name)
        } else {
            buffers.contains_key(&spec.name)
        };
        if !present {
            return Err(CheckpointError::MissingTensor(spec.name.clone()));
        }
    }
    let optimizer = header.optimizer.map(|o| AdamState {
        step_count: o.step_count,
        first_moment: first,
        second_moment: second,
        learning_rate: o.learning_rate,
        beta1: o.beta1,
        beta2: o.beta2,
        epsilon: o.epsilon,
    });
    Ok(Checkpoint {
        params: EncoderParams {
            config: header.encoder,
            init_seed: header.init_seed,
            params,
            buffers,
        },
        optimizer,
        epoch: header.epoch,
        config_echo: header.config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tests::tiny_config;
    use crate::encoder::{embed, init_params};
    use crate::tensor::{Adam, AdamConfig};
    use crate::data::GrayImage;

    fn sample() -> Checkpoint {
        let mut params = init_params(&tiny_config(), 5).unwrap();
        params.set_alpha(-0.375);
        let mut adam = Adam::new(AdamConfig::default());
        let grads = params
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::full(v.shape(), 0.01f32)))
            .collect();
        adam.step(&mut params.params, &grads).unwrap();
        Checkpoint {
            params,
            optimizer: Some(adam.state),
            epoch: 17,
            config_echo: Some("[data]\nseed = 1\n".into()),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.swmc");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.epoch, 17);
        let im = GrayImage::from_fn(16, 16, |x, y| ((x + 2 * y) % 7) as f32 / 6.0);
        assert_eq!(embed(&ck.params, &[&im]).unwrap(), embed(&back.params, &[&im]).unwrap());
        save_checkpoint(&dir.path().join("again.swmc"), &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("again.swmc")).unwrap());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.swmc");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn header_errors_are_structured() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.swmc");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(CheckpointError::UnsupportedVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn config_shape_disagreement() {
        let mut ck = sample();
        ck.optimizer = None;
        ck.params.params.insert("mlp.0.bias".into(), Tensor::zeros(&[5]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.swmc");
        save_checkpoint(&path, &ck).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::ShapeMismatch { name, .. }) if name == "mlp.0.bias"
        ));
    }
}
