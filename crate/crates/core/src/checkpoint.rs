//! Checkpoint files.
//!
//! Layout: the 8-byte magic `DAIAMCKP`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header (variant, model config,
//! dtype, tensor names and shapes, optional training state), then raw
//! little-endian tensor data: every parameter in header order, followed by
//! the optimizer's first- and second-moment tensors when training state is
//! present.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Network, Variant};
use crate::optim::{Adam, AdamConfig, LrScheduler};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Shape, Tensor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DAIAMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Completed iterations.
    pub iteration: u64,
    pub config: TrainConfig,
    pub scheduler: LrScheduler,
    pub rng: ChaCha8Rng,
    pub adam: Adam<T>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub train: Option<TrainState<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: Variant,
    dtype: DType,
    model: ModelConfig,
    tensors: Vec<TensorMeta>,
    train: Option<TrainHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Shape,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    iteration: u64,
    config: TrainConfig,
    scheduler: LrScheduler,
    rng: ChaCha8Rng,
    adam: AdamConfig,
    adam_steps: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn inference(model: Model<T>) -> Self {
        Checkpoint { model, train: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let header = Header {
            variant: self.model.variant(),
            dtype: T::DTYPE,
            model: self.model.config().clone(),
            tensors: params
                .iter()
                .map(|(_, p)| TensorMeta {
                    name: p.name.clone(),
                    shape: p.value.shape(),
                })
                .collect(),
            train: self.train.as_ref().map(|t| TrainHeader {
                iteration: t.iteration,
                config: t.config.clone(),
                scheduler: t.scheduler.clone(),
                rng: t.rng.clone(),
                adam: t.adam.cfg,
                adam_steps: t.adam.t,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 16 + params.count() * T::DTYPE.size() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut write = |t: &Tensor<T>| t.data().iter().for_each(|v| v.write_le(&mut out));
        params.iter().for_each(|(_, p)| write(&p.value));
        if let Some(t) = &self.train {
            t.adam.m.iter().for_each(&mut write);
            t.adam.v.iter().for_each(&mut write);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

        let mut params = ParamStore::<T>::new();
        let net = Network::build(header.variant, &header.model, &mut params)?;
        check_layout(&params, &header.tensors)?;
        let width = header.dtype.size();
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            let shape = params.get(id).shape();
            *params.get_mut(id) = r.tensor::<T>(shape, header.dtype, width)?;
        }
        let train = match header.train {
            None => None,
            Some(th) => {
                let mut adam = Adam::new(th.adam, &params);
                adam.t = th.adam_steps;
                for i in 0..ids.len() {
                    adam.m[i] = r.tensor(adam.m[i].shape(), header.dtype, width)?;
                }
                for i in 0..ids.len() {
                    adam.v[i] = r.tensor(adam.v[i].shape(), header.dtype, width)?;
                }
                Some(TrainState {
                    iteration: th.iteration,
                    config: th.config,
                    scheduler: th.scheduler,
                    rng: th.rng,
                    adam,
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after tensor data",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: Model::from_parts(net, params),
            train,
        })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load and require the given variant and configuration.
    pub fn load_for(path: &Path, variant: Variant, cfg: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_compatible(variant, cfg)?;
        Ok(ck)
    }

    /// Error naming the first tensor that differs from what `variant` built
    /// with `cfg` expects.
    pub fn check_compatible(&self, variant: Variant, cfg: &ModelConfig) -> Result<()> {
        if self.model.variant() != variant {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds variant {}, expected {variant}",
                self.model.variant()
            )));
        }
        let mut expected = ParamStore::<T>::new();
        Network::build(variant, cfg, &mut expected)?;
        let found: Vec<TensorMeta> = self
            .model
            .params
            .iter()
            .map(|(_, p)| TensorMeta {
                name: p.name.clone(),
                shape: p.value.shape(),
            })
            .collect();
        check_layout(&expected, &found)?;
        if self.model.config() != cfg {
            return Err(Error::Checkpoint(format!(
                "model config differs: checkpoint {:?}, expected {cfg:?}",
                self.model.config()
            )));
        }
        Ok(())
    }
}

fn check_layout<T: Scalar>(expected: &ParamStore<T>, found: &[TensorMeta]) -> Result<()> {
    for (i, (_, p)) in expected.iter().enumerate() {
        let Some(f) = found.get(i) else {
            return Err(Error::Checkpoint(format!("missing tensor `{}`", p.name)));
        };
        if f.name != p.name {
            return Err(Error::Checkpoint(format!(
                "tensor #{i} is `{}`, model expects `{}`",
                f.name, p.name
            )));
        }
        if f.shape != p.value.shape() {
            return Err(Error::TensorMismatch {
                name: p.name.clone(),
                expected: p.value.shape(),
                found: f.shape,
            });
        }
    }
    if found.len() > expected.len() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensor `{}`",
            found[expected.len()].name
        )));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor<T: Scalar>(&mut self, shape: Shape, dtype: DType, width: usize) -> Result<Tensor<T>> {
        let raw = self.take(shape.len() * width)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match dtype {
                DType::F32 => T::lit(f32::read_le(c) as f64),
                DType::F64 => T::lit(f64::read_le(c)),
            })
            .collect();
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn model() -> Model<f32> {
        let mut m = Model::<f32>::new(Variant::Ddaiam(2), &ModelConfig::tiny(), 5).unwrap();
        m.params.init_fan_in(5, 1.0);
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = Checkpoint::inference(model());
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.model.params, ck.model.params);
    }

    #[test]
    fn inference_is_unchanged_after_reload() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        Checkpoint::inference(m.clone()).save(&p).unwrap();
        let back = Checkpoint::<f32>::load(&p).unwrap();
        let img = Image::from_fn(12, 9, 3, |c, y, x| ((c + y * x) % 7) as f32 / 7.0);
        assert_eq!(m.derain(&img).unwrap(), back.model.derain(&img).unwrap());
    }

    #[test]
    fn altered_config_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        Checkpoint::inference(model()).save(&p).unwrap();
        let wider = ModelConfig {
            feat_ch: 6,
            ..ModelConfig::tiny()
        };
        match Checkpoint::<f32>::load_for(&p, Variant::Ddaiam(2), &wider) {
            Err(Error::TensorMismatch { name, .. }) => assert!(name.contains("encoder"), "{name}"),
            other => panic!("expected TensorMismatch, got {other:?}"),
        }
        assert!(Checkpoint::<f32>::load_for(&p, Variant::Daiam, &ModelConfig::tiny()).is_err());
        assert!(Checkpoint::<f32>::load_for(&p, Variant::Ddaiam(2), &ModelConfig::tiny()).is_ok());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::inference(model()).to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(truncated),
            Err(Error::Checkpoint(_))
        ));
        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        let err = Checkpoint::<f32>::from_bytes(&bad_version).unwrap_err().to_string();
        assert!(err.contains("version"));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn f64_checkpoint_loads_as_f32() {
        let m64 = model().cast::<f64>();
        let bytes = Checkpoint::inference(m64.clone()).to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params, m64.params.cast::<f32>());
    }
}
