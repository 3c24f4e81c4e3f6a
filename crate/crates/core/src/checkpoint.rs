//! Checkpoint files: model and run configuration, epoch history, parameters
//! and optionally the AdamW moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{expect_eof, read_bytes, read_header, write_header};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::train::{AdamWConfig, EpochRecord, OptimizerState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Last completed epoch.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredRecord {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_auc: Option<f64>,
    seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredOptimizer {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    history: Vec<StoredRecord>,
    optimizer: Option<StoredOptimizer>,
    tensors: Vec<TensorEntry>,
}

fn entries(params: &ModelParams<f32>, prefix: &str) -> Vec<TensorEntry> {
    params
        .tensors()
        .into_iter()
        .map(|(name, t)| TensorEntry {
            name: format!("{prefix}{name}"),
            shape: t.shape().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    /// Parameters of a checkpoint, together with their configuration.
    pub fn tensor_sets(&self) -> Vec<(&'static str, &ModelParams<f32>)> {
        let mut sets = vec![("", &self.params)];
        if let Some(opt) = &self.optimizer {
            sets.push(("adamw.m/", &opt.m));
            sets.push(("adamw.v/", &opt.v));
        }
        sets
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let sets = self.tensor_sets();
        for (prefix, p) in &sets {
            if p.config != self.model {
                return Err(Error::Invalid(format!("tensor set `{prefix}` has a different configuration")));
            }
        }
        let manifest = Manifest {
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            history: self
                .history
                .iter()
                .map(|r| StoredRecord {
                    epoch: r.epoch,
                    train_loss: r.train_loss,
                    val_loss: r.val_loss,
                    val_auc: (!r.val_auc.is_nan()).then_some(r.val_auc),
                    seconds: r.seconds,
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| StoredOptimizer {
                config: o.config,
                step: o.step,
            }),
            tensors: sets.iter().flat_map(|(prefix, p)| entries(p, prefix)).collect(),
        };
        write_header(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &serde_json::to_vec(&manifest)?)?;
        let mut buf = Vec::new();
        for (_, p) in sets {
            for (_, t) in p.tensors() {
                buf.clear();
                for x in t.iter() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&read_header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?)?;
        manifest.model.validate()?;
        let mut params = ModelParams::<f32>::unit(&manifest.model);
        let mut optimizer = manifest
            .optimizer
            .as_ref()
            .map(|o| OptimizerState::new(&params, o.config));
        if let (Some(opt), Some(stored)) = (optimizer.as_mut(), manifest.optimizer.as_ref()) {
            opt.step = stored.step;
        }

        let mut sets: Vec<(&str, &mut ModelParams<f32>)> = vec![("", &mut params)];
        if let Some(opt) = optimizer.as_mut() {
            sets.push(("adamw.m/", &mut opt.m));
            sets.push(("adamw.v/", &mut opt.v));
        }
        let expected: Vec<TensorEntry> = sets.iter().flat_map(|(prefix, p)| entries(p, prefix)).collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, configuration implies {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        for (want, got) in expected.iter().zip(&manifest.tensors) {
            if want.name != got.name {
                return Err(Error::Format(format!("expected tensor `{}`, found `{}`", want.name, got.name)));
            }
            if want.shape != got.shape {
                return Err(Error::Shape {
                    tensor: want.name.clone(),
                    expected: want.shape.clone(),
                    found: got.shape.clone(),
                });
            }
        }
        for (_, p) in sets.iter_mut() {
            for (_, mut t) in p.tensors_mut() {
                let bytes = read_bytes(r, t.len() * 4)?;
                for (x, b) in t.iter_mut().zip(bytes.chunks_exact(4)) {
                    *x = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                }
            }
        }
        expect_eof(r)?;

        Ok(Self {
            model: manifest.model,
            train: manifest.train,
            epoch: manifest.epoch,
            history: manifest
                .history
                .into_iter()
                .map(|r| EpochRecord {
                    epoch: r.epoch,
                    train_loss: r.train_loss,
                    val_loss: r.val_loss,
                    val_auc: r.val_auc.unwrap_or(f64::NAN),
                    seconds: r.seconds,
                })
                .collect(),
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::VocabSpec;
    use crate::model::init_params;

    fn tiny() -> Checkpoint {
        let train = TrainConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_seq: 4,
            ..TrainConfig::default()
        };
        let model = train.model_config(VocabSpec::new(3));
        let params = init_params::<f32>(&model).unwrap();
        let mut opt = OptimizerState::new(&params, train.adamw());
        opt.step = 5;
        opt.m.fill(0.25);
        opt.v.fill(0.5);
        Checkpoint {
            model,
            train,
            epoch: 2,
            history: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.6,
                val_loss: 0.7,
                val_auc: f64::NAN,
                seconds: 1.5,
            }],
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ck = tiny();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.params.max_abs_diff(&ck.params), 0.0);
        let (a, b) = (back.optimizer.unwrap(), ck.optimizer.unwrap());
        assert_eq!(a.step, 5);
        assert_eq!(a.m.max_abs_diff(&b.m), 0.0);
        assert_eq!(a.v.max_abs_diff(&b.v), 0.0);
        assert_eq!(back.model, ck.model);
        assert_eq!(back.train, ck.train);
        assert!(back.history[0].val_auc.is_nan());
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let ck = tiny();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let from = r#"{"name":"head.w","shape":[8]}"#;
        assert!(text.contains(from));
        let to = r#"{"name":"head.w","shape":[9]}"#;
        let patched = bytes
            .windows(from.len())
            .position(|w| w == from.as_bytes())
            .map(|i| {
                let mut b = bytes.clone();
                b[i..i + from.len()].copy_from_slice(to.as_bytes());
                b
            })
            .unwrap();
        match Checkpoint::read_from(&mut patched.as_slice()) {
            Err(Error::Shape { tensor, .. }) => assert_eq!(tensor, "head.w"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
