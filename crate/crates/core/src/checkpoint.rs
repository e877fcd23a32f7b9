//! Binary checkpoints: model, encoder, schedule and optimizer state.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "BKCKPT\0\0" | u32 version | 64-byte hex config fingerprint
//! u64 metadata length | metadata JSON
//! u32 tensor count | per tensor: u16 name length, name, u8 rank,
//!                    u64 per dim, row-major f64 values
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::approximator::NeuralApproximator;
use crate::bridge::BridgeSchedule;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optim::AdamState;
use crate::prior::PriorEncoder;
use crate::trainer::{config_fingerprint, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"BKCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Hex SHA-256 of the trajectory-determining config.
    pub fingerprint: String,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    train: TrainConfig,
    loss: LossConfig,
    vocab: usize,
    feature_dim: usize,
    step: u64,
    adam_step: u64,
    encoder_adam_step: u64,
    best_valid: Option<f64>,
    encoder_fitted: bool,
}

struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(train: TrainConfig, loss: LossConfig, state: TrainState) -> Self {
        Self {
            fingerprint: config_fingerprint(&train, &loss),
            train,
            loss,
            state,
        }
    }

    /// Bridge steps of the stored schedule.
    pub fn steps(&self) -> usize {
        self.state.schedule.steps()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let tmp = path.with_extension("ckpt.tmp");
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        self.write_to(&mut w).map_err(io)?;
        w.into_inner().map_err(|e| io(e.into_error()))?.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Reads a checkpoint, rejecting it if `expected_fingerprint` is given
    /// and differs from the stored one.
    pub fn load(path: &Path, expected_fingerprint: Option<&str>) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::read_from(&mut BufReader::new(f), path)?;
        if let Some(want) = expected_fingerprint {
            if want != ck.fingerprint {
                return Err(Error::format(
                    path,
                    format!("config fingerprint {} does not match expected {want}", ck.fingerprint),
                ));
            }
        }
        Ok(ck)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let st = &self.state;
        let meta = Meta {
            train: self.train.clone(),
            loss: self.loss,
            vocab: st.encoder.vocab_size(),
            feature_dim: st.model.feature_dim(),
            step: st.step,
            adam_step: st.adam.step,
            encoder_adam_step: st.encoder_adam.step,
            best_valid: st.best_valid,
            encoder_fitted: st.encoder.is_fitted(),
        };
        let meta = serde_json::to_vec(&meta).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_all(self.fingerprint.as_bytes())?;
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(&meta)?;

        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let params = st.model.params.tensors();
        for (name, _, t) in &params {
            tensors.push((
                format!("model.{name}"),
                t.shape().to_vec(),
                t.as_slice().expect("contiguous"),
            ));
        }
        let enc = &st.encoder;
        tensors.push((
            "encoder.weights".into(),
            enc.weights.shape().to_vec(),
            enc.weights.as_slice().unwrap(),
        ));
        tensors.push((
            "encoder.bias".into(),
            enc.bias.shape().to_vec(),
            enc.bias.as_slice().unwrap(),
        ));
        tensors.push(("schedule.beta".into(), vec![st.schedule.steps()], st.schedule.betas()));
        for (prefix, adam) in [("adam", &st.adam), ("encoder_adam", &st.encoder_adam)] {
            for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
                tensors.push((format!("{prefix}.m.{i}"), vec![m.len()], m));
                tensors.push((format!("{prefix}.v.{i}"), vec![v.len()], v));
            }
        }
        w.write_u32::<LittleEndian>(tensors.len() as u32)?;
        for (name, shape, data) in tensors {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(shape.len() as u8)?;
            for d in &shape {
                w.write_u64::<LittleEndian>(*d as u64)?;
            }
            for v in data {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let io = |e: std::io::Error| Error::format(path, format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut fp = [0u8; 64];
        r.read_exact(&mut fp).map_err(io)?;
        let fingerprint = String::from_utf8(fp.to_vec()).map_err(|_| bad("corrupt fingerprint".into()))?;
        let meta_len = r.read_u64::<LittleEndian>().map_err(io)?;
        if meta_len > 1 << 24 {
            return Err(bad(format!("implausible metadata length {meta_len}")));
        }
        let mut meta = vec![0u8; meta_len as usize];
        r.read_exact(&mut meta).map_err(io)?;
        let meta: Meta = serde_json::from_slice(&meta).map_err(|e| bad(format!("metadata: {e}")))?;

        let count = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-UTF-8 tensor name".into()))?;
            let rank = r.read_u8().map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
            }
            let n: usize = shape.iter().product();
            if n > 1 << 28 {
                return Err(bad(format!("tensor {name} is implausibly large")));
            }
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            tensors.insert(name, Tensor { shape, data });
        }

        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let to2 = |name: &str, t: Tensor| -> Result<Array2<f64>> {
            match t.shape[..] {
                [a, b] => {
                    Array2::from_shape_vec((a, b), t.data).map_err(|e| Error::format(path, format!("{name}: {e}")))
                }
                _ => Err(Error::format(
                    path,
                    format!("{name}: expected rank 2, got {:?}", t.shape),
                )),
            }
        };

        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params =
            NeuralApproximator::new(meta.train.model.clone(), meta.vocab, meta.feature_dim, &mut rng)?.params;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
        for (name, (_, _, slot)) in names.iter().zip(params.tensors_mut()) {
            let key = format!("model.{name}");
            let t = to2(&key, take(&key)?)?;
            if t.dim() != slot.dim() {
                return Err(bad(format!("{key}: shape {:?}, expected {:?}", t.dim(), slot.dim())));
            }
            *slot = t;
        }
        let model = NeuralApproximator::from_params(meta.train.model.clone(), meta.vocab, meta.feature_dim, params)?;
        let weights = to2("encoder.weights", take("encoder.weights")?)?;
        let bias = Array1::from(take("encoder.bias")?.data);
        let encoder = PriorEncoder::from_parts(weights, bias, meta.encoder_fitted)?;
        let schedule = BridgeSchedule::from_betas(take("schedule.beta")?.data)?;
        let mut adam_for = |prefix: &str, n: usize, step: u64| -> Result<AdamState> {
            let mut st = AdamState {
                step,
                ..Default::default()
            };
            for i in 0..n {
                st.m.push(take(&format!("{prefix}.m.{i}"))?.data);
                st.v.push(take(&format!("{prefix}.v.{i}"))?.data);
            }
            Ok(st)
        };
        let adam = adam_for("adam", names.len(), meta.adam_step)?;
        let encoder_adam = adam_for("encoder_adam", 2, meta.encoder_adam_step)?;
        let ck = Self {
            fingerprint,
            train: meta.train,
            loss: meta.loss,
            state: TrainState {
                model,
                encoder,
                schedule,
                adam,
                encoder_adam,
                step: meta.step,
                best_valid: meta.best_valid,
            },
        };
        if ck.fingerprint != config_fingerprint(&ck.train, &ck.loss) {
            return Err(bad("stored config does not match the stored fingerprint".into()));
        }
        Ok(ck)
    }
}
