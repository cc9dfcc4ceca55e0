//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `PADSCKPT` |
//! | 4     | `u32` format version (currently 1) |
//! | 8     | `u64` header length `H` |
//! | H     | UTF-8 JSON header |
//! | ...   | raw weights as `f64` LE, tensor by tensor in header order |
//! | ...   | EMA weights, same order and shapes |
//!
//! The header records the topology id, model and schedule configuration,
//! normalization scale, the dataset mean pose, and each tensor's name and
//! shape. A trailing byte count check rejects truncated or padded files.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DenoiserParams, ModelConfig};
use crate::autodiff::Tensor;
use crate::data::NormalizationInfo;
use crate::diffusion::{NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::skeleton::{Pose3D, TOPOLOGY_ID};

pub const MAGIC: &[u8; 8] = b"PADSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
    pub normalization: NormalizationInfo,
    /// Pelvis-rooted dataset mean (mm).
    pub mean_pose: Pose3D,
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    topology: String,
    model: ModelConfig,
    schedule: ScheduleParams,
    scale_mm: f64,
    mean_pose: Pose3D,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        self.params.check_shapes(&self.model)?;
        self.ema.check_shapes(&self.model)?;
        let mut tensors = Vec::new();
        self.params
            .visit(&mut |name, t| tensors.push((name, t.shape().to_vec())));
        let header = Header {
            topology: TOPOLOGY_ID.to_string(),
            model: self.model,
            schedule: self.schedule,
            scale_mm: self.normalization.scale_mm,
            mean_pose: self.mean_pose,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for set in [&self.params, &self.ema] {
            for t in set.leaves() {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8);
        if hlen > 1 << 24 {
            return Err(Error::Format(format!("implausible header length {hlen}")));
        }
        let mut json = vec![0u8; hlen as usize];
        r.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.topology != TOPOLOGY_ID {
            return Err(Error::Format(format!(
                "topology {:?} does not match {TOPOLOGY_ID:?}",
                header.topology
            )));
        }
        header.model.validate()?;
        header.schedule.build()?;
        let normalization = NormalizationInfo::new(header.scale_mm)?;

        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let total: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if rest.len() != 2 * total * 8 {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {}",
                rest.len(),
                2 * total * 8
            )));
        }
        let mut values = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut read_set = || -> Result<Vec<Tensor>> {
            header
                .tensors
                .iter()
                .map(|(_, shape)| {
                    let n = shape.iter().product();
                    Tensor::new(shape.clone(), values.by_ref().take(n).collect())
                })
                .collect()
        };
        let params_t = read_set()?;
        let ema_t = read_set()?;

        let fill = |tensors: Vec<Tensor>| -> Result<DenoiserParams> {
            let mut p = DenoiserParams::init(
                &header.model,
                &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
            )?;
            let names = p.names();
            if names.len() != tensors.len() {
                return Err(Error::Format("tensor count does not match model config".into()));
            }
            for (((slot, t), name), (hname, _)) in
                p.leaves_mut().into_iter().zip(tensors).zip(&names).zip(&header.tensors)
            {
                if name != hname || slot.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "tensor {hname} {:?} does not match expected {name} {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            if !p.is_finite() {
                return Err(Error::Format("checkpoint contains non-finite weights".into()));
            }
            Ok(p)
        };
        Ok(Self {
            model: header.model,
            schedule: header.schedule,
            normalization,
            mean_pose: header.mean_pose,
            params: fill(params_t)?,
            ema: fill(ema_t)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Inference bundle built on the EMA weights.
    pub fn into_model(self) -> Result<PoseModel> {
        PoseModel::new(self.model, self.ema, &self.schedule, self.normalization, self.mean_pose)
    }
}

/// Everything the solvers need: EMA weights, schedule and normalization.
#[derive(Clone, Debug)]
pub struct PoseModel {
    pub config: ModelConfig,
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub normalization: NormalizationInfo,
    pub mean_pose: Pose3D,
}

impl PoseModel {
    pub fn new(
        config: ModelConfig,
        params: DenoiserParams,
        schedule: &ScheduleParams,
        normalization: NormalizationInfo,
        mean_pose: Pose3D,
    ) -> Result<Self> {
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            params,
            schedule: schedule.build()?,
            normalization,
            mean_pose,
        })
    }
}
