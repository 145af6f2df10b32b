//! Binary checkpoint: magic, version, a JSON header describing every tensor,
//! then the little-endian payload.
//!
//! ```text
//! "APDCKPT\0" | u32 version | u64 header_len | header JSON | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use apd_autograd::{AdamW, DType, ParamKind, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{ApdError, Result};

const MAGIC: &[u8; 8] = b"APDCKPT\0";
const VERSION: u32 = 1;
const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    OptimizerMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub config: RunConfig,
    /// Number of completed training iterations.
    pub iteration: u64,
    pub optimizer_step: u64,
    pub best_val_f1: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    payload: Vec<u8>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn dtype_from_name(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(ApdError::Checkpoint(format!("unknown dtype `{other}`"))),
    }
}

impl Checkpoint {
    /// Snapshot parameters, buffers and (optionally) optimizer moments.
    pub fn capture<T: Scalar>(
        config: &RunConfig,
        store: &ParamStore<T>,
        optimizer: Option<&AdamW<T>>,
        iteration: u64,
        best_val_f1: Option<f64>,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, kind: TensorKind, t: &Tensor<T>| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                kind,
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        };
        for id in store.ids() {
            let kind = match store.kind(id) {
                ParamKind::Trainable => TensorKind::Param,
                ParamKind::Buffer => TensorKind::Buffer,
            };
            push(store.name(id).to_string(), kind, store.get(id));
        }
        if let Some(opt) = optimizer {
            for id in store.ids() {
                if let Some((m, v)) = opt.moments(id) {
                    push(format!("{M_PREFIX}{}", store.name(id)), TensorKind::OptimizerMoment, m);
                    push(format!("{V_PREFIX}{}", store.name(id)), TensorKind::OptimizerMoment, v);
                }
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                dtype: dtype_name(T::DTYPE).into(),
                config: config.clone(),
                iteration,
                optimizer_step: optimizer.map_or(0, |o| o.step_count()),
                best_val_f1,
                tensors,
            },
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| ApdError::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(ApdError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| ApdError::Checkpoint(format!("bad header: {e}")))?;
        let payload = bytes[header_end..].to_vec();
        let size = dtype_from_name(&header.dtype)?.size_of();
        for t in &header.tensors {
            let end = t.offset as usize + t.shape.iter().product::<usize>() * size;
            if end > payload.len() {
                return Err(ApdError::Checkpoint(format!("tensor `{}` runs past the payload", t.name)));
            }
        }
        Ok(Checkpoint { header, payload })
    }

    /// Written to a sibling temporary file first, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| ApdError::io(&tmp, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| ApdError::io(&tmp, e))?;
        file.sync_all().map_err(|e| ApdError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| ApdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ApdError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            ApdError::Checkpoint(msg) => ApdError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.header.tensors.iter().find(|t| t.name == name)
    }

    /// Stored tensor converted to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        let entry = self.entry(name)?;
        let dtype = dtype_from_name(&self.header.dtype).ok()?;
        let size = dtype.size_of();
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let bytes = &self.payload[start..start + n * size];
        let data: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
        };
        Tensor::from_vec(&entry.shape, data).ok()
    }

    /// Overwrite every store entry from the checkpoint. All names must be present
    /// with the expected shape.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        let mut values = Vec::with_capacity(ids.len());
        for &id in &ids {
            let name = store.name(id);
            let expected = store.get(id).shape().to_vec();
            let entry = self.entry(name).ok_or_else(|| ApdError::ParamShape {
                name: name.to_string(),
                expected: expected.clone(),
                found: Vec::new(),
            })?;
            if entry.shape != expected {
                return Err(ApdError::ParamShape {
                    name: name.to_string(),
                    expected,
                    found: entry.shape.clone(),
                });
            }
            values.push(self.tensor::<T>(name).expect("entry validated on load"));
        }
        if let Some(extra) = self
            .header
            .tensors
            .iter()
            .find(|t| t.kind != TensorKind::OptimizerMoment && store.find(&t.name).is_none())
        {
            return Err(ApdError::ParamShape {
                name: extra.name.clone(),
                expected: Vec::new(),
                found: extra.shape.clone(),
            });
        }
        for (id, value) in ids.into_iter().zip(values) {
            store.set(id, value)?;
        }
        Ok(())
    }

    /// Rebuild optimizer state for the parameters of `store`.
    pub fn restore_optimizer<T: Scalar>(&self, store: &ParamStore<T>, optimizer: &mut AdamW<T>) -> Result<()> {
        let mut moments = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            let m = self.tensor::<T>(&format!("{M_PREFIX}{name}"));
            let v = self.tensor::<T>(&format!("{V_PREFIX}{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    if m.shape() != store.get(id).shape() || v.shape() != m.shape() {
                        return Err(ApdError::ParamShape {
                            name: format!("{M_PREFIX}{name}"),
                            expected: store.get(id).shape().to_vec(),
                            found: m.shape().to_vec(),
                        });
                    }
                    moments.push((id, m, v));
                }
                (None, None) => {}
                _ => return Err(ApdError::Checkpoint(format!("incomplete optimizer moments for `{name}`"))),
            }
        }
        optimizer.restore(self.header.optimizer_step, moments);
        Ok(())
    }
}
