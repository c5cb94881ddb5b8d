//! Checkpoint directories: `manifest.json` describing every array and
//! `payload.bin` holding the arrays as little-endian f64, back to back.
//!
//! Payload order: parameters in model order, then the running mean and
//! variance of each batch-norm layer, then the Adam first and second moments
//! in parameter order. Saving a loaded checkpoint reproduces both files
//! byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Model};
use crate::numerics::{BatchNormState, ParamSet, Tensor};
use crate::optim::AdamState;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `init`, `mlm`, `stage1` or `stage2`.
    pub stage: String,
    pub epoch: usize,
    pub val_metric: Option<f64>,
}

impl Provenance {
    pub fn init() -> Self {
        Self { stage: "init".into(), epoch: 0, val_metric: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, optimizer: None, provenance: Provenance::init() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, payload) = self.encode()?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        fs::write(dir.join(PAYLOAD_FILE), payload)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let payload = fs::read(dir.join(PAYLOAD_FILE))?;
        Self::decode(&manifest, &payload)
    }

    /// The manifest text and payload bytes that [`Checkpoint::save`] writes.
    pub fn encode(&self) -> Result<(String, Vec<u8>)> {
        let mut payload = Vec::new();
        let mut arrays = Vec::new();
        let mut push = |name: &str, kind: ArrayKind, shape: &[usize], data: &[f64], trainable: Option<bool>| {
            arrays.push(ArrayEntry {
                name: name.to_string(),
                kind,
                shape: shape.to_vec(),
                offset: payload.len() as u64,
                trainable,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.model.params.iter() {
            push(&p.name, ArrayKind::Param, p.value.shape(), p.value.data(), Some(p.trainable));
        }
        for (layer, st) in [("cls.bn1", &self.model.bn1), ("cls.bn2", &self.model.bn2)] {
            let n = [st.features()];
            push(layer, ArrayKind::RunningMean, &n, &st.running_mean, None);
            push(layer, ArrayKind::RunningVar, &n, &st.running_var, None);
        }
        let optimizer = match &self.optimizer {
            None => None,
            Some(opt) => {
                if opt.m.len() != self.model.params.len() || opt.v.len() != self.model.params.len() {
                    return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
                }
                for (p, m) in self.model.params.iter().zip(&opt.m) {
                    push(&p.name, ArrayKind::AdamM, m.shape(), m.data(), None);
                }
                for (p, v) in self.model.params.iter().zip(&opt.v) {
                    push(&p.name, ArrayKind::AdamV, v.shape(), v.data(), None);
                }
                Some(OptimizerHeader { step: opt.step, beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps })
            }
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            provenance: self.provenance.clone(),
            batch_norm: [&self.model.bn1, &self.model.bn2].map(|s| BatchNormHeader { momentum: s.momentum, eps: s.eps }),
            optimizer,
            payload_bytes: payload.len() as u64,
            arrays,
        };
        Ok((serde_json::to_string_pretty(&manifest)? + "\n", payload))
    }

    pub fn decode(manifest: &str, payload: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_str(manifest)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", m.format_version)));
        }
        if m.payload_bytes != payload.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest expects {}",
                payload.len(),
                m.payload_bytes
            )));
        }
        let mut model = Model::init(m.config.clone())?;
        let mut entries = m.arrays.iter();
        let mut next = |kind: ArrayKind, name: &str, shape: &[usize]| -> Result<(&ArrayEntry, Vec<f64>)> {
            let e = entries
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("manifest ends before {kind:?} `{name}`")))?;
            if e.kind != kind || e.name != name || e.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "expected {kind:?} `{name}` {shape:?}, found {:?} `{}` {:?}",
                    e.kind, e.name, e.shape
                )));
            }
            Ok((e, read_f64s(payload, e)?))
        };
        let names: Vec<(String, Vec<usize>)> =
            model.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        for (i, (name, shape)) in names.iter().enumerate() {
            let (e, data) = next(ArrayKind::Param, name, shape)?;
            let p = model.params.by_index_mut(i);
            p.value = Tensor::new(shape.clone(), data)?;
            p.trainable = e.trainable.unwrap_or(true);
        }
        for (k, layer) in ["cls.bn1", "cls.bn2"].into_iter().enumerate() {
            let features = if k == 0 { model.bn1.features() } else { model.bn2.features() };
            let (_, mean) = next(ArrayKind::RunningMean, layer, &[features])?;
            let (_, var) = next(ArrayKind::RunningVar, layer, &[features])?;
            let st = BatchNormState {
                running_mean: mean,
                running_var: var,
                momentum: m.batch_norm[k].momentum,
                eps: m.batch_norm[k].eps,
            };
            if k == 0 {
                model.bn1 = st;
            } else {
                model.bn2 = st;
            }
        }
        let optimizer = match &m.optimizer {
            None => None,
            Some(h) => {
                let mut moments = |kind| -> Result<Vec<Tensor>> {
                    names
                        .iter()
                        .map(|(name, shape)| Tensor::new(shape.clone(), next(kind, name, shape)?.1))
                        .collect()
                };
                let first = moments(ArrayKind::AdamM)?;
                let second = moments(ArrayKind::AdamV)?;
                Some(AdamState { beta1: h.beta1, beta2: h.beta2, eps: h.eps, step: h.step, m: first, v: second })
            }
        };
        if entries.next().is_some() {
            return Err(Error::Checkpoint("manifest lists unexpected trailing arrays".into()));
        }
        Ok(Self { model, optimizer, provenance: m.provenance })
    }
}

fn read_f64s(payload: &[u8], e: &ArrayEntry) -> Result<Vec<f64>> {
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start + n * 8;
    let bytes = payload
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("array `{}` lies outside the payload", e.name)))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Little-endian bytes of every parameter whose name satisfies `keep`, in model order.
pub fn param_bytes(params: &ParamSet, keep: impl Fn(&str) -> bool) -> Vec<u8> {
    params
        .iter()
        .filter(|p| keep(&p.name))
        .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    RunningMean,
    RunningVar,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
    offset: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    trainable: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchNormHeader {
    momentum: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: EncoderConfig,
    provenance: Provenance,
    batch_norm: [BatchNormHeader; 2],
    optimizer: Option<OptimizerHeader>,
    payload_bytes: u64,
    arrays: Vec<ArrayEntry>,
}
