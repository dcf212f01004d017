//! Checkpoint files: `DIADCKPT`, a little-endian `u64` header length, a JSON
//! header, then raw little-endian tensor data. Parameters are `f32`,
//! optimizer moments `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use diad_core::autoencoder::Autoencoder;
use diad_core::denoiser::{build_assembly, DenoiserAssembly};
use diad_core::optim::{AdamState, AdamW};
use diad_core::params::{ParamGroup, ParamStore};
use diad_core::training::{Phase, TrainingState};
use diad_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"DIADCKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Autoencoder,
    Denoiser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    role: Role,
    shape: Vec<usize>,
    offset: u64,
}

/// Position of the phase that produced the checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseProgress {
    pub phase: String,
    pub epoch: usize,
    pub batches: u64,
    pub optimizer_step: u64,
    pub complete: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config_hash: String,
    config: RunConfig,
    progress: Option<PhaseProgress>,
    latent_scale: Option<f64>,
    tensors: Vec<TensorEntry>,
}

/// Parsed checkpoint contents, before being bound to a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config_hash: String,
    pub config: RunConfig,
    pub progress: Option<PhaseProgress>,
    pub latent_scale: Option<f64>,
    params: BTreeMap<String, (ParamGroup, Tensor<f32>)>,
    adam_m: BTreeMap<String, Vec<f64>>,
    adam_v: BTreeMap<String, Vec<f64>>,
}

fn encode(
    kind: ModelKind,
    config: &RunConfig,
    store: &ParamStore<f32>,
    state: Option<(&TrainingState, bool)>,
    latent_scale: Option<f64>,
) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    for (id, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group.name().into(),
            role: Role::Param,
            shape: p.value.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in p.value.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        if let Some((s, _)) = state {
            for (role, moments) in [
                (Role::AdamM, &s.optimizer.state.m),
                (Role::AdamV, &s.optimizer.state.v),
            ] {
                if let Some(m) = moments.get(&id) {
                    tensors.push(TensorEntry {
                        name: p.name.clone(),
                        group: p.group.name().into(),
                        role,
                        shape: vec![m.len()],
                        offset: data.len() as u64,
                    });
                    for v in m {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
    let header = Header {
        kind,
        config_hash: config.hash(),
        config: config.clone(),
        progress: state.map(|(s, complete)| PhaseProgress {
            phase: s.phase.name().into(),
            epoch: s.epoch,
            batches: s.batches,
            optimizer_step: s.optimizer.state.step,
            complete,
        }),
        latent_scale,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn save_autoencoder(
    path: &Path,
    config: &RunConfig,
    ae: &Autoencoder<f32>,
    state: Option<(&TrainingState, bool)>,
) -> Result<()> {
    write_atomic(
        path,
        &encode(
            ModelKind::Autoencoder,
            config,
            &ae.store,
            state,
            Some(ae.latent_scale),
        ),
    )
}

pub fn save_denoiser(
    path: &Path,
    config: &RunConfig,
    asm: &DenoiserAssembly<f32>,
    state: Option<(&TrainingState, bool)>,
) -> Result<()> {
    write_atomic(
        path,
        &encode(ModelKind::Denoiser, config, &asm.store, state, None),
    )
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::decode(&bytes, path)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(path, "truncated checkpoint header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::format(path, e))?;
        let data = &bytes[body..];
        let mut ck = Checkpoint {
            kind: header.kind,
            config_hash: header.config_hash,
            config: header.config,
            progress: header.progress,
            latent_scale: header.latent_scale,
            params: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
        };
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let width = if t.role == Role::Param { 4 } else { 8 };
            let start = t.offset as usize;
            let raw = start
                .checked_add(n * width)
                .and_then(|end| data.get(start..end))
                .ok_or_else(|| {
                    Error::format(path, format!("tensor {} lies outside the file", t.name))
                })?;
            match t.role {
                Role::Param => {
                    let group = ParamGroup::from_name(&t.group).ok_or_else(|| {
                        Error::format(path, format!("unknown parameter group {:?}", t.group))
                    })?;
                    let v = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    ck.params
                        .insert(t.name, (group, Tensor::from_vec(&t.shape, v)?));
                }
                Role::AdamM | Role::AdamV => {
                    let v = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    let map = if t.role == Role::AdamM {
                        &mut ck.adam_m
                    } else {
                        &mut ck.adam_v
                    };
                    map.insert(t.name, v);
                }
            }
        }
        Ok(ck)
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Copies every stored parameter into `store`, matching by name.
    fn fill(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store
            .iter()
            .map(|(id, p)| (id, p.name.clone(), p.group))
            .collect();
        if ids.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors but the model has {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (id, name, group) in ids {
            let (g, t) = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if *g != group || t.shape() != store.value(id).shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint has {} {:?}, model expects {} {:?}",
                    g.name(),
                    t.shape(),
                    group.name(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Copies the parameters of one group into a model built from a
    /// different (but compatible) configuration.
    pub fn load_group(&self, store: &mut ParamStore<f32>, group: ParamGroup) -> Result<()> {
        for id in store.ids_in(group) {
            let name = store.get(id).name.clone();
            let (_, t) = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn autoencoder(&self) -> Result<Autoencoder<f32>> {
        self.expect_kind(ModelKind::Autoencoder)?;
        let mut ae = Autoencoder::new(self.config.autoencoder()?, self.config.seed)?;
        self.fill(&mut ae.store)?;
        ae.latent_scale = self.latent_scale.unwrap_or(1.0);
        Ok(ae)
    }

    pub fn denoiser(&self) -> Result<DenoiserAssembly<f32>> {
        self.expect_kind(ModelKind::Denoiser)?;
        let mut asm = build_assembly(self.config.denoiser()?, self.config.seed)?;
        self.fill(&mut asm.store)?;
        Ok(asm)
    }

    pub fn phase(&self) -> Option<Phase> {
        self.progress
            .as_ref()
            .and_then(|p| Phase::from_name(&p.phase))
    }

    pub fn is_complete(&self, phase: Phase) -> bool {
        self.phase() == Some(phase) && self.progress.as_ref().is_some_and(|p| p.complete)
    }

    /// Rebuilds the training state of `phase` against `store`, which must be
    /// the model this checkpoint was loaded into.
    pub fn training_state(
        &self,
        store: &ParamStore<f32>,
        optimizer: AdamW,
        phase: Phase,
    ) -> Result<TrainingState> {
        let p = self
            .progress
            .as_ref()
            .filter(|_| self.phase() == Some(phase))
            .ok_or_else(|| {
                Error::Config(format!("checkpoint carries no {} state", phase.name()))
            })?;
        let mut state = AdamState {
            step: p.optimizer_step,
            ..AdamState::default()
        };
        for (id, param) in store.iter() {
            if let Some(m) = self.adam_m.get(&param.name) {
                state.m.insert(id, m.clone());
            }
            if let Some(v) = self.adam_v.get(&param.name) {
                state.v.insert(id, v.clone());
            }
        }
        Ok(TrainingState {
            phase,
            epoch: p.epoch,
            batches: p.batches,
            optimizer: AdamW { state, ..optimizer },
        })
    }
}
