//! On-disk model formats.
//!
//! A single model is a directory holding `manifest.json` (config plus a
//! tensor table with byte offsets and CRC-32 checksums) and `params.bin`
//! (little-endian f32 in manifest order). An ensemble directory holds
//! `ensemble.json` and one model directory per member; a distributed model
//! directory holds `distributed.json`, the gate ensemble and one model
//! directory per expert.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::models::{DistributedModel, GlobalEnsemble, OverlapPolicy, SaffirSimpsonCategory, SpeedRange};
use crate::network::{Model, NetworkConfig};
use crate::predict::SpeedPredictor;

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_MANIFEST: &str = "manifest.json";
pub const MODEL_PARAMS: &str = "params.bin";
pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";
pub const DISTRIBUTED_MANIFEST: &str = "distributed.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
    pub crc32: u32,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub version: u32,
    pub config: NetworkConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    /// Directory relative to the ensemble directory.
    pub path: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub version: u32,
    pub members: Vec<MemberEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub category: SaffirSimpsonCategory,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributedManifest {
    pub version: u32,
    /// Gate ensemble directory, relative.
    pub gate: String,
    pub experts: Vec<ExpertEntry>,
    pub ranges: BTreeMap<SaffirSimpsonCategory, SpeedRange>,
    pub overlap: OverlapPolicy,
    /// Categories answered by the gate alone.
    pub fallbacks: Vec<SaffirSimpsonCategory>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::checkpoint(path, format!("malformed manifest: {e}")))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_model(model: &Model<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, role, t) in model.tensors() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
            trainable: role.trainable(),
        });
        blob.extend_from_slice(&bytes);
    }
    let params = dir.join(MODEL_PARAMS);
    fs::write(&params, &blob).map_err(|e| Error::io(&params, e))?;
    write_json(
        &dir.join(MODEL_MANIFEST),
        &ModelManifest {
            version: FORMAT_VERSION,
            config: model.config().clone(),
            tensors,
        },
    )
}

/// Loads a model and verifies every tensor's name, shape, bounds and checksum.
pub fn load_model(dir: impl AsRef<Path>) -> Result<Model<f32>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MODEL_MANIFEST);
    let manifest: ModelManifest = read_json(&manifest_path)?;
    check_version(&manifest_path, manifest.version)?;
    manifest
        .config
        .validate()
        .map_err(|e| Error::checkpoint(&manifest_path, format!("invalid network config: {e}")))?;
    let params = dir.join(MODEL_PARAMS);
    let blob = fs::read(&params).map_err(|e| Error::io(&params, e))?;
    let mut model = Model::<f32>::build(manifest.config.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, _, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::checkpoint(
            &manifest_path,
            format!("expected {} tensors, manifest lists {}", expected.len(), manifest.tensors.len()),
        ));
    }
    for ((entry, (name, shape)), (_, slot)) in manifest.tensors.iter().zip(&expected).zip(model.tensors_mut()) {
        if &entry.name != name || &entry.shape != shape || entry.dtype != "f32" {
            return Err(Error::checkpoint(
                &manifest_path,
                format!(
                    "tensor {} {:?} {} does not match expected {name} {shape:?} f32",
                    entry.name, entry.shape, entry.dtype
                ),
            ));
        }
        let start = entry.offset as usize;
        let end = start.checked_add(entry.length as usize).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return Err(Error::checkpoint(
                &params,
                format!("tensor {name} extends past end of file ({} bytes)", blob.len()),
            ));
        };
        if entry.length as usize != slot.len() * 4 {
            return Err(Error::checkpoint(&manifest_path, format!("tensor {name} has wrong byte length")));
        }
        let bytes = &blob[start..end];
        if crc32fast::hash(bytes) != entry.crc32 {
            return Err(Error::checkpoint(&params, format!("checksum mismatch in tensor {name}")));
        }
        for (v, chunk) in slot.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    Ok(model)
}

pub fn save_ensemble(ensemble: &GlobalEnsemble, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut members = Vec::new();
    for (i, (m, &seed)) in ensemble.members().iter().zip(ensemble.seeds()).enumerate() {
        let path = format!("member_{i:02}");
        save_model(m, dir.join(&path))?;
        members.push(MemberEntry { path, seed });
    }
    write_json(
        &dir.join(ENSEMBLE_MANIFEST),
        &EnsembleManifest {
            version: FORMAT_VERSION,
            members,
        },
    )
}

pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<GlobalEnsemble> {
    let dir = dir.as_ref();
    let path = dir.join(ENSEMBLE_MANIFEST);
    let manifest: EnsembleManifest = read_json(&path)?;
    check_version(&path, manifest.version)?;
    let mut members = Vec::new();
    let mut seeds = Vec::new();
    for (index, m) in manifest.members.iter().enumerate() {
        members.push(load_model(dir.join(&m.path)).map_err(|e| Error::Member {
            index,
            source: Box::new(e),
        })?);
        seeds.push(m.seed);
    }
    GlobalEnsemble::from_models(members, seeds).map_err(|e| Error::checkpoint(&path, e.to_string()))
}

pub fn save_distributed(model: &DistributedModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    save_ensemble(&model.gate, dir.join("gate"))?;
    let mut experts = Vec::new();
    for (&category, m) in &model.experts {
        let path = format!("expert_{}", category.name());
        save_model(m, dir.join(&path))?;
        experts.push(ExpertEntry { category, path });
    }
    write_json(
        &dir.join(DISTRIBUTED_MANIFEST),
        &DistributedManifest {
            version: FORMAT_VERSION,
            gate: "gate".into(),
            experts,
            ranges: model.ranges.clone(),
            overlap: model.overlap,
            fallbacks: model.fallbacks(),
        },
    )
}

pub fn load_distributed(dir: impl AsRef<Path>) -> Result<DistributedModel> {
    let dir = dir.as_ref();
    let path = dir.join(DISTRIBUTED_MANIFEST);
    let manifest: DistributedManifest = read_json(&path)?;
    check_version(&path, manifest.version)?;
    let gate = load_ensemble(dir.join(&manifest.gate))?;
    let mut experts = BTreeMap::new();
    for e in &manifest.experts {
        let m = load_model(dir.join(&e.path)).map_err(|err| Error::Expert {
            category: e.category.name().into(),
            source: Box::new(err),
        })?;
        if m.config().input_size != gate.input_size() {
            return Err(Error::checkpoint(&path, format!("expert {} input size differs from gate", e.category)));
        }
        experts.insert(e.category, m);
    }
    DistributedModel::new(gate, experts, manifest.ranges, manifest.overlap)
        .map_err(|e| Error::checkpoint(&path, e.to_string()))
}

/// Any loadable model.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Checkpoint {
    Single(Model<f32>),
    Ensemble(GlobalEnsemble),
    Distributed(DistributedModel),
}

impl Checkpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Single(_) => "single",
            Checkpoint::Ensemble(_) => "ensemble",
            Checkpoint::Distributed(_) => "distributed",
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Checkpoint::Single(m) => m.config().input_size,
            Checkpoint::Ensemble(e) => e.input_size(),
            Checkpoint::Distributed(d) => d.gate.input_size(),
        }
    }

    /// Networks in the gate or ensemble (1 for a single model).
    pub fn member_count(&self) -> usize {
        match self {
            Checkpoint::Single(_) => 1,
            Checkpoint::Ensemble(e) => e.len(),
            Checkpoint::Distributed(d) => d.gate.len(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        match self {
            Checkpoint::Single(m) => save_model(m, dir),
            Checkpoint::Ensemble(e) => save_ensemble(e, dir),
            Checkpoint::Distributed(d) => save_distributed(d, dir),
        }
    }
}

impl SpeedPredictor for Checkpoint {
    fn predict_speeds(&self, images: &[&Image]) -> Result<Vec<f32>> {
        match self {
            Checkpoint::Single(m) => m.predict_speeds(images),
            Checkpoint::Ensemble(e) => e.predict_speeds(images),
            Checkpoint::Distributed(d) => d.predict_speeds(images),
        }
    }
}

/// Loads whichever kind of checkpoint `dir` holds.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    if dir.join(DISTRIBUTED_MANIFEST).is_file() {
        Ok(Checkpoint::Distributed(load_distributed(dir)?))
    } else if dir.join(ENSEMBLE_MANIFEST).is_file() {
        Ok(Checkpoint::Ensemble(load_ensemble(dir)?))
    } else if dir.join(MODEL_MANIFEST).is_file() {
        Ok(Checkpoint::Single(load_model(dir)?))
    } else {
        Err(Error::checkpoint(
            PathBuf::from(dir),
            format!("no {MODEL_MANIFEST}, {ENSEMBLE_MANIFEST} or {DISTRIBUTED_MANIFEST} found"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::images_to_tensor;
    use crate::models::{expert_ranges, SaffirSimpsonCategory};

    fn probe(size: usize) -> Image {
        Image::from_fn(size, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0)
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let mut m = Model::<f32>::build(NetworkConfig::small(), 3).unwrap();
        m.stages_mut()[0].running.mean.data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        for ((n1, _, a), (n2, _, b)) in m.tensors().into_iter().zip(back.tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        let x = images_to_tensor([&probe(64)], 64);
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let m = Model::<f32>::build(NetworkConfig::small(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        let params = dir.path().join(MODEL_PARAMS);
        let mut bytes = fs::read(&params).unwrap();
        bytes[10] ^= 0xff;
        fs::write(&params, &bytes).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        bytes.truncate(100);
        fs::write(&params, &bytes).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("past end"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let m = Model::<f32>::build(NetworkConfig::small(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        let path = dir.path().join(MODEL_MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replacen("\"version\": 1", "\"version\": 9", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn distributed_round_trip_and_detection() {
        let cfg = NetworkConfig::small();
        let gate = GlobalEnsemble::from_models(
            vec![Model::build(cfg.clone(), 1).unwrap(), Model::build(cfg.clone(), 2).unwrap()],
            vec![1, 2],
        )
        .unwrap();
        let experts = [(SaffirSimpsonCategory::TS, Model::build(cfg, 3).unwrap())].into_iter().collect();
        let ranges = expert_ranges(185.0, OverlapPolicy::OneThirdAdjacent).into_iter().collect();
        let dm = DistributedModel::new(gate, experts, ranges, OverlapPolicy::OneThirdAdjacent).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_distributed(&dm, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.kind(), "distributed");
        assert_eq!(back.member_count(), 2);
        let img = probe(64);
        assert_eq!(dm.predict_speeds(&[&img]).unwrap(), back.predict_speeds(&[&img]).unwrap());
        assert_eq!(load_checkpoint(dir.path().join("gate")).unwrap().kind(), "ensemble");
        assert!(load_checkpoint(dir.path().join("nowhere")).is_err());
    }
}
