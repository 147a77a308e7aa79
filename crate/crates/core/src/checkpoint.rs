//! On-disk checkpoints: one little-endian f32 file per tensor plus a JSON
//! manifest with names, shapes, the frozen/trainable partition, and a config
//! hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{AdapterSpec, GeneratorConfig, GeneratorState};
use crate::params::ParamStore;
use crate::perceptual::FeatureStats;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Backbone weights; never updated by adaptation.
    Frozen,
    /// Adapter weights.
    Trainable,
    /// Training-time heads (discriminators, alignment projection).
    Aux,
    /// Non-parameter arrays such as feature statistics.
    Data,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub model_id: String,
    pub config_hash: String,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub adapter_spec: Option<AdapterSpec>,
    #[serde(default)]
    pub pretrained: bool,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} in {}",
                m.format_version,
                path.display()
            )));
        }
        Ok(m)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn group(&self, g: Group) -> impl Iterator<Item = &TensorEntry> {
        self.tensors.iter().filter(move |t| t.group == g)
    }
}

/// SHA-256 of the canonical JSON of the generator and adapter configuration.
pub fn config_hash(config: &GeneratorConfig, adapters: Option<&AdapterSpec>) -> Result<String> {
    let v = serde_json::json!({ "generator": config, "adapters": adapters });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}

fn tensor_path(dir: &Path, name: &str) -> Result<PathBuf> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::Checkpoint(format!(
            "tensor name {name:?} is not a valid file name"
        )));
    }
    Ok(dir.join(TENSOR_DIR).join(format!("{name}.bin")))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            path.display(),
            bytes.len(),
            shape,
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

/// Rounds every value to f32, matching what a save/load cycle produces.
pub fn round_to_f32(store: &mut ParamStore) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn write_groups(dir: &Path, groups: &[(Group, &ParamStore)]) -> Result<Vec<TensorEntry>> {
    let tdir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut entries = Vec::new();
    for (group, store) in groups {
        for (name, t) in store.iter() {
            if entries.iter().any(|e: &TensorEntry| &e.name == name) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} appears in two groups"
                )));
            }
            write_tensor(&tensor_path(dir, name)?, t)?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                group: *group,
            });
        }
    }
    Ok(entries)
}

fn read_group(dir: &Path, m: &Manifest, group: Group) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in m.group(group) {
        store.insert(
            e.name.clone(),
            read_tensor(&tensor_path(dir, &e.name)?, &e.shape)?,
        );
    }
    Ok(store)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    let tdir = dir.join(TENSOR_DIR);
    if tdir.exists() {
        fs::remove_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn default_id(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string())
}

/// Writes a generator (and optional auxiliary heads) to `dir`, replacing any
/// tensors already there.
pub fn save_generator(
    state: &GeneratorState,
    aux: Option<&ParamStore>,
    dir: &Path,
    model_id: Option<&str>,
) -> Result<Manifest> {
    prepare_dir(dir)?;
    let empty = ParamStore::new();
    let tensors = write_groups(
        dir,
        &[
            (Group::Frozen, &state.backbone),
            (Group::Trainable, &state.adapters),
            (Group::Aux, aux.unwrap_or(&empty)),
        ],
    )?;
    let m = Manifest {
        format_version: FORMAT_VERSION,
        kind: "generator".into(),
        model_id: model_id.map_or_else(|| default_id(dir), str::to_string),
        config_hash: config_hash(&state.config, state.adapter_spec.as_ref())?,
        config: serde_json::to_value(&state.config)?,
        adapter_spec: state.adapter_spec.clone(),
        pretrained: state.pretrained,
        tensors,
        metadata: BTreeMap::new(),
    };
    m.write(dir)?;
    Ok(m)
}

/// Loads a generator and its auxiliary heads, checking the config hash.
pub fn load_generator(dir: &Path) -> Result<(GeneratorState, ParamStore, Manifest)> {
    let m = Manifest::read(dir)?;
    if m.kind != "generator" {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?}, not a generator",
            dir.display(),
            m.kind
        )));
    }
    let config: GeneratorConfig = serde_json::from_value(m.config.clone())?;
    config.validate()?;
    let hash = config_hash(&config, m.adapter_spec.as_ref())?;
    if hash != m.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: manifest {} vs recomputed {}",
            m.config_hash, hash
        )));
    }
    let backbone = read_group(dir, &m, Group::Frozen)?;
    let adapters = read_group(dir, &m, Group::Trainable)?;
    let aux = read_group(dir, &m, Group::Aux)?;
    let fresh = GeneratorState::new_random(config.clone())?;
    for (name, t) in fresh.backbone.iter() {
        let got = backbone.require(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match config {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    let state = GeneratorState {
        config,
        backbone,
        adapters,
        adapter_spec: m.adapter_spec.clone(),
        pretrained: m.pretrained,
    };
    Ok((state, aux, m))
}

const STATS_MEAN: &str = "stats.mean";
const STATS_COV: &str = "stats.cov";

/// Persists reference feature statistics; the manifest records the
/// feature-net seed they were computed with.
pub fn save_stats(stats: &FeatureStats, net_seed: u64, dir: &Path) -> Result<Manifest> {
    prepare_dir(dir)?;
    let d = stats.dim();
    let mut store = ParamStore::new();
    store.insert(STATS_MEAN, Tensor::new(&[d], stats.mean.clone())?);
    store.insert(STATS_COV, Tensor::new(&[d, d], stats.cov.clone())?);
    let tensors = write_groups(dir, &[(Group::Data, &store)])?;
    let mut metadata = BTreeMap::new();
    metadata.insert("feature_net_seed".into(), serde_json::json!(net_seed));
    metadata.insert("count".into(), serde_json::json!(stats.count));
    let m = Manifest {
        format_version: FORMAT_VERSION,
        kind: "feature_stats".into(),
        model_id: default_id(dir),
        config_hash: hex::encode(Sha256::digest(net_seed.to_le_bytes())),
        config: serde_json::Value::Null,
        adapter_spec: None,
        pretrained: false,
        tensors,
        metadata,
    };
    m.write(dir)?;
    Ok(m)
}

/// Returns the statistics (f32-rounded) and the feature-net seed.
pub fn load_stats(dir: &Path) -> Result<(FeatureStats, u64)> {
    let m = Manifest::read(dir)?;
    if m.kind != "feature_stats" {
        return Err(Error::Checkpoint(format!(
            "{} does not hold feature stats",
            dir.display()
        )));
    }
    let seed = m
        .metadata
        .get("feature_net_seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("manifest lacks feature_net_seed".into()))?;
    let count = m
        .metadata
        .get("count")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as usize;
    let store = read_group(dir, &m, Group::Data)?;
    Ok((
        FeatureStats {
            mean: store.require(STATS_MEAN)?.data().to_vec(),
            cov: store.require(STATS_COV)?.data().to_vec(),
            count,
        },
        seed,
    ))
}

/// SHA-256 over the manifest and every tensor file, in name order.
pub fn digest(dir: &Path) -> Result<String> {
    let m = Manifest::read(dir)?;
    let mut h = Sha256::new();
    let mpath = dir.join(MANIFEST);
    h.update(fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?);
    let mut names: Vec<&str> = m.tensors.iter().map(|t| t.name.as_str()).collect();
    names.sort_unstable();
    for n in names {
        let p = tensor_path(dir, n)?;
        h.update(n.as_bytes());
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::{fit_stats, FeatureNet};
    use crate::types::TensorImage;

    fn adapted() -> GeneratorState {
        let mut s = GeneratorState::new_random(GeneratorConfig::tiny()).unwrap();
        s.attach_adapters(AdapterSpec::default()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = adapted();
        let mut aux = ParamStore::new();
        aux.insert("d.h1.w", Tensor::full(&[1, 16, 1, 1], 0.1));
        save_generator(&s, Some(&aux), dir.path(), Some("toy")).unwrap();
        let (l, laux, m) = load_generator(dir.path()).unwrap();
        round_to_f32(&mut s.backbone);
        round_to_f32(&mut s.adapters);
        round_to_f32(&mut aux);
        assert_eq!(l.backbone, s.backbone);
        assert_eq!(l.adapters, s.adapters);
        assert_eq!(laux, aux);
        assert_eq!(l.adapter_spec, s.adapter_spec);
        assert_eq!(m.model_id, "toy");
        assert_eq!(m.group(Group::Trainable).count(), s.adapters.len());
        assert_eq!(m.group(Group::Frozen).count(), s.backbone.len());
    }

    #[test]
    fn tensor_files_are_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tensor(&p, &Tensor::new(&[2], vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(
            bytes,
            [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat()
        );
        assert!(read_tensor(&p, &[3]).is_err());
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_generator(&adapted(), None, dir.path(), None).unwrap();
        let mut m = Manifest::read(dir.path()).unwrap();
        m.config["core_blocks"] = serde_json::json!(5);
        m.write(dir.path()).unwrap();
        assert!(matches!(
            load_generator(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn digest_tracks_content() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = adapted();
        save_generator(&s, None, a.path(), Some("m")).unwrap();
        save_generator(&s, None, b.path(), Some("m")).unwrap();
        assert_eq!(digest(a.path()).unwrap(), digest(b.path()).unwrap());
        let mut t = s.clone();
        t.backbone.iter_mut().next().unwrap().1.data_mut()[0] += 1.0;
        save_generator(&t, None, b.path(), Some("m")).unwrap();
        assert_ne!(digest(a.path()).unwrap(), digest(b.path()).unwrap());
    }

    #[test]
    fn stats_round_trip_keeps_seed() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<TensorImage> = (0..4)
            .map(|i| TensorImage::filled(16, 16, [i as f64 * 0.2 - 0.5, 0.1, -0.3]).unwrap())
            .collect();
        let net = FeatureNet::new(11);
        let st = fit_stats(&imgs, &net).unwrap();
        save_stats(&st, 11, dir.path()).unwrap();
        let (back, seed) = load_stats(dir.path()).unwrap();
        assert_eq!(seed, 11);
        assert_eq!(back.count, st.count);
        for (a, b) in back.cov.iter().zip(&st.cov) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(load_generator(dir.path()).is_err());
    }
}
