//! Run configuration: a JSON file, patched by command-line flags, then
//! validated as a whole before any command writes anything.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use voxscreen::clustering::KMeansConfig;
use voxscreen::experiments::GridSpec;
use voxscreen::features::FrameSpec;
use voxscreen::model::{EncoderType, ModelConfig};
use voxscreen::synth::SynthSpec;
use voxscreen::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config key `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
}

fn invalid(key: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), msg: msg.to_string() }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Axes of the grid; training settings and seed come from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub sample_sizes: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub encoder_types: Vec<EncoderType>,
}

impl Default for GridAxes {
    fn default() -> Self {
        let g = GridSpec::default();
        Self { sample_sizes: g.sample_sizes, kernel_sizes: g.kernel_sizes, encoder_types: g.encoder_types }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSettings {
    /// Fragments to encode, half from each class.
    pub fragments: usize,
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        let km = KMeansConfig::default();
        Self { fragments: 30_000, k: km.k, restarts: km.restarts, max_iter: km.max_iter, tol: km.tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// The one seed of a run; every stream (corpus, folds, init, sampling,
    /// scoring, k-means) derives from it.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub frame: FrameSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridAxes,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthSpec,
    #[serde(default)]
    pub cluster: ClusterSettings,
}

fn default_folds() -> usize {
    3
}

/// Sections whose structs carry their own `seed` field, which the run sets.
const SEEDED_SECTIONS: [&str; 2] = ["train", "synth"];

/// A flag value destined for a dotted config key.
#[derive(Debug, Clone)]
pub struct Override {
    pub key: &'static str,
    pub value: Value,
}

impl Override {
    pub fn new(key: &'static str, value: impl Into<Value>) -> Self {
        Self { key, value: value.into() }
    }

    /// Paths given on the command line are relative to the working
    /// directory, not to the config file.
    pub fn path(key: &'static str, p: &Path) -> Self {
        let abs = if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir().unwrap_or_default().join(p) };
        Self::new(key, abs.to_string_lossy().into_owned())
    }
}

fn set_key(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(invalid(&parts[..i].join("."), "expected an object"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

impl RunConfig {
    /// Reads `file` (if any), applies `overrides` and resolves relative
    /// paths from the file against its directory.
    pub fn load(file: Option<&Path>, overrides: &[Override]) -> Result<Self, ConfigError> {
        let (mut root, base) = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
                let value: Value = serde_json::from_str(&text).map_err(|e| invalid("<root>", e))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (value, base)
            }
            None => (Value::Object(Map::new()), PathBuf::new()),
        };
        if !root.is_object() {
            return Err(invalid("<root>", "config must be a JSON object"));
        }
        for section in SEEDED_SECTIONS {
            if root.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(invalid(&format!("{section}.seed"), "set the top-level `seed` instead"));
            }
        }
        for o in overrides {
            set_key(&mut root, o.key, o.value.clone())?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            invalid(&key, e.into_inner())
        })?;
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.paths.manifest);
        resolve(&mut cfg.paths.cache_dir);
        resolve(&mut cfg.paths.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section, whichever command runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.folds < 2 {
            return Err(invalid("folds", "need at least two folds"));
        }
        self.frame.validate().map_err(|e| invalid("frame", e))?;
        self.model.validate_grid().map_err(|e| invalid("model", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        self.grid_spec().validate().map_err(|e| invalid("grid", e))?;
        self.synth.validate().map_err(|e| invalid("synth", e))?;
        let c = &self.cluster;
        if c.fragments == 0 || c.fragments % 2 != 0 {
            return Err(invalid("cluster.fragments", "must be positive and even"));
        }
        if c.k == 0 || c.restarts == 0 || c.max_iter == 0 {
            return Err(invalid("cluster", "k, restarts and max_iter must be positive"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            sample_sizes: self.grid.sample_sizes.clone(),
            kernel_sizes: self.grid.kernel_sizes.clone(),
            encoder_types: self.grid.encoder_types.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        let c = &self.cluster;
        KMeansConfig { k: c.k, restarts: c.restarts, max_iter: c.max_iter, tol: c.tol, seed: self.seed }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// The manifest, which must exist.
    pub fn manifest(&self) -> Result<&Path, ConfigError> {
        let p = self.paths.manifest.as_deref().ok_or_else(|| invalid("paths.manifest", "required by this command"))?;
        if !p.is_file() {
            return Err(invalid("paths.manifest", format!("{} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Digest of everything but `paths`, so moving a run directory keeps
    /// its identity.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("paths");
        }
        format!("{:08x}", crc32fast::hash(v.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_text(text: &str, overrides: &[Override]) -> Result<RunConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, text).unwrap();
        RunConfig::load(Some(&path), overrides)
    }

    fn key_of(e: ConfigError) -> String {
        match e {
            ConfigError::Invalid { key, .. } => key,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn seed_is_mandatory() {
        assert_eq!(key_of(load_text("{}", &[]).unwrap_err()), "<root>");
        let msg = load_text("{}", &[]).unwrap_err().to_string();
        assert!(msg.contains("seed"), "{msg}");
        assert_eq!(load_text("{}", &[Override::new("seed", 3)]).unwrap().seed, 3);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(load_text(r#"{"seed":1,"train":{"lr":"fast"}}"#, &[]).unwrap_err()), "train.lr");
        let e = load_text(r#"{"seed":1,"train":{"lrr":1}}"#, &[]).unwrap_err().to_string();
        assert!(e.contains("lrr"), "{e}");
        assert_eq!(key_of(load_text(r#"{"seed":1,"train":{"lr":-1}}"#, &[]).unwrap_err()), "train");
        assert_eq!(key_of(load_text(r#"{"seed":1,"model":{"kernel_size":4}}"#, &[]).unwrap_err()), "model");
        assert_eq!(key_of(load_text(r#"{"seed":1,"train":{"seed":2}}"#, &[]).unwrap_err()), "train.seed");
        assert_eq!(key_of(load_text(r#"{"seed":1,"cluster":{"fragments":3}}"#, &[]).unwrap_err()), "cluster.fragments");
    }

    #[test]
    fn flags_override_file_keys() {
        let cfg = load_text(
            r#"{"seed":1,"train":{"max_epochs":9},"model":{"encoder_type":"CNN"}}"#,
            &[Override::new("train.max_epochs", 2), Override::new("seed", 5), Override::new("model.kernel_size", 7)],
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.train.max_epochs, cfg.model.kernel_size), (5, 2, 7));
        assert_eq!(cfg.model.encoder_type, EncoderType::Cnn);
        assert_eq!((cfg.train.seed, cfg.synth.seed, cfg.kmeans().seed), (5, 5, 5));
    }

    #[test]
    fn file_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"seed":1,"paths":{"manifest":"corpus/m.csv","output_dir":"/abs/out"}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.paths.manifest.as_deref(), Some(dir.path().join("corpus/m.csv").as_path()));
        assert_eq!(cfg.output_dir(), PathBuf::from("/abs/out"));
        assert_eq!(key_of(cfg.manifest().unwrap_err()), "paths.manifest");
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = load_text(r#"{"seed":1,"paths":{"output_dir":"a"}}"#, &[]).unwrap();
        let b = load_text(r#"{"seed":1,"paths":{"output_dir":"b"}}"#, &[]).unwrap();
        let c = load_text(r#"{"seed":2}"#, &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
