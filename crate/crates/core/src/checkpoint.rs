//! A codec bundle (config + parameters + built network) and its checkpoint
//! file: safetensors with the config and bookkeeping in the metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::DType;

use crate::codec::{is_base_param, CodecModel};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const KEY_CONFIG: &str = "config";
const KEY_HASH: &str = "config_hash";
const KEY_STAGE: &str = "stage";
const KEY_BASE_HASH: &str = "base_hash";

#[derive(Debug)]
pub struct Codec {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub model: CodecModel,
    /// Training stage that produced the parameters (0 = fresh).
    pub stage: u8,
}

impl Codec {
    /// Freshly initialized codec.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let model = CodecModel::new(cfg, &mut store)?;
        Ok(Self { cfg: cfg.clone(), store, model, stage: 0 })
    }

    /// Independent copy whose parameters train separately.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut store = self.store.deep_clone()?;
        let model = CodecModel::new(&self.cfg, &mut store)?;
        Ok(Self { cfg: self.cfg.clone(), store, model, stage: self.stage })
    }

    pub fn config_hash(&self) -> u64 {
        self.cfg.hash()
    }

    /// Hash of every base-codec parameter value.
    pub fn base_hash(&self) -> Result<String> {
        self.store.hash(is_base_param)
    }

    /// Marks the base codec frozen and rebuilds the network so that only the
    /// add-on modules carry gradients.
    pub fn freeze_base(&mut self) -> Result<()> {
        self.store.freeze(is_base_param);
        self.model = CodecModel::new(&self.cfg, &mut self.store)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = HashMap::from([
            (KEY_CONFIG.to_string(), self.cfg.to_toml()),
            (KEY_HASH.to_string(), format!("{:016x}", self.config_hash())),
            (KEY_STAGE.to_string(), self.stage.to_string()),
            (KEY_BASE_HASH.to_string(), self.base_hash()?),
        ]);
        if let Some(dir) = path.as_ref().parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        self.store.save(path, meta)
    }

    /// Loads a checkpoint, verifying the stored config hash and that the
    /// file holds exactly the parameters the config calls for.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("checkpoint {} not found", path.display()),
            )));
        }
        let (mut store, meta) = ParamStore::load(path, 0)?;
        let missing = |k: &str| Error::Checkpoint(format!("{}: metadata lacks {k:?}", path.display()));
        let cfg = ModelConfig::from_toml(meta.get(KEY_CONFIG).ok_or_else(|| missing(KEY_CONFIG))?)?;
        let stored = meta.get(KEY_HASH).ok_or_else(|| missing(KEY_HASH))?;
        let stored = u64::from_str_radix(stored, 16).map_err(|e| Error::Checkpoint(format!("bad config hash: {e}")))?;
        if stored != cfg.hash() {
            return Err(Error::HashMismatch { expected: cfg.hash(), found: stored });
        }
        let stage = meta.get(KEY_STAGE).and_then(|s| s.parse().ok()).unwrap_or(0);
        let before = store.len();
        let model = CodecModel::new(&cfg, &mut store)?;
        if store.len() != before {
            return Err(Error::Checkpoint(format!(
                "{}: {} parameters missing for config {:?}",
                path.display(),
                store.len() - before,
                cfg.name
            )));
        }
        Ok(Self { cfg, store, model, stage })
    }

    /// Stage and base hash recorded in a checkpoint's metadata.
    pub fn read_meta(path: impl AsRef<Path>) -> Result<(u8, String)> {
        let (_, meta) = ParamStore::load(path, 0)?;
        let stage = meta.get(KEY_STAGE).and_then(|s| s.parse().ok()).unwrap_or(0);
        Ok((stage, meta.get(KEY_BASE_HASH).cloned().unwrap_or_default()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut c = Codec::new(&ModelConfig::toy(), 3).unwrap();
        c.stage = 1;
        c.save(&path).unwrap();
        let d = Codec::load(&path).unwrap();
        assert_eq!(d.cfg, c.cfg);
        assert_eq!(d.stage, 1);
        assert_eq!(d.store.hash(|_| true).unwrap(), c.store.hash(|_| true).unwrap());
        assert_eq!(Codec::read_meta(&path).unwrap(), (1, c.base_hash().unwrap()));
    }

    #[test]
    fn deep_clone_is_independent() {
        let c = Codec::new(&ModelConfig::toy(), 4).unwrap();
        let mut d = c.deep_clone().unwrap();
        assert_eq!(c.store.hash(|_| true).unwrap(), d.store.hash(|_| true).unwrap());
        let name = d.store.names().next().unwrap().to_string();
        let t = d.store.get(&name).unwrap();
        d.store.set(&name, &(t + 1.0).unwrap()).unwrap();
        assert_ne!(c.store.hash(|_| true).unwrap(), d.store.hash(|_| true).unwrap());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(Codec::load("/nonexistent/x.safetensors"), Err(Error::Io(_))));
    }
}
