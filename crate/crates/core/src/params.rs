//! Named parameter storage with seeded initialization, freezing, content
//! hashing and checkpoint (safetensors) I/O.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// Uniform init with bound `1 / sqrt(fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

struct Param {
    var: Var,
    frozen: bool,
}

pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, Param>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("params", &self.entries.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { seed, dtype, device: Device::Cpu, entries: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the named parameter, creating it with `init` if absent. Frozen
    /// parameters come back detached so no gradient flows into them.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(p) = self.entries.get(name) {
            if p.var.dims() != shape {
                return Err(Error::shape(format!(
                    "parameter {name}: stored shape {:?}, requested {shape:?}",
                    p.var.dims()
                )));
            }
            return Ok(handle(p));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_seed(name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let p = Param { var: Var::from_tensor(&t)?, frozen: false };
        let out = handle(&p);
        self.entries.insert(name.to_string(), p);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.entries.get(name).map(handle)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Independent copy: new variables with the same values and frozen flags.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, p) in &self.entries {
            let var = Var::from_tensor(&p.var.as_tensor().copy()?)?;
            entries.insert(name.clone(), Param { var, frozen: p.frozen });
        }
        Ok(Self { seed: self.seed, dtype: self.dtype, device: self.device.clone(), entries })
    }

    /// Overwrites a parameter's values in place.
    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name}")))?;
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Marks every matching parameter frozen. Must be called before modules
    /// fetch their handles.
    pub fn freeze(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            if pred(name) {
                p.frozen = true;
            }
        }
    }

    pub fn trainable_vars(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|(n, p)| !p.frozen && pred(n))
            .map(|(_, p)| p.var.clone())
            .collect()
    }

    pub fn num_elements(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|(n, _)| pred(n)).map(|(_, p)| p.var.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values of every
    /// matching parameter, in name order.
    pub fn hash(&self, pred: impl Fn(&str) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(n, _)| pred(n)) {
            h.update(name.as_bytes());
            for d in p.var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(raw_bytes(p.var.as_tensor())?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: HashMap<String, String>) -> Result<()> {
        let mut raw = Vec::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            raw.push((name.clone(), p.var.dims().to_vec(), raw_bytes(p.var.as_tensor())?));
        }
        let dtype = match self.dtype {
            DType::F64 => safetensors::Dtype::F64,
            _ => safetensors::Dtype::F32,
        };
        let views = raw
            .iter()
            .map(|(n, shape, bytes)| {
                safetensors::tensor::TensorView::new(dtype, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize_to_file(views, Some(metadata), path.as_ref())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<(Self, HashMap<String, String>)> {
        let bytes = std::fs::read(path.as_ref())?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut store = Self::new(seed, DType::F32);
        for (name, view) in st.tensors() {
            let t = match view.dtype() {
                safetensors::Dtype::F32 => {
                    let v: Vec<f32> = view
                        .data()
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, view.shape(), &store.device)?
                }
                safetensors::Dtype::F64 => {
                    store.dtype = DType::F64;
                    let v: Vec<f64> = view
                        .data()
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, view.shape(), &store.device)?
                }
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?} for {name}"))),
            };
            store.entries.insert(name, Param { var: Var::from_tensor(&t)?, frozen: false });
        }
        Ok((store, metadata))
    }
}

fn handle(p: &Param) -> Tensor {
    if p.frozen {
        p.var.as_detached_tensor()
    } else {
        p.var.as_tensor().clone()
    }
}

fn name_seed(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn raw_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_order_independent() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F32);
        let x = a.get_or_init("x", &[3, 4], Init::Uniform(0.5)).unwrap();
        b.get_or_init("y", &[2], Init::Normal(1.0)).unwrap();
        let x2 = b.get_or_init("x", &[3, 4], Init::Uniform(0.5)).unwrap();
        assert_eq!(x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let mut c = ParamStore::new(8, DType::F32);
        let x3 = c.get_or_init("x", &[3, 4], Init::Uniform(0.5)).unwrap();
        assert_ne!(x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x3.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn shape_conflict_is_an_error() {
        let mut s = ParamStore::new(0, DType::F32);
        s.get_or_init("w", &[2, 2], Init::Zeros).unwrap();
        assert!(matches!(s.get_or_init("w", &[4], Init::Zeros), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_params_are_not_trainable() {
        let mut s = ParamStore::new(0, DType::F32);
        s.get_or_init("base.w", &[2], Init::Zeros).unwrap();
        s.get_or_init("lrm.w", &[2], Init::Zeros).unwrap();
        s.freeze(|n| n.starts_with("base."));
        let vars = s.trainable_vars(|_| true);
        assert_eq!(vars.len(), 1);
        let h = s.get("base.w").unwrap();
        assert!(!h.is_variable());
    }

    #[test]
    fn checkpoint_round_trip_preserves_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut s = ParamStore::new(3, DType::F32);
        s.get_or_init("a.w", &[3, 2], Init::Normal(1.0)).unwrap();
        s.get_or_init("b", &[5], Init::Uniform(1.0)).unwrap();
        let meta = HashMap::from([("config_hash".to_string(), "42".to_string())]);
        s.save(&path, meta.clone()).unwrap();
        let (t, m) = ParamStore::load(&path, 0).unwrap();
        assert_eq!(m, meta);
        assert_eq!(s.hash(|_| true).unwrap(), t.hash(|_| true).unwrap());
        assert_eq!(t.num_elements(|_| true), 11);
    }
}
