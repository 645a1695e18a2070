//! Named parameter registry shared by every network in the crate.
//!
//! Learnable parameters and non-learnable buffers (batch-norm running
//! statistics) live in separate maps keyed by a dotted hierarchical path such
//! as `tl.encoder.layer1.0.conv1.weight`. Initial values are drawn from a
//! seeded ChaCha stream in construction order, so a (config, seed) pair always
//! yields bitwise-identical weights.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::nn::tensors::ParameterStore;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct VarStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for VarStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("VarStore")
            .field("params", &inner.params.len())
            .field("buffers", &inner.buffers.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("var store mutex poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> VarPath {
        VarPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// Learnable parameters in key order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock().params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.trainable()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.lock()
            .buffers
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Exact number of learnable scalars.
    pub fn num_parameters(&self) -> usize {
        self.lock().params.values().map(|v| v.elem_count()).sum()
    }

    pub fn num_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.lock()
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn get(&self, key: &str) -> Option<Var> {
        let inner = self.lock();
        inner.params.get(key).or_else(|| inner.buffers.get(key)).cloned()
    }

    /// Detached copies of every parameter and buffer.
    pub fn snapshot(&self) -> Result<ParameterStore> {
        let inner = self.lock();
        let mut out = ParameterStore::default();
        for (k, v) in inner.params.iter().chain(inner.buffers.iter()) {
            out.insert(k.clone(), v.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    /// Overwrites values (never shapes) of the keys present in both `store`
    /// and `self`. With `strict`, every key of `self` must be provided.
    pub fn load(&self, store: &ParameterStore, strict: bool) -> Result<Vec<String>> {
        let inner = self.lock();
        let mut pending = Vec::new();
        for (key, var) in inner.params.iter().chain(inner.buffers.iter()) {
            match store.get(key) {
                Some(t) if t.dims() != var.dims() => {
                    return Err(Error::ShapeMismatch {
                        key: key.clone(),
                        expected: var.dims().to_vec(),
                        found: t.dims().to_vec(),
                    })
                }
                Some(t) => pending.push((key, var, t)),
                None if strict => {
                    return Err(Error::Load {
                        key: key.clone(),
                        reason: "missing from parameter store".into(),
                    })
                }
                None => {}
            }
        }
        // all shapes validated; nothing is written on error
        let mut loaded = Vec::with_capacity(pending.len());
        for (key, var, t) in pending {
            assign(key, var, t)?;
            loaded.push(key.clone());
        }
        Ok(loaded)
    }
}

/// Copies `value` into `var`, checking the shape and converting dtype.
pub(crate) fn assign(key: &str, var: &Var, value: &Tensor) -> Result<()> {
    if var.dims() != value.dims() {
        return Err(Error::ShapeMismatch {
            key: key.to_string(),
            expected: var.dims().to_vec(),
            found: value.dims().to_vec(),
        });
    }
    let value = value.to_dtype(var.dtype())?.to_device(var.device())?;
    var.set(&value)?;
    Ok(())
}

/// A prefix into a [`VarStore`] used while building networks.
#[derive(Clone)]
pub struct VarPath {
    store: VarStore,
    prefix: String,
}

impl VarPath {
    pub fn sub(&self, name: impl std::fmt::Display) -> VarPath {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        VarPath {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn create(&self, name: &str, shape: &[usize], init: Init, buffer: bool) -> Result<Var> {
        let key = self.key(name);
        let mut inner = self.store.lock();
        if inner.params.contains_key(&key) || inner.buffers.contains_key(&key) {
            return Err(Error::Config(format!("duplicate parameter key `{key}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c as f32; n],
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::Config(format!("uniform init for `{key}`: {e}")))?;
                (0..n).map(|_| d.sample(&mut inner.rng) as f32).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Config(format!("normal init for `{key}`: {e}")))?;
                (0..n).map(|_| d.sample(&mut inner.rng) as f32).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        if buffer {
            inner.buffers.insert(key, var.clone());
        } else {
            inner.params.insert(key, var.clone());
        }
        Ok(var)
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.create(name, shape, init, false)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.create(name, shape, init, true)
    }
}
