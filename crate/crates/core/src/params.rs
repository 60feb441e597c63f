//! Named parameter storage.
//!
//! All model weights live in a single store keyed by dotted path names.
//! Fresh parameters are initialized from a ChaCha stream keyed by the store
//! seed and the parameter name, so initialization does not depend on the
//! order in which modules are built. Loading a checkpoint pre-populates the
//! store; construction then consumes the loaded tensors and fails loudly on
//! any name or shape mismatch.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual default for
    /// linear and convolution weights and biases.
    FanIn(usize),
}

struct Inner {
    device: Device,
    dtype: DType,
    seed: u64,
    vars: BTreeMap<String, Var>,
    frozen: BTreeMap<String, Tensor>,
    /// Tensors from a checkpoint waiting to be claimed by `take`.
    pending: HashMap<String, Tensor>,
    loaded_any: bool,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Rc<RefCell<Inner>>,
}

/// A dotted-path cursor into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    inner: Rc<RefCell<Inner>>,
    path: String,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore {
            inner: Rc::new(RefCell::new(Inner {
                device,
                dtype,
                seed,
                vars: BTreeMap::new(),
                frozen: BTreeMap::new(),
                pending: HashMap::new(),
                loaded_any: false,
            })),
        }
    }

    /// A store whose parameters will be claimed from `tensors` instead of
    /// being freshly initialized. Names absent from the map still fall back
    /// to seeded init, which keeps older checkpoints loadable when a later
    /// stage adds parameters; `finish_load` reports names that were never
    /// claimed.
    pub fn with_loaded(
        seed: u64,
        dtype: DType,
        device: Device,
        tensors: HashMap<String, Tensor>,
    ) -> Self {
        let store = ParamStore::new(seed, dtype, device);
        {
            let mut inner = store.inner.borrow_mut();
            inner.pending = tensors;
            inner.loaded_any = true;
        }
        store
    }

    pub fn root(&self) -> Scope {
        Scope {
            inner: Rc::clone(&self.inner),
            path: String::new(),
        }
    }

    pub fn device(&self) -> Device {
        self.inner.borrow().device.clone()
    }

    pub fn dtype(&self) -> DType {
        self.inner.borrow().dtype
    }

    /// Trainable variables sorted by name.
    pub fn all_vars(&self) -> Vec<Var> {
        self.inner.borrow().vars.values().cloned().collect()
    }

    pub fn var_names(&self) -> Vec<String> {
        self.inner.borrow().vars.keys().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.borrow().vars.get(name).cloned()
    }

    /// Every tensor in the store, trainable and frozen, sorted by name.
    pub fn entries(&self) -> Vec<(String, Tensor, bool)> {
        let inner = self.inner.borrow();
        let mut out: Vec<(String, Tensor, bool)> = inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone(), true))
            .collect();
        out.extend(
            inner
                .frozen
                .iter()
                .map(|(k, t)| (k.clone(), t.clone(), false)),
        );
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let inner = self.inner.borrow();
        inner
            .vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .or_else(|| inner.frozen.get(name).cloned())
    }

    pub fn num_params(&self) -> usize {
        self.inner
            .borrow()
            .vars
            .values()
            .map(|v| v.as_tensor().elem_count())
            .sum()
    }

    /// After building a model from a loaded checkpoint, verifies that every
    /// checkpoint tensor was claimed by some parameter.
    pub fn finish_load(&self) -> Result<()> {
        let inner = self.inner.borrow();
        if inner.pending.is_empty() {
            return Ok(());
        }
        let mut names: Vec<&String> = inner.pending.keys().collect();
        names.sort();
        Err(Error::Invalid(format!(
            "checkpoint contains tensors not used by the model: {}",
            names
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }
}

impl Scope {
    pub fn sub(&self, name: &str) -> Scope {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        Scope {
            inner: Rc::clone(&self.inner),
            path,
        }
    }

    pub fn device(&self) -> Device {
        self.inner.borrow().device.clone()
    }

    pub fn dtype(&self) -> DType {
        self.inner.borrow().dtype
    }

    fn full_name(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        }
    }

    fn materialize(&self, full: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if let Some(t) = inner.pending.get(full) {
            let got: Vec<usize> = t.dims().to_vec();
            if got != shape {
                return Err(Error::shape(
                    "checkpoint tensor",
                    format!("{full} as {shape:?}"),
                    format!("{got:?}"),
                ));
            }
            let t = t.to_dtype(inner.dtype)?.to_device(&inner.device)?;
            drop(inner);
            self.inner.borrow_mut().pending.remove(full);
            return Ok(t);
        }
        let seed = inner.seed;
        let dtype = inner.dtype;
        let device = inner.device.clone();
        drop(inner);

        let n: usize = shape.iter().product();
        let mut rng = rng::rng_for(rng::mix_str(seed, full), &[]);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => rng::normal_vec(&mut rng, n).iter().map(|v| v * std).collect(),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                rng::uniform_vec(&mut rng, n, -bound, bound)
            }
        };
        let t = Tensor::from_vec(data, shape, &device)?.to_dtype(dtype)?;
        Ok(t)
    }

    /// Claims a trainable parameter.
    pub fn take(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        if let Some(v) = self.inner.borrow().vars.get(&full) {
            return Ok(v.as_tensor().clone());
        }
        let t = self.materialize(&full, shape, init)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.inner.borrow_mut().vars.insert(full, var);
        Ok(out)
    }

    /// Claims a frozen tensor: saved with checkpoints, excluded from
    /// optimization and gradient tracking.
    pub fn take_frozen(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        if let Some(t) = self.inner.borrow().frozen.get(&full) {
            return Ok(t.clone());
        }
        let t = self.materialize(&full, shape, init)?;
        self.inner.borrow_mut().frozen.insert(full, t.clone());
        Ok(t)
    }
}
