//! Named trainable parameters and persistent buffers.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::DEVICE;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Inner {
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

/// Parameters of one network. Cloning shares the underlying storage.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let g = self.inner.lock().unwrap();
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &g.params.len())
            .field("buffers", &g.buffers.len())
            .finish()
    }
}

impl ParamStore {
    /// Empty store whose random initializers draw from a generator seeded
    /// with `seed`, in registration order.
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            inner: Arc::new(Mutex::new(Inner {
                rng: ChaCha8Rng::seed_from_u64(seed),
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
            })),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn make(&self, inner: &mut Inner, shape: &Shape, init: Init) -> Result<Var> {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype, &DEVICE)?,
            Init::Ones => Tensor::ones(shape, self.dtype, &DEVICE)?,
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                let data: Vec<f64> = (0..shape.elem_count()).map(|_| dist.sample(&mut inner.rng)).collect();
                Tensor::from_vec(data, shape, &DEVICE)?.to_dtype(self.dtype)?
            }
        };
        Ok(Var::from_tensor(&t)?)
    }

    fn get_or_create(&self, name: String, shape: Shape, init: Init, buffer: bool) -> Result<Var> {
        let mut g = self.inner.lock().unwrap();
        let existing = if buffer { g.buffers.get(&name) } else { g.params.get(&name) };
        if let Some(v) = existing {
            if v.shape() != &shape {
                return Err(shape_err!("{name}: registered as {:?}, requested {:?}", v.dims(), shape.dims()));
            }
            return Ok(v.clone());
        }
        let v = self.make(&mut g, &shape, init)?;
        if buffer {
            g.buffers.insert(name, v.clone());
        } else {
            g.params.insert(name, v.clone());
        }
        Ok(v)
    }

    /// Trainable parameters sorted by name.
    pub fn params(&self) -> Vec<(String, Var)> {
        let g = self.inner.lock().unwrap();
        g.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Non-trainable state (spectral-norm vectors, batch statistics).
    pub fn buffers(&self) -> Vec<(String, Var)> {
        let g = self.inner.lock().unwrap();
        g.buffers.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Every parameter and buffer, buffers prefixed with `buf:`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self.params().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect();
        out.extend(self.buffers().into_iter().map(|(k, v)| (format!("buf:{k}"), v.as_tensor().clone())));
        out
    }

    /// Overwrite values from [`ParamStore::named_tensors`] output. Every
    /// registered tensor must be present with a matching shape.
    pub fn load_named(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let targets: Vec<(String, Var)> = self
            .params()
            .into_iter()
            .chain(self.buffers().into_iter().map(|(k, v)| (format!("buf:{k}"), v)))
            .collect();
        for (name, var) in targets {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Format(format!(
                    "tensor {name}: stored {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let g = self.inner.lock().unwrap();
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(ParamStore {
            inner: Arc::new(Mutex::new(Inner {
                rng: g.rng.clone(),
                params: copy(&g.params)?,
                buffers: copy(&g.buffers)?,
            })),
            dtype: self.dtype,
        })
    }
}

/// Hierarchical name prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn sub(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store.get_or_create(self.full(name), shape.into(), init, false)
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store.get_or_create(self.full(name), shape.into(), init, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let a = ParamStore::new(3, DType::F32);
        let b = ParamStore::new(3, DType::F32);
        let wa = a.root().sub("x").param("w", (4, 5), Init::Normal(1.0)).unwrap();
        let wb = b.root().sub("x").param("w", (4, 5), Init::Normal(1.0)).unwrap();
        let va = wa.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, wb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(a.params()[0].0, "x.w");
    }

    #[test]
    fn load_roundtrip_and_shape_check() {
        let a = ParamStore::new(1, DType::F32);
        a.root().param("w", (2, 2), Init::Normal(1.0)).unwrap();
        a.root().buffer("u", 2, Init::Ones).unwrap();
        let b = ParamStore::new(2, DType::F32);
        b.root().param("w", (2, 2), Init::Zeros).unwrap();
        b.root().buffer("u", 2, Init::Zeros).unwrap();
        let map: BTreeMap<_, _> = a.named_tensors().into_iter().collect();
        b.load_named(&map).unwrap();
        let flat = |s: &ParamStore| {
            s.named_tensors()
                .into_iter()
                .flat_map(|(_, t)| t.flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert!(b.root().param("w", (3, 2), Init::Zeros).is_err());
    }
}
