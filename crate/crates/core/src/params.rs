//! Named parameter and buffer registry backing every model in the crate.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::manifest::WeightManifest;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal initialization for ReLU-family layers.
    KaimingNormal {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
    /// A random direction with unit L2 norm.
    UnitVector,
}

/// Named parameters, in registration order.
pub type NamedVars = Vec<(String, Var)>;

/// Owns the trainable parameters (`params`) and the non-trainable state
/// (`buffers`: normalization statistics, power-iteration vectors) of one model.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn make(&mut self, shape: Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                self.normal(n, std)
            }
            Init::Normal { std } => self.normal(n, std),
            Init::UnitVector => {
                let v = self.normal(n, 1.0);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }

    pub fn param<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        let t = self.make(shape.into(), init)?;
        let var = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        let t = self.make(shape.into(), init)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn all(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// Deep copy of every parameter and buffer, for before/after comparisons.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.all()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    pub fn export(&self, manifest: &mut WeightManifest, prefix: &str) -> Result<()> {
        for (name, var) in self.all() {
            manifest.insert(&format!("{prefix}{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    /// Copies named tensors from `manifest` into this store. Every name in
    /// `names` is checked for presence and shape before anything is written.
    pub fn load_names(&self, manifest: &WeightManifest, prefix: &str, names: &[String]) -> Result<()> {
        let missing: Vec<String> = names
            .iter()
            .map(|n| format!("{prefix}{n}"))
            .filter(|n| !manifest.contains(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        for name in names {
            let var = self
                .get(name)
                .ok_or_else(|| Error::MissingTensors(vec![name.clone()]))?;
            let entry = manifest.entry(&format!("{prefix}{name}")).expect("checked above");
            if entry.shape != var.dims() {
                return Err(Error::ShapeMismatch {
                    name: format!("{prefix}{name}"),
                    expected: var.dims().to_vec(),
                    found: entry.shape.clone(),
                });
            }
        }
        for name in names {
            let var = self.get(name).expect("checked above");
            let t = manifest.tensor(&format!("{prefix}{name}"), &self.device)?;
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Loads every parameter and buffer of this store.
    pub fn load(&self, manifest: &WeightManifest, prefix: &str) -> Result<()> {
        let names: Vec<String> = self.all().map(|(k, _)| k.clone()).collect();
        self.load_names(manifest, prefix, &names)
    }
}
