use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_file::TensorFile;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He-style normal scaled by `gain / sqrt(fan_in)`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
}

/// Named trainable tensors of one model, in a fixed (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, vars: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn init<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<()> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal(std) => sample_normal(n, std, rng),
            Init::FanIn { fan_in, gain } => sample_normal(n, gain / (fan_in.max(1) as f64).sqrt(), rng),
        };
        // round through f32 so f32 and f64 stores built from one seed agree
        let values: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
        self.insert(name, TensorFile::new(shape.to_vec(), values)?)
    }

    pub fn insert(&mut self, name: &str, tensor: TensorFile) -> Result<()> {
        if self.vars.contains_key(name) {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(tensor.data, tensor.shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars.get(name).map(|v| v.as_tensor()).ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place, keeping its identity for the optimizer.
    pub fn set<T: candle_core::WithDType>(&self, name: &str, values: &[T]) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
        if values.len() != var.elem_count() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` has {} entries, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        tensor_to_vec(self.get(name)?)
    }

    /// Fills every parameter with zeros.
    pub fn zero_all(&self) -> Result<()> {
        for var in self.vars.values() {
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?);
        }
        Ok(Self { dtype, vars })
    }

    /// Copies the parameters under `prefix` of `other` into this store.
    pub fn copy_prefix_from(&self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in other.vars().filter(|(n, _)| n.starts_with(prefix)) {
            if let Some(dst) = self.vars.get(name) {
                dst.set(&var.as_tensor().to_dtype(self.dtype)?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn to_tensor_files(&self) -> Result<BTreeMap<String, TensorFile>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), TensorFile::new(v.dims().to_vec(), tensor_to_vec(v)?)?))).collect()
    }

    pub fn from_tensor_files(files: BTreeMap<String, TensorFile>, dtype: DType) -> Result<Self> {
        let mut store = Self::new(dtype);
        for (k, t) in files {
            store.insert(&k, t)?;
        }
        Ok(store)
    }

    /// SHA-256 over names, shapes and f32 bit patterns.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in tensor_to_vec(v)? {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sample_normal<R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(0.0, std.max(0.0)).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn tensor_to_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn tensor_to_vec64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_dtype_independent() {
        let build = |dtype| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut s = ParamStore::new(dtype);
            s.init("a", &[4, 3], Init::Normal(1.0), &mut rng).unwrap();
            s.init("b", &[3], Init::Constant(1.0), &mut rng).unwrap();
            s
        };
        let a = build(DType::F32);
        let b = build(DType::F64);
        assert_eq!(a.values("a").unwrap(), b.values("a").unwrap());
        assert_eq!(a.fingerprint().unwrap(), build(DType::F32).fingerprint().unwrap());
        assert_eq!(a.values("b").unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new(DType::F32);
        s.init("a", &[1], Init::Zeros, &mut rng).unwrap();
        assert!(s.init("a", &[1], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn tensor_file_roundtrip_preserves_fingerprint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new(DType::F32);
        s.init("w", &[2, 5], Init::FanIn { fan_in: 5, gain: 1.0 }, &mut rng).unwrap();
        let back = ParamStore::from_tensor_files(s.to_tensor_files().unwrap(), DType::F32).unwrap();
        assert_eq!(s.fingerprint().unwrap(), back.fingerprint().unwrap());
    }
}
