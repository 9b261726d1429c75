use std::collections::HashMap;

use super::rng::SeededRng;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Truncated normal (at two std) with the given std.
    TruncNormal(f64),
    /// Normal with std `sqrt(2 / fan_in)` scaled by the factor.
    FanIn { fan_in: usize, gain: f64 },
}

/// Ordered collection of parameters addressed by hierarchical name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut SeededRng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Constant(c) => vec![c; numel],
            Init::TruncNormal(std) => (0..numel).map(|_| rng.truncated_normal(std)).collect(),
            Init::FanIn { fan_in, gain } => {
                let std = gain * (2.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.normal() * std).collect()
            }
        };
        let value = Tensor::from_f64(shape, &values).expect("valid parameter shape");
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: vec![T::ZERO; numel],
            trainable: true,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.len() != p.value.numel() {
            return Err(Error::contract(
                "ParamStore::set_value",
                format!(
                    "{} expects {} values, got {}",
                    p.name,
                    p.value.numel(),
                    value.len()
                ),
            ));
        }
        p.value = Tensor::from_vec(p.value.shape(), value)?;
        Ok(())
    }

    /// Fill every parameter whose name matches `pred` with zeros.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut count = 0;
        for p in &mut self.params {
            if pred(&p.name) {
                p.value = Tensor::zeros(p.value.shape());
                count += 1;
            }
        }
        count
    }

    /// Make exactly the parameters matching one of the prefixes trainable.
    ///
    /// Every prefix must match at least one parameter.
    pub fn set_trainable(&mut self, prefixes: &[&str]) -> Result<usize> {
        for prefix in prefixes {
            if !self.params.iter().any(|p| p.name.starts_with(prefix)) {
                return Err(Error::Config(format!(
                    "trainable pattern {prefix:?} matches no parameter"
                )));
            }
        }
        let mut count = 0;
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
            count += p.trainable as usize;
        }
        Ok(count)
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    /// Same names, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: vec![U::ZERO; p.grad.len()],
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// FNV-1a over names and the exact bit patterns of the values.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            feed(p.name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}
