use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named real-valued array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

/// Flat, ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}: shape/data mismatch");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::zero(); n])
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    #[inline]
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            data: self
                .params
                .iter()
                .map(|p| if p.trainable { vec![T::zero(); p.data.len()] } else { Vec::new() })
                .collect(),
        }
    }

    /// Gradient buffers that accept nothing, for input-only backward passes.
    pub fn no_grads(&self) -> Grads<T> {
        Grads {
            data: vec![Vec::new(); self.params.len()],
        }
    }

    /// Cast every array to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values of same-named parameters from `other`. Parameters in
    /// `self` missing from `other` are left as they are; shape mismatches fail.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut loaded = 0;
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.shape != p.shape {
                    return Err(Error::invalid(format!(
                        "parameter {}: shape {:?} does not match {:?}",
                        p.name, src.shape, p.shape
                    )));
                }
                p.data.clone_from(&src.data);
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// FNV-1a checksum over all parameter bits, for frozen-set checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in &p.data {
                let bits = v.to_f64_lossy().to_bits();
                for b in bits.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. Frozen parameters carry an
/// empty buffer and never receive gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub(crate) data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut [T]> {
        let g = &mut self.data[id.0];
        if g.is_empty() {
            None
        } else {
            Some(g.as_mut_slice())
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.data {
            for v in g {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    /// Named view of the non-empty gradient buffers.
    pub fn named<'a>(&'a self, store: &'a ParamStore<T>) -> Vec<(&'a str, &'a [T])> {
        store
            .iter()
            .zip(&self.data)
            .filter(|(_, g)| !g.is_empty())
            .map(|(p, g)| (p.name.as_str(), g.as_slice()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}
