//! Named parameter storage and matching gradient buffers.

use rand_distr::{Distribution, Normal};

use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// How a freshly registered parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter; random draws come from a stream keyed by
    /// `(seed, position)` so adding parameters later never perturbs earlier ones.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init, seed: u64) -> ParamId {
        let n: usize = shape.iter().product();
        let id = ParamId(self.params.len());
        let value = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FanIn { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                let mut rng = stream_rng(seed, Stream::Init, &[id.0 as u64]);
                (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
            }
        };
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, shape: shape.to_vec(), value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.numel());
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            values: self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            touched: vec![false; self.params.len()],
        }
    }
}

/// Gradient buffers aligned with a [`ParamSet`]. A parameter counts as
/// reached only once a backward kernel has asked for its buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    values: Vec<Vec<T>>,
    touched: Vec<bool>,
}

impl<T: Scalar> Grads<T> {
    #[inline]
    pub fn slot(&mut self, id: ParamId) -> &mut [T] {
        self.touched[id.0] = true;
        &mut self.values[id.0]
    }

    /// Two distinct buffers at once (weight and bias).
    pub fn pair(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b);
        self.touched[a.0] = true;
        self.touched[b.0] = true;
        if a.0 < b.0 {
            let (lo, hi) = self.values.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.values.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn is_touched(&self, id: ParamId) -> bool {
        self.touched[id.0]
    }

    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn scale(&mut self, s: T) {
        self.values.iter_mut().flatten().for_each(|v| *v = *v * s);
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().flatten().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }
}
