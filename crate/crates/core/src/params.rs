//! Named parameter storage shared by the model, the optimizer, and checkpoints.

use rand::Rng;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

/// An ordered collection of named tensors. Gradients use a store of the same
/// layout, created with [`ParamStore::zeros_like`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<S>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: data length does not match shape"
        );
        debug_assert!(self.tensors.iter().all(|t| t.name != name), "duplicate {name}");
        self.tensors.push(Tensor {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: S) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    /// Uniform(-bound, bound) with `bound = sqrt(1 / fan_in)`.
    pub fn add_fan_in_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..n)
            .map(|_| S::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, shape, data)
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![S::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Element-wise conversion into another precision.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| T::lit(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }

    /// Copies values from `other`, which must have an identical layout.
    pub fn copy_from(&mut self, other: &Self) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(a.name, b.name);
            a.data.copy_from_slice(&b.data);
        }
    }
}
