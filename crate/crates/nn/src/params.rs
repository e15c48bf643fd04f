use crate::graph::Grads;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `name` is already registered.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count over `ids`.
    pub fn numel<'a>(&self, ids: impl IntoIterator<Item = &'a ParamId>) -> usize {
        ids.into_iter().map(|&id| self.tensors[id.0].len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Vec<f32>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Adds `scale * grad` for every parameter gradient in `grads`.
    pub fn accumulate(&mut self, grads: &Grads, scale: f32) {
        for (id, g) in grads.params() {
            for (d, &v) in self.grads[id.0].iter_mut().zip(g.data()) {
                *d += scale * v;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.grads[id.0]
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Euclidean norm over `ids`.
    pub fn norm<'a>(&self, ids: impl IntoIterator<Item = &'a ParamId>) -> f32 {
        ids.into_iter()
            .flat_map(|id| self.grads[id.0].iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn scale<'a>(&mut self, ids: impl IntoIterator<Item = &'a ParamId>, k: f32) {
        for id in ids {
            for g in &mut self.grads[id.0] {
                *g *= k;
            }
        }
    }
}
