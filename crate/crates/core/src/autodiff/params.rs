use super::tensor::Tensor;

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// A named learnable tensor with an accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    gradient: Vec<f64>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    pub(crate) fn add_to_gradient(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.gradient.len());
        for (acc, v) in self.gradient.iter_mut().zip(g) {
            *acc += v;
        }
    }

    pub fn zero_gradient(&mut self) {
        self.gradient.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn set_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.tensor.data().len());
        self.tensor =
            Tensor::from_vec_unvalidated(self.tensor.rows(), self.tensor.cols(), values.to_vec());
    }

    /// In-place update `value[i] += delta[i]`, used by the optimizer.
    pub fn apply_update(&mut self, delta: &[f64]) {
        let mut values = self.tensor.data().to_vec();
        for (v, d) in values.iter_mut().zip(delta) {
            *v += d;
        }
        self.tensor =
            Tensor::from_vec_unvalidated(self.tensor.rows(), self.tensor.cols(), values);
    }
}

/// Flat, index-stable collection of all learnable parameters of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; insertion order defines checkpoint layout.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let n = tensor.data().len();
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            gradient: vec![0.0; n],
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_index(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.zero_gradient();
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor().data().len()).sum()
    }
}
