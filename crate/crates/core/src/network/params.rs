use rand::Rng;

use crate::tensor::{Graph, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: String, value: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }
}

/// Registers parameters with fan-in scaled uniform initialisation.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// `[fan_in, fan_out]` weight drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.matrix(name, fan_in, fan_out, fan_in)
    }

    pub fn matrix(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store.add(name, Tensor::new(vec![rows, cols], data).unwrap())
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::filled(shape, value))
    }
}

/// Binds store entries into one graph on first use.
pub(crate) struct Binder<'a> {
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self) -> &[Option<Var>] {
        &self.bound
    }
}
