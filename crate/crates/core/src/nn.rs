//! Named parameter storage and the small layers the encoder and decoder are
//! assembled from.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::TensorError;
use crate::rng::Rng;
use crate::tensor::{Conv2dSpec, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered table of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }
}

/// A graph with every parameter of a store bound as a leaf.
pub struct Session {
    graph: Graph,
    params: Vec<Var>,
}

impl Session {
    /// Binds parameters as differentiable leaves.
    pub fn trainable(store: &ParamStore) -> Self {
        Self::bind(store, true)
    }

    /// Binds parameters as constants; nothing is differentiable.
    pub fn frozen(store: &ParamStore) -> Self {
        Self::bind(store, false)
    }

    fn bind(store: &ParamStore, trainable: bool) -> Self {
        let mut graph = Graph::new();
        let params = store
            .values
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Self { graph, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Gradient for each parameter after backward; `None` when unreachable.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.params
            .iter()
            .map(|&v| self.graph.grad(v).cloned())
            .collect()
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

impl Deref for Session {
    type Target = Graph;
    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

/// Parameter factory that prefixes names and draws initial values.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<R>(&mut self, scope: &str, f: impl FnOnce(&mut Builder<'_>) -> R) -> R {
        let prefix = format!("{}{scope}.", self.prefix);
        let mut inner = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}{name}", self.prefix), value)
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = self.rng.uniform_tensor(&[input, output], -bound, bound);
        Linear {
            w: self.add(&format!("{name}.w"), w),
            b: self.add(&format!("{name}.b"), Tensor::zeros(&[output])),
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.add(&format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: self.add(&format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Conv {
        let std = (2.0 / (input * kernel * kernel) as f64).sqrt();
        let w = self
            .rng
            .normal_tensor(&[output, input, kernel, kernel], std);
        Conv {
            w: self.add(&format!("{name}.w"), w),
            b: bias.then(|| self.add(&format!("{name}.b"), Tensor::zeros(&[output]))),
            spec,
        }
    }

    pub fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), input, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, output),
        }
    }
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.linear(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        s.conv2d(x, w, b, self.spec)
    }
}

/// FC → ReLU → FC.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.relu(h);
        self.fc2.forward(s, h)
    }
}
