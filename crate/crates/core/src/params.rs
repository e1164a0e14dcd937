//! Named parameter blocks and their binding onto a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Adjoints, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of parameter blocks addressed by dotted namespace
/// names such as `decoder.lstm1.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter block {name} registered twice"
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn total_size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Blocks whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.name(id).starts_with(prefix))
    }

    /// SHA-256 over names, shapes and little-endian values of the selected blocks.
    pub fn hash_blocks(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let t = self.get(id);
            h.update(self.name(id).as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for x in t.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            blocks: self
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    blocks: Vec<Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.blocks[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.blocks[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(Tensor::is_finite)
    }

    /// Rescales so the global norm does not exceed `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Leaf node holding the current value of a parameter block.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Whether the block was used by the recorded computation.
    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    /// Row `r` of an embedding table.
    pub fn lookup(&mut self, table: ParamId, r: usize) -> Var {
        let t = self.param(table);
        self.tape.row(t, r)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value)
    }

    /// Backward from `root`, collecting parameter gradients.
    pub fn gradients(&self, root: Var) -> Grads {
        let mut adj: Adjoints = self.tape.backward(root);
        let mut grads = self.params.zero_grads();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = adj.take(*v) {
                    grads.blocks[i] = g;
                }
            }
        }
        grads
    }
}

/// Gaussian init with standard deviation `1/sqrt(fan_in)`.
pub fn init_weight<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / (cols.max(1) as f64).sqrt();
    gaussian(rng, rows, cols, std)
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}
