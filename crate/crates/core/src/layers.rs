//! Small building blocks shared by the encoder and decoder.

use rand::Rng;

use crate::autodiff::Var;
use crate::params::{init_weight, Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `W x + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        out: usize,
        inp: usize,
    ) -> Self {
        Self {
            w: store.register(format!("{name}.w"), init_weight(rng, out, inp)),
            b: store.register(format!("{name}.b"), Tensor::zeros(out, 1)),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.tape.affine(w, x, b)
    }

    /// `relu(W x + b)`.
    pub fn relu(&self, g: &mut Graph, x: Var) -> Var {
        let z = self.apply(g, x);
        g.tape.relu(z)
    }
}

/// LSTM cell with one fused weight over `[x; h]` and gate order `i, f, o, g`.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        Self {
            w: store.register(format!("{name}.w"), init_weight(rng, 4 * hidden, input + hidden)),
            b: store.register(format!("{name}.b"), Tensor::zeros(4 * hidden, 1)),
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let m = self.hidden;
        let xh = g.tape.concat(&[x, h]);
        let w = g.param(self.w);
        let b = g.param(self.b);
        let z = g.tape.affine(w, xh, b);
        let zi = g.tape.slice(z, 0, m);
        let zf = g.tape.slice(z, m, m);
        let zo = g.tape.slice(z, 2 * m, m);
        let zg = g.tape.slice(z, 3 * m, m);
        let i = g.tape.sigmoid(zi);
        let f = g.tape.sigmoid(zf);
        let o = g.tape.sigmoid(zo);
        let cand = g.tape.tanh(zg);
        let fc = g.tape.mul(f, c);
        let ig = g.tape.mul(i, cand);
        let c_new = g.tape.add(fc, ig);
        let tc = g.tape.tanh(c_new);
        let h_new = g.tape.mul(o, tc);
        (h_new, c_new)
    }
}

/// Additive attention logits `v^T tanh(W_k k_i + W_q q)` over the rows of a
/// key matrix.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveAttention {
    pub wk: ParamId,
    pub wq: ParamId,
    pub v: ParamId,
}

impl AdditiveAttention {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        key_dim: usize,
        query_dim: usize,
        att_dim: usize,
    ) -> Self {
        Self {
            wk: store.register(format!("{name}.wk"), init_weight(rng, att_dim, key_dim)),
            wq: store.register(format!("{name}.wq"), init_weight(rng, att_dim, query_dim)),
            v: store.register(format!("{name}.v"), init_weight(rng, att_dim, 1)),
        }
    }

    /// Softmax weights (`N x 1`) over the `N` rows of `keys`.
    pub fn weights(&self, g: &mut Graph, keys: Var, query: Var) -> Var {
        let wk = g.param(self.wk);
        let wq = g.param(self.wq);
        let v = g.param(self.v);
        let proj = g.tape.matmul_t(keys, wk);
        let q = g.tape.matmul(wq, query);
        let z = g.tape.add_row_bias(proj, q);
        let t = g.tape.tanh(z);
        let logits = g.tape.matmul(t, v);
        g.tape.softmax(logits)
    }
}

/// Scalar score `v^T tanh(W x)`.
#[derive(Clone, Copy, Debug)]
pub struct Scorer {
    pub w: ParamId,
    pub v: ParamId,
}

impl Scorer {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        att_dim: usize,
    ) -> Self {
        Self {
            w: store.register(format!("{name}.w"), init_weight(rng, att_dim, input)),
            v: store.register(format!("{name}.v"), init_weight(rng, att_dim, 1)),
        }
    }

    pub fn score(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let v = g.param(self.v);
        let z = g.tape.matmul(w, x);
        let t = g.tape.tanh(z);
        g.tape.t_matmul(v, t)
    }
}
