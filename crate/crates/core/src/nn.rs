//! Parameterised layers. Layers hold only [`ParamId`]s, so one layer value
//! works against any [`ParamStore`] with the same layout, whether f32 or f64.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use titkit_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Per-forward context: the tape, the parameters and train/eval state.
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub store: &'g ParamStore<T>,
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, train: bool, seed: u64) -> Self {
        Self {
            graph,
            store,
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self::new(graph, store, false, 0)
    }

    pub fn p(&self, pid: ParamId) -> Var<'g, T> {
        self.graph.param(self.store, pid)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    pub fn dropout(&self, x: Var<'g, T>, p: f64) -> Var<'g, T> {
        if self.train && p > 0.0 {
            x.dropout(p, &mut *self.rng.borrow_mut())
        } else {
            x
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        Init {
            prefix: self.full(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full(name);
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape.to_vec(), bound, &mut *self.rng);
        self.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape.to_vec(), std, &mut *self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape.to_vec()))
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Self {
            w: init.uniform("weight", &[d_in, d_out], bound),
            b: bias.then(|| init.zeros("bias", &[d_out])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.matmul(cx.p(self.w));
        match self.b {
            Some(b) => y.add(cx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, d: usize) -> Self {
        Self {
            gamma: init.ones("gamma", &[d]),
            beta: init.zeros("beta", &[d]),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(cx.p(self.gamma), cx.p(self.beta), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, vocab: usize, dim: usize) -> Self {
        Self {
            table: init.normal("table", &[vocab, dim], (dim as f64).powf(-0.5)),
            vocab,
            dim,
        }
    }

    /// Looks up `ids` laid out as `[batch, len]`.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, ids: &[usize], batch: usize, len: usize) -> Var<'g, T> {
        cx.p(self.table).embedding(ids, &[batch, len])
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c_in: usize, c_out: usize, k: usize, bias: bool) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self {
            w: init.normal("weight", &[c_out, c_in, k, k], std),
            b: bias.then(|| init.zeros("bias", &[c_out])),
            stride: (1, 1),
            padding: (k / 2, k / 2),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(cx.p(self.w), self.b.map(|b| cx.p(b)), self.stride, self.padding)
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            data.push(T::of(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Seed for one named component, so components keep their initial values
/// regardless of which other components a model includes.
pub fn component_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed into the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}
