//! Parameterized building blocks shared by the network modules.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::substrate::{Graph, ParamId, ParamStore, Tensor, Var};

/// How a forward pass binds parameters and applies dropout.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    /// Read parameters without recording them for differentiation.
    pub frozen: bool,
    pub dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Deterministic pass: trainable parameters, no dropout.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            store,
            frozen: false,
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            frozen: true,
            ..Self::eval(store)
        }
    }

    pub fn train(store: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Self {
            store,
            frozen: false,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.frozen {
            g.frozen_param(self.store, id)
        } else {
            g.param(self.store, id)
        }
    }

    /// Inverted dropout; identity when the rate is zero.
    pub fn dropout(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

/// `x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[d_in, d_out], bound, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = ctx.var(g, self.w);
        let b = ctx.var(g, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[1, d], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, d]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.var(g, self.gamma);
        let beta = ctx.var(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("consistent shape")
}
