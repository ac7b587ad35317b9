//! Layers shared by the backbone and the task heads.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Init, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self::with_gain(store, name, group, d_in, d_out, 1.0)
    }

    pub fn with_gain<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let weight = store.init_scaled(&format!("{name}.weight"), group, &[d_in, d_out], gain);
        let bias = store.init(&format!("{name}.bias"), group, &[d_out], Init::Zeros);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: Group, dim: usize) -> Self {
        Self {
            gamma: store.init(&format!("{name}.gamma"), group, &[dim], Init::Ones),
            beta: store.init(&format!("{name}.beta"), group, &[dim], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let s = g.mul_row(n, gamma)?;
        g.add_bias(s, beta)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, d_in, hidden),
            fc2: Linear::with_gain(store, &format!("{name}.fc2"), group, hidden, d_out, 0.5),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Scaled dot-product attention over already-projected `q [nq,d]`,
/// `k [nk,d]`, `v [nk,d]`, split into `heads` column blocks.
/// `mask` is added to every head's score matrix.
pub fn attend<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let d = g.dims(q)?[1];
    if d % heads != 0 {
        return Err(Error::shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.narrow_cols(q, h * dh, dh)?,
                g.narrow_cols(k, h * dh, dh)?,
                g.narrow_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, scale)?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Additive mask forbidding attention to later positions.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = T::of(-1e9);
        }
    }
    m
}

/// Attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, dim, dim),
            k: Linear::new(store, &format!("{name}.k"), group, dim, dim),
            v: Linear::new(store, &format!("{name}.v"), group, dim, dim),
            o: Linear::with_gain(store, &format!("{name}.o"), group, dim, dim, 0.5),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.q.forward(g, q)?;
        let k = self.k.forward(g, k)?;
        let v = self.v.forward(g, v)?;
        let a = attend(g, q, k, v, self.heads, None)?;
        self.o.forward(g, a)
    }
}

/// Pre-norm transformer block with fused QKV projection and an
/// optional additive attention mask.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub dim: usize,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), group, dim, 3 * dim),
            proj: Linear::with_gain(store, &format!("{name}.attn.proj"), group, dim, dim, 0.5),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), group, dim, mlp_hidden, dim),
            heads,
            dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<Var>) -> Result<Var> {
        let d = self.dim;
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let q = g.narrow_cols(qkv, 0, d)?;
        let k = g.narrow_cols(qkv, d, d)?;
        let v = g.narrow_cols(qkv, 2 * d, d)?;
        let a = attend(g, q, k, v, self.heads, mask)?;
        let a = self.proj.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}
