//! Affine layers, layer norm, MLP and multi-head attention over `[tokens, dim]` matrices.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{contract, Result};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), T::lit(LN_EPS))
    }
}

/// Two affine layers with GELU between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d_out, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Output of [`multi_head_attention`]; `weights` holds one `[Lq, Lk]` matrix per head.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` per head over column slices, heads concatenated.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Attended> {
    let (_, c) = g.value(q).dims2()?;
    if heads == 0 || c % heads != 0 {
        return Err(contract(format!("{c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let logits = g.matmul_nt(qh, kh)?;
        let a = g.softmax_rows(logits, scale)?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok(Attended { out, weights })
}

/// Query/key/value/output projections for attention between two token sets.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true),
            heads,
        }
    }

    /// Attends `queries` over `context`; returns the projected (pre-residual) update.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        context: Var,
    ) -> Result<Attended> {
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, context)?;
        let v = self.v.forward(g, p, context)?;
        let att = multi_head_attention(g, q, k, v, self.heads)?;
        let out = self.out.forward(g, p, att.out)?;
        Ok(Attended {
            out,
            weights: att.weights,
        })
    }
}
