use rand::Rng;

use super::Linear;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || model_dim == 0 || model_dim % num_heads != 0 {
            return Err(invalid(
                "attention",
                format!("model_dim {model_dim} not divisible by num_heads {num_heads}"),
            ));
        }
        Ok(Self {
            model_dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Scaled dot-product attention with per-head Q/K/V projections and an
/// output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            cfg,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, rng)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.out.num_params()
    }

    /// `query[.., Nq, D]` attends over `kv[.., Nk, D]`; 2-D inputs are a batch of one.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, kv: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, query, kv)?.0)
    }

    /// Also returns the attention probabilities `[B, heads, Nq, Nk]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        kv: Var,
    ) -> Result<(Var, Var)> {
        let (query, kv, squeeze) = self.batched(g, query, kv)?;
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let (o, w) = self.attend(g, q, k, v)?;
        let mut y = self.out.forward(g, store, o)?;
        if squeeze {
            let s = g.shape(y).to_vec();
            y = g.reshape(y, &s[1..])?;
        }
        Ok((y, w))
    }

    fn batched(&self, g: &mut Graph, query: Var, kv: Var) -> Result<(Var, Var, bool)> {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(kv).to_vec();
        let d = self.cfg.model_dim;
        let mismatch = || Error::ShapeMismatch {
            op: "attention",
            lhs: qs.clone(),
            rhs: ks.clone(),
        };
        if qs.len() != ks.len() || !(2..=3).contains(&qs.len()) {
            return Err(mismatch());
        }
        if qs[qs.len() - 1] != d || ks[ks.len() - 1] != d || (qs.len() == 3 && qs[0] != ks[0]) {
            return Err(mismatch());
        }
        if qs[qs.len() - 2] == 0 || ks[ks.len() - 2] == 0 {
            return Err(invalid("attention", "zero tokens"));
        }
        if qs.len() == 2 {
            let q = g.reshape(query, &[1, qs[0], d])?;
            let k = g.reshape(kv, &[1, ks[0], d])?;
            Ok((q, k, true))
        } else {
            Ok((query, kv, false))
        }
    }

    /// Core attention on already-projected `q[B, Nq, D]`, `k, v[B, Nk, D]`.
    /// Returns the head-merged output `[B, Nq, D]` (before the output
    /// projection) and the probabilities `[B, heads, Nq, Nk]`.
    pub fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let h = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = g.shape(q).to_vec();
        let ks = g.shape(k).to_vec();
        let (b, nq, nk) = (qs[0], qs[1], ks[1]);
        let split = |g: &mut Graph, x: Var, n: usize| -> Result<Var> {
            if h == 1 {
                return g.reshape(x, &[b, 1, n, dh]);
            }
            let r = g.reshape(x, &[b, n, h, dh])?;
            g.permute(r, &[0, 2, 1, 3])
        };
        let qh = split(g, q, nq)?;
        let kh = split(g, k, nk)?;
        let vh = split(g, v, nk)?;
        let scores = g.bmm(qh, kh, true)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax(scores);
        let o = g.bmm(probs, vh, false)?;
        let merged = if h == 1 {
            g.reshape(o, &[b, nq, dh])?
        } else {
            let p = g.permute(o, &[0, 2, 1, 3])?;
            g.reshape(p, &[b, nq, h * dh])?
        };
        Ok((merged, probs))
    }
}
