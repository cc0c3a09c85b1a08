//! Reusable blocks: linear layers, MLPs, attention, transformer layers and the
//! shared four-level convolutional backbone.

mod attention;
mod backbone;
mod transformer;

pub use attention::{AttentionConfig, MultiHeadAttention};
pub use backbone::{Backbone, Conv2d, BackboneConfig, FeaturePyramid, LEVEL_STRIDES, NUM_LEVELS};
pub use transformer::{DecoderLayer, EncoderLayer, TransformerEncodeDecode, TransformerEncoder};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

/// `y = x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::FanIn { fan_in: in_dim, gain: 1.0 }, rng)
    }

    /// Weight drawn from `init`; bias always starts at zero.
    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], init, rng)?;
        let bias = store.add(format!("{name}.bias"), &[out_dim], Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.mm(x, w)?;
        g.add_bias(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), &[dim], Init::Const(1.0), rng)?,
            beta: store.add(format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}
