use rand::Rng;

use super::{Modality, NUM_MODALITIES};
use crate::error::{invalid, Result};
use crate::nn::{FeaturePyramid, Mlp, NUM_LEVELS};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

/// Bottleneck MLP `C -> C/4 -> C` blended with its input by `sigmoid(a)`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub mlp: Mlp,
    pub blend: ParamId,
    pub channels: usize,
}

impl Adapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(invalid("adapter", format!("channels {channels} not divisible by 4")));
        }
        Ok(Self {
            mlp: Mlp::new(store, name, channels, channels / 4, rng)?,
            blend: store.add(format!("{name}.blend"), &[1], Init::Zeros, rng)?,
            channels,
        })
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params() + 1
    }

    /// `α·MLP(x) + (1−α)·x` along the last axis.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.channels) {
            return Err(invalid(
                "adapter",
                format!("expected {} channels, got {:?}", self.channels, g.shape(x)),
            ));
        }
        let a = g.param(store, self.blend);
        let alpha = g.sigmoid(a);
        let neg = g.scale(a, -1.0);
        let keep = g.sigmoid(neg);
        let m = self.mlp.forward(g, store, x)?;
        let m = g.mul_scalar(m, alpha)?;
        let x = g.mul_scalar(x, keep)?;
        g.add(m, x)
    }
}

/// One adapter per (modality, level).
#[derive(Clone, Debug)]
pub struct AdapterBank {
    adapters: Vec<Adapter>,
}

impl AdapterBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        level_channels: &[usize; NUM_LEVELS],
        rng: &mut R,
    ) -> Result<Self> {
        let mut adapters = Vec::with_capacity(NUM_MODALITIES * NUM_LEVELS);
        for m in Modality::ALL {
            for (l, &c) in level_channels.iter().enumerate() {
                adapters.push(Adapter::new(store, &format!("{name}.{}.level{l}", m.name()), c, rng)?);
            }
        }
        Ok(Self { adapters })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, modality: Modality, level: usize) -> &Adapter {
        &self.adapters[modality.index() * NUM_LEVELS + level]
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        modality: Modality,
        level: usize,
        x: Var,
    ) -> Result<Var> {
        self.get(modality, level).forward(g, store, x)
    }

    pub fn adapt_pyramid(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        modality: Modality,
        pyramid: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        let levels = pyramid
            .levels
            .iter()
            .enumerate()
            .map(|(l, &x)| self.forward(g, store, modality, l, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }
}
