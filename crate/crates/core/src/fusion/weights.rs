use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FusionKind, ModalityMask, NUM_MODALITIES};
use crate::error::{invalid, Result};
use crate::nn::{FeaturePyramid, Linear};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

const MASKED_LOGIT: f64 = -1e30;

/// Softmax over `logits[B, 4]` restricted to the modalities in `mask`.
pub fn masked_softmax(g: &mut Graph, logits: Var, mask: ModalityMask) -> Result<Var> {
    if mask.0.iter().all(|&m| m) {
        return Ok(g.softmax(logits));
    }
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[1] != NUM_MODALITIES {
        return Err(invalid("masked_softmax", format!("expected [B, 4], got {s:?}")));
    }
    let offsets = g.constant(Tensor::from_fn(s, |i| {
        if mask.0[i % NUM_MODALITIES] {
            0.0
        } else {
            MASKED_LOGIT
        }
    }));
    let shifted = g.add(logits, offsets)?;
    Ok(g.softmax(shifted))
}

/// Σ_m w[:, m] · pyramid_m, over the modalities that are supplied.
pub fn weighted_fuse(
    g: &mut Graph,
    pyramids: &[Option<&FeaturePyramid>; NUM_MODALITIES],
    weights: Var,
) -> Result<FeaturePyramid> {
    let present: Vec<(usize, &FeaturePyramid)> =
        pyramids.iter().enumerate().filter_map(|(m, p)| p.map(|p| (m, p))).collect();
    let (_, first) = *present
        .first()
        .ok_or_else(|| invalid("weighted_fuse", "no modalities supplied"))?;
    let b = g.shape(first.levels[0])[0];
    if g.shape(weights) != [b, NUM_MODALITIES] {
        return Err(invalid(
            "weighted_fuse",
            format!("weights {:?} vs batch {b}", g.shape(weights)),
        ));
    }
    let mut columns = Vec::with_capacity(present.len());
    for &(m, _) in &present {
        let col = g.slice(weights, 1, m, 1)?;
        columns.push(col);
    }
    let mut levels = Vec::with_capacity(first.levels.len());
    for l in 0..first.levels.len() {
        let mut acc: Option<Var> = None;
        for (&(_, p), &w) in present.iter().zip(&columns) {
            if p.levels.len() != first.levels.len() || g.shape(p.levels[l]) != g.shape(first.levels[l]) {
                return Err(crate::Error::ShapeMismatch {
                    op: "weighted_fuse",
                    lhs: g.shape(first.levels[l]).to_vec(),
                    rhs: g.shape(p.levels[l]).to_vec(),
                });
            }
            let term = g.scale_rows(p.levels[l], w)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        levels.push(acc.expect("at least one modality"));
    }
    Ok(FeaturePyramid { levels })
}

/// Condition-aware addition weights: `softmax(FC(ct))`.
#[derive(Clone, Debug)]
pub struct CaaHead {
    pub fc: Linear,
}

impl CaaHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ct_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, name, ct_dim, NUM_MODALITIES, rng)?,
        })
    }

    /// `ct[B, D]` -> weights `[B, 4]`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, ct: Var, mask: ModalityMask) -> Result<Var> {
        let logits = self.fc.forward(g, store, ct)?;
        masked_softmax(g, logits, mask)
    }
}

/// Condition-independent weights for the mean / random / learned baselines.
#[derive(Clone, Debug)]
pub struct StaticWeights {
    pub kind: FusionKind,
    pub logits: Option<ParamId>,
}

impl StaticWeights {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, kind: FusionKind, rng: &mut R) -> Result<Self> {
        let logits = match kind {
            FusionKind::LearnedStatic => Some(store.add(format!("{name}.logits"), &[NUM_MODALITIES], Init::Zeros, rng)?),
            FusionKind::Mean | FusionKind::Random => None,
            other => {
                return Err(invalid(
                    "static_fuse",
                    format!("{} is not a static strategy", other.name()),
                ))
            }
        };
        Ok(Self { kind, logits })
    }

    /// Weights `[batch, 4]`; `random` draws one fresh logit vector per call.
    pub fn weights<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: usize,
        mask: ModalityMask,
        rng: &mut R,
    ) -> Result<Var> {
        let logits = match (self.kind, self.logits) {
            (FusionKind::LearnedStatic, Some(id)) => {
                let p = g.param(store, id);
                let p = g.reshape(p, &[1, NUM_MODALITIES])?;
                g.gather_rows(p, &vec![0; batch])?
            }
            (FusionKind::Random, _) => {
                let draw: Vec<f64> = (0..NUM_MODALITIES).map(|_| StandardNormal.sample(&mut *rng)).collect();
                g.constant(Tensor::from_fn(vec![batch, NUM_MODALITIES], |i| draw[i % NUM_MODALITIES]))
            }
            _ => g.constant(Tensor::zeros(vec![batch, NUM_MODALITIES])),
        };
        masked_softmax(g, logits, mask)
    }
}
