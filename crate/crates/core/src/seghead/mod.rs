//! Per-pixel semantic decoder and the combined training objective.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, FeaturePyramid, LEVEL_STRIDES};
use crate::tensor::{Conv2dSpec, Graph, ParamStore, Var};

pub const DECODER_CHANNELS: usize = 32;
pub const DEFAULT_LAMBDA_COND: f64 = 0.5;

/// Upsamples every level to stride 4, concatenates, then `conv1×1 → GELU →
/// conv3×3` to class logits, bilinearly upsampled ×4 to input resolution.
#[derive(Clone, Debug)]
pub struct SegDecoder {
    pub fuse: Conv2d,
    pub classify: Conv2d,
    pub num_classes: usize,
}

impl SegDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        level_channels: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let total: usize = level_channels.iter().sum();
        Ok(Self {
            fuse: Conv2d::new(
                store,
                &format!("{name}.fuse"),
                1,
                total,
                DECODER_CHANNELS,
                Conv2dSpec { stride: 1, padding: 0 },
                2f64.sqrt(),
                rng,
            )?,
            classify: Conv2d::new(
                store,
                &format!("{name}.classify"),
                3,
                DECODER_CHANNELS,
                num_classes,
                Conv2dSpec { stride: 1, padding: 1 },
                1.0,
                rng,
            )?,
            num_classes,
        })
    }

    /// Fused pyramid -> logits `[B, H, W, K]` at input resolution.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, fused: &FeaturePyramid) -> Result<Var> {
        let first = g.shape(fused.levels[0]).to_vec();
        let mut ups = Vec::with_capacity(fused.levels.len());
        for (l, &x) in fused.levels.iter().enumerate() {
            let f = LEVEL_STRIDES[l] / LEVEL_STRIDES[0];
            let s = g.shape(x).to_vec();
            if s.len() != 4 || s[0] != first[0] || s[1] * f != first[1] || s[2] * f != first[2] {
                return Err(crate::Error::ShapeMismatch {
                    op: "decode",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            ups.push(if f == 1 { x } else { g.upsample_bilinear(x, f)? });
        }
        let cat = g.concat(&ups, 3)?;
        let h = self.fuse.forward(g, store, cat)?;
        let h = g.gelu(h);
        let logits = self.classify.forward(g, store, h)?;
        g.upsample_bilinear(logits, LEVEL_STRIDES[0])
    }
}

/// Mean pixel cross-entropy of `logits[B, H, W, K]` against `targets`
/// (row-major class ids), plus `λ · cond` when a condition term is given.
pub fn total_loss(g: &mut Graph, logits: Var, targets: &[usize], cond: Option<Var>, lambda_cond: f64) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 4 {
        return Err(invalid("total_loss", format!("expected [B, H, W, K], got {s:?}")));
    }
    let rows = s[0] * s[1] * s[2];
    let flat = g.reshape(logits, &[rows, s[3]])?;
    let seg = g.cross_entropy(flat, targets)?;
    match cond {
        Some(c) if lambda_cond != 0.0 => {
            let weighted = g.scale(c, lambda_cond);
            g.add(seg, weighted)
        }
        _ => Ok(seg),
    }
}

/// Per-pixel argmax over the last axis; ties go to the lowest class id.
pub fn predict(logits: &[f64], num_classes: usize) -> Vec<u8> {
    logits
        .chunks(num_classes)
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
