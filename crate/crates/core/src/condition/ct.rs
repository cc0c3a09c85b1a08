use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::{AttentionConfig, Linear, TransformerEncodeDecode};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

pub const MAX_CT_POSITIONS: usize = 64;

/// Condition-token generator over the top RGB pyramid level.
#[derive(Clone, Debug)]
pub struct CtGenerator {
    pub proj: Linear,
    pub pos_embed: ParamId,
    pub query: ParamId,
    pub transformer: TransformerEncodeDecode,
    pub use_positions: bool,
    pub dim: usize,
}

impl CtGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), in_channels, d, rng)?,
            pos_embed: store.add(format!("{name}.pos_embed"), &[MAX_CT_POSITIONS, d], Init::Normal(0.1), rng)?,
            query: store.add(format!("{name}.query"), &[1, d], Init::Normal(0.5), rng)?,
            transformer: TransformerEncodeDecode::new(store, &format!("{name}.transformer"), cfg, 2, 2, rng)?,
            use_positions: true,
            dim: d,
        })
    }

    /// `top[B, H4, W4, C4]` -> condition tokens `[B, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, top: Var) -> Result<Var> {
        let s = g.shape(top).to_vec();
        if s.len() != 4 || s[3] != self.proj.in_dim || s[1] * s[2] == 0 {
            return Err(invalid(
                "generate_condition_token",
                format!("expected [B, H, W, {}], got {s:?}", self.proj.in_dim),
            ));
        }
        let (b, n) = (s[0], s[1] * s[2]);
        if self.use_positions && n > MAX_CT_POSITIONS {
            return Err(invalid(
                "generate_condition_token",
                format!("{n} positions exceed {MAX_CT_POSITIONS}"),
            ));
        }
        let x = self.proj.forward(g, store, top)?;
        let mut x = g.reshape(x, &[b * n, self.dim])?;
        if self.use_positions {
            let table = g.param(store, self.pos_embed);
            let ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
            let pos = g.gather_rows(table, &ids)?;
            x = g.add(x, pos)?;
        }
        let x = g.reshape(x, &[b, n, self.dim])?;
        let q_table = g.param(store, self.query);
        let seeds = g.gather_rows(q_table, &vec![0; b])?;
        let seeds = g.reshape(seeds, &[b, 1, self.dim])?;
        let out = self.transformer.forward(g, store, x, seeds)?;
        g.reshape(out, &[b, self.dim])
    }
}
