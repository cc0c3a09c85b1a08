use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::{AttentionConfig, TransformerEncoder};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

pub const NUM_CONTEXT_TOKENS: usize = 4;
pub const MAX_PROMPT_TOKENS: usize = 32;

/// Encoded prompt tokens with the context rows appended, and their mean.
#[derive(Clone, Copy, Debug)]
pub struct TextQueries {
    /// `[U, T + 4, D]`
    pub tokens: Var,
    /// `[U, D]`
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub context: ParamId,
    pub encoder: TransformerEncoder,
    pub dim: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        cfg: AttentionConfig,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            token_embed: store.add(format!("{name}.token_embed"), &[vocab_size, d], Init::Normal(0.5), rng)?,
            pos_embed: store.add(format!("{name}.pos_embed"), &[MAX_PROMPT_TOKENS, d], Init::Normal(0.1), rng)?,
            context: store.add(format!("{name}.context"), &[NUM_CONTEXT_TOKENS, d], Init::Normal(0.1), rng)?,
            encoder: TransformerEncoder::new(store, &format!("{name}.encoder"), cfg, num_layers, rng)?,
            dim: d,
            vocab_size,
        })
    }

    /// Encodes `U` token sequences of one common length `T`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, sequences: &[&[usize]]) -> Result<TextQueries> {
        let u = sequences.len();
        let t = sequences.first().map_or(0, |s| s.len());
        if u == 0 || t == 0 {
            return Err(invalid("encode_text", "empty prompt"));
        }
        if t > MAX_PROMPT_TOKENS || sequences.iter().any(|s| s.len() != t) {
            return Err(invalid(
                "encode_text",
                format!("sequences must share a length of at most {MAX_PROMPT_TOKENS}"),
            ));
        }
        if let Some(&bad) = sequences.iter().flat_map(|s| s.iter()).find(|&&id| id >= self.vocab_size) {
            return Err(invalid("encode_text", format!("token id {bad} out of vocabulary")));
        }
        let d = self.dim;
        let flat: Vec<usize> = sequences.iter().flat_map(|s| s.iter().copied()).collect();
        let table = g.param(store, self.token_embed);
        let tok = g.gather_rows(table, &flat)?;
        let pos_table = g.param(store, self.pos_embed);
        let pos_ids: Vec<usize> = (0..u).flat_map(|_| 0..t).collect();
        let pos = g.gather_rows(pos_table, &pos_ids)?;
        let x = g.add(tok, pos)?;
        let x = g.reshape(x, &[u, t, d])?;
        let enc = self.encoder.forward(g, store, x)?;
        let ctx_table = g.param(store, self.context);
        let ctx_ids: Vec<usize> = (0..u).flat_map(|_| 0..NUM_CONTEXT_TOKENS).collect();
        let ctx = g.gather_rows(ctx_table, &ctx_ids)?;
        let ctx = g.reshape(ctx, &[u, NUM_CONTEXT_TOKENS, d])?;
        let tokens = g.concat(&[enc, ctx], 1)?;
        let pooled = g.mean_axis(tokens, 1)?;
        Ok(TextQueries { tokens, pooled })
    }

    /// Pooled embeddings `[N, D]` for arbitrary-length sequences, in input order.
    /// Sequences are grouped by length so each group runs as one batch.
    pub fn encode_pooled(&self, g: &mut Graph, store: &ParamStore, sequences: &[Vec<usize>]) -> Result<Var> {
        if sequences.is_empty() {
            return Err(invalid("encode_text", "no sequences"));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in sequences.iter().enumerate() {
            groups.entry(s.len()).or_default().push(i);
        }
        let mut parts = Vec::new();
        let mut row_of = vec![0; sequences.len()];
        let mut offset = 0;
        for members in groups.values() {
            let seqs: Vec<&[usize]> = members.iter().map(|&i| sequences[i].as_slice()).collect();
            parts.push(self.encode(g, store, &seqs)?.pooled);
            for (k, &i) in members.iter().enumerate() {
                row_of[i] = offset + k;
            }
            offset += members.len();
        }
        let all = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
        if row_of.iter().enumerate().all(|(i, &r)| i == r) {
            Ok(all)
        } else {
            g.gather_rows(all, &row_of)
        }
    }
}
