use rand::Rng;

use super::{AttentionConfig, LayerNorm, Mlp, MultiHeadAttention};
use crate::error::{invalid, Result};
use crate::tensor::{Graph, ParamStore, Var};

const MLP_EXPANSION: usize = 4;

/// Pre-norm self-attention + GELU MLP, both residual.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, MLP_EXPANSION * d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// Pre-norm decoder layer: self-attention over the queries, cross-attention
/// to the encoded memory, then the MLP.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, MLP_EXPANSION * d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, memory: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, queries)?;
        let a = self.self_attn.forward(g, store, h, h)?;
        let q = g.add(queries, a)?;
        let h = self.norm2.forward(g, store, q)?;
        let c = self.cross_attn.forward(g, store, h, memory)?;
        let q = g.add(q, c)?;
        let h = self.norm3.forward(g, store, q)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(q, m)
    }
}

/// Stack of encoder layers with a final norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
        }
        self.norm.forward(g, store, x)
    }
}

/// Encoder over a token sequence followed by a decoder over query seeds.
#[derive(Clone, Debug)]
pub struct TransformerEncodeDecode {
    pub encoder: TransformerEncoder,
    pub decoders: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
}

impl TransformerEncodeDecode {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        num_enc: usize,
        num_dec: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = TransformerEncoder::new(store, &format!("{name}.encoder"), cfg, num_enc, rng)?;
        let decoders = (0..num_dec)
            .map(|i| DecoderLayer::new(store, &format!("{name}.decoder{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            decoders,
            dec_norm: LayerNorm::new(store, &format!("{name}.dec_norm"), cfg.model_dim, rng)?,
        })
    }

    /// `sequence[.., N, D]`, `query_seeds[.., M, D]` -> `[.., M, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, sequence: Var, query_seeds: Var) -> Result<Var> {
        let ns = g.shape(sequence).to_vec();
        let ms = g.shape(query_seeds).to_vec();
        if ns.len() < 2 || ms.len() < 2 || ns[ns.len() - 2] == 0 || ms[ms.len() - 2] == 0 {
            return Err(invalid("transformer_encode_decode", "empty sequence or query set"));
        }
        let memory = self.encoder.forward(g, store, sequence)?;
        let mut q = query_seeds;
        for layer in &self.decoders {
            q = layer.forward(g, store, q, memory)?;
        }
        self.dec_norm.forward(g, store, q)
    }
}
