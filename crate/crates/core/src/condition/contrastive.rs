use crate::error::{invalid, Result};
use crate::tensor::{Graph, Var};

pub const INITIAL_TEMPERATURE: f64 = 0.07;

/// Symmetric InfoNCE between row-aligned `cts[B, D]` and `texts[B, D]`.
/// `log_tau` is a one-element tensor holding the log temperature.
pub fn condition_contrastive_loss(g: &mut Graph, cts: Var, texts: Var, log_tau: Var) -> Result<Var> {
    let (cs, ts) = (g.shape(cts).to_vec(), g.shape(texts).to_vec());
    if cs.len() != 2 || cs != ts || cs[0] == 0 {
        return Err(invalid(
            "condition_contrastive_loss",
            format!("embeddings {cs:?} and {ts:?} must both be [B >= 1, D]"),
        ));
    }
    let b = cs[0];
    let a = g.l2_normalize_rows(cts)?;
    let t = g.l2_normalize_rows(texts)?;
    let tt = g.transpose(t)?;
    let sim = g.matmul(a, tt)?;
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(sim, inv_tau)?;
    let logits_t = g.transpose(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let l1 = g.cross_entropy(logits, &diag)?;
    let l2 = g.cross_entropy(logits_t, &diag)?;
    let both = g.add(l1, l2)?;
    Ok(g.scale(both, 0.5))
}
