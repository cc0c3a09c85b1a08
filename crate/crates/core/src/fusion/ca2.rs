use rand::Rng;

use super::window::{partition_windows, reverse_windows, PadInfo, WINDOW_TOKENS};
use super::{CtTarget, Modality};
use crate::error::{invalid, Result};
use crate::nn::{AttentionConfig, FeaturePyramid, Linear, MultiHeadAttention};
use crate::tensor::{Graph, Init, ParamStore, Var};

/// Condition-token rows already projected for the attention block.
struct CtRows {
    q: Option<Var>,
    kv: Option<(Var, Var)>,
}

/// Attention over projected window tokens with the optional CT rows appended.
/// Returns the head-merged output for the 49 window queries.
fn attend_windows(mha: &MultiHeadAttention, g: &mut Graph, q: Var, k: Var, v: Var, ct: &CtRows) -> Result<Var> {
    let q = match ct.q {
        Some(row) => g.concat(&[q, row], 1)?,
        None => q,
    };
    let (k, v) = match ct.kv {
        Some((kr, vr)) => (g.concat(&[k, kr], 1)?, g.concat(&[v, vr], 1)?),
        None => (k, v),
    };
    let (merged, _) = mha.attend(g, q, k, v)?;
    if ct.q.is_some() {
        g.slice(merged, 1, 0, WINDOW_TOKENS)
    } else {
        Ok(merged)
    }
}

/// Projects `ct_prime[N, D]` through the attention block's input maps as
/// `[N, 1, D]` rows, according to `target`.
fn ct_rows(
    g: &mut Graph,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    target: CtTarget,
    ct_prime: Option<Var>,
) -> Result<CtRows> {
    let Some(ct) = ct_prime.filter(|_| target != CtTarget::None) else {
        return Ok(CtRows { q: None, kv: None });
    };
    let n = g.shape(ct)[0];
    let d = mha.cfg.model_dim;
    let row = |g: &mut Graph, lin: &Linear| -> Result<Var> {
        let y = lin.forward(g, store, ct)?;
        g.reshape(y, &[n, 1, d])
    };
    let q = if target.on_query() { Some(row(g, &mha.q)?) } else { None };
    let kv = if target.on_key_value() {
        Some((row(g, &mha.k)?, row(g, &mha.v)?))
    } else {
        None
    };
    Ok(CtRows { q, kv })
}

/// Cross-attention of one batch of windows: RGB tokens `[Nw, 49, D]` query
/// the secondary tokens `[Nw, 49, D]`, with `ct_prime[Nw, D]` (the condition
/// token after its per-level projection) joined per `target`. The CT query
/// row, when present, is removed; the result is `[Nw, 49, D]` after the
/// output projection.
pub fn ca2_window_attention(
    g: &mut Graph,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    target: CtTarget,
    rgb_windows: Var,
    ct_prime: Option<Var>,
    secondary_windows: Var,
) -> Result<Var> {
    let (rs, ss) = (g.shape(rgb_windows).to_vec(), g.shape(secondary_windows).to_vec());
    let d = mha.cfg.model_dim;
    if rs.len() != 3 || rs[1] != WINDOW_TOKENS || rs[2] != d || ss != rs {
        return Err(invalid(
            "ca2_window_attention",
            format!("windows {rs:?} / {ss:?} must both be [Nw, 49, {d}]"),
        ));
    }
    if target != CtTarget::None && ct_prime.is_none() {
        return Err(invalid("ca2_window_attention", "condition token required"));
    }
    let q = mha.q.forward(g, store, rgb_windows)?;
    let k = mha.k.forward(g, store, secondary_windows)?;
    let v = mha.v.forward(g, store, secondary_windows)?;
    let rows = ct_rows(g, store, mha, target, ct_prime)?;
    let merged = attend_windows(mha, g, q, k, v, &rows)?;
    mha.out.forward(g, store, merged)
}

/// Per-level parameters: the CT projection and, per secondary modality, an
/// attention block and a zero-initialized projection back onto RGB.
#[derive(Clone, Debug)]
pub struct Ca2Level {
    pub ct_fc: Option<Linear>,
    pub blocks: Vec<(Modality, MultiHeadAttention, Linear)>,
}

/// Multi-window condition-aware cross-attention fusion.
#[derive(Clone, Debug)]
pub struct Ca2Fusion {
    pub target: CtTarget,
    pub levels: Vec<Ca2Level>,
}

impl Ca2Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        level_channels: &[usize],
        ct_dim: usize,
        target: CtTarget,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(level_channels.len());
        for (l, &c) in level_channels.iter().enumerate() {
            let cfg = AttentionConfig::new(c, num_heads)?;
            let ct_fc = match target {
                CtTarget::None => None,
                _ => Some(Linear::new(store, &format!("{name}.level{l}.ct_fc"), ct_dim, c, rng)?),
            };
            let mut blocks = Vec::new();
            for m in &Modality::ALL[1..] {
                let base = format!("{name}.{}.level{l}", m.name());
                let mha = MultiHeadAttention::new(store, &format!("{base}.attn"), cfg, rng)?;
                let back = Linear::with_init(store, &format!("{base}.project_back"), c, c, Init::Zeros, rng)?;
                blocks.push((*m, mha, back));
            }
            levels.push(Ca2Level { ct_fc, blocks });
        }
        Ok(Self { target, levels })
    }

    /// Fuses the supplied secondary pyramids into the RGB pyramid. `ct` is
    /// `[B, D_ct]` and may be omitted only for the `none` target.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rgb: &FeaturePyramid,
        secondaries: &[(Modality, &FeaturePyramid)],
        ct: Option<Var>,
    ) -> Result<FeaturePyramid> {
        if rgb.levels.len() != self.levels.len() {
            return Err(invalid(
                "mwca_ca2_fuse",
                format!("{} levels, expected {}", rgb.levels.len(), self.levels.len()),
            ));
        }
        let mut out = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let maps: Vec<(Modality, Var)> = secondaries.iter().map(|(m, p)| (*m, p.levels[l])).collect();
            out.push(self.fuse_level(g, store, level, rgb.levels[l], &maps, ct)?);
        }
        Ok(FeaturePyramid { levels: out })
    }

    fn fuse_level(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: &Ca2Level,
        rgb: Var,
        secondaries: &[(Modality, Var)],
        ct: Option<Var>,
    ) -> Result<Var> {
        let s = g.shape(rgb).to_vec();
        if s.len() != 4 {
            return Err(invalid("mwca_ca2_fuse", format!("expected [B, H, W, C], got {s:?}")));
        }
        let info = PadInfo::new(s[0], s[1], s[2], s[3]);
        let nwi = info.windows_per_image();
        let ct_prime = match (&level.ct_fc, ct) {
            (Some(fc), Some(ct)) => {
                let p = fc.forward(g, store, ct)?;
                let ids: Vec<usize> = (0..info.batch).flat_map(|b| std::iter::repeat_n(b, nwi)).collect();
                Some(g.gather_rows(p, &ids)?)
            }
            (Some(_), None) => return Err(invalid("mwca_ca2_fuse", "condition token required")),
            (None, _) => None,
        };
        // Projecting before padding: zero feature tokens project to the bias.
        let project_padded = |g: &mut Graph, lin: &Linear, x: Var| -> Result<Var> {
            let w = g.param(store, lin.weight);
            let b = g.param(store, lin.bias);
            let y = g.mm(x, w)?;
            let y = g.pad2d(y, info.padded_height, info.padded_width)?;
            let y = g.add_bias(y, b)?;
            partition_windows(g, y)
        };
        let mut fused = rgb;
        for &(m, x) in secondaries {
            if g.shape(x) != s.as_slice() {
                return Err(crate::Error::ShapeMismatch {
                    op: "mwca_ca2_fuse",
                    lhs: s.clone(),
                    rhs: g.shape(x).to_vec(),
                });
            }
            let (_, mha, back) = level
                .blocks
                .iter()
                .find(|(bm, _, _)| *bm == m)
                .ok_or_else(|| invalid("mwca_ca2_fuse", format!("{} is not a secondary modality", m.name())))?;
            let q = project_padded(g, &mha.q, rgb)?;
            let k = project_padded(g, &mha.k, x)?;
            let v = project_padded(g, &mha.v, x)?;
            let rows = ct_rows(g, store, mha, self.target, ct_prime)?;
            let merged = attend_windows(mha, g, q, k, v, &rows)?;
            let merged = reverse_windows(g, merged, &info)?;
            let attn = mha.out.forward(g, store, merged)?;
            let back = back.forward(g, store, attn)?;
            fused = g.add(fused, back)?;
        }
        Ok(fused)
    }
}
