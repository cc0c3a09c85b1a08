use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{stack_images, Model};
use crate::condition::{condition_contrastive_loss, CtGenerator, TextEncoder};
use crate::error::Result;
use crate::fusion::{
    ca2_window_attention, weighted_fuse, Adapter, CaaHead, Ca2Fusion, CtTarget, FusionKind, Modality, ModalityMask,
    StaticWeights,
};
use crate::nn::{
    AttentionConfig, Backbone, BackboneConfig, EncoderLayer, FeaturePyramid, LayerNorm, Linear, Mlp,
    MultiHeadAttention, TransformerEncodeDecode,
};
use crate::scenes::{render_scene, sample_condition, NormStats};
use crate::seghead::{total_loss, SegDecoder};
use crate::tensor::{
    gradcheck_inputs, gradcheck_params, random_projection, Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var,
};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub max_relative_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= GRADCHECK_TOLERANCE
    }
}

struct Suite {
    rng: ChaCha8Rng,
    results: Vec<GradCheck>,
}

impl Suite {
    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn push(&mut self, name: &str, err: f64) {
        self.results.push(GradCheck {
            name: name.to_string(),
            max_relative_error: err,
        });
    }

    /// Checks `f` with respect to all of its inputs, projected to a scalar.
    fn inputs(&mut self, name: &str, shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<()> {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| self.tensor(s)).collect();
        let seed = self.rng.random();
        let err = gradcheck_inputs(&inputs, GRADCHECK_STEP, |g, v| {
            let y = f(g, v)?;
            random_projection(g, y, seed)
        })?;
        self.push(name, err);
        Ok(())
    }

    /// Checks `f` with respect to up to `per_param` entries of every parameter.
    fn params(
        &mut self,
        name: &str,
        store: &ParamStore,
        per_param: Option<usize>,
        f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    ) -> Result<()> {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let seed = self.rng.random();
        let err = gradcheck_params(store, &ids, GRADCHECK_STEP, per_param, seed, |g, s| {
            let y = f(g, s)?;
            random_projection(g, y, seed ^ 1)
        })?;
        self.push(name, err);
        Ok(())
    }

    /// Moves every parameter off its initial value so zero-initialised
    /// paths still carry gradient.
    fn perturb(&mut self, store: &mut ParamStore) {
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v += self.rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn primitives(s: &mut Suite) -> Result<()> {
    s.inputs("primitive/gelu", &[&[3, 4]], |g, v| Ok(g.gelu(v[0])))?;
    s.inputs("primitive/sigmoid", &[&[3, 4]], |g, v| Ok(g.sigmoid(v[0])))?;
    s.inputs("primitive/exp", &[&[3, 4]], |g, v| Ok(g.exp(v[0])))?;
    s.inputs("primitive/log", &[&[3, 4]], |g, v| {
        let e = g.exp(v[0]);
        g.log(e)
    })?;
    s.inputs("primitive/scale", &[&[3, 4]], |g, v| Ok(g.scale(v[0], -1.7)))?;
    s.inputs("primitive/add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]))?;
    s.inputs("primitive/sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]))?;
    s.inputs("primitive/mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]))?;
    s.inputs("primitive/mul_scalar", &[&[3, 4], &[1]], |g, v| g.mul_scalar(v[0], v[1]))?;
    s.inputs("primitive/scale_rows", &[&[2, 3, 2], &[2]], |g, v| g.scale_rows(v[0], v[1]))?;
    s.inputs("primitive/mm", &[&[2, 3, 4], &[4, 3]], |g, v| g.mm(v[0], v[1]))?;
    s.inputs("primitive/matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]))?;
    s.inputs("primitive/bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false))?;
    s.inputs("primitive/bmm_transposed", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true))?;
    s.inputs("primitive/add_bias", &[&[2, 3, 4], &[4]], |g, v| g.add_bias(v[0], v[1]))?;
    s.inputs("primitive/softmax", &[&[3, 5]], |g, v| Ok(g.softmax(v[0])))?;
    s.inputs("primitive/layer_norm", &[&[2, 3, 4], &[4], &[4]], |g, v| g.layer_norm(v[0], v[1], v[2]))?;
    s.inputs("primitive/l2_normalize_rows", &[&[3, 5]], |g, v| g.l2_normalize_rows(v[0]))?;
    s.inputs("primitive/cross_entropy", &[&[4, 3]], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))?;
    s.inputs("primitive/sum", &[&[3, 5]], |g, v| Ok(g.sum(v[0])))?;
    s.inputs("primitive/mean", &[&[3, 5]], |g, v| Ok(g.mean(v[0])))?;
    s.inputs("primitive/mean_axis", &[&[2, 3, 5]], |g, v| g.mean_axis(v[0], 1))?;
    for (stride, padding) in [(1, 1), (2, 0), (4, 0)] {
        s.inputs(
            &format!("primitive/conv2d_s{stride}_p{padding}"),
            &[&[2, 8, 8, 3], &[stride.max(3), stride.max(3), 3, 4], &[4]],
            move |g, v| g.conv2d(v[0], v[1], v[2], Conv2dSpec { stride, padding }),
        )?;
    }
    s.inputs("primitive/upsample_nearest", &[&[2, 2, 3, 2]], |g, v| g.upsample_nearest(v[0], 2))?;
    s.inputs("primitive/upsample_bilinear", &[&[2, 2, 3, 2]], |g, v| g.upsample_bilinear(v[0], 4))?;
    s.inputs("primitive/pad2d", &[&[2, 2, 3, 2]], |g, v| g.pad2d(v[0], 4, 7))?;
    s.inputs("primitive/reshape", &[&[2, 3, 4]], |g, v| g.reshape(v[0], &[6, 4]))?;
    s.inputs("primitive/permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]))?;
    s.inputs("primitive/transpose", &[&[2, 3, 4]], |g, v| g.transpose(v[0]))?;
    s.inputs("primitive/concat", &[&[2, 3, 4], &[2, 1, 4]], |g, v| g.concat(&[v[0], v[1], v[0]], 1))?;
    s.inputs("primitive/slice", &[&[2, 5, 4]], |g, v| g.slice(v[0], 1, 1, 3))?;
    s.inputs("primitive/gather_rows", &[&[5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))?;
    Ok(())
}

fn blocks(s: &mut Suite) -> Result<()> {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", 4, 3, &mut s.rng)?;
    let ln = LayerNorm::new(&mut store, "norm", 3, &mut s.rng)?;
    let mlp = Mlp::new(&mut store, "mlp", 3, 5, &mut s.rng)?;
    s.perturb(&mut store);
    let x = s.tensor(&[2, 4]);
    s.params("block/linear_norm_mlp", &store, None, |g, st| {
        let v = g.constant(x.clone());
        let h = lin.forward(g, st, v)?;
        let h = ln.forward(g, st, h)?;
        mlp.forward(g, st, h)
    })?;

    let cfg = AttentionConfig::new(4, 2)?;
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", cfg, &mut s.rng)?;
    s.perturb(&mut store);
    s.inputs("block/multihead_attention", &[&[2, 3, 4], &[2, 5, 4]], |g, v| mha.forward(g, &store, v[0], v[1]))?;
    let (q, kv) = (s.tensor(&[1, 3, 4]), s.tensor(&[1, 5, 4]));
    s.params("block/multihead_attention_params", &store, None, |g, st| {
        let (a, b) = (g.constant(q.clone()), g.constant(kv.clone()));
        mha.forward(g, st, a, b)
    })?;

    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut store, "enc", cfg, &mut s.rng)?;
    s.inputs("block/encoder_layer", &[&[2, 3, 4]], |g, v| layer.forward(g, &store, v[0]))?;

    let mut store = ParamStore::new();
    let ed = TransformerEncodeDecode::new(&mut store, "ed", cfg, 2, 2, &mut s.rng)?;
    s.inputs("block/transformer_encode_decode", &[&[2, 4, 4], &[2, 1, 4]], |g, v| ed.forward(g, &store, v[0], v[1]))?;

    let bcfg = BackboneConfig {
        level_channels: [4, 8, 12, 16],
        blocks_per_level: 1,
    };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "backbone", &bcfg, &mut s.rng)?;
    let img = s.tensor(&[1, 32, 32, 3]);
    s.params("block/backbone", &store, Some(3), |g, st| {
        let v = g.constant(img.clone());
        let p = bb.forward(g, st, v)?;
        let flat: Vec<Var> = p
            .levels
            .iter()
            .map(|&l| {
                let n = g.shape(l).iter().product();
                g.reshape(l, &[n])
            })
            .collect::<Result<_>>()?;
        g.concat(&flat, 0)
    })?;
    Ok(())
}

fn fusion(s: &mut Suite) -> Result<()> {
    let mut store = ParamStore::new();
    let adapter = Adapter::new(&mut store, "adapter", 8, &mut s.rng)?;
    s.perturb(&mut store);
    s.inputs("fusion/adapter", &[&[3, 8]], |g, v| adapter.forward(g, &store, v[0]))?;
    let x = s.tensor(&[3, 8]);
    s.params("fusion/adapter_params", &store, None, |g, st| {
        let v = g.constant(x.clone());
        adapter.forward(g, st, v)
    })?;

    let cfg = AttentionConfig::new(4, 2)?;
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", cfg, &mut s.rng)?;
    s.perturb(&mut store);
    for target in CtTarget::ALL {
        s.inputs(
            &format!("fusion/ca2_window_{}", target.name()),
            &[&[1, 49, 4], &[1, 49, 4], &[1, 4]],
            |g, v| ca2_window_attention(g, &store, &mha, target, v[0], Some(v[2]), v[1]),
        )?;
    }

    for target in CtTarget::ALL {
        let mut store = ParamStore::new();
        let f = Ca2Fusion::new(&mut store, "fusion", &[4, 8], 6, target, 2, &mut s.rng)?;
        s.perturb(&mut store);
        s.inputs(
            &format!("fusion/mwca_{}", target.name()),
            &[&[1, 3, 2, 4], &[1, 3, 2, 4], &[1, 8, 9, 8], &[1, 8, 9, 8], &[1, 6]],
            |g, v| {
                let r = FeaturePyramid { levels: vec![v[0], v[2]] };
                let sec = FeaturePyramid { levels: vec![v[1], v[3]] };
                let out = f.forward(g, &store, &r, &[(Modality::Lidar, &sec)], Some(v[4]))?;
                let a = g.reshape(out.levels[0], &[24])?;
                let b = g.reshape(out.levels[1], &[576])?;
                g.concat(&[a, b], 0)
            },
        )?;
    }

    let mut store = ParamStore::new();
    let caa = CaaHead::new(&mut store, "caa", 5, &mut s.rng)?;
    let learned = StaticWeights::new(&mut store, "static", FusionKind::LearnedStatic, &mut s.rng)?;
    s.perturb(&mut store);
    let maps: Vec<Vec<usize>> = vec![vec![2, 2, 2, 3]; 4];
    let mut shapes: Vec<&[usize]> = maps.iter().map(|m| m.as_slice()).collect();
    shapes.push(&[2, 5]);
    let mask = ModalityMask::parse("CLE")?;
    s.inputs("fusion/caa_fuse", &shapes, |g, v| {
        let pyr: Vec<FeaturePyramid> = v[..4].iter().map(|&l| FeaturePyramid { levels: vec![l] }).collect();
        let w = caa.weights(g, &store, v[4], mask)?;
        let out = weighted_fuse(g, &[Some(&pyr[0]), Some(&pyr[1]), None, Some(&pyr[3])], w)?;
        Ok(out.levels[0])
    })?;
    let inputs: Vec<Tensor> = maps.iter().map(|m| s.tensor(m)).collect();
    let rng = ChaCha8Rng::seed_from_u64(0);
    s.params("fusion/learned_static_fuse", &store, None, |g, st| {
        let pyr: Vec<FeaturePyramid> = inputs
            .iter()
            .map(|t| FeaturePyramid {
                levels: vec![g.constant(t.clone())],
            })
            .collect();
        let w = learned.weights(g, st, 2, ModalityMask::default(), &mut rng.clone())?;
        let out = weighted_fuse(g, &[Some(&pyr[0]), Some(&pyr[1]), Some(&pyr[2]), Some(&pyr[3])], w)?;
        Ok(out.levels[0])
    })?;
    Ok(())
}

fn condition(s: &mut Suite) -> Result<()> {
    let cfg = AttentionConfig::new(8, 2)?;
    let mut store = ParamStore::new();
    let ct = CtGenerator::new(&mut store, "ct", 6, cfg, &mut s.rng)?;
    let text = TextEncoder::new(&mut store, "text", 12, cfg, 2, &mut s.rng)?;
    s.inputs("condition/ct_generator", &[&[2, 2, 2, 6]], |g, v| ct.forward(g, &store, v[0]))?;
    s.inputs("condition/contrastive_loss", &[&[4, 5], &[4, 5], &[1]], |g, v| {
        condition_contrastive_loss(g, v[0], v[1], v[2])
    })?;
    let top = s.tensor(&[3, 2, 2, 6]);
    let prompts: Vec<Vec<usize>> = vec![vec![1, 4, 7], vec![2, 4, 9], vec![3, 3]];
    s.params("condition/ct_text_contrastive", &store, Some(2), |g, st| {
        let x = g.constant(top.clone());
        let c = ct.forward(g, st, x)?;
        let t = text.encode_pooled(g, st, &prompts)?;
        let lt = g.constant(Tensor::scalar(0.2f64.ln()));
        condition_contrastive_loss(g, c, t, lt)
    })?;
    Ok(())
}

fn decoder(s: &mut Suite) -> Result<()> {
    let ch = [4, 8, 8, 12];
    let mut store = ParamStore::new();
    let head = SegDecoder::new(&mut store, "head", &ch, 6, &mut s.rng)?;
    let caa = CaaHead::new(&mut store, "caa", 5, &mut s.rng)?;
    // A 4×4 scene: every pyramid level is a single cell.
    let shapes: Vec<Vec<usize>> = (0..4).flat_map(|_| ch.iter().map(|&c| vec![1, 1, 1, c])).collect();
    let mut refs: Vec<&[usize]> = shapes.iter().map(|v| v.as_slice()).collect();
    refs.push(&[1, 5]);
    s.inputs("seghead/decode_after_caa_4x4", &refs, |g, v| {
        let pyr: Vec<FeaturePyramid> = (0..4).map(|m| FeaturePyramid { levels: v[m * 4..m * 4 + 4].to_vec() }).collect();
        let w = caa.weights(g, &store, v[16], ModalityMask::default())?;
        let fused = weighted_fuse(g, &[Some(&pyr[0]), Some(&pyr[1]), Some(&pyr[2]), Some(&pyr[3])], w)?;
        let cat = g.concat(&fused.levels, 3)?;
        let h = head.fuse.forward(g, &store, cat)?;
        let h = g.gelu(h);
        let logits = head.classify.forward(g, &store, h)?;
        let logits = g.upsample_bilinear(logits, 4)?;
        let targets: Vec<usize> = (0..16).map(|i| i % 6).collect();
        total_loss(g, logits, &targets, None, 0.0)
    })?;
    Ok(())
}

/// Full model loss (segmentation plus condition terms) on a 32×32 scene,
/// checked at a random subset of every parameter tensor.
fn end_to_end(s: &mut Suite) -> Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.apply("[model]\nchannels = 4,8,12,16\n[condition]\nct_dim = 4\ntext_layers = 1\n")?;
    let model = Model::new(&cfg)?;
    let raw: Vec<_> = (0..2).map(|i| render_scene(&sample_condition(&mut s.rng), 500 + i)).collect();
    let stats = NormStats::compute(&raw)?;
    let scenes: Vec<_> = raw.iter().map(|x| stats.apply(x)).collect();
    let refs: Vec<_> = scenes.iter().collect();
    let images = stack_images(&refs)?;
    let targets: Vec<usize> = scenes.iter().flat_map(|x| x.semantic_map.iter().map(|&c| c as usize)).collect();
    let attrs: Vec<_> = scenes.iter().map(|x| x.attrs).collect();
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    let seed = s.rng.random();
    let err = gradcheck_params(&model.store, &ids, GRADCHECK_STEP, Some(1), seed, |g, st| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward_with(g, st, &images, true, &mut rng)?;
        let ct = out.ct.expect("ct requested");
        let cond = model.condition_loss_with(g, st, ct, &attrs)?;
        total_loss(g, out.logits, &targets, Some(cond), cfg.lambda_cond)
    })?;
    s.push("end_to_end/model_loss", err);
    Ok(())
}

/// Finite-difference checks of every differentiable component.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };
    primitives(&mut s)?;
    blocks(&mut s)?;
    fusion(&mut s)?;
    condition(&mut s)?;
    decoder(&mut s)?;
    end_to_end(&mut s)?;
    Ok(s.results)
}
