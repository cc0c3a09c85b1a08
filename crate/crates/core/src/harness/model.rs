use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::condition::{
    condition_contrastive_loss, render_prompt, ConditionAttributes, CtGenerator, PromptDetail, TextEncoder,
    Vocabulary, INITIAL_TEMPERATURE,
};
use crate::error::{invalid, Result};
use crate::fusion::{
    weighted_fuse, AdapterBank, CaaHead, Ca2Fusion, FusionKind, Modality, ModalityMask, StaticWeights,
    NUM_MODALITIES,
};
use crate::nn::{AttentionConfig, Backbone, FeaturePyramid};
use crate::scenes::{Scene, NUM_CLASSES};
use crate::seghead::SegDecoder;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

const CT_HEADS: usize = 2;

#[derive(Clone, Debug)]
enum Fusion {
    Static(StaticWeights),
    Caa(CaaHead),
    CaaPerLevel(Vec<CaaHead>),
    Ca2(Ca2Fusion),
}

/// The full segmentation network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    backbones: Vec<Backbone>,
    adapters: Option<AdapterBank>,
    ct: CtGenerator,
    text: TextEncoder,
    log_tau: ParamId,
    fusion: Fusion,
    decoder: SegDecoder,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, H, W, K]`
    pub logits: Var,
    /// `[B, D_ct]`, present when the CT was computed.
    pub ct: Option<Var>,
    /// `[B, 4]` fusion weights for the additive strategies.
    pub weights: Option<Var>,
}

/// Stacks per-scene `[H, W, 3]` images into `[B, H, W, 3]`, one tensor per modality.
pub fn stack_images(scenes: &[&Scene]) -> Result<[Tensor; NUM_MODALITIES]> {
    let first = scenes.first().ok_or_else(|| invalid("stack_images", "empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut out: [Vec<f64>; NUM_MODALITIES] = Default::default();
    for s in scenes {
        if (s.height, s.width) != (h, w) {
            return Err(invalid("stack_images", "scenes of different sizes in one batch"));
        }
        for (m, buf) in out.iter_mut().enumerate() {
            buf.extend_from_slice(s.images[m].data());
        }
    }
    let b = scenes.len();
    let mut it = out.into_iter().map(|d| Tensor::new(vec![b, h, w, 3], d));
    Ok([it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?])
}

impl Model {
    /// Builds a freshly initialised model; parameter values depend only on `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let vocab = Vocabulary::default();
        let channels = cfg.backbone.level_channels;

        let backbones = if cfg.shared_backbone {
            vec![Backbone::new(&mut store, "backbone", &cfg.backbone, &mut rng)?]
        } else {
            Modality::ALL
                .iter()
                .map(|m| Backbone::new(&mut store, &format!("backbone.{}", m.name()), &cfg.backbone, &mut rng))
                .collect::<Result<Vec<_>>>()?
        };
        let adapters = if cfg.shared_backbone {
            Some(AdapterBank::new(&mut store, "adapters", &channels, &mut rng)?)
        } else {
            None
        };
        let ct_cfg = AttentionConfig::new(cfg.ct_dim, CT_HEADS)?;
        let ct = CtGenerator::new(&mut store, "ct", channels[3], ct_cfg, &mut rng)?;
        let text = TextEncoder::new(&mut store, "text", vocab.len(), ct_cfg, cfg.text_layers, &mut rng)?;
        let log_tau = store.add("text.log_tau", &[1], Init::Const(INITIAL_TEMPERATURE.ln()), &mut rng)?;
        let fusion = match cfg.fusion_kind {
            FusionKind::Caa if cfg.caa_per_level => Fusion::CaaPerLevel(
                (0..channels.len())
                    .map(|l| CaaHead::new(&mut store, &format!("fusion.caa.level{l}"), cfg.ct_dim, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            FusionKind::Caa => Fusion::Caa(CaaHead::new(&mut store, "fusion.caa", cfg.ct_dim, &mut rng)?),
            FusionKind::Ca2 => Fusion::Ca2(Ca2Fusion::new(
                &mut store,
                "fusion",
                &channels,
                cfg.ct_dim,
                cfg.ct_target,
                cfg.ca2_heads,
                &mut rng,
            )?),
            kind => Fusion::Static(StaticWeights::new(&mut store, "fusion", kind, &mut rng)?),
        };
        let decoder = SegDecoder::new(&mut store, "head", &channels, NUM_CLASSES, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            vocab,
            backbones,
            adapters,
            ct,
            text,
            log_tau,
            fusion,
            decoder,
        })
    }

    pub fn mask(&self) -> ModalityMask {
        self.cfg.modalities
    }

    /// Whether the forward pass needs the condition token.
    pub fn uses_ct(&self) -> bool {
        match &self.fusion {
            Fusion::Caa(_) | Fusion::CaaPerLevel(_) => true,
            Fusion::Ca2(f) => f.target != crate::fusion::CtTarget::None,
            Fusion::Static(_) => false,
        }
    }

    fn pyramids(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[Tensor; NUM_MODALITIES],
    ) -> Result<Vec<(Modality, FeaturePyramid)>> {
        let present = self.mask().present();
        let b = images[0].shape()[0];
        if self.backbones.len() == 1 {
            let mut data = Vec::new();
            for m in &present {
                data.extend_from_slice(images[m.index()].data());
            }
            let mut shape = images[0].shape().to_vec();
            shape[0] = b * present.len();
            let x = g.constant(Tensor::new(shape, data)?);
            let joint = self.backbones[0].forward(g, store, x)?;
            present
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let levels = joint
                        .levels
                        .iter()
                        .map(|&l| if present.len() == 1 { Ok(l) } else { g.slice(l, 0, i * b, b) })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((m, FeaturePyramid { levels }))
                })
                .collect()
        } else {
            present
                .iter()
                .map(|&m| {
                    let x = g.constant(images[m.index()].clone());
                    Ok((m, self.backbones[m.index()].forward(g, store, x)?))
                })
                .collect()
        }
    }

    /// Runs the network on stacked `[B, H, W, 3]` images. `need_ct` forces the
    /// CT to be computed even when fusion does not use it.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        images: &[Tensor; NUM_MODALITIES],
        need_ct: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        self.forward_with(g, &self.store, images, need_ct, rng)
    }

    /// [`Model::forward`] with parameter values taken from `store`, which
    /// must share this model's layout.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[Tensor; NUM_MODALITIES],
        need_ct: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let b = images[0].shape().first().copied().unwrap_or(0);
        if b == 0 {
            return Err(invalid("forward", "empty batch"));
        }
        let raw = self.pyramids(g, store, images)?;
        let ct = if need_ct || self.uses_ct() {
            Some(self.ct.forward(g, store, raw[0].1.levels[3])?)
        } else {
            None
        };
        let adapted: Vec<(Modality, FeaturePyramid)> = match &self.adapters {
            Some(bank) => raw
                .iter()
                .map(|(m, p)| Ok((*m, bank.adapt_pyramid(g, store, *m, p)?)))
                .collect::<Result<_>>()?,
            None => raw,
        };
        let mut slots: [Option<&FeaturePyramid>; NUM_MODALITIES] = [None; NUM_MODALITIES];
        for (m, p) in &adapted {
            slots[m.index()] = Some(p);
        }
        let (fused, weights) = match &self.fusion {
            Fusion::Static(s) => {
                let w = s.weights(g, store, b, self.mask(), rng)?;
                (weighted_fuse(g, &slots, w)?, Some(w))
            }
            Fusion::Caa(head) => {
                let ct = ct.ok_or_else(|| invalid("forward", "CAA needs the condition token"))?;
                let w = head.weights(g, store, ct, self.mask())?;
                (weighted_fuse(g, &slots, w)?, Some(w))
            }
            Fusion::CaaPerLevel(heads) => {
                let ct = ct.ok_or_else(|| invalid("forward", "CAA needs the condition token"))?;
                let mut levels = Vec::with_capacity(heads.len());
                let mut total: Option<Var> = None;
                for (l, head) in heads.iter().enumerate() {
                    let w = head.weights(g, store, ct, self.mask())?;
                    let single: Vec<(usize, FeaturePyramid)> = adapted
                        .iter()
                        .map(|(m, p)| (m.index(), FeaturePyramid { levels: vec![p.levels[l]] }))
                        .collect();
                    let mut level_slots: [Option<&FeaturePyramid>; NUM_MODALITIES] = [None; NUM_MODALITIES];
                    for (m, p) in &single {
                        level_slots[*m] = Some(p);
                    }
                    levels.push(weighted_fuse(g, &level_slots, w)?.levels[0]);
                    total = Some(match total {
                        Some(t) => g.add(t, w)?,
                        None => w,
                    });
                }
                let mean = total.map(|t| g.scale(t, 1.0 / heads.len() as f64));
                (FeaturePyramid { levels }, mean)
            }
            Fusion::Ca2(f) => {
                let rgb = &adapted[0].1;
                let secondaries: Vec<(Modality, &FeaturePyramid)> = adapted[1..].iter().map(|(m, p)| (*m, p)).collect();
                (f.forward(g, store, rgb, &secondaries, ct)?, None)
            }
        };
        let logits = self.decoder.decode(g, store, &fused)?;
        Ok(ForwardOutput { logits, ct, weights })
    }

    /// Encodes each distinct string once and gathers one row per item.
    fn encode_texts(&self, g: &mut Graph, store: &ParamStore, texts: &[String]) -> Result<Var> {
        let mut unique: BTreeMap<&str, usize> = BTreeMap::new();
        let mut order: Vec<&str> = Vec::new();
        for t in texts {
            if !unique.contains_key(t.as_str()) {
                unique.insert(t, order.len());
                order.push(t);
            }
        }
        let seqs: Vec<Vec<usize>> = order.iter().map(|t| self.vocab.tokenize(t)).collect();
        let pooled = self.text.encode_pooled(g, store, &seqs)?;
        let ids: Vec<usize> = texts.iter().map(|t| unique[t.as_str()]).collect();
        g.gather_rows(pooled, &ids)
    }

    /// Contrastive condition loss for a batch: full prompt plus the weighted
    /// mean of per-attribute terms.
    pub fn condition_loss(&self, g: &mut Graph, ct: Var, attrs: &[ConditionAttributes]) -> Result<Var> {
        self.condition_loss_with(g, &self.store, ct, attrs)
    }

    pub fn condition_loss_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ct: Var,
        attrs: &[ConditionAttributes],
    ) -> Result<Var> {
        let prompts = attrs
            .iter()
            .map(|a| render_prompt(a, self.cfg.prompt_detail))
            .collect::<Result<Vec<_>>>()?;
        let log_tau = g.param(store, self.log_tau);
        let full: Vec<String> = prompts.iter().map(|p| p.text.clone()).collect();
        let texts = self.encode_texts(g, store, &full)?;
        let main = condition_contrastive_loss(g, ct, texts, log_tau)?;
        if self.cfg.attribute_weight == 0.0 || self.cfg.prompt_detail == PromptDetail::SingleAttribute {
            return Ok(main);
        }
        let slots = prompts.iter().map(|p| p.attribute_tokens.len()).min().unwrap_or(0);
        if slots == 0 {
            return Ok(main);
        }
        let mut aux: Option<Var> = None;
        for j in 0..slots {
            let words: Vec<String> = prompts.iter().map(|p| p.attribute_tokens[j].clone()).collect();
            let texts = self.encode_texts(g, store, &words)?;
            let term = condition_contrastive_loss(g, ct, texts, log_tau)?;
            aux = Some(match aux {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let aux = g.scale(aux.expect("slots > 0"), self.cfg.attribute_weight / slots as f64);
        g.add(main, aux)
    }
}
