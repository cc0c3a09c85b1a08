use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::AttentionConfig;
use crate::tensor::{gradcheck_inputs, gradcheck_params, random_projection, Graph, ParamStore, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn attrs(
    weather: Weather,
    time_of_day: TimeOfDay,
    precip: Option<(PrecipitationType, PrecipitationLevel)>,
    ground_condition: GroundCondition,
    sky_condition: Option<SkyCondition>,
) -> ConditionAttributes {
    ConditionAttributes {
        weather,
        time_of_day,
        precipitation_type: precip.map(|p| p.0),
        precipitation_level: precip.map(|p| p.1),
        ground_condition,
        sky_condition,
    }
}

/// Accepts exactly the sentences of the prompt template, with correct articles.
fn matches_template(s: &str) -> bool {
    fn take<'a>(s: &'a str, lit: &str) -> Option<&'a str> {
        s.strip_prefix(lit)
    }
    fn one_of<'a>(s: &'a str, opts: &[&'a str]) -> Option<(&'a str, &'a str)> {
        opts.iter().find_map(|o| s.strip_prefix(o).map(|r| (*o, r)))
    }
    fn art(w: &str) -> &'static str {
        if "aeiou".contains(&w[..1]) {
            "an "
        } else {
            "a "
        }
    }
    let run = || -> Option<()> {
        let (w, r) = one_of(s, &["A clear", "A foggy", "A rainy", "A snowy"])?;
        let _ = w;
        let r = take(r, " driving scene at ")?;
        let (_, r) = one_of(r, &["daytime", "nighttime"])?;
        let r = take(r, " with ")?;
        let (_, r) = one_of(
            r,
            &["no precipitation", "light rain", "heavy rain", "light snow", "heavy snow"],
        )?;
        let r = take(r, ", ")?;
        let grounds = ["dry", "wet", "snowy"];
        let g = grounds.iter().find(|gw| r.strip_prefix(art(gw)).and_then(|x| x.strip_prefix(**gw)).is_some())?;
        let r = r.strip_prefix(art(g))?.strip_prefix(*g)?;
        let r = take(r, " ground and ")?;
        let skies = ["sunny", "overcast", "dark"];
        let k = skies.iter().find(|sw| r.strip_prefix(art(sw)).and_then(|x| x.strip_prefix(**sw)).is_some())?;
        let r = r.strip_prefix(art(k))?.strip_prefix(*k)?;
        (r == " sky.").then_some(())
    };
    run().is_some()
}

#[test]
fn golden_prompt_rainy_night() {
    let a = attrs(
        Weather::Rain,
        TimeOfDay::Night,
        Some((PrecipitationType::Rain, PrecipitationLevel::Light)),
        GroundCondition::Wet,
        None,
    );
    let p = build_condition_prompt(&a).unwrap();
    assert_eq!(p.text, "A rainy driving scene at nighttime with light rain, a wet ground and a dark sky.");
    assert_eq!(p.attribute_tokens, ["rainy", "night", "light rain", "wet", "dark"]);
}

#[test]
fn other_template_examples() {
    let clear = attrs(Weather::Clear, TimeOfDay::Day, None, GroundCondition::Dry, Some(SkyCondition::Sunny));
    assert_eq!(
        build_condition_prompt(&clear).unwrap().text,
        "A clear driving scene at daytime with no precipitation, a dry ground and a sunny sky."
    );
    let snow = attrs(
        Weather::Snow,
        TimeOfDay::Day,
        Some((PrecipitationType::Snow, PrecipitationLevel::Heavy)),
        GroundCondition::Snowy,
        Some(SkyCondition::Overcast),
    );
    assert_eq!(
        build_condition_prompt(&snow).unwrap().text,
        "A snowy driving scene at daytime with heavy snow, a snowy ground and an overcast sky."
    );
    let fog_day = attrs(Weather::Fog, TimeOfDay::Day, None, GroundCondition::Dry, None);
    assert!(build_condition_prompt(&fog_day).unwrap().text.ends_with("an overcast sky."));
}

#[test]
fn invalid_attributes_rejected() {
    let half = ConditionAttributes {
        precipitation_level: None,
        ..attrs(
            Weather::Fog,
            TimeOfDay::Day,
            Some((PrecipitationType::Rain, PrecipitationLevel::Light)),
            GroundCondition::Wet,
            None,
        )
    };
    assert!(build_condition_prompt(&half).is_err());
    let rain_dry = attrs(Weather::Rain, TimeOfDay::Day, None, GroundCondition::Dry, None);
    assert!(build_condition_prompt(&rain_dry).is_err());
    let snow_as_rain = attrs(
        Weather::Snow,
        TimeOfDay::Day,
        Some((PrecipitationType::Rain, PrecipitationLevel::Light)),
        GroundCondition::Snowy,
        None,
    );
    assert!(build_condition_prompt(&snow_as_rain).is_err());
}

#[test]
fn full_product_obeys_template_and_round_trips() {
    let vocab = Vocabulary::default();
    let all = ConditionAttributes::product();
    assert_eq!(all.len(), 4 * 2 * 5 * 3 * 4);
    let mut valid = 0;
    for a in &all {
        match build_condition_prompt(a) {
            Ok(p) => {
                valid += 1;
                assert!(matches_template(&p.text), "{}", p.text);
                let ids = vocab.tokenize(&p.text);
                assert!(!ids.contains(&OOV_ID), "{}", p.text);
                assert_eq!(normalize(&vocab.detokenize(&ids)), normalize(&p.text));
                for t in &p.attribute_tokens {
                    assert!(!vocab.tokenize(t).contains(&OOV_ID), "{t}");
                }
            }
            Err(_) => assert!(a.validate().is_err()),
        }
    }
    // fog/clear: 2·2·5·3·4 = 240; rain/snow: 2·2·2·3·4 = 96
    assert_eq!(valid, 336);
}

#[test]
fn tokenizer_examples() {
    let v = Vocabulary::default();
    assert!(v.tokenize("").is_empty());
    assert_eq!(v.tokenize("A clear sky."), vec![v.id("a"), v.id("clear"), v.id("sky"), v.id(".")]);
    assert_eq!(v.tokenize("purple"), vec![OOV_ID]);
}

#[test]
fn vocabulary_file_round_trip() {
    let v = Vocabulary::default();
    let mut buf = Vec::new();
    v.write(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().nth(v.id("sky")), Some("sky"));
    assert_eq!(Vocabulary::read(&buf[..]).unwrap(), v);
    assert!(Vocabulary::read(&b"sky\n"[..]).is_err());
}

#[test]
fn single_attribute_prompt_is_weather_word() {
    let a = attrs(Weather::Fog, TimeOfDay::Night, None, GroundCondition::Dry, None);
    let p = render_prompt(&a, PromptDetail::SingleAttribute).unwrap();
    assert_eq!(p.text, "foggy");
}

#[test]
fn attribute_bytes_round_trip() {
    for a in ConditionAttributes::product() {
        assert_eq!(ConditionAttributes::from_bytes(a.to_bytes()), Some(a));
    }
    assert_eq!(ConditionAttributes::from_bytes([9, 0, 0xFF, 0xFF, 0, 0xFF]), None);
}

#[test]
fn cells_are_indexed_consistently() {
    let cells = ConditionCell::all();
    assert_eq!(cells.len(), NUM_CELLS);
    for (i, c) in cells.iter().enumerate() {
        assert_eq!(c.index(), i);
        assert_eq!(ConditionCell::from_index(i), Some(*c));
    }
    assert_eq!(cells[5].label(), "rain-night");
}

fn text_encoder(d: usize, layers: usize, seed: u64) -> (ParamStore, TextEncoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(d, 2).unwrap();
    let enc = TextEncoder::new(&mut store, "text", Vocabulary::default().len(), cfg, layers, &mut rng).unwrap();
    (store, enc)
}

#[test]
fn text_encoder_rows_and_determinism() {
    let (store, enc) = text_encoder(16, 6, 1);
    let v = Vocabulary::default();
    let ids = v.tokenize("A rainy driving scene.");
    let mut g = Graph::new();
    let q = enc.encode(&mut g, &store, &[&ids, &ids]).unwrap();
    assert_eq!(g.shape(q.tokens), &[2, ids.len() + NUM_CONTEXT_TOKENS, 16]);
    assert_eq!(g.shape(q.pooled), &[2, 16]);
    let pooled = g.data(q.pooled);
    assert_eq!(pooled[..16], pooled[16..]);
    assert!(enc.encode(&mut g, &store, &[&[]]).is_err());
}

#[test]
fn encode_pooled_preserves_input_order() {
    let (store, enc) = text_encoder(8, 1, 2);
    let seqs = vec![vec![1, 2, 3], vec![4], vec![5, 6, 7], vec![8, 9]];
    let mut g = Graph::new();
    let all = enc.encode_pooled(&mut g, &store, &seqs).unwrap();
    let all = g.data(all).to_vec();
    for (i, s) in seqs.iter().enumerate() {
        let mut g = Graph::new();
        let one = enc.encode(&mut g, &store, &[s]).unwrap().pooled;
        let one = g.data(one);
        for (a, b) in one.iter().zip(&all[i * 8..(i + 1) * 8]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn text_encoder_gradcheck_wrt_token_embeddings() {
    let (store, enc) = text_encoder(8, 2, 3);
    let ids = [3usize, 5, 7];
    let e = gradcheck_params(&store, &[enc.token_embed, enc.context], 1e-5, Some(12), 4, |g, s| {
        let q = enc.encode(g, s, &[&ids])?;
        random_projection(g, q.pooled, 5)
    })
    .unwrap();
    assert!(e <= 1e-4, "{e}");
}

fn ct_generator(seed: u64) -> (ParamStore, CtGenerator) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let ct = CtGenerator::new(&mut store, "ct", 6, cfg, &mut rng).unwrap();
    (store, ct)
}

#[test]
fn ct_shape_and_sensitivity() {
    let (store, ct) = ct_generator(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(1, 1), (2, 3), (4, 4)] {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[2, h, w, 6], &mut rng));
        let y = ct.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 8]);
        let d = g.data(y);
        assert!(d[..8].iter().zip(&d[8..]).any(|(a, b)| a != b));
    }
    let mut g = Graph::new();
    let bad = g.constant(Tensor::zeros(vec![1, 1, 1, 5]));
    assert!(ct.forward(&mut g, &store, bad).is_err());
}

#[test]
fn ct_sequence_order_matters_only_through_positions() {
    let (store, mut ct) = ct_generator(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[1, 1, 3, 6], &mut rng);
    let mut swapped = x.clone();
    let d = swapped.data_mut();
    for c in 0..6 {
        d.swap(c, 12 + c);
    }
    let run = |ct: &CtGenerator, t: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let y = ct.forward(&mut g, &store, v).unwrap();
        g.data(y).to_vec()
    };
    assert_ne!(run(&ct, &x), run(&ct, &swapped));
    ct.use_positions = false;
    let (a, b) = (run(&ct, &x), run(&ct, &swapped));
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-12);
    }
}

fn contrastive_value(cts: Tensor, texts: Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(cts);
    let b = g.constant(texts);
    let lt = g.constant(Tensor::scalar(tau.ln()));
    let l = condition_contrastive_loss(&mut g, a, b, lt).unwrap();
    g.data(l)[0]
}

#[test]
fn contrastive_singleton_is_zero() {
    let v = contrastive_value(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(), Tensor::new(vec![1, 3], vec![-1.0, 0.5, 2.0]).unwrap(), 0.07);
    assert_eq!(v, 0.0);
}

#[test]
fn contrastive_identical_rows_give_ln_b() {
    let row = [0.3, -0.2, 0.9];
    for b in [2usize, 3, 5] {
        let t = Tensor::new(vec![b, 3], row.repeat(b)).unwrap();
        let v = contrastive_value(t.clone(), t, 0.07);
        assert!((v - (b as f64).ln()).abs() < 1e-12, "{b}: {v}");
    }
}

#[test]
fn contrastive_orthogonal_pair_tau_one() {
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    // logits [[1,0],[0,1]]: -ln(e / (e + 1)) = ln(1 + e^-1)
    let expect = (1.0 + (-1.0f64).exp()).ln();
    let v = contrastive_value(eye.clone(), eye, 1.0);
    assert!((v - expect).abs() < 1e-12);
    assert!((v - 0.3133).abs() < 1e-4);
}

#[test]
fn contrastive_zero_norm_is_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::full(vec![2, 3], 1.0));
    let lt = g.constant(Tensor::scalar(0.0));
    assert!(condition_contrastive_loss(&mut g, a, b, lt).is_err());
}

#[test]
fn ct_into_contrastive_gradcheck() {
    let (mut store, ct) = ct_generator(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let log_tau = store
        .add("ct.log_tau", &[1], crate::tensor::Init::Const(0.5f64.ln()), &mut rng)
        .unwrap();
    let top = rand_tensor(&[3, 2, 2, 6], &mut rng);
    let texts = rand_tensor(&[3, 8], &mut rng);
    let e = gradcheck_inputs(&[top.clone(), texts.clone()], 1e-5, |g, v| {
        let c = ct.forward(g, &store, v[0])?;
        let lt = g.param(&store, log_tau);
        condition_contrastive_loss(g, c, v[1], lt)
    })
    .unwrap();
    assert!(e <= 1e-4, "inputs {e}");
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let e = gradcheck_params(&store, &ids, 1e-5, Some(2), 11, |g, s| {
        let x = g.constant(top.clone());
        let t = g.constant(texts.clone());
        let c = ct.forward(g, s, x)?;
        let lt = g.param(s, log_tau);
        condition_contrastive_loss(g, c, t, lt)
    })
    .unwrap();
    assert!(e <= 1e-4, "params {e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn contrastive_is_permutation_equivariant(b in 2usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rand_tensor(&[b, 4], &mut rng);
        let t = rand_tensor(&[b, 4], &mut rng);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.rotate_left(1 + seed as usize % (b - 1));
        let permute = |x: &Tensor| Tensor::from_fn(vec![b, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let base = contrastive_value(c.clone(), t.clone(), 0.1);
        let moved = contrastive_value(permute(&c), permute(&t), 0.1);
        prop_assert!((base - moved).abs() < 1e-10);
    }

    #[test]
    fn matched_pairs_beat_shifted_pairs(b in 2usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Separable: each pair shares a dominant axis of its own.
        let make = |rng: &mut ChaCha8Rng| Tensor::from_fn(vec![b, b], |i| {
            if i / b == i % b { 1.0 } else { rng.random_range(-0.2..0.2) }
        });
        let c = make(&mut rng);
        let t = make(&mut rng);
        let shifted = Tensor::from_fn(vec![b, b], |i| t.data()[((i / b + 1) % b) * b + i % b]);
        prop_assert!(contrastive_value(c.clone(), t, 0.1) < contrastive_value(c, shifted, 0.1));
    }
}
