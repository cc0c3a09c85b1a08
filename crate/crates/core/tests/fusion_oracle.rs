mod common;

use cafuser::fusion::{ca2_window_attention, window_partition, CtTarget, Modality};
use cafuser::nn::{AttentionConfig, FeaturePyramid, MultiHeadAttention};
use cafuser::tensor::{Graph, ParamStore};
use common::{apply, dense_attention, random_oracle_case, rand_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn windowed_ca2_matches_dense_reference() {
    for seed in 0..60u64 {
        let target = CtTarget::ALL[seed as usize % 4];
        let case = random_oracle_case(seed, target);
        assert!(case.max_abs_err <= 1e-10, "seed {seed} {target:?}: {}", case.max_abs_err);
        assert_eq!(case.output_shape, case.input_shape);
    }
}

#[test]
fn single_window_attention_matches_explicit_fifty_by_forty_nine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", AttentionConfig::new(8, 2).unwrap(), &mut rng).unwrap();
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let rgb = rand_tensor(&[1, 49, 8], &mut rng);
    let sec = rand_tensor(&[1, 49, 8], &mut rng);
    let ctp = rand_tensor(&[1, 8], &mut rng);
    let mut g = Graph::new();
    let (r, s, c) = (g.constant(rgb.clone()), g.constant(sec.clone()), g.constant(ctp.clone()));
    let y = ca2_window_attention(&mut g, &store, &mha, CtTarget::Q, r, Some(c), s).unwrap();
    assert_eq!(g.shape(y), &[1, 49, 8]);

    let rows = |t: &cafuser::tensor::Tensor| -> Vec<Vec<f64>> { t.data().chunks(8).map(|c| c.to_vec()).collect() };
    let mut q: Vec<Vec<f64>> = rows(&rgb).iter().map(|x| apply(&store, &mha.q, x)).collect();
    q.push(apply(&store, &mha.q, ctp.data()));
    assert_eq!(q.len(), 50);
    let k: Vec<Vec<f64>> = rows(&sec).iter().map(|x| apply(&store, &mha.k, x)).collect();
    let v: Vec<Vec<f64>> = rows(&sec).iter().map(|x| apply(&store, &mha.v, x)).collect();
    let att = dense_attention(&q, &k, &v, 2);
    for (t, row) in att[..49].iter().enumerate() {
        let o = apply(&store, &mha.out, row);
        for ch in 0..8 {
            assert!((g.data(y)[t * 8 + ch] - o[ch]).abs() < 1e-10);
        }
    }
}

#[test]
fn single_seven_by_seven_level_composes_by_hand() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let fusion =
        cafuser::fusion::Ca2Fusion::new(&mut store, "fusion", &[4], 6, CtTarget::Q, 1, &mut rng).unwrap();
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let rgb = rand_tensor(&[1, 7, 7, 4], &mut rng);
    let sec = rand_tensor(&[1, 7, 7, 4], &mut rng);
    let ct = rand_tensor(&[1, 6], &mut rng);
    let level = &fusion.levels[0];
    let (_, mha, back) = level.blocks.iter().find(|(m, _, _)| *m == Modality::Lidar).unwrap();

    let mut g = Graph::new();
    let (rw, _) = window_partition(&rgb).unwrap();
    let (sw, _) = window_partition(&sec).unwrap();
    let ctp = apply(&store, level.ct_fc.as_ref().unwrap(), ct.data());
    let (r, s) = (g.constant(rw), g.constant(sw));
    let c = g.constant(cafuser::tensor::Tensor::new(vec![1, 4], ctp).unwrap());
    let att = ca2_window_attention(&mut g, &store, mha, CtTarget::Q, r, Some(c), s).unwrap();
    let att = g.data(att).to_vec();
    let expect: Vec<f64> = att
        .chunks(4)
        .zip(rgb.data().chunks(4))
        .flat_map(|(a, x)| {
            let b = apply(&store, back, a);
            x.iter().zip(b).map(|(u, v)| u + v).collect::<Vec<_>>()
        })
        .collect();

    let mut g = Graph::new();
    let rv = g.constant(rgb.clone());
    let sv = g.constant(sec.clone());
    let cv = g.constant(ct.clone());
    let sp = FeaturePyramid { levels: vec![sv] };
    let out = fusion
        .forward(&mut g, &store, &FeaturePyramid { levels: vec![rv] }, &[(Modality::Lidar, &sp)], Some(cv))
        .unwrap();
    for (a, b) in g.data(out.levels[0]).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}
