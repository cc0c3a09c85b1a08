#![allow(dead_code)]

use cafuser::fusion::{Ca2Fusion, CtTarget, Modality};
use cafuser::nn::{FeaturePyramid, Linear};
use cafuser::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn apply(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(lin.weight).data();
    let b = store.value(lin.bias).data();
    (0..lin.out_dim)
        .map(|o| b[o] + (0..lin.in_dim).map(|i| x[i] * w[i * lin.out_dim + o]).sum::<f64>())
        .collect()
}

/// Plain scaled dot-product attention written per head and per query row.
pub fn dense_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let dh = d / heads;
    q.iter()
        .map(|qi| {
            let mut out = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, vj) in v.iter().enumerate() {
                    for t in r.clone() {
                        out[t] += e[j] / z * vj[t];
                    }
                }
            }
            out
        })
        .collect()
}

/// Dense reference for one fused level: every 7×7 window of the zero-padded
/// maps is attended explicitly, the CT query row (if any) is discarded, and
/// the projected outputs are added onto RGB.
pub fn dense_mwca_level(
    store: &ParamStore,
    fusion: &Ca2Fusion,
    level: usize,
    rgb: &Tensor,
    secondaries: &[(Modality, &Tensor)],
    ct: &Tensor,
) -> Tensor {
    let lv = &fusion.levels[level];
    let target = fusion.target;
    let s = rgb.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let dct = ct.shape()[1];
    let mut out = rgb.clone();
    let at = |t: &Tensor, bi: usize, y: usize, x: usize| -> Vec<f64> {
        if y < h && x < w {
            let o = ((bi * h + y) * w + x) * c;
            t.data()[o..o + c].to_vec()
        } else {
            vec![0.0; c]
        }
    };
    for &(m, sec) in secondaries {
        let (_, mha, back) = lv.blocks.iter().find(|(bm, _, _)| *bm == m).unwrap();
        let heads = mha.cfg.num_heads;
        for bi in 0..b {
            let ct_prime = lv
                .ct_fc
                .as_ref()
                .map(|fc| apply(store, fc, &ct.data()[bi * dct..(bi + 1) * dct]));
            for wy in 0..h.div_ceil(7) {
                for wx in 0..w.div_ceil(7) {
                    let pos: Vec<(usize, usize)> =
                        (0..49).map(|t| (wy * 7 + t / 7, wx * 7 + t % 7)).collect();
                    let mut q: Vec<Vec<f64>> = pos.iter().map(|&(y, x)| apply(store, &mha.q, &at(rgb, bi, y, x))).collect();
                    let mut k: Vec<Vec<f64>> = pos.iter().map(|&(y, x)| apply(store, &mha.k, &at(sec, bi, y, x))).collect();
                    let mut v: Vec<Vec<f64>> = pos.iter().map(|&(y, x)| apply(store, &mha.v, &at(sec, bi, y, x))).collect();
                    if let Some(cp) = &ct_prime {
                        if matches!(target, CtTarget::Q | CtTarget::Qkv) {
                            q.push(apply(store, &mha.q, cp));
                        }
                        if matches!(target, CtTarget::Kv | CtTarget::Qkv) {
                            k.push(apply(store, &mha.k, cp));
                            v.push(apply(store, &mha.v, cp));
                        }
                    }
                    let att = dense_attention(&q, &k, &v, heads);
                    for (t, &(y, x)) in pos.iter().enumerate() {
                        if y >= h || x >= w {
                            continue;
                        }
                        let o = apply(store, &mha.out, &att[t]);
                        let r = apply(store, back, &o);
                        let base = ((bi * h + y) * w + x) * c;
                        for ch in 0..c {
                            out.data_mut()[base + ch] += r[ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Outcome of one random windowed-attention instance.
pub struct OracleCase {
    pub target: CtTarget,
    pub max_abs_err: f64,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

/// Builds a random single-level CA² instance (H ≤ 21, W ≤ 14, D ≤ 16,
/// perturbed weights so the zero-initialized back projection is active) and
/// compares the fused output with [`dense_mwca_level`].
pub fn random_oracle_case(seed: u64, target: CtTarget) -> OracleCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = [2usize, 4, 8, 16][rng.random_range(0..4)];
    let heads = if d >= 4 && rng.random_bool(0.5) { 2 } else { 1 };
    let (b, h, w) = (rng.random_range(1..=2), rng.random_range(1..=21), rng.random_range(1..=14));
    let dct = 6;
    let mut store = ParamStore::new();
    let fusion = Ca2Fusion::new(&mut store, "fusion", &[d], dct, target, heads, &mut rng).unwrap();
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let rgb = rand_tensor(&[b, h, w, d], &mut rng);
    let n_sec = rng.random_range(1..=3);
    let secs: Vec<(Modality, Tensor)> = Modality::ALL[1..=n_sec]
        .iter()
        .map(|&m| (m, rand_tensor(&[b, h, w, d], &mut rng)))
        .collect();
    let ct = rand_tensor(&[b, dct], &mut rng);

    let mut g = Graph::new();
    let rv = g.constant(rgb.clone());
    let sv: Vec<(Modality, FeaturePyramid)> = secs
        .iter()
        .map(|(m, t)| (*m, FeaturePyramid { levels: vec![g.constant(t.clone())] }))
        .collect();
    let cv = g.constant(ct.clone());
    let refs: Vec<(Modality, &FeaturePyramid)> = sv.iter().map(|(m, p)| (*m, p)).collect();
    let fused = fusion
        .forward(&mut g, &store, &FeaturePyramid { levels: vec![rv] }, &refs, Some(cv))
        .unwrap();
    let got = g.value(fused.levels[0]).clone();

    let sec_refs: Vec<(Modality, &Tensor)> = secs.iter().map(|(m, t)| (*m, t)).collect();
    let expect = dense_mwca_level(&store, &fusion, 0, &rgb, &sec_refs, &ct);
    let max_abs_err = got
        .data()
        .iter()
        .zip(expect.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    OracleCase {
        target,
        max_abs_err,
        input_shape: rgb.shape().to_vec(),
        output_shape: got.shape().to_vec(),
    }
}
