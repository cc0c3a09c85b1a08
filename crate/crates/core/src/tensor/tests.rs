use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn check1(shape: &[usize], seed: u64, f: impl Fn(&mut Graph, Var) -> crate::Result<Var>) -> f64 {
    let x = rand_tensor(shape, seed);
    gradcheck_inputs(&[x], H, |g, v| {
        let y = f(g, v[0])?;
        random_projection(g, y, seed + 1)
    })
    .unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![3]));
    let y = g.softmax(x);
    for v in g.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul() {
    let a = rand_tensor(&[3, 5], 7);
    let mut g = Graph::new();
    let eye = g.constant(Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
    let av = g.constant(a.clone());
    let y = g.matmul(eye, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![2, 6], 3.25));
    let gamma = g.constant(Tensor::full(vec![6], 1.0));
    let beta = g.constant(Tensor::zeros(vec![6]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.data(y).iter().all(|v| *v == 0.0));
}

#[test]
fn square_sum_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn mean_of_softmax_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&[5], 3), true);
    let y = g.softmax(x);
    let loss = g.mean(y);
    g.backward(loss).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn backward_accumulates_across_calls() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![3]), true);
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("mm") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn gradcheck_elementwise_primitives() {
    assert!(check1(&[3, 4], 1, |g, x| Ok(g.gelu(x))) <= TOL);
    assert!(check1(&[3, 4], 2, |g, x| Ok(g.sigmoid(x))) <= TOL);
    assert!(check1(&[3, 4], 3, |g, x| Ok(g.exp(x))) <= TOL);
    assert!(check1(&[3, 4], 4, |g, x| Ok(g.scale(x, -1.7))) <= TOL);
    assert!(check1(&[3, 4], 5, |g, x| {
        let e = g.exp(x);
        g.log(e)
    }) <= TOL);
    assert!(check1(&[3, 4], 6, |g, x| g.mul(x, x)) <= TOL);
    assert!(check1(&[3, 4], 7, |g, x| {
        let y = g.scale(x, 3.0);
        let z = g.add(x, y)?;
        g.sub(z, x)
    }) <= TOL);
}

#[test]
fn gradcheck_binary_primitives() {
    let a = rand_tensor(&[2, 3, 4], 10);
    let b = rand_tensor(&[2, 4, 5], 11);
    let bt = rand_tensor(&[2, 5, 4], 12);
    let s = rand_tensor(&[1], 13);
    let bias = rand_tensor(&[4], 14);
    let w = rand_tensor(&[4, 3], 15);
    let e = gradcheck_inputs(&[a.clone(), b], H, |g, v| {
        let y = g.bmm(v[0], v[1], false)?;
        random_projection(g, y, 1)
    })
    .unwrap();
    assert!(e <= TOL, "bmm {e}");
    let e = gradcheck_inputs(&[a.clone(), bt], H, |g, v| {
        let y = g.bmm(v[0], v[1], true)?;
        random_projection(g, y, 2)
    })
    .unwrap();
    assert!(e <= TOL, "bmm_t {e}");
    let e = gradcheck_inputs(&[a.clone(), w], H, |g, v| {
        let y = g.mm(v[0], v[1])?;
        random_projection(g, y, 3)
    })
    .unwrap();
    assert!(e <= TOL, "mm {e}");
    let e = gradcheck_inputs(&[a.clone(), s], H, |g, v| {
        let y = g.mul_scalar(v[0], v[1])?;
        random_projection(g, y, 4)
    })
    .unwrap();
    assert!(e <= TOL, "mul_scalar {e}");
    let rows = Tensor::new(vec![2, 2, 3], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
    let e = gradcheck_inputs(&[rows, Tensor::new(vec![2], vec![0.3, -1.2]).unwrap()], H, |g, v| {
        let y = g.scale_rows(v[0], v[1])?;
        random_projection(g, y, 40)
    })
    .unwrap();
    assert!(e <= TOL, "scale_rows {e}");
    let e = gradcheck_inputs(&[a.clone(), bias.clone()], H, |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        random_projection(g, y, 5)
    })
    .unwrap();
    assert!(e <= TOL, "add_bias {e}");
    let gamma = rand_tensor(&[4], 16);
    let e = gradcheck_inputs(&[a, gamma, bias], H, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        random_projection(g, y, 6)
    })
    .unwrap();
    assert!(e <= TOL, "layer_norm {e}");
}

#[test]
fn gradcheck_normalizations_and_losses() {
    assert!(check1(&[3, 5], 20, |g, x| Ok(g.softmax(x))) <= TOL);
    assert!(check1(&[3, 5], 21, |g, x| g.l2_normalize_rows(x)) <= TOL);
    let x = rand_tensor(&[4, 3], 22);
    let e = gradcheck_inputs(&[x], H, |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])).unwrap();
    assert!(e <= TOL, "cross_entropy {e}");
    assert!(check1(&[3, 5], 23, |g, x| Ok(g.mean(x))) <= TOL);
    assert!(check1(&[3, 5], 24, |g, x| Ok(g.sum(x))) <= TOL);
    assert!(check1(&[2, 3, 5], 25, |g, x| g.mean_axis(x, 1)) <= TOL);
}

#[test]
fn gradcheck_spatial_primitives() {
    let x = rand_tensor(&[2, 5, 6, 3], 30);
    let w = rand_tensor(&[3, 3, 3, 4], 31);
    let b = rand_tensor(&[4], 32);
    for (stride, padding) in [(1, 1), (2, 0), (2, 1)] {
        let e = gradcheck_inputs(&[x.clone(), w.clone(), b.clone()], H, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], Conv2dSpec { stride, padding })?;
            random_projection(g, y, 7)
        })
        .unwrap();
        assert!(e <= TOL, "conv2d s{stride} p{padding}: {e}");
    }
    assert!(check1(&[2, 2, 3, 2], 33, |g, x| g.upsample_nearest(x, 2)) <= TOL);
    assert!(check1(&[2, 2, 3, 2], 35, |g, x| g.upsample_bilinear(x, 4)) <= TOL);
    assert!(check1(&[1, 1, 1, 3], 36, |g, x| g.upsample_bilinear(x, 2)) <= TOL);
    assert!(check1(&[2, 2, 3, 2], 34, |g, x| g.pad2d(x, 4, 7)) <= TOL);
}

#[test]
fn bilinear_upsample_interpolates_between_centres() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 2, 1], vec![1.0, 5.0]).unwrap());
    let y = g.upsample_bilinear(x, 4).unwrap();
    assert_eq!(g.shape(y), [1, 4, 8, 1]);
    let row: Vec<f64> = g.value(y).data()[..8].to_vec();
    assert_eq!(row, [1.0, 1.0, 1.5, 2.5, 3.5, 4.5, 5.0, 5.0]);
    assert!(g.value(y).data().chunks(8).all(|r| r == row.as_slice()));
}

#[test]
fn gradcheck_shape_primitives() {
    assert!(check1(&[2, 3, 4], 40, |g, x| g.reshape(x, &[6, 4])) <= TOL);
    assert!(check1(&[2, 3, 4], 41, |g, x| g.permute(x, &[2, 0, 1])) <= TOL);
    assert!(check1(&[2, 3, 4], 42, |g, x| g.transpose(x)) <= TOL);
    assert!(check1(&[2, 5, 4], 43, |g, x| g.slice(x, 1, 1, 3)) <= TOL);
    assert!(check1(&[5, 3], 44, |g, x| g.gather_rows(x, &[4, 0, 4, 2])) <= TOL);
    let a = rand_tensor(&[2, 3, 4], 45);
    let b = rand_tensor(&[2, 1, 4], 46);
    let e = gradcheck_inputs(&[a, b], H, |g, v| {
        let y = g.concat(&[v[0], v[1], v[0]], 1)?;
        random_projection(g, y, 8)
    })
    .unwrap();
    assert!(e <= TOL, "concat {e}");
}

#[test]
fn random_five_op_composite() {
    let x = rand_tensor(&[3, 4], 50);
    let w = rand_tensor(&[4, 4], 51);
    let e = gradcheck_inputs(&[x, w], H, |g, v| {
        let a = g.matmul(v[0], v[1])?;
        let b = g.gelu(a);
        let c = g.softmax(b);
        let d = g.mul(c, a)?;
        Ok(g.mean(d))
    })
    .unwrap();
    assert!(e <= TOL, "{e}");
}

#[test]
fn conv_matches_direct_loops() {
    let x = rand_tensor(&[1, 5, 4, 2], 60);
    let w = rand_tensor(&[3, 3, 2, 3], 61);
    let b = rand_tensor(&[3], 62);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g
        .conv2d(xv, wv, bv, Conv2dSpec { stride: 2, padding: 1 })
        .unwrap();
    assert_eq!(g.shape(y), &[1, 3, 2, 3]);
    for oy in 0..3 {
        for ox in 0..2 {
            for co in 0..3 {
                let mut acc = b.data()[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                            continue;
                        }
                        for ci in 0..2 {
                            acc += x.data()[((iy as usize) * 4 + ix as usize) * 2 + ci]
                                * w.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                        }
                    }
                }
                let got = g.data(y)[(oy * 2 + ox) * 3 + co];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    store.add("b.weight", &[3, 2], Init::Normal(1.0), &mut rng).unwrap();
    store.add("a.bias", &[5], Init::Normal(1.0), &mut rng).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&store, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let mut other = store.clone();
    for p in other.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    read_checkpoint(&mut other, bytes.as_slice()).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
        let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
    // a.bias sorts first, so its payload starts right after the manifest.
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let first = f64::from_le_bytes(bytes[8 + len..16 + len].try_into().unwrap());
    assert_eq!(first.to_bits(), store.value(store.id("a.bias").unwrap()).data()[0].to_bits());
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    store.add("w", &[4], Init::Normal(1.0), &mut rng).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&store, &mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&mut store, bad.as_slice()), Err(Error::Corrupt { offset: 0, .. })));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(read_checkpoint(&mut store, cut), Err(Error::Corrupt { .. })));
}

#[test]
fn duplicate_param_names_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.add("x", &[1], Init::Zeros, &mut rng).unwrap();
    assert!(store.add("x", &[1], Init::Zeros, &mut rng).is_err());
}

/// One randomly chosen differentiable step on a `[r, c]` tensor.
fn random_step(g: &mut Graph, x: Var, choice: u8, seed: u64) -> crate::Result<Var> {
    let shape = g.shape(x).to_vec();
    let (r, c) = (shape[0], shape[1]);
    Ok(match choice % 8 {
        0 => g.gelu(x),
        1 => g.softmax(x),
        2 => {
            let w = g.constant(rand_tensor(&[c, c], seed));
            g.matmul(x, w)?
        }
        3 => {
            let gamma = g.constant(rand_tensor(&[c], seed));
            let beta = g.constant(rand_tensor(&[c], seed + 1));
            g.layer_norm(x, gamma, beta)?
        }
        4 => g.mul(x, x)?,
        5 => {
            let t = g.transpose(x)?;
            let t2 = g.transpose(t)?;
            g.add(t2, x)?
        }
        6 => {
            let y = g.sigmoid(x);
            g.sub(y, x)?
        }
        _ => {
            let a = g.slice(x, 0, 0, r)?;
            g.scale(a, 0.5)
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_graphs_pass_gradcheck(
        r in 1usize..=8,
        c in 1usize..=8,
        ops in proptest::collection::vec(any::<u8>(), 1..=6),
        seed in 0u64..1000,
    ) {
        let x = rand_tensor(&[r, c], seed);
        let e = gradcheck_inputs(&[x], H, |g, v| {
            let mut cur = v[0];
            for (i, &op) in ops.iter().enumerate() {
                cur = random_step(g, cur, op, seed + 100 + i as u64)?;
            }
            random_projection(g, cur, seed)
        }).unwrap();
        prop_assert!(e <= TOL, "max rel error {}", e);
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..9, seed in 0u64..1000) {
        let mut g = Graph::new();
        let mut x = rand_tensor(&[r, c], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        let xv = g.constant(x);
        let y = g.softmax(xv);
        for row in g.data(y).chunks(c) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn reshape_and_permute_round_trip(
        dims in proptest::collection::vec(1usize..5, 1..5),
        seed in 0u64..1000,
    ) {
        let x = rand_tensor(&dims, seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let n = x.numel();
        let flat = g.reshape(xv, &[n]).unwrap();
        let back = g.reshape(flat, &dims).unwrap();
        prop_assert_eq!(g.value(back), &x);
        let axes: Vec<usize> = (0..dims.len()).rev().collect();
        let p = g.permute(xv, &axes).unwrap();
        let pp = g.permute(p, &axes).unwrap();
        prop_assert_eq!(g.value(pp), &x);
    }
}
