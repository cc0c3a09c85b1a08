use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`max_relative_error`]; below it the comparison is
/// effectively absolute.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(crate::error::invalid("finite_difference_gradient", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, GRADCHECK_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_relative_error: length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(GRADCHECK_FLOOR))
        .fold(0.0, f64::max)
}

/// Reduces `y` to `sum(y ∘ r)` with fixed pseudo-random `r`, so that every
/// output element contributes a distinct weight to the checked gradient.
pub fn random_projection(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let r = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Compares backward() against central differences for every element of
/// every input; returns the max relative error.
pub fn gradcheck_inputs<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let numeric = finite_difference_gradient(
            |probe| {
                let mut g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g2.input(if j == i { probe.clone() } else { t.clone() }, false))
                    .collect();
                let l = build(&mut g2, &vs)?;
                Ok(g2.data(l)[0])
            },
            x,
            h,
        )?;
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

/// Gradcheck over parameters of a store. At most `per_param` entries of each
/// parameter are probed (chosen by `seed`); `None` probes all.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    h: f64,
    per_param: Option<usize>,
    seed: u64,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    g.accumulate_param_grads(&mut grads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.value(id).numel();
        let entries: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for e in entries {
            let orig = store.value(id).data()[e];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(id).value.data_mut()[e] = v;
                let mut g2 = Graph::new();
                let l = build(&mut g2, &probe)?;
                Ok(g2.data(l)[0])
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            probe.get_mut(id).value.data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { index: e });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).grad[e];
            worst = worst.max(max_relative_error(&[analytic], &[numeric]));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.5, 7.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_reports_index() {
        let x = Tensor::new(vec![3], vec![1.0, 0.0, 2.0]).unwrap();
        let err = finite_difference_gradient(
            |t| Ok(t.data().iter().map(|v| if *v > 0.5 && *v < 1.5 { f64::NAN } else { *v }).sum()),
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0 }));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_gradient(|t| Ok(t.data()[0]), &x, 0.0).is_err());
    }
}
