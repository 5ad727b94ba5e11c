//! Central-finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::ParameterStore;

/// Checks every parameter entry of `store` against central finite differences.
///
/// `f` must be pure and deterministic given the parameter values: it builds
/// the forward graph, runs one backward pass (accumulating gradients into the
/// store it is handed), and returns the scalar loss value. Gradients left by
/// `f` on perturbed evaluations are discarded.
///
/// Returns the maximum over all entries of
/// `|analytic − central| / max(1, |central|)`.
pub fn finite_difference_check<F>(mut f: F, store: &ParameterStore, eps: f64) -> Result<f64>
where
    F: FnMut(&mut ParameterStore) -> Result<f64>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference eps must lie in [1e-8, 1e-4], got {eps}"
        )));
    }

    let mut base = store.clone();
    base.zero_grads();
    let value = f(&mut base)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "finite_difference_check: objective returned {value}"
        )));
    }

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut max_rel = 0.0f64;
    for name in &names {
        let len = store.get(name).expect("name from store").numel();
        let analytic: Vec<f64> = match &base.get(name).unwrap().grad {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        };
        for idx in 0..len {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut probe = store.clone();
                probe.zero_grads();
                probe.get_mut(name).unwrap().data_mut()[idx] += delta;
                let v = f(&mut probe)?;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "finite_difference_check: objective returned {v} at {name}[{idx}]"
                    )));
                }
                Ok(v)
            };
            let plus = eval_at(eps)?;
            let minus = eval_at(-eps)?;
            let central = (plus - minus) / (2.0 * eps);
            let rel = (analytic[idx] - central).abs() / central.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut store = ParameterStore::new();
        store
            .insert("w", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        let err = finite_difference_check(
            |s| {
                let mut tape = Tape::new();
                let w = tape.param(s, "w")?;
                let sq = tape.mul(w, w)?;
                let loss = tape.sum_all(sq);
                tape.backward(loss, s)?;
                Ok(tape.item(loss))
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-9, "relative error {err}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::zeros(vec![3])).unwrap();
        let err = finite_difference_check(|_| Ok(7.25), &store, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_domain_is_enforced() {
        let store = ParameterStore::new();
        assert!(finite_difference_check(|_| Ok(0.0), &store, 1e-3).is_err());
        assert!(finite_difference_check(|_| Ok(0.0), &store, 1e-9).is_err());
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::zeros(vec![1])).unwrap();
        let res = finite_difference_check(|_| Ok(f64::NAN), &store, 1e-6);
        assert!(matches!(res, Err(crate::error::Error::Numeric(_))));
    }
}
