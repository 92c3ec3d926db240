use super::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Compares analytic gradients of a scalar function of `store` against
/// central differences with the given `step`.
///
/// Returns the maximum over every parameter entry of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`. The store's
/// values are restored on return; its gradients hold the analytic result.
pub fn grad_check<F>(f: F, store: &mut ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("step must be positive, got {step}"),
        });
    }
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward_into(loss, store)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.scalar_value(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "grad_check" })
        }
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`grad_check`] for a function of a single tensor argument.
pub fn grad_check_fn<F>(f: F, input: Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("input", input, false);
    grad_check(
        |g, s| {
            let x = g.param(s, id);
            f(g, x)
        },
        &mut store,
        step,
    )
}
