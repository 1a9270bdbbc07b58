use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// `max |g_analytic - g_fd| / max(1, |g_fd|)` over checked entries.
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Checks every entry of `params` with central differences of step `eps`.
///
/// `f` must build the same deterministic scalar on every call.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    f: F,
) -> Result<FdReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    finite_difference_check_sampled(store, params, eps, None, 0, f)
}

/// As [`finite_difference_check`], but checks at most `max_per_param` randomly
/// chosen entries of each parameter.
pub fn finite_difference_check_sampled<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    max_per_param: Option<usize>,
    seed: u64,
    f: F,
) -> Result<FdReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        let by_id: std::collections::HashMap<_, _> = grads.param_grads().into_iter().collect();
        params
            .iter()
            .map(|id| match by_id.get(id) {
                Some(a) => a.data().to_vec(),
                None => vec![0.0; store.value(*id).len()],
            })
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        Ok(g.scalar_value(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        entries_checked: 0,
        worst: None,
    };
    for (pi, &id) in params.iter().enumerate() {
        let n = store.value(id).len();
        let entries: Vec<usize> = match max_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (analytic[pi][j] - fd).abs() / fd.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}
