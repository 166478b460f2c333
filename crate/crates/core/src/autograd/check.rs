//! Central finite differences for verifying analytic gradients.

use super::graph::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

/// Central-difference estimate of `d f / d param` for every entry of one parameter.
pub fn finite_difference(
    store: &mut ParamStore,
    id: ParamId,
    step: f64,
    f: &mut impl FnMut(&ParamStore) -> f64,
) -> Tensor {
    let shape = store.get(id).shape().to_vec();
    let n = store.get(id).len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + step;
        let plus = f(store);
        store.get_mut(id).data_mut()[i] = orig - step;
        let minus = f(store);
        store.get_mut(id).data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * step);
    }
    Tensor::new(shape, out)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both are negligible.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares `analytic` against finite differences of `f` for every parameter in `store`.
/// Parameters without an analytic gradient are compared against zero.
pub fn check_gradients(
    store: &mut ParamStore,
    analytic: &Gradients,
    step: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    for id in ids {
        let numeric = finite_difference(store, id, step, &mut f);
        let exact = analytic
            .get(store, id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(numeric.shape().to_vec()));
        per_param.push((store.name(id).to_string(), relative_error(&exact, &numeric)));
    }
    GradCheckReport { per_param }
}
