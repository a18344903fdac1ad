//! Central finite differences, the independent oracle for the tape's gradients.

use crate::autodiff::ParamStore;
use crate::error::{HpdtError, Result};
use crate::tensor::NdTensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(p+h) − f(p−h)) / 2h` for every coordinate of every parameter in `store`.
///
/// `f` is evaluated on the perturbed store; the store is restored afterwards.
pub fn finite_difference_gradient<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<Vec<NdTensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(HpdtError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.len();
        let mut grad = NdTensor::zeros(store.get(id).value.shape());
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = f(store);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = f(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(HpdtError::InvalidArgument(format!(
                    "non-finite evaluation at {}[{i}]",
                    store.get(id).name
                )));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
