//! Euclidean projection onto the probability simplex.

use crate::error::{Error, Result};

/// Projects `v` onto `{w : w >= 0, sum(w) = 1}`.
///
/// Sort-and-threshold method: the projection is `max(v_i - theta, 0)` with
/// `theta` chosen so the result sums to one.
pub fn project_to_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite entry in projection input".into(),
        ));
    }
    let mut out = vec![0.0; v.len()];
    project_into(v, &mut out, &mut Vec::with_capacity(v.len()));
    Ok(out)
}

/// Allocation-free variant used inside the solver loop. `scratch` is reused
/// between calls.
pub(crate) fn project_into(v: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in scratch.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - theta).max(0.0);
    }
}
