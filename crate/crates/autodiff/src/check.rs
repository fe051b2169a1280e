//! Central finite-difference gradient check.

use crate::error::AutodiffError;
use crate::graph::{Graph, Var};
use crate::param::Parameter;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    /// `(name, ‖analytic − numeric‖ / max(‖analytic‖, 1e-12))` for each
    /// trainable parameter.
    pub per_param: Vec<(String, f64)>,
}

/// Compares reverse-mode gradients of `f` with central differences of step `h`.
///
/// `f` builds a scalar loss in the given graph from the given parameters and
/// must be deterministic. It is called once for the analytic pass and twice per
/// trainable scalar for the numeric pass. Frozen parameters are not perturbed.
pub fn finite_diff_check<E, F>(params: &[Parameter], h: f64, mut f: F) -> Result<FdReport, E>
where
    E: From<AutodiffError>,
    F: FnMut(&Graph, &[Parameter]) -> Result<Var, E>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(AutodiffError::InvalidArgument {
            op: "finite_diff_check",
            reason: format!("step must be positive, got {h}"),
        }
        .into());
    }
    let g = Graph::new();
    let loss = f(&g, params)?;
    let analytic = g.backward(loss)?;

    let mut eval = |ps: &[Parameter]| -> Result<f64, E> {
        let g = Graph::new();
        let v = f(&g, ps)?;
        Ok(g.item(v)?)
    };

    let mut work = params.to_vec();
    let mut per_param = Vec::new();
    for pi in 0..work.len() {
        if work[pi].is_frozen() {
            continue;
        }
        let name = work[pi].name().to_string();
        let n = work[pi].numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[pi].value.data()[j];
            work[pi].value.data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].value.data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].value.data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        per_param.push((name, diff / scale));
    }
    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(FdReport {
        max_rel_error,
        per_param,
    })
}
