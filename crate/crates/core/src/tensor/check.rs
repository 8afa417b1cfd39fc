//! Central finite-difference gradient verification.

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares the autodiff gradient of the scalar built by `loss` with
/// central differences of step `h`. Checks the entries in `entries`, or all
/// of them when `None`. The relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    floor: f64,
    entries: Option<&[(ParamId, usize)]>,
    mut loss: F,
) -> Result<GradCheck>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward(l, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    store.zero_grad();

    let all: Vec<(ParamId, usize)>;
    let list = match entries {
        Some(e) => e,
        None => {
            all = store
                .ids()
                .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
                .collect();
            &all
        }
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        Ok(g.value(l).data[0])
    };
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &(id, i) in list {
        let orig = store.value(id).data[i];
        store.value_mut(id).data[i] = orig + h;
        let up = eval(store)?;
        store.value_mut(id).data[i] = orig - h;
        let down = eval(store)?;
        store.value_mut(id).data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[id.0][i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    Ok(report)
}
