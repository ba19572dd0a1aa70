//! Central finite-difference verification of tape gradients.

use crate::graph::{Gradients, Graph, NodeId};
use crate::params::ParamStore;
use crate::Result;

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamError> {
        self.params.iter().filter(|p| p.flagged)
    }
}

fn eval_loss<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g)?;
    Ok(g.scalar(loss))
}

/// Compares `analytic` against central differences of `build`'s loss.
///
/// Parameters are `f32`, so the realised step `(p+h) - (p-h)` is measured
/// after rounding rather than assumed to be `2h`.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    build: F,
    analytic: &Gradients,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    let mut overall = 0.0f64;
    for id in ids {
        let n = store.get(id).len();
        let mut worst = 0.0f64;
        for k in 0..n {
            let orig = store.get(id).data()[k];
            let plus = (orig as f64 + FD_STEP) as f32;
            let minus = (orig as f64 - FD_STEP) as f32;
            store.get_mut(id).data_mut()[k] = plus;
            let lp = eval_loss(store, &build)?;
            store.get_mut(id).data_mut()[k] = minus;
            let lm = eval_loss(store, &build)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        params.push(ParamError {
            name: store.name(id).to_string(),
            max_rel_error: worst,
            flagged: worst > tolerance || !worst.is_finite(),
        });
    }
    Ok(GradCheckReport {
        params,
        max_rel_error: overall,
        tolerance,
    })
}

/// Backpropagates `build`'s loss and checks it against finite differences.
pub fn grad_check<F>(store: &mut ParamStore, build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    compare_gradients(store, build, &analytic, tolerance)
}
