use super::param::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that gradients that are
/// genuinely ~0 are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error > self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares backward gradients of a scalar function against central finite
/// differences, for every entry of every parameter in `store`.
///
/// `f` must be deterministic; it is evaluated `2 * store.num_scalars() + 1`
/// times.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let ids: Vec<_> = store.iter().map(|p| p.id()).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.value(id).len();
        let mut check = ParamCheck {
            name: store.get(id).name().to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..len {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { tol, params })
}
