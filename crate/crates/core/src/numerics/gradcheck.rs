//! Central finite-difference gradient verification.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coords.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares autodiff gradients of `loss` against central differences with
/// step `h` on `per_param` random coordinates of every parameter (fewer if
/// the parameter is smaller).
pub fn check_gradients<F>(store: &mut ParamStore, loss: F, per_param: usize, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape, &Bound) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let l = loss(store, &mut tape, &bound)?;
        Ok(tape.value(l).data()[0])
    };

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let l = loss(store, &mut tape, &bound)?;
    if tape.value(l).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    let grads = tape.backward(l)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        let analytic_all = grads.get(bound[id]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for index in picks {
            let original = store.get(id).data()[index];
            store.get_mut(id).data_mut()[index] = original + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[index] = original - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[index] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = analytic_all[index];
            coords.push(CoordinateCheck {
                param: store.name(id).to_string(),
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    Ok(GradCheckReport { coords })
}
