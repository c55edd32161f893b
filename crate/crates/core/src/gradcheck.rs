//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// One scalar coordinate of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub offset: usize,
}

#[derive(Clone, Debug)]
pub struct CoordReport {
    pub coord: Coord,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: Vec<CoordReport>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordReport> {
        self.checked
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.rel_error)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Samples up to `per_param` coordinates from every parameter tensor.
pub fn sample_coords<R: Rng + ?Sized>(
    store: &ParamStore,
    per_param: usize,
    rng: &mut R,
) -> Vec<Coord> {
    let mut coords = Vec::new();
    for (id, _, t) in store.iter() {
        let n = t.numel();
        let mut picked: Vec<usize> = sample(rng, n, per_param.min(n)).into_vec();
        picked.sort_unstable();
        coords.extend(picked.into_iter().map(|offset| Coord { param: id, offset }));
    }
    coords
}

/// Compares tape gradients against `(f(θ+h e) − f(θ−h e)) / 2h`.
///
/// `build` records the differentiated loss. `value` evaluates the function the
/// tape gradient is supposed to be the derivative of, at a given coordinate;
/// it differs from the recorded loss only when the tape deliberately rewrites
/// gradients (gradient reversal, stop-gradient).
pub fn grad_check_with<B, V>(
    params: &ParamStore,
    coords: &[Coord],
    h: f64,
    mut build: B,
    mut value: V,
) -> Result<GradCheckReport>
where
    B: FnMut(&ParamStore) -> Result<(Tape, Var)>,
    V: FnMut(&ParamStore, Coord) -> Result<f64>,
{
    let (tape, loss) = build(params)?;
    let grads = tape.backward(loss)?;

    let mut probe = params.clone();
    let mut checked = Vec::with_capacity(coords.len());
    for &coord in coords {
        let analytic = grads
            .param(coord.param)
            .map_or(0.0, |g| g[coord.offset]);
        let orig = probe.tensor(coord.param).data()[coord.offset];

        probe.tensor_mut(coord.param).data_mut()[coord.offset] = orig + h;
        let plus = value(&probe, coord)?;
        probe.tensor_mut(coord.param).data_mut()[coord.offset] = orig - h;
        let minus = value(&probe, coord)?;
        probe.tensor_mut(coord.param).data_mut()[coord.offset] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        checked.push(CoordReport {
            coord,
            name: params.name(coord.param).to_string(),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { checked })
}

/// [`grad_check_with`] where the finite differences use the recorded loss itself.
pub fn grad_check<B>(params: &ParamStore, coords: &[Coord], h: f64, build: B) -> Result<GradCheckReport>
where
    B: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    grad_check_with(params, coords, h, &build, |p, _| {
        let (tape, loss) = build(p)?;
        Ok(tape.value(loss).item())
    })
}
