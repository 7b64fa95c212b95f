use rand::seq::index::sample;

use super::{Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst_param: Option<String>,
}

/// Coordinates checked at most, summed over all parameters.
pub const MAX_COORDS: usize = 512;

fn eval<T, F>(f: &mut F, params: &ParamStore<T>) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let loss = f(&mut g, &b)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item().to_f64_lossy())
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// Returns `max |g_ad - g_fd| / max(1, |g_fd|)` over at most [`MAX_COORDS`]
/// coordinates, drawn with `seed` when the parameters are larger than that.
pub fn grad_check<T, F>(mut f: F, params: &mut ParamStore<T>, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &Bound) -> Result<Var>,
{
    let base = eval(&mut f, params)?;
    let again = eval(&mut f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = params
        .ids()
        .map(|id| grads.take(bound.var(id)).map(|t| t.to_f64_vec()))
        .collect();

    let coords: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.value(id).len()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = if coords.len() > MAX_COORDS {
        let mut rng = stream(seed, 0x6772_6164);
        let mut picks = sample(&mut rng, coords.len(), MAX_COORDS).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|k| coords[k]).collect()
    } else {
        coords
    };

    let mut worst = 0.0f64;
    let mut worst_param = None;
    for &(id, i) in &chosen {
        let orig = params.value(id).data()[i];
        params.value_mut(id).data_mut()[i] = T::from_f64_lossy(orig.to_f64_lossy() + eps);
        let plus = eval(&mut f, params);
        params.value_mut(id).data_mut()[i] = T::from_f64_lossy(orig.to_f64_lossy() - eps);
        let minus = eval(&mut f, params);
        params.value_mut(id).data_mut()[i] = orig;
        let fd = (plus? - minus?) / (2.0 * eps);
        let ad = analytic[id.0].as_ref().map_or(0.0, |v| v[i]);
        let err = (ad - fd).abs() / fd.abs().max(1.0);
        if err > worst || worst_param.is_none() {
            worst = worst.max(err);
            if err >= worst {
                worst_param = Some(params.name(id).to_string());
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords_checked: chosen.len(),
        worst_param,
    })
}
