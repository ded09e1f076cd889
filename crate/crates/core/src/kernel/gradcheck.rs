//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::{ParamStore, Tensor};
use crate::{Error, Real, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: Real,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 24,
            seed: 0,
        }
    }
}

/// `|a − n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    if len <= opts.max_coords {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx = sample(&mut rng, len, opts.max_coords).into_vec();
    idx.sort_unstable();
    idx
}

fn scalar_of(tape: &Tape, v: Var) -> Result<Real> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Shape("gradient check needs a scalar function".into()));
    }
    let s = t.item();
    if !s.is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    Ok(s)
}

/// Max relative error between the tape gradient of `f` with respect to each
/// input and central differences.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<Real>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor], want_grad: bool| -> Result<(Real, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let s = scalar_of(&tape, out)?;
        let grads = if want_grad {
            let g = tape.backward(out)?;
            vars.iter().map(|&v| g.get(v).cloned()).collect()
        } else {
            Vec::new()
        };
        Ok((s, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst: Real = 0.0;
    let mut values = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for c in coords(values[ti].len(), opts, ti as u64) {
            let orig = values[ti].data()[c];
            values[ti].data_mut()[c] = orig + opts.step;
            let (plus, _) = eval(&values, false)?;
            values[ti].data_mut()[c] = orig - opts.step;
            let (minus, _) = eval(&values, false)?;
            values[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[c]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Same check with respect to every parameter reachable from `params(target)`.
pub fn grad_check_params<T, P, F>(
    target: &mut T,
    params: P,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<Real>
where
    P: Fn(&mut T) -> &mut ParamStore,
    F: FnMut(&mut T, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(target, &mut tape)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Option<Tensor>> = vec![None; params(target).len()];
    for (id, g) in grads.params() {
        match &mut analytic[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }
    let mut worst: Real = 0.0;
    for pi in 0..analytic.len() {
        let len = params(target).get(super::ParamId(pi)).value.len();
        for c in coords(len, opts, pi as u64) {
            let id = super::ParamId(pi);
            let orig = params(target).get(id).value.data()[c];
            params(target).get_mut(id).value.data_mut()[c] = orig + opts.step;
            let mut t1 = Tape::new();
            let o1 = f(target, &mut t1)?;
            let plus = scalar_of(&t1, o1)?;
            params(target).get_mut(id).value.data_mut()[c] = orig - opts.step;
            let mut t2 = Tape::new();
            let o2 = f(target, &mut t2)?;
            let minus = scalar_of(&t2, o2)?;
            params(target).get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[c]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
