use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::Result;

/// Outcome of a central-difference comparison against [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    pub coords_checked: usize,
    /// Coordinates left out because `x ± h` changed a discrete choice of the
    /// computation (a max position or a top-K selection), where the central
    /// difference spans a kink.
    pub coords_straddling: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences `(f(x+h) - f(x-h)) / 2h`.
///
/// Checks every coordinate when there are at most `min_coords` of them;
/// otherwise one coordinate from each parameter plus a random fill up to
/// `min_coords`. The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`. Coordinates whose perturbation flips a
/// discrete branch are counted in `coords_straddling` and not scored.
pub fn finite_difference_check<T, F>(
    params: &ParamStore<T>,
    h: T,
    min_coords: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };

    let coords = pick_coords(params, min_coords, seed);
    let mut probe = params.clone();
    let eval = |p: &ParamStore<T>| -> Result<(T, u64)> {
        let mut tape = Tape::new(p);
        let loss = f(&mut tape)?;
        Ok((tape.value(loss).item(), tape.branch_signature()))
    };
    let (_, base_branch) = eval(params)?;

    let floor = T::lit(1e-8);
    let two = T::lit(2.0);
    let mut worst_err = T::zero();
    let mut worst = None;
    let mut straddling = 0;
    for &(id, k) in &coords {
        let orig = probe.get(id).data()[k];
        probe.get_mut(id).data_mut()[k] = orig + h;
        let (up, up_branch) = eval(&probe)?;
        probe.get_mut(id).data_mut()[k] = orig - h;
        let (down, down_branch) = eval(&probe)?;
        probe.get_mut(id).data_mut()[k] = orig;
        if up_branch != base_branch || down_branch != base_branch {
            straddling += 1;
            continue;
        }

        let numeric = (up - down) / (two * h);
        let a = analytic.get_ref(id).map_or(T::zero(), |g| g.data()[k]);
        let denom = a.abs().max(numeric.abs()).max(floor);
        let err = (a - numeric).abs() / denom;
        if err > worst_err || worst.is_none() {
            worst_err = err.max(worst_err);
            worst = Some((params.name(id).to_string(), k));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst_err,
        coords_checked: coords.len() - straddling,
        coords_straddling: straddling,
        worst,
    })
}

fn pick_coords<T: Scalar>(params: &ParamStore<T>, min_coords: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).len()).map(move |k| (id, k)))
        .collect();
    if all.len() <= min_coords {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(ParamId, usize)> = Vec::new();
    for id in params.ids() {
        let n = params.get(id).len();
        if n > 0 {
            chosen.push((id, rand::Rng::gen_range(&mut rng, 0..n)));
        }
    }
    let mut rest: Vec<(ParamId, usize)> = all.into_iter().filter(|c| !chosen.contains(c)).collect();
    rest.shuffle(&mut rng);
    let need = min_coords.saturating_sub(chosen.len());
    chosen.extend(rest.into_iter().take(need));
    chosen
}
