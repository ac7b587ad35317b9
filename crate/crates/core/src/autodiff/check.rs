use rand::seq::index::sample;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{keyed_rng, Purpose};

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FiniteDiff {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub coords_per_param: Option<usize>,
    /// Restrict the check to these parameters (default: all).
    pub params: Option<Vec<ParamId>>,
    pub seed: u64,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: None,
            params: None,
            seed: 0,
        }
    }
}

impl FiniteDiff {
    pub fn step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn coords(mut self, n: usize) -> Self {
        self.coords_per_param = Some(n);
        self
    }

    pub fn only(mut self, params: Vec<ParamId>) -> Self {
        self.params = Some(params);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let v = f(&mut g)?;
    let y = g.scalar(v)?;
    if !y.is_finite() {
        return Err(Error::Evaluation(format!("non-finite function value {y}")));
    }
    Ok(y)
}

/// Compares reverse-mode gradients of `f` against central differences
/// and returns `max |analytic - numeric| / max(1, |analytic|)` over the
/// checked coordinates.
pub fn finite_diff_check<F>(store: &ParamStore<f64>, opts: &FiniteDiff, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::config("step", "finite-difference step must be > 0"));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let v = f(&mut g)?;
        if !g.scalar(v)?.is_finite() {
            return Err(Error::Evaluation("non-finite function value".into()));
        }
        g.backward(v)?
    };

    let ids: Vec<ParamId> = match &opts.params {
        Some(ids) => ids.clone(),
        None => store.iter().map(|(id, _)| id).collect(),
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.tensor(id).len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => {
                let mut rng = keyed_rng(opts.seed, Purpose::FiniteDiff, id.0 as u64);
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = store.tensor(id).data()[j];
            work.tensor_mut(id).data_mut()[j] = x0 + opts.step;
            let fp = eval(&work, &f)?;
            work.tensor_mut(id).data_mut()[j] = x0 - opts.step;
            let fm = eval(&work, &f)?;
            work.tensor_mut(id).data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[j]);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
