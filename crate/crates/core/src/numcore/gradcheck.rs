//! Central finite differences against the tape's gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `f` (building a scalar on a fresh graph from variables holding
/// `inputs`) against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!("eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let first = g.value(out).item();
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(c) if c < n => sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, i));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}

/// Checks `f` against central differences taken directly on the trainable
/// parameters of `owner`'s store, at most `max_coords_per_input` coordinates
/// per parameter tensor.
pub fn grad_check_params<T, F>(
    owner: &mut T,
    store_of: fn(&mut T) -> &mut ParamStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&T, &mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!("eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let eval = |o: &T| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(o, &mut g)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let out = f(owner, &mut g)?;
    let first = g.value(out).item();
    let second = eval(owner)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = g.backward(out)?;
    let analytic: Vec<(ParamId, Vec<f64>)> = g
        .param_vars()
        .iter()
        .map(|&(id, v)| (id, grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for (id, grad) in analytic {
        let n = store_of(owner).value(id).len();
        let grad = if grad.is_empty() { vec![0.0; n] } else { grad };
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(c) if c < n => sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store_of(owner).value(id).data()[i];
            store_of(owner).get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let plus = eval(owner);
            store_of(owner).get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let minus = eval(owner);
            store_of(owner).get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let err = relative_error(grad[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((id.index(), i));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
