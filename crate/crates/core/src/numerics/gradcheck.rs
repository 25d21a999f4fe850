//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamGrads, ParamId, ParamStore};

pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Upper bound on checked coordinates per parameter; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    /// Restrict the check to these parameters; `None` checks every parameter.
    pub only: Option<Vec<ParamId>>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_coords_per_param: None,
            only: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `value_fn`.
///
/// `value_fn` is evaluated twice at the unperturbed point first; any difference
/// between the two values is reported as [`Error::NonDeterministic`].
pub fn check_against<F>(
    params: &ParamStore,
    analytic: &ParamGrads,
    value_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps {}", opts.eps)));
    }
    let first = value_fn(params)?;
    let second = value_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let ids: Vec<ParamId> = match &opts.only {
        Some(ids) => ids.clone(),
        None => params.ids().collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        params: Vec::with_capacity(ids.len()),
    };

    for id in ids {
        let dense = analytic.dense(id, params);
        let len = dense.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            coords_checked: coords.len(),
            max_relative_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for j in coords {
            let original = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = original + opts.eps;
            let plus = value_fn(&work)?;
            work.get_mut(id).data_mut()[j] = original - opts.eps;
            let minus = value_fn(&work)?;
            work.get_mut(id).data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = dense.data()[j];
            let err = relative_error(a, numeric);
            if err > check.max_relative_error || !err.is_finite() {
                check.max_relative_error = err;
                check.worst_index = j;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        report.max_relative_error = report.max_relative_error.max(check.max_relative_error);
        report.params.push(check);
    }
    Ok(report)
}

/// Gradient check of a loss built on an evaluation-mode graph.
pub fn finite_diff_grad_check<F>(
    params: &ParamStore,
    build_loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build_loss(&mut g)?;
        g.backward(loss)?.params
    };
    check_against(
        params,
        &analytic,
        |p| {
            let mut g = Graph::new(p);
            let loss = build_loss(&mut g)?;
            Ok(g.value(loss).data()[0])
        },
        opts,
    )
}
