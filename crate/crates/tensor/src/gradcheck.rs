//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Graph, ParamStore, Result, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub epsilon: f64,
    /// Coordinates sampled per parameter; smaller tensors are checked fully.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over parameters of `‖a - n‖ / (‖a‖ + ‖n‖ + 1e-12)`, with `a`
    /// and `n` the analytic and numeric gradients at the checked coordinates.
    pub max_rel_error: f64,
    /// Parameter with the largest relative error.
    pub worst_param: String,
    /// Max over single coordinates of
    /// `|a - n| / (|a| + |n| + 1e-12)`. Dominated by rounding noise where
    /// a gradient entry is near zero.
    pub max_coord_rel_error: f64,
    pub coords_checked: usize,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

/// Compares the analytic gradient of `f` against central differences for
/// every parameter in `params`.
///
/// `f` builds a scalar loss on a fresh graph. It is evaluated twice at the
/// base point first; if the two losses are not bit-identical the check is
/// refused. Existing gradients in `params` are discarded and the store is
/// left without gradients.
pub fn finite_diff_check<F>(
    f: F,
    params: &mut ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        Ok(g.value(loss).item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic(format!(
            "two evaluations gave {first:e} and {second:e}"
        )));
    }

    params.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss, params)?;
    let analytic: Vec<Option<Vec<f64>>> = params
        .iter()
        .map(|p| p.grad.as_ref().map(|t| t.data().to_vec()))
        .collect();
    params.zero_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        max_coord_rel_error: 0.0,
        coords_checked: 0,
        per_param: Vec::with_capacity(params.len()),
    };
    for (id, grad) in analytic.iter().enumerate() {
        let numel = params.get(id).numel();
        let coords: Vec<usize> = if numel <= opts.max_coords_per_param {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in coords {
            let a = grad.as_ref().map_or(0.0, |d| d[i]);
            let orig = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + opts.epsilon;
            let plus = eval(params);
            params.get_mut(id).value.data_mut()[i] = orig - opts.epsilon;
            let minus = eval(params);
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.epsilon);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.max_coord_rel_error = report.max_coord_rel_error.max(rel);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            report.coords_checked += 1;
        }
        let worst = diff2.sqrt() / (a2.sqrt() + n2.sqrt() + 1e-12);
        let name = params.get(id).name.clone();
        if worst > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = report.max_rel_error.max(worst);
            report.worst_param = name.clone();
        }
        report.per_param.push((name, worst));
    }
    Ok(report)
}
