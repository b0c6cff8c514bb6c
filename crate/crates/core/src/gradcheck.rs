//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation for central differences.
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords: Option<usize>,
    /// Denominator floor: errors on entries smaller than this are judged absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter key and coordinate where the worst error occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

fn eval<F>(f: &F, inputs: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(inputs, false);
    let out = f(&mut g, &bound)?;
    let t = g.value(out);
    if t.len() != 1 {
        return Err(Error::shape(format!("grad_check needs a scalar function, got {:?}", t.shape())));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` against central differences for every
/// parameter in `inputs`; returns the maximum relative error.
pub fn grad_check<F>(f: F, inputs: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    Ok(grad_check_with(f, inputs, &opts)?.max_rel_error)
}

pub fn grad_check_with<F>(f: F, inputs: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let bound = g.bind(inputs, true);
        let out = f(&mut g, &bound)?;
        g.value(out).ensure_finite("grad_check function value")?;
        let grads = g.backward(out)?;
        bound.gradients(&g, &grads)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    let mut probe = inputs.clone();
    for (key, tensor) in inputs.iter() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < tensor.len() => sample(&mut rng, tensor.len(), m).into_vec(),
            _ => (0..tensor.len()).collect(),
        };
        let grad = analytic.require(key)?;
        for i in coords {
            let orig = tensor.data()[i];
            probe.get_mut(key).unwrap().data_mut()[i] = orig + opts.eps;
            let plus = eval(&f, &probe)?;
            probe.get_mut(key).unwrap().data_mut()[i] = orig - opts.eps;
            let minus = eval(&f, &probe)?;
            probe.get_mut(key).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((key.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
