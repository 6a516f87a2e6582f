//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, Graph, NumericsError, Var};

/// Minimum number of coordinates probed per parameter array.
pub const MIN_COORDS_PER_PARAM: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `backward` against `(f(θ+ε) - f(θ-ε)) / 2ε` on up to
/// `max(MIN_COORDS_PER_PARAM, …)` sampled coordinates of every parameter.
///
/// `build` records the scalar objective on a fresh graph, registering each
/// entry of `params` through [`Graph::param`].
pub fn grad_check<F>(
    build: F,
    params: &BTreeMap<String, Array<f64>>,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Array<f64>>) -> Result<Var, NumericsError>,
{
    let eval = |p: &BTreeMap<String, Array<f64>>| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let root = build(&mut g, p)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let root = build(&mut g, params)?;
    let analytic = g.backward(root)?.into_params();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut probe = params.clone();
    for (name, value) in params {
        let n = value.len();
        let coords: Vec<usize> = if n <= MIN_COORDS_PER_PARAM {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, MIN_COORDS_PER_PARAM).into_vec();
            c.sort_unstable();
            c
        };
        let zeros = Array::zeros(value.shape());
        let grad = analytic.get(name).unwrap_or(&zeros);
        for i in coords {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(grad.data()[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
