//! Dense arrays and a tape-based reverse-mode autodiff engine, generic over
//! the floating point element type.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;

pub use array::Array;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, MIN_COORDS_PER_PARAM};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cross_entropy: every label equals the ignore id")]
    AllIgnored,
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(entries: Vec<(&str, Array<f64>)>) -> BTreeMap<String, Array<f64>> {
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Contracts every output with a fixed random weight so that the
    /// objective is not degenerate (e.g. `sum(softmax(x))` is constant).
    fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_array(&mut rng, g.shape(x));
        let w = g.constant(w);
        let y = g.mul(x, w).unwrap();
        g.sum(y)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Array::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_array(&mut rng, &[3, 4]);
        let mut eye = Array::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let mut g = Graph::new();
        let (av, iv) = (g.constant(a.clone()), g.constant(eye));
        let c = g.matmul(av, iv, false).unwrap();
        assert_eq!(g.value(c), &a);
    }

    #[test]
    fn rms_norm_of_constant_row() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::from_vec(&[2], vec![-3.0, -3.0]).unwrap());
        let gain = g.constant(Array::from_vec(&[2], vec![2.0, 5.0]).unwrap());
        let y = g.rms_norm_eps(x, gain, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-2.0, -5.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[2, 3]));
        let err = g.matmul(a, b, false).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::zeros(&[3, 7]));
        let l = g.cross_entropy(x, &[1, 2, 0], 99).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_gap_goes_to_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Array::from_vec(&[1, 3], vec![200.0, 0.0, 0.0]).unwrap());
        let l = g.cross_entropy(x, &[0], 99).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_f64_reference() {
        // Independent reference: direct log-sum-exp evaluation in f64.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = [4usize, 0, 2];
        let mut reference = 0.0;
        for (t, &l) in labels.iter().enumerate() {
            let row = &logits[t * 5..(t + 1) * 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            reference += lse - row[l];
        }
        reference /= 3.0;
        let mut g = Graph::<f32>::new();
        let x = g.constant(
            Array::from_vec(&[3, 5], logits.iter().map(|&v| v as f32).collect()).unwrap(),
        );
        let l = g.cross_entropy(x, &labels, 99).unwrap();
        assert!((g.value(l).item() as f64 - reference).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Array::zeros(&[2, 3]));
        assert_eq!(g.cross_entropy(x, &[0, 0], 0), Err(NumericsError::AllIgnored));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Array::full(&[2, 3], 0.7));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.params()["x"], Array::ones(&[2, 3]));
    }

    #[test]
    fn backward_of_sum_softmax_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.param("x", rand_array(&mut rng, &[2, 4]));
        let y = g.softmax(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.params()["x"].data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn untouched_param_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Array::ones(&[2]));
        let _unused = g.param("unused", Array::ones(&[3]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.params()["unused"], Array::zeros(&[3]));
    }

    #[test]
    fn non_scalar_root_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Array::ones(&[2]));
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarRoot(_))));
    }

    #[test]
    fn zero_param_grad_check_is_vacuous() {
        let report = grad_check(
            |g, _| {
                let c = g.constant(Array::scalar(3.0));
                Ok(g.sum(c))
            },
            &BTreeMap::new(),
            1e-5,
            0,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.coords_checked, 0);
    }

    fn check(
        build: impl Fn(&mut Graph<f64>, &BTreeMap<String, Array<f64>>) -> Result<Var, NumericsError>,
        p: BTreeMap<String, Array<f64>>,
    ) {
        let report = grad_check(build, &p, 1e-5, 11).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(
            |g, p| {
                let a = g.param("a", p["a"].clone());
                let w = g.param("w", p["w"].clone());
                let y = g.matmul(a, w, false)?;
                Ok(weighted_sum(g, y, 1))
            },
            params(vec![("a", rand_array(&mut rng, &[2, 3, 4])), ("w", rand_array(&mut rng, &[4, 5]))]),
        );
        check(
            |g, p| {
                let a = g.param("a", p["a"].clone());
                let w = g.param("w", p["w"].clone());
                let y = g.matmul(a, w, true)?;
                Ok(weighted_sum(g, y, 2))
            },
            params(vec![("a", rand_array(&mut rng, &[3, 4])), ("w", rand_array(&mut rng, &[6, 4]))]),
        );
        for tb in [false, true] {
            check(
                move |g, p| {
                    let a = g.param("a", p["a"].clone());
                    let b = g.param("b", p["b"].clone());
                    let y = g.bmm(a, b, tb)?;
                    Ok(weighted_sum(g, y, 3))
                },
                params(vec![("a", rand_array(&mut rng, &[2, 3, 4])), ("b", rand_array(&mut rng, &[2, 4, 4]))]),
            );
        }
        check(
            |g, p| {
                let a = g.param("a", p["a"].clone());
                let b = g.param("b", p["b"].clone());
                let y = g.add(a, b)?;
                let z = g.mul(y, b)?;
                Ok(weighted_sum(g, z, 4))
            },
            params(vec![("a", rand_array(&mut rng, &[3, 2, 4])), ("b", rand_array(&mut rng, &[2, 4]))]),
        );
        check(
            |g, p| {
                let x = g.param("x", p["x"].clone());
                let y = g.relu(x);
                Ok(weighted_sum(g, y, 5))
            },
            params(vec![("x", rand_array(&mut rng, &[4, 5]))]),
        );
        check(
            |g, p| {
                let x = g.param("x", p["x"].clone());
                let y = g.softmax(x);
                Ok(weighted_sum(g, y, 6))
            },
            params(vec![("x", rand_array(&mut rng, &[3, 6]))]),
        );
        check(
            |g, p| {
                let x = g.param("x", p["x"].clone());
                let gain = g.param("gain", p["gain"].clone());
                let y = g.rms_norm(x, gain)?;
                Ok(weighted_sum(g, y, 7))
            },
            params(vec![("x", rand_array(&mut rng, &[3, 5])), ("gain", rand_array(&mut rng, &[5]))]),
        );
        check(
            |g, p| {
                let t = g.param("table", p["table"].clone());
                let y = g.gather(t, &[2, 0, 2, 3])?;
                Ok(weighted_sum(g, y, 8))
            },
            params(vec![("table", rand_array(&mut rng, &[4, 3]))]),
        );
        check(
            |g, p| {
                let a = g.param("a", p["a"].clone());
                let b = g.param("b", p["b"].clone());
                let c = g.concat(&[a, b], 1)?;
                let s = g.slice(c, 1, 1, 4)?;
                let s = g.scale(s, -1.5);
                Ok(weighted_sum(g, s, 9))
            },
            params(vec![("a", rand_array(&mut rng, &[2, 2, 3])), ("b", rand_array(&mut rng, &[2, 3, 3]))]),
        );
        check(
            |g, p| {
                let x = g.param("x", p["x"].clone());
                let y = g.permute(x, &[0, 2, 1, 3])?;
                let y = g.reshape(y, &[6, 4])?;
                Ok(weighted_sum(g, y, 10))
            },
            params(vec![("x", rand_array(&mut rng, &[1, 2, 3, 4]))]),
        );
        check(
            |g, p| {
                let x = g.param("x", p["x"].clone());
                g.cross_entropy(x, &[1, 0, 3, 2], 0)
            },
            params(vec![("x", rand_array(&mut rng, &[4, 5]))]),
        );
    }
}
