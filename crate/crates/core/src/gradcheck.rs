//! Finite-difference gradient oracle. Runs in 64-bit mode: the builder is
//! re-invoked with perturbed parameters, so it must be a pure function of the
//! parameter set.

use indexmap::IndexMap;

use crate::graph::{Graph, Var};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub type ParamSet = IndexMap<String, Tensor<f64>>;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// (parameter name, max relative error over sampled coordinates).
    pub per_param: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare analytic gradients of the loss built by `build` against central
/// finite differences. At most `max_coords` coordinates per parameter are
/// sampled (deterministically).
pub fn grad_check<F>(params: &ParamSet, build: F, eps: f64, max_coords: usize) -> GradReport
where
    F: Fn(&mut Graph<f64>, &ParamSet) -> Var,
{
    let eval = |ps: &ParamSet| -> f64 {
        let mut g = Graph::new(0);
        let loss = build(&mut g, ps);
        g.value(loss).data()[0]
    };

    // Analytic pass.
    let mut g = Graph::new(0);
    let loss = build(&mut g, params);
    g.backward(loss).unwrap();

    let mut sampler = SplitMix64::new(0x9d5a);
    let mut per_param = Vec::new();
    for (name, t) in params {
        let analytic = match g.param_grad(name) {
            Some(gr) => gr.to_vec(),
            None => continue,
        };
        let n = t.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| sampler.below(n)).collect()
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let mut plus = params.clone();
            plus[name].data_mut()[c] += eps;
            let mut minus = params.clone();
            minus[name].data_mut()[c] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[c], numeric));
        }
        per_param.push((name.clone(), worst));
    }
    GradReport { per_param }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn tanh_of_linear_matches_finite_differences() {
        // loss = sum(tanh(W x))
        let mut params = ParamSet::new();
        let mut rng = SplitMix64::new(3);
        let w: Vec<f64> = (0..12).map(|_| rng.uniform(-0.5, 0.5)).collect();
        params.insert("w".into(), Tensor::new(vec![3, 4], w).unwrap());
        let report = grad_check(
            &params,
            |g, ps| {
                let w = g.param("w", ps["w"].clone());
                let x = g.leaf(Tensor::new(vec![4, 1], vec![0.3, -0.1, 0.7, 0.2]).unwrap());
                let h = g.matmul(w, x).unwrap();
                let y = g.tanh(h);
                g.sum_all(y)
            },
            1e-5,
            64,
        );
        assert!(report.max_rel_err() <= 1e-6, "{report:?}");
    }

    #[test]
    fn zero_parameter_graph_empty_report() {
        let params = ParamSet::new();
        let report = grad_check(&params, |g, _| g.scalar(1.0), 1e-5, 16);
        assert!(report.per_param.is_empty());
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        // A "wrong" loss pairing: analytic grads of x^2 vs numeric of 2*x^2
        // are off by 2x; the report must flag rel err well above 1e-2.
        let mut params = ParamSet::new();
        params.insert("w".into(), Tensor::scalar(0.7));
        let flip = std::cell::Cell::new(false);
        let report = grad_check(
            &params,
            |g, ps| {
                let w = g.param("w", ps["w"].clone());
                let sq = g.mul(w, w).unwrap();
                let out = if flip.get() {
                    g.scale(sq, 2.0)
                } else {
                    sq
                };
                flip.set(true); // analytic pass sees x^2, numeric sees 2x^2
                g.sum_all(out)
            },
            1e-5,
            16,
        );
        assert!(report.max_rel_err() > 1e-2, "{report:?}");
    }

    #[test]
    fn every_op_passes_gradcheck_on_random_shapes() {
        let mut rng = SplitMix64::new(42);
        for trial in 0..100 {
            let r = 1 + rng.below(4);
            let c = 1 + rng.below(4);
            let mk = |rng: &mut SplitMix64, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
            };
            let a = Tensor::new(vec![r, c], mk(&mut rng, r * c)).unwrap();
            let b = Tensor::new(vec![c, r], mk(&mut rng, r * c)).unwrap();
            let mut params = ParamSet::new();
            params.insert("a".into(), a);
            params.insert("b".into(), b);
            let which = trial % 5;
            let report = grad_check(
                &params,
                move |g, ps| {
                    let a = g.param("a", ps["a"].clone());
                    let b = g.param("b", ps["b"].clone());
                    let h = match which {
                        0 => g.matmul(a, b).unwrap(),
                        1 => g.sigmoid(a),
                        2 => g.tanh(a),
                        3 => g.softmax_rows(a, None).unwrap(),
                        _ => {
                            let m = g.matmul(a, b).unwrap();
                            g.relu(m)
                        }
                    };
                    let y = g.tanh(h);
                    g.sum_all(y)
                },
                1e-5,
                16,
            );
            assert!(report.max_rel_err() <= 1e-4, "trial {trial}: {report:?}");
        }
    }
}
