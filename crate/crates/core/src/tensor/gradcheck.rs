//! Central-finite-difference gradient oracle.
//!
//! [`grad_check`] compares backward-pass gradients against
//! `(f(x+h) - f(x-h)) / 2h` per parameter coordinate, always at 64-bit
//! precision. Relative error uses an absolute fallback below a small
//! threshold so exactly-zero gradients do not divide by zero.

use super::{Binding, Graph, NodeId, ParamStore, TensorError};
use crate::rng::SeedRng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Below this magnitude (both analytic and numeric), the coordinate
    /// passes on absolute error instead of relative.
    pub abs_fallback: f64,
    /// Check at most this many randomly chosen coordinates per parameter;
    /// `None` checks every coordinate.
    pub subsample: Option<usize>,
    /// Seed for the subsample draw.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_fallback: 1e-8,
            subsample: None,
            seed: 0x67726164,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Parameter owning the worst coordinate.
    pub worst_param: String,
    /// Flat index of the worst coordinate within that parameter.
    pub worst_index: usize,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// finite differences, perturbing the parameters in `store` in place
/// (restored on return). `build` must be deterministic: called once for the
/// analytic pass and twice per checked coordinate.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    build: &F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &Binding) -> Result<NodeId, TensorError>,
{
    // Analytic pass.
    let mut graph = Graph::new();
    let binding = Binding::new(&mut graph, store);
    let loss = build(&mut graph, &binding)?;
    if graph.value(loss).len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: graph.value(loss).shape().to_vec(),
        });
    }
    let grads = graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|pid| match grads.get(binding.node(pid)) {
            Some(t) => t.data().to_vec(),
            // Unused parameter: gradient is identically zero.
            None => vec![0.0; store.get(pid).value.len()],
        })
        .collect();
    drop(graph);

    let eval = |store: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let b = Binding::new(&mut g, store);
        let l = build(&mut g, &b)?;
        Ok(g.scalar_value(l))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut rng = SeedRng::new(opts.seed);
    for pid in store.ids().collect::<Vec<_>>() {
        let n = store.get(pid).value.len();
        let coords: Vec<usize> = match opts.subsample {
            Some(limit) if limit < n => {
                let mut picked: Vec<usize> = (0..limit).map(|_| rng.below(n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(pid).value.data()[c];
            store.get_mut(pid).value.data_mut()[c] = orig + opts.step;
            let plus = eval(store)?;
            store.get_mut(pid).value.data_mut()[c] = orig - opts.step;
            let minus = eval(store)?;
            store.get_mut(pid).value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pid.0][c];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < opts.abs_fallback {
                0.0
            } else {
                (a - numeric).abs() / scale
            };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.get(pid).name.clone();
                report.worst_index = c;
            }
        }
    }
    Ok(report)
}

/// Directional central-difference check, one random unit direction per
/// parameter tensor: `(f(p + h·u) − f(p − h·u)) / 2h` against `⟨∇p, u⟩`.
///
/// Per-coordinate checks on a deep composition are dominated by evaluation
/// roundoff whenever an individual gradient coordinate is tiny; projecting
/// onto a random direction compares at the scale of the whole tensor's
/// gradient norm instead, which is what assembly bugs would corrupt.
/// `opts.subsample` limits how many parameter tensors are drawn.
pub fn grad_check_directions<F>(
    store: &mut ParamStore<f64>,
    build: &F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &Binding) -> Result<NodeId, TensorError>,
{
    let mut graph = Graph::new();
    let binding = Binding::new(&mut graph, store);
    let loss = build(&mut graph, &binding)?;
    if graph.value(loss).len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: graph.value(loss).shape().to_vec(),
        });
    }
    let grads = graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|pid| match grads.get(binding.node(pid)) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; store.get(pid).value.len()],
        })
        .collect();
    drop(graph);

    let eval = |store: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let b = Binding::new(&mut g, store);
        let l = build(&mut g, &b)?;
        Ok(g.scalar_value(l))
    };

    let mut rng = SeedRng::new(opts.seed);
    let all: Vec<_> = store.ids().collect();
    let picked: Vec<_> = match opts.subsample {
        Some(limit) if limit < all.len() => {
            // draw without replacement via partial shuffle
            let mut pool = all.clone();
            for i in 0..limit {
                let j = i + rng.below(pool.len() - i);
                pool.swap(i, j);
            }
            pool.truncate(limit);
            pool
        }
        _ => all,
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for pid in picked {
        let n = store.get(pid).value.len();
        let mut dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-300);
        for d in &mut dir {
            *d /= norm;
        }

        let orig = store.get(pid).value.data().to_vec();
        let shift = |store: &mut ParamStore<f64>, sign: f64| {
            let data = store.get_mut(pid).value.data_mut();
            for i in 0..n {
                data[i] = orig[i] + sign * opts.step * dir[i];
            }
        };
        shift(store, 1.0);
        let plus = eval(store)?;
        shift(store, -1.0);
        let minus = eval(store)?;
        store.get_mut(pid).value.data_mut().copy_from_slice(&orig);

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a: f64 = analytic[pid.0]
            .iter()
            .zip(&dir)
            .map(|(g, d)| g * d)
            .sum();
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < opts.abs_fallback {
            0.0
        } else {
            (a - numeric).abs() / scale
        };
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = store.get(pid).name.clone();
            report.worst_index = 0;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn product_rule_at_known_point() {
        // loss = x*y at (2, 3): dx = 3, dy = 2.
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.0));
        let y = store.add("y", Tensor::scalar(3.0));
        let mut graph = Graph::new();
        let binding = Binding::new(&mut graph, &store);
        let prod = graph.mul(binding.node(x), binding.node(y)).unwrap();
        let loss = graph.sum_all(prod);
        let grads = graph.backward(loss).unwrap();
        assert_eq!(grads.get(binding.node(x)).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(binding.node(y)).unwrap().data(), &[2.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let report = grad_check(
            &mut store,
            &|g, b| {
                let sq = g.mul(b.node(x), b.node(x))?;
                Ok(g.sum_all(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn near_zero_gradients_use_absolute_fallback() {
        // loss = sum(x^2) at x = 0: gradient exactly 0, relative error
        // undefined; fallback must report 0.
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::zeros(vec![4]));
        let report = grad_check(
            &mut store,
            &|g, b| {
                let sq = g.mul(b.node(x), b.node(x))?;
                Ok(g.sum_all(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn subsample_limits_checked_coordinates() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::full(vec![100], 0.3));
        let opts = GradCheckOptions {
            subsample: Some(5),
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            &mut store,
            &|g, b| {
                let sq = g.mul(b.node(x), b.node(x))?;
                Ok(g.sum_all(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(report.checked <= 5 && report.checked > 0);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn unused_parameter_reports_zero_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.5));
        store.add("unused", Tensor::scalar(9.0));
        let report = grad_check(
            &mut store,
            &|g, b| {
                let sq = g.mul(b.node(x), b.node(x))?;
                Ok(g.sum_all(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9);
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn directional_check_on_smooth_function_is_tight() {
        let mut rng = SeedRng::new(3);
        let mut store = ParamStore::new();
        let x = store.add(
            "x",
            Tensor::new(vec![8], (0..8).map(|_| rng.normal()).collect()).unwrap(),
        );
        let y = store.add(
            "y",
            Tensor::new(vec![8], (0..8).map(|_| rng.normal()).collect()).unwrap(),
        );
        let report = grad_check_directions(
            &mut store,
            &|g, b| {
                let prod = g.mul(b.node(x), b.node(y))?;
                let e = g.exp(prod);
                Ok(g.mean_all(e))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn directional_subsample_draws_distinct_tensors() {
        let mut store = ParamStore::new();
        for i in 0..10 {
            store.add(format!("p{i}"), Tensor::full(vec![4], 0.2 + i as f64 * 0.1));
        }
        let ids: Vec<_> = store.ids().collect();
        let opts = GradCheckOptions {
            subsample: Some(4),
            ..GradCheckOptions::default()
        };
        let report = grad_check_directions(
            &mut store,
            &|g, b| {
                let mut acc = b.node(ids[0]);
                for &id in &ids[1..] {
                    acc = g.mul(acc, b.node(id))?;
                }
                Ok(g.sum_all(acc))
            },
            &opts,
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn sum_of_losses_matches_sum_of_gradients() {
        // backward(l1 + l2) == backward(l1) + backward(l2), coordinatewise.
        let mut rng = SeedRng::new(11);
        let mut store = ParamStore::new();
        let x = store.add(
            "x",
            Tensor::new(vec![6], (0..6).map(|_| rng.normal()).collect()).unwrap(),
        );

        let build_l1 = |g: &mut Graph<f64>, b: &Binding| {
            let sq = g.mul(b.node(x), b.node(x)).unwrap();
            g.sum_all(sq)
        };
        let build_l2 = |g: &mut Graph<f64>, b: &Binding| {
            let e = g.exp(b.node(x));
            g.mean_all(e)
        };

        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let l1 = build_l1(&mut g, &bind);
        let l2 = build_l2(&mut g, &bind);
        let total = g.add(l1, l2).unwrap();
        let combined = g.backward(total).unwrap();

        let mut g1 = Graph::new();
        let bind1 = Binding::new(&mut g1, &store);
        let only1 = build_l1(&mut g1, &bind1);
        let grads1 = g1.backward(only1).unwrap();

        let mut g2 = Graph::new();
        let bind2 = Binding::new(&mut g2, &store);
        let only2 = build_l2(&mut g2, &bind2);
        let grads2 = g2.backward(only2).unwrap();

        let c = combined.get(bind.node(x)).unwrap().data();
        let a = grads1.get(bind1.node(x)).unwrap().data();
        let b2 = grads2.get(bind2.node(x)).unwrap().data();
        for i in 0..6 {
            assert!((c[i] - (a[i] + b2[i])).abs() < 1e-10);
        }
    }
}
