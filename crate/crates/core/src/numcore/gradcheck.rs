//! Central finite-difference checking of tape gradients.

use rand::seq::SliceRandom;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamSet};
use super::rng::SeedTree;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)` at the worst coordinate.
    pub max_relative_error: f64,
    /// `name[flat_index]` of the worst coordinate.
    pub worst_parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on sampled coordinates; every coordinate is checked when
    /// the parameter set is smaller.
    pub max_coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coordinates: 256,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of `loss_fn` with
/// `(loss(θ+h) - loss(θ-h)) / 2h` on a sample of coordinates.
///
/// Coordinates are drawn round-robin across parameters so that every tensor
/// is represented. `loss_fn` must be deterministic.
pub fn grad_check<F>(params: &ParamSet, mut loss_fn: F, opts: GradCheckOptions) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(Error::Invalid(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let mut g = Graph::new();
    let bound = g.bind(params);
    let root = loss_fn(&mut g, &bound)?;
    ensure_finite(g.item(root))?;
    let grads = g.backward(root);

    let mut rng = SeedTree::new(opts.seed).stream("grad_check");
    let mut queues: Vec<Vec<usize>> = params
        .iter()
        .map(|(_, _, t)| {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut rng);
            idx.reverse();
            idx
        })
        .collect();
    let mut picks = Vec::new();
    'outer: loop {
        let mut progressed = false;
        for (p, q) in queues.iter_mut().enumerate() {
            if picks.len() >= opts.max_coordinates {
                break 'outer;
            }
            if let Some(i) = q.pop() {
                picks.push((p, i));
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let ids: Vec<_> = params.ids().collect();
    let mut work = params.clone();
    let mut report = GradReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: picks.len(),
    };
    for (p, i) in picks {
        let id = ids[p];
        let analytic = grads.get(bound.get(id)).map_or(0.0, |g| g[i]);
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + opts.step;
        let plus = eval(&work, &mut loss_fn)?;
        work.get_mut(id).data_mut()[i] = orig - opts.step;
        let minus = eval(&work, &mut loss_fn)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic, numeric);
        if err > report.max_relative_error || report.worst_parameter.is_empty() {
            report.max_relative_error = err;
            report.worst_parameter = format!("{}[{i}]", params.name(id));
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn eval<F>(params: &ParamSet, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let root = loss_fn(&mut g, &bound)?;
    ensure_finite(g.item(root))
}

fn ensure_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term: "loss".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn quadratic_matches() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::row_vector(vec![1.0, -2.0]));
        let report = grad_check(
            &ps,
            |g, b| {
                let sq = g.square(b.get(x));
                Ok(g.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.coordinates_checked, 2);
        assert!(report.max_relative_error < 1e-8, "{report:?}");

        let mut g = Graph::new();
        let b = g.bind(&ps);
        let sq = g.square(b.get(x));
        let s = g.sum(sq);
        assert_eq!(g.backward(s).get(b.get(x)).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn dead_parameter_has_zero_gradients() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::row_vector(vec![0.5, 1.5]));
        let dead = ps.add("dead", Tensor::scalar(3.0));
        let report = grad_check(
            &ps,
            |g, b| {
                let e = g.exp(b.get(x));
                Ok(g.sum(e))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8);

        let mut g = Graph::new();
        let b = g.bind(&ps);
        let e = g.exp(b.get(x));
        let s = g.sum(e);
        let grads = g.backward(s);
        assert!(grads.get(b.get(dead)).is_none());
        assert_eq!(grads.tensor(b.get(dead)).data(), &[0.0]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::scalar(-1.0));
        let err = grad_check(&ps, |g, b| Ok(g.ln(b.get(x))), GradCheckOptions::default());
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn rejects_step_out_of_range() {
        let ps = ParamSet::new();
        let opts = GradCheckOptions {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&ps, |g, _| Ok(g.scalar(0.0)), opts).is_err());
    }
}
