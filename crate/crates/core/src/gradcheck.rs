//! Central finite-difference verification of analytic gradients.

use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};

/// One evaluation of a loss at a parameter point.
#[derive(Debug, Clone)]
pub struct Probe {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor<f64>)>,
    /// Discrete state (code indices, L1 sign patterns ...). A perturbation
    /// that changes it crossed a non-differentiable point and is skipped.
    pub signature: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares analytic gradients from `eval` with central differences.
///
/// `max_samples` bounds the number of scalar coordinates probed (drawn with
/// `rng`); `None` checks every coordinate. The error per coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(
    store: &ParamStore<f64>,
    eps: f64,
    max_samples: Option<usize>,
    rng: &mut Rng,
    eval: F,
) -> Result<FdReport>
where
    F: Fn(&ParamStore<f64>) -> Result<Probe>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::Invalid(format!("eps {eps} outside (0, 1e-2]")));
    }
    let base = eval(store)?;
    let mut coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |j| (id, j)))
        .collect();
    if let Some(k) = max_samples {
        if k < coords.len() {
            rng.shuffle(&mut coords);
            coords.truncate(k);
            coords.sort();
        }
    }
    let analytic = |id: ParamId, j: usize| -> f64 {
        base.grads
            .iter()
            .find(|(p, _)| *p == id)
            .map_or(0.0, |(_, g)| g.data()[j])
    };
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = store.clone();
    for (id, j) in coords {
        let orig = store.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;
        if plus.signature != base.signature || minus.signature != base.signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * eps);
        let err = (analytic(id, j) - numeric).abs() / numeric.abs().max(1.0);
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::Stream;

    fn quadratic(store: &ParamStore<f64>) -> Result<Probe> {
        let mut g = Graph::new(store);
        let x = g.param(ParamId(0));
        let sq = g.mul(x, x)?;
        let three = g.input(Tensor::full(store.get(ParamId(0)).shape(), 3.0))?;
        let lin = g.mul(x, three)?;
        let s = g.add(sq, lin)?;
        let loss = g.sum(s)?;
        let gr = g.backward(loss)?;
        Ok(Probe {
            loss: g.value(loss).item(),
            grads: gr.params(&g),
            signature: vec![],
        })
    }

    #[test]
    fn quadratic_matches() {
        let mut s = ParamStore::new();
        s.add(
            "x",
            Tensor::from_f64(&[3], &[0.5, -1.2, 2.0]).unwrap(),
            false,
        );
        let mut rng = Rng::new(0, Stream::Init);
        let r = finite_difference_check(&s, 1e-5, None, &mut rng, quadratic).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_loss_is_zero() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_f64(&[2], &[0.5, 1.0]).unwrap(), false);
        let mut rng = Rng::new(0, Stream::Init);
        let r = finite_difference_check(&s, 1e-4, None, &mut rng, |st| {
            let mut g = Graph::new(st);
            let _ = g.param(ParamId(0));
            let c = g.input(Tensor::scalar(4.0))?;
            let loss = g.sum(c)?;
            let gr = g.backward(loss)?;
            Ok(Probe {
                loss: g.value(loss).item(),
                grads: gr.params(&g),
                signature: vec![],
            })
        })
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn eps_out_of_range() {
        let s = ParamStore::<f64>::new();
        let mut rng = Rng::new(0, Stream::Init);
        assert!(finite_difference_check(&s, 0.1, None, &mut rng, quadratic).is_err());
    }
}
