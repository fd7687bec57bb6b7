//! Central finite-difference gradient checks.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
    }
    Ok((g, ids, out))
}

/// Max over every input coordinate of `|analytic − central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (g, ids, out) = eval_scalar(&f, inputs)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .raw(*id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let (gp, _, op) = eval_scalar(&f, &probe)?;
            let fp = gp.value(op).data()[0];
            probe[k].data_mut()[i] = orig - eps;
            let (gm, _, om) = eval_scalar(&f, &probe)?;
            let fm = gm.value(om).data()[0];
            probe[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Finite-difference check of precomputed parameter gradients on selected
/// `(parameter, flat index)` coordinates. `loss` re-evaluates the scalar loss
/// for a perturbed parameter store.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    analytic: &[Tensor],
    coords: &[(ParamId, usize)],
    eps: f64,
    loss: F,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &(id, i) in coords {
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let fp = loss(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let fm = loss(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[id.index()].data()[i], (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.5], vec![0.5], vec![-2.0]]).unwrap();
        let err = grad_check(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                g.sum(y)
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        // bilinear, but central differences are exact for each coordinate separately
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let logits = Tensor::from_rows(&[vec![0.2, -0.7, 1.1, 0.05]]).unwrap();
        let err = grad_check(
            |g, ids| {
                let p = g.softmax_rows(ids[0])?;
                g.bce(p, &[0.0, 0.0, 1.0, 0.0], 1e-7)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
