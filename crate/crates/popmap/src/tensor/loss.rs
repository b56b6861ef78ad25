//! Mean-squared-error loss.

use super::{GradFn, Tensor};
use crate::error::{Error, Result};

struct MseBackward {
    pred: Vec<f64>,
    target: Vec<f64>,
}

impl GradFn for MseBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.pred.len() as f64;
        let g = out_grad[0];
        let dpred = needs[0].then(|| {
            self.pred
                .iter()
                .zip(&self.target)
                .map(|(p, t)| g * 2.0 * (p - t) / n)
                .collect()
        });
        let dtarget = needs[1].then(|| {
            self.pred
                .iter()
                .zip(&self.target)
                .map(|(p, t)| g * 2.0 * (t - p) / n)
                .collect()
        });
        vec![dpred, dtarget]
    }
}

/// Mean of squared elementwise differences, as a scalar tensor.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse_loss: shape {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("mse_loss: empty tensors"));
    }
    let n = pred.len() as f64;
    let loss: f64 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    if !(pred.needs_grad() || target.needs_grad()) {
        return Tensor::from_vec(&[1], vec![loss]);
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![pred.clone(), target.clone()],
        Box::new(MseBackward {
            pred: pred.to_vec(),
            target: target.to_vec(),
        }),
    ))
}
