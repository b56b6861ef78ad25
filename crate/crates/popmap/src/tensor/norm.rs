//! 2-D batch normalization with running statistics.

use serde::{Deserialize, Serialize};

use super::{GradFn, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential-moving-average statistics kept per channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }
}

fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    // (N, C, spatial) for [N,C,H,W] or [C,H,W]
    match shape.len() {
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        3 => Ok((1, shape[0], shape[1] * shape[2])),
        _ => Err(Error::shape(format!(
            "batchnorm2d: input must be [N,C,H,W] or [C,H,W], got {shape:?}"
        ))),
    }
}

struct BnTrainBackward {
    xhat: Vec<f64>,
    gamma: Vec<f64>,
    inv_std: Vec<f64>, // per channel
    n: usize,
    c: usize,
    sp: usize,
}

impl GradFn for BnTrainBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, c, sp) = (self.n, self.c, self.sp);
        let m = (n * sp) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * sp;
                for i in 0..sp {
                    let g = out_grad[base + i];
                    dgamma[ch] += g * self.xhat[base + i];
                    dbeta[ch] += g;
                }
            }
        }
        let dx = needs[0].then(|| {
            // dx = (gamma*inv_std/m) * (m*dy - dbeta - xhat*dgamma)
            let mut dx = vec![0.0; n * c * sp];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * sp;
                    let k = self.gamma[ch] * self.inv_std[ch] / m;
                    for i in 0..sp {
                        let g = out_grad[base + i];
                        dx[base + i] =
                            k * (m * g - dbeta[ch] - self.xhat[base + i] * dgamma[ch]);
                    }
                }
            }
            dx
        });
        vec![
            dx,
            needs[1].then_some(dgamma),
            needs[2].then_some(dbeta),
        ]
    }
}

struct BnEvalBackward {
    scale: Vec<f64>, // gamma * inv_std per channel
    xhat: Vec<f64>,
    n: usize,
    c: usize,
    sp: usize,
}

impl GradFn for BnEvalBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, c, sp) = (self.n, self.c, self.sp);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * c * sp];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * sp;
                    for i in 0..sp {
                        dx[base + i] = out_grad[base + i] * self.scale[ch];
                    }
                }
            }
            dx
        });
        let dgamma = needs[1].then(|| {
            let mut dg = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * sp;
                    for i in 0..sp {
                        dg[ch] += out_grad[base + i] * self.xhat[base + i];
                    }
                }
            }
            dg
        });
        let dbeta = needs[2].then(|| {
            let mut db = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * sp;
                    for i in 0..sp {
                        db[ch] += out_grad[base + i];
                    }
                }
            }
            db
        });
        vec![dx, dgamma, dbeta]
    }
}

/// Per-channel batch normalization over N,H,W. Train mode normalizes with
/// batch statistics (epsilon-stabilized variance) and updates `stats` by
/// exponential moving average; eval mode uses the stored running stats and
/// errors if they were never populated.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: BnMode,
    stats: &mut RunningStats,
    eps: f64,
    momentum: f64,
) -> Result<Tensor> {
    let shape = input.shape();
    let (n, c, sp) = bn_dims(&shape)?;
    if gamma.shape() != vec![c] || beta.shape() != vec![c] {
        return Err(Error::shape(format!(
            "batchnorm2d: gamma/beta must be [{c}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if stats.mean.len() != c {
        return Err(Error::state(format!(
            "batchnorm2d: running stats sized for {} channels, input has {c}",
            stats.mean.len()
        )));
    }

    let (mean, var) = match mode {
        BnMode::Train => {
            let xd = input.data();
            let m = (n * sp) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * sp;
                    for i in 0..sp {
                        mean[ch] += xd[base + i];
                    }
                }
            }
            for mch in mean.iter_mut() {
                *mch /= m;
            }
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * sp;
                    for i in 0..sp {
                        let d = xd[base + i] - mean[ch];
                        var[ch] += d * d;
                    }
                }
            }
            for vch in var.iter_mut() {
                *vch /= m;
            }
            // running = momentum*running + (1-momentum)*batch
            if stats.initialized {
                for ch in 0..c {
                    stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * mean[ch];
                    stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * var[ch];
                }
            } else {
                stats.mean.copy_from_slice(&mean);
                stats.var.copy_from_slice(&var);
                stats.initialized = true;
            }
            (mean, var)
        }
        BnMode::Eval => {
            if !stats.initialized {
                return Err(Error::state(
                    "batchnorm2d: eval mode requires populated running stats",
                ));
            }
            (stats.mean.clone(), stats.var.clone())
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gd = gamma.to_vec();
    let bd = beta.to_vec();
    let mut xhat = vec![0.0; n * c * sp];
    let mut out = vec![0.0; n * c * sp];
    {
        let xd = input.data();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * sp;
                for i in 0..sp {
                    let h = (xd[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = h;
                    out[base + i] = gd[ch] * h + bd[ch];
                }
            }
        }
    }

    if !(input.needs_grad() || gamma.needs_grad() || beta.needs_grad()) {
        return Tensor::from_vec(&shape, out);
    }
    let gf: Box<dyn GradFn> = match mode {
        BnMode::Train => Box::new(BnTrainBackward {
            xhat,
            gamma: gd,
            inv_std,
            n,
            c,
            sp,
        }),
        BnMode::Eval => Box::new(BnEvalBackward {
            scale: gd.iter().zip(&inv_std).map(|(g, i)| g * i).collect(),
            xhat,
            n,
            c,
            sp,
        }),
    };
    Ok(Tensor::from_op(
        shape,
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        gf,
    ))
}
