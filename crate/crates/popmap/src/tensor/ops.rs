//! Elementwise ops, activations, concatenation and the affine (linear) layer.

use super::{GradFn, Tensor};
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<Vec<usize>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa != sb {
        return Err(Error::shape(format!("{op}: shape {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

fn any_needs(ts: &[&Tensor]) -> bool {
    ts.iter().any(|t| t.needs_grad())
}

// ---------------------------------------------------------------------------
// add / sub / mul / scale

struct AddBackward;
impl GradFn for AddBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        needs
            .iter()
            .map(|&n| n.then(|| out_grad.to_vec()))
            .collect()
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape(a, b, "add")?;
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    if !any_needs(&[a, b]) {
        return Tensor::from_vec(&shape, data);
    }
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(AddBackward),
    ))
}

struct SubBackward;
impl GradFn for SubBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![
            needs[0].then(|| out_grad.to_vec()),
            needs[1].then(|| out_grad.iter().map(|g| -g).collect()),
        ]
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape(a, b, "sub")?;
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x - y)
        .collect();
    if !any_needs(&[a, b]) {
        return Tensor::from_vec(&shape, data);
    }
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(SubBackward),
    ))
}

struct MulBackward {
    a: Vec<f64>,
    b: Vec<f64>,
}
impl GradFn for MulBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![
            needs[0].then(|| out_grad.iter().zip(&self.b).map(|(g, y)| g * y).collect()),
            needs[1].then(|| out_grad.iter().zip(&self.a).map(|(g, x)| g * x).collect()),
        ]
    }
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape(a, b, "mul")?;
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .collect();
    if !any_needs(&[a, b]) {
        return Tensor::from_vec(&shape, data);
    }
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(MulBackward {
            a: a.to_vec(),
            b: b.to_vec(),
        }),
    ))
}

struct ScaleBackward {
    c: f64,
}
impl GradFn for ScaleBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| out_grad.iter().map(|g| g * self.c).collect())]
    }
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let shape = a.shape();
    let data: Vec<f64> = a.data().iter().map(|x| x * c).collect();
    if !a.needs_grad() {
        return Tensor::from_vec(&shape, data).expect("scale");
    }
    Tensor::from_op(
        shape,
        data,
        vec![a.clone()],
        Box::new(ScaleBackward { c }),
    )
}

// ---------------------------------------------------------------------------
// activations

struct SigmoidBackward {
    y: Vec<f64>,
}
impl GradFn for SigmoidBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| {
            out_grad
                .iter()
                .zip(&self.y)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect()
        })]
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let shape = a.shape();
    let data: Vec<f64> = a.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
    if !a.needs_grad() {
        return Tensor::from_vec(&shape, data).expect("sigmoid");
    }
    let y = data.clone();
    Tensor::from_op(
        shape,
        data,
        vec![a.clone()],
        Box::new(SigmoidBackward { y }),
    )
}

struct TanhBackward {
    y: Vec<f64>,
}
impl GradFn for TanhBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| {
            out_grad
                .iter()
                .zip(&self.y)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect()
        })]
    }
}

pub fn tanh_t(a: &Tensor) -> Tensor {
    let shape = a.shape();
    let data: Vec<f64> = a.data().iter().map(|x| x.tanh()).collect();
    if !a.needs_grad() {
        return Tensor::from_vec(&shape, data).expect("tanh");
    }
    let y = data.clone();
    Tensor::from_op(shape, data, vec![a.clone()], Box::new(TanhBackward { y }))
}

struct ReluBackward {
    active: Vec<bool>,
}
impl GradFn for ReluBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| {
            out_grad
                .iter()
                .zip(&self.active)
                .map(|(g, &a)| if a { *g } else { 0.0 })
                .collect()
        })]
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    let shape = a.shape();
    let data: Vec<f64> = a.data().iter().map(|x| x.max(0.0)).collect();
    if !a.needs_grad() {
        return Tensor::from_vec(&shape, data).expect("relu");
    }
    let active = a.data().iter().map(|x| *x > 0.0).collect();
    Tensor::from_op(
        shape,
        data,
        vec![a.clone()],
        Box::new(ReluBackward { active }),
    )
}

// ---------------------------------------------------------------------------
// concat along the last dimension

struct ConcatBackward {
    lead: usize,
    widths: Vec<usize>,
}
impl GradFn for ConcatBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.widths.iter().sum();
        let mut out = Vec::with_capacity(self.widths.len());
        let mut offset = 0;
        for (wi, &w) in self.widths.iter().enumerate() {
            if needs[wi] {
                let mut g = vec![0.0; self.lead * w];
                for r in 0..self.lead {
                    g[r * w..(r + 1) * w]
                        .copy_from_slice(&out_grad[r * total + offset..r * total + offset + w]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += w;
        }
        out
    }
}

/// Concatenates tensors along the last dimension; leading dims must agree.
pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_last: no inputs"));
    }
    let first = parts[0].shape();
    if first.is_empty() {
        return Err(Error::shape("concat_last: rank-0 input"));
    }
    let lead_shape = &first[..first.len() - 1];
    let lead: usize = lead_shape.iter().product();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != first.len() || &s[..s.len() - 1] != lead_shape {
            return Err(Error::shape(format!(
                "concat_last: leading dims differ ({first:?} vs {s:?})"
            )));
        }
        widths.push(s[s.len() - 1]);
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; lead * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for r in 0..lead {
            data[r * total + offset..r * total + offset + w]
                .copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let mut shape = lead_shape.to_vec();
    shape.push(total);
    if !parts.iter().any(|p| p.needs_grad()) {
        return Tensor::from_vec(&shape, data);
    }
    Ok(Tensor::from_op(
        shape,
        data,
        parts.iter().map(|p| (*p).clone()).collect(),
        Box::new(ConcatBackward { lead, widths }),
    ))
}

// ---------------------------------------------------------------------------
// linear: y[..., F_out] = x[..., F_in] · Wᵀ + b

struct LinearBackward {
    x: Vec<f64>,
    w: Vec<f64>,
    batch: usize,
    f_in: usize,
    f_out: usize,
    has_bias: bool,
}
impl GradFn for LinearBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (b, fi, fo) = (self.batch, self.f_in, self.f_out);
        let dx = needs[0].then(|| {
            // dX[B,Fi] = dY[B,Fo] × W[Fo,Fi]
            let mut dx = vec![0.0; b * fi];
            unsafe {
                matrixmultiply::dgemm(
                    b,
                    fo,
                    fi,
                    1.0,
                    out_grad.as_ptr(),
                    fo as isize,
                    1,
                    self.w.as_ptr(),
                    fi as isize,
                    1,
                    0.0,
                    dx.as_mut_ptr(),
                    fi as isize,
                    1,
                );
            }
            dx
        });
        let dw = needs[1].then(|| {
            // dW[Fo,Fi] = dYᵀ[Fo,B] × X[B,Fi]
            let mut dw = vec![0.0; fo * fi];
            unsafe {
                matrixmultiply::dgemm(
                    fo,
                    b,
                    fi,
                    1.0,
                    out_grad.as_ptr(),
                    1,
                    fo as isize,
                    self.x.as_ptr(),
                    fi as isize,
                    1,
                    0.0,
                    dw.as_mut_ptr(),
                    fi as isize,
                    1,
                );
            }
            dw
        });
        let mut grads = vec![dx, dw];
        if self.has_bias {
            grads.push(needs[2].then(|| {
                let mut db = vec![0.0; fo];
                for r in 0..b {
                    for o in 0..fo {
                        db[o] += out_grad[r * fo + o];
                    }
                }
                db
            }));
        }
        grads
    }
}

/// Affine map along the last dimension: weight is `[F_out, F_in]`, bias
/// (optional) `[F_out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.len() != 2 {
        return Err(Error::shape(format!("linear: weight must be rank 2, got {ws:?}")));
    }
    let (f_out, f_in) = (ws[0], ws[1]);
    if xs.is_empty() || xs[xs.len() - 1] != f_in {
        return Err(Error::shape(format!(
            "linear: input {xs:?} incompatible with weight {ws:?}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != vec![f_out] {
            return Err(Error::shape(format!(
                "linear: bias shape {:?}, expected [{f_out}]",
                b.shape()
            )));
        }
    }
    let batch: usize = xs[..xs.len() - 1].iter().product();

    let mut data = vec![0.0; batch * f_out];
    {
        let xd = x.data();
        let wd = weight.data();
        // Y[B,Fo] = X[B,Fi] × Wᵀ[Fi,Fo]
        unsafe {
            matrixmultiply::dgemm(
                batch,
                f_in,
                f_out,
                1.0,
                xd.as_ptr(),
                f_in as isize,
                1,
                wd.as_ptr(),
                1,
                f_in as isize,
                0.0,
                data.as_mut_ptr(),
                f_out as isize,
                1,
            );
        }
        if let Some(b) = bias {
            let bd = b.data();
            for r in 0..batch {
                for o in 0..f_out {
                    data[r * f_out + o] += bd[o];
                }
            }
        }
    }

    let mut out_shape = xs[..xs.len() - 1].to_vec();
    out_shape.push(f_out);

    let mut inputs: Vec<&Tensor> = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    if !any_needs(&inputs) {
        return Tensor::from_vec(&out_shape, data);
    }
    let gf = LinearBackward {
        x: x.to_vec(),
        w: weight.to_vec(),
        batch,
        f_in,
        f_out,
        has_bias: bias.is_some(),
    };
    Ok(Tensor::from_op(
        out_shape,
        data,
        inputs.into_iter().cloned().collect(),
        Box::new(gf),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::max_rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_weight_zero_bias() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn linear_one_hot_is_embedding_lookup() {
        let w = Tensor::from_vec(&[2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        // one-hot at index 2 → column 2 of W plus bias
        let x = Tensor::from_vec(&[4], vec![0., 0., 1., 0.]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![3.0 + 0.5, 7.0 - 0.5]);
    }

    #[test]
    fn linear_matches_naive_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b_data: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[3, 4], x_data.clone()).unwrap();
        let w = Tensor::from_vec(&[2, 4], w_data.clone()).unwrap();
        let b = Tensor::from_vec(&[2], b_data.clone()).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        // naive triple loop
        for r in 0..3 {
            for o in 0..2 {
                let mut acc = b_data[o];
                for i in 0..4 {
                    acc += x_data[r * 4 + i] * w_data[o * 4 + i];
                }
                assert!((y.to_vec()[r * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_mismatch_is_error() {
        let x = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let w = Tensor::from_vec(&[2, 4], vec![0.0; 8]).unwrap();
        assert!(linear(&x, &w, None).is_err());
    }

    #[test]
    fn elementwise_shape_mismatch_is_error() {
        let a = Tensor::from_vec(&[2], vec![0.0; 2]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
    }

    #[test]
    fn concat_last_roundtrip_and_grad() {
        let a = Tensor::param(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::param(&[2, 1], vec![9., 8.]).unwrap();
        let c = concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.to_vec(), vec![1., 2., 9., 3., 4., 8.]);
        let loss = crate::tensor::mse_loss(&c, &Tensor::zeros(&[2, 3])).unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap().len(), 4);
        assert_eq!(b.grad().unwrap().len(), 2);
    }

    #[test]
    fn linear_gradcheck_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let b_dim = 1 + trial % 3;
            let fi = 2 + trial % 4;
            let fo = 1 + trial % 3;
            let x = Tensor::randn_param(&[b_dim, fi], 1.0, &mut rng);
            let w = Tensor::randn_param(&[fo, fi], 1.0, &mut rng);
            let bias = Tensor::randn_param(&[fo], 1.0, &mut rng);
            let target = Tensor::from_vec(
                &[b_dim, fo],
                (0..b_dim * fo).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let params = [x.clone(), w.clone(), bias.clone()];
            let err = max_rel_error(&params, &mut || {
                let y = linear(&x, &w, Some(&bias)).unwrap();
                crate::tensor::mse_loss(&y, &target).unwrap()
            });
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn activation_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let x = Tensor::randn_param(&[6], 1.0, &mut rng);
            let target = Tensor::from_vec(&[6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let params = [x.clone()];
            let err = max_rel_error(&params, &mut || {
                let y = tanh_t(&sigmoid(&x));
                crate::tensor::mse_loss(&y, &target).unwrap()
            });
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }
}
