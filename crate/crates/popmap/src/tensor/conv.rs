//! Same-padding 2-D convolution via im2col + gemm.

use super::{GradFn, Tensor};
use crate::error::{Error, Result};

/// Unpacks input shape into (batch, channels, h, w, batched_rank4).
fn conv_input_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2], false)),
        4 => Ok((shape[0], shape[1], shape[2], shape[3], true)),
        _ => Err(Error::shape(format!(
            "conv2d: input must be [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

/// Builds the [C*k*k, H*W] patch matrix for one sample with zero padding
/// `pad` (same-size output).
fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c * k * k * hw);
    col.iter_mut().for_each(|v| *v = 0.0);
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k * k + ky * k + kx) * hw;
                // output pixel (oy,ox) reads input (oy+ky-pad, ox+kx-pad)
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + dy) as usize;
                    let src = iy * w;
                    let dst = row + oy * w;
                    for ox in x_lo..x_hi {
                        let ix = (ox as isize + dx) as usize;
                        col[dst + ox] = plane[src + ix];
                    }
                }
            }
        }
    }
}

/// Scatters a [C*k*k, H*W] gradient matrix back onto the input plane.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, dinput: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k * k + ky * k + kx) * hw;
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + dy) as usize;
                    let dst = ch * hw + iy * w;
                    let src = row + oy * w;
                    for ox in x_lo..x_hi {
                        let ix = (ox as isize + dx) as usize;
                        dinput[dst + ix] += col[src + ox];
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    input: Vec<f64>,
    kernels: Vec<f64>,
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl GradFn for Conv2dBackward {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, ci, co, h, w, k) = (self.n, self.c_in, self.c_out, self.h, self.w, self.k);
        let pad = (k - 1) / 2;
        let hw = h * w;
        let ckk = ci * k * k;
        let mut col = vec![0.0; ckk * hw];

        let mut dinput = needs[0].then(|| vec![0.0; n * ci * hw]);
        let mut dkern = needs[1].then(|| vec![0.0; co * ckk]);
        let mut dcol = needs[0].then(|| vec![0.0; ckk * hw]);

        for s in 0..n {
            let dout = &out_grad[s * co * hw..(s + 1) * co * hw];
            if needs[0] || needs[1] {
                im2col(
                    &self.input[s * ci * hw..(s + 1) * ci * hw],
                    ci,
                    h,
                    w,
                    k,
                    pad,
                    &mut col,
                );
            }
            if let Some(dkern) = dkern.as_mut() {
                // dW[co,ckk] += dOut[co,hw] × colᵀ[hw,ckk]
                unsafe {
                    matrixmultiply::dgemm(
                        co,
                        hw,
                        ckk,
                        1.0,
                        dout.as_ptr(),
                        hw as isize,
                        1,
                        col.as_ptr(),
                        1,
                        hw as isize,
                        1.0,
                        dkern.as_mut_ptr(),
                        ckk as isize,
                        1,
                    );
                }
            }
            if let (Some(dinput), Some(dcol)) = (dinput.as_mut(), dcol.as_mut()) {
                // dCol[ckk,hw] = Wᵀ[ckk,co] × dOut[co,hw]
                unsafe {
                    matrixmultiply::dgemm(
                        ckk,
                        co,
                        hw,
                        1.0,
                        self.kernels.as_ptr(),
                        1,
                        ckk as isize,
                        dout.as_ptr(),
                        hw as isize,
                        1,
                        0.0,
                        dcol.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
                col2im(dcol, ci, h, w, k, pad, &mut dinput[s * ci * hw..(s + 1) * ci * hw]);
            }
        }

        let dbias = needs[2].then(|| {
            let mut db = vec![0.0; co];
            for s in 0..n {
                for o in 0..co {
                    let base = (s * co + o) * hw;
                    db[o] += out_grad[base..base + hw].iter().sum::<f64>();
                }
            }
            db
        });

        vec![dinput, dkern, dbias]
    }
}

/// 2-D convolution with same-size zero padding. Input is `[C,H,W]` or
/// `[N,C,H,W]`, kernels `[C_out,C_in,k,k]` with odd `k`, bias `[C_out]`.
/// Output spatial size equals input spatial size.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let in_shape = input.shape();
    let (n, c_in, h, w, batched) = conv_input_dims(&in_shape)?;
    let ks = kernels.shape();
    if ks.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d: kernels must be [C_out,C_in,k,k], got {ks:?}"
        )));
    }
    let (c_out, kc, k) = (ks[0], ks[1], ks[2]);
    if ks[3] != k {
        return Err(Error::shape("conv2d: kernels must be square"));
    }
    if k % 2 == 0 {
        return Err(Error::shape(format!("conv2d: kernel size {k} must be odd")));
    }
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv2d: input has {c_in} channels, kernels expect {kc}"
        )));
    }
    if bias.shape() != vec![c_out] {
        return Err(Error::shape(format!(
            "conv2d: bias shape {:?}, expected [{c_out}]",
            bias.shape()
        )));
    }

    let pad = (k - 1) / 2;
    let hw = h * w;
    let ckk = c_in * k * k;
    let mut out = vec![0.0; n * c_out * hw];
    {
        let xd = input.data();
        let kd = kernels.data();
        let bd = bias.data();
        let mut col = vec![0.0; ckk * hw];
        for s in 0..n {
            im2col(&xd[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w, k, pad, &mut col);
            let dst = &mut out[s * c_out * hw..(s + 1) * c_out * hw];
            // Out[co,hw] = W[co,ckk] × col[ckk,hw]
            unsafe {
                matrixmultiply::dgemm(
                    c_out,
                    ckk,
                    hw,
                    1.0,
                    kd.as_ptr(),
                    ckk as isize,
                    1,
                    col.as_ptr(),
                    hw as isize,
                    1,
                    0.0,
                    dst.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            for o in 0..c_out {
                let b = bd[o];
                for v in &mut dst[o * hw..(o + 1) * hw] {
                    *v += b;
                }
            }
        }
    }

    let out_shape = if batched {
        vec![n, c_out, h, w]
    } else {
        vec![c_out, h, w]
    };
    if !(input.needs_grad() || kernels.needs_grad() || bias.needs_grad()) {
        return Tensor::from_vec(&out_shape, out);
    }
    let gf = Conv2dBackward {
        input: input.to_vec(),
        kernels: kernels.to_vec(),
        n,
        c_in,
        c_out,
        h,
        w,
        k,
    };
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![input.clone(), kernels.clone(), bias.clone()],
        Box::new(gf),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::max_rel_error;
    use crate::tensor::mse_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::from_vec(&[1, 5, 5], (0..25).map(|i| i as f64).collect()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 5]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn paper_scale_shapes_preserved() {
        // 5×38×38 input through 64 kernels of 9×9 keeps the 38×38 extent
        let x = Tensor::from_vec(&[5, 38, 38], vec![0.25; 5 * 38 * 38]).unwrap();
        let k = Tensor::from_vec(&[64, 5, 9, 9], vec![0.01; 64 * 5 * 81]).unwrap();
        let b = Tensor::from_vec(&[64], vec![0.0; 64]).unwrap();
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), vec![64, 38, 38]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::from_vec(&[2, 4, 4], vec![0.0; 32]).unwrap();
        let k = Tensor::from_vec(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(conv2d(&x, &k, &b).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::from_vec(&[1, 4, 4], vec![0.0; 16]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(conv2d(&x, &k, &b).is_err());
    }

    #[test]
    fn conv_matches_naive_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ci, co, h, w, k) = (2, 3, 5, 4, 3);
        let x: Vec<f64> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kern: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::from_vec(&[ci, h, w], x.clone()).unwrap();
        let kt = Tensor::from_vec(&[co, ci, k, k], kern.clone()).unwrap();
        let bt = Tensor::from_vec(&[co], bias.clone()).unwrap();
        let y = conv2d(&xt, &kt, &bt).unwrap().to_vec();
        let pad = (k - 1) as isize / 2;
        for o in 0..co {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad;
                                let ix = ox as isize + kx as isize - pad;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[c * h * w + iy as usize * w + ix as usize]
                                        * kern[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    let got = y[o * h * w + oy * w + ox];
                    assert!((got - acc).abs() < 1e-12, "mismatch at {o},{oy},{ox}");
                }
            }
        }
    }

    #[test]
    fn conv_gradcheck_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let co = 1 + trial % 2;
            let x = Tensor::randn_param(&[1, 4, 4], 1.0, &mut rng);
            let kern = Tensor::randn_param(&[co, 1, 3, 3], 0.5, &mut rng);
            let bias = Tensor::randn_param(&[co], 0.5, &mut rng);
            let target = Tensor::from_vec(
                &[co, 4, 4],
                (0..co * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let params = [x.clone(), kern.clone(), bias.clone()];
            let err = max_rel_error(&params, &mut || {
                let y = conv2d(&x, &kern, &bias).unwrap();
                mse_loss(&y, &target).unwrap()
            });
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn batched_conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::randn_param(&[2, 2, 3, 3], 1.0, &mut rng);
        let kern = Tensor::randn_param(&[2, 2, 3, 3], 0.5, &mut rng);
        let bias = Tensor::randn_param(&[2], 0.5, &mut rng);
        let target = Tensor::from_vec(
            &[2, 2, 3, 3],
            (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let params = [x.clone(), kern.clone(), bias.clone()];
        let err = max_rel_error(&params, &mut || {
            let y = conv2d(&x, &kern, &bias).unwrap();
            mse_loss(&y, &target).unwrap()
        });
        assert!(err < 1e-4, "rel err {err}");
    }
}
