//! LSTM cell built from the primitive ops, so gradients flow through time
//! when cells are chained.

use rand::Rng;

use super::ops::{add, linear, mul, sigmoid, tanh_t};
use super::Tensor;
use crate::error::Result;

/// Gate parameters of one LSTM cell. Input weights are `[H, F]`, recurrent
/// weights `[H, H]`, biases `[H]`.
pub struct LstmParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
    pub w_xg: Tensor,
    pub w_hg: Tensor,
    pub b_g: Tensor,
}

impl LstmParams {
    pub fn new(input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let sx = (1.0 / input_size as f64).sqrt();
        let sh = (1.0 / hidden_size as f64).sqrt();
        let gate = |rng: &mut dyn rand::RngCore| {
            (
                Tensor::randn_param(&[hidden_size, input_size], sx, rng),
                Tensor::randn_param(&[hidden_size, hidden_size], sh, rng),
                Tensor::param(&[hidden_size], vec![0.0; hidden_size]).unwrap(),
            )
        };
        let (w_xi, w_hi, b_i) = gate(rng);
        let (w_xf, w_hf, b_f) = gate(rng);
        let (w_xo, w_ho, b_o) = gate(rng);
        let (w_xg, w_hg, b_g) = gate(rng);
        LstmParams {
            w_xi,
            w_hi,
            b_i,
            w_xf,
            w_hf,
            b_f,
            w_xo,
            w_ho,
            b_o,
            w_xg,
            w_hg,
            b_g,
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let zw = || Tensor::param(&[hidden_size, input_size], vec![0.0; hidden_size * input_size]).unwrap();
        let zh = || Tensor::param(&[hidden_size, hidden_size], vec![0.0; hidden_size * hidden_size]).unwrap();
        let zb = || Tensor::param(&[hidden_size], vec![0.0; hidden_size]).unwrap();
        LstmParams {
            w_xi: zw(),
            w_hi: zh(),
            b_i: zb(),
            w_xf: zw(),
            w_hf: zh(),
            b_f: zb(),
            w_xo: zw(),
            w_ho: zh(),
            b_o: zb(),
            w_xg: zw(),
            w_hg: zh(),
            b_g: zb(),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.w_xi.clone(),
            self.w_hi.clone(),
            self.b_i.clone(),
            self.w_xf.clone(),
            self.w_hf.clone(),
            self.b_f.clone(),
            self.w_xo.clone(),
            self.w_ho.clone(),
            self.b_o.clone(),
            self.w_xg.clone(),
            self.w_hg.clone(),
            self.b_g.clone(),
        ]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("w_xi", &self.w_xi),
            ("w_hi", &self.w_hi),
            ("b_i", &self.b_i),
            ("w_xf", &self.w_xf),
            ("w_hf", &self.w_hf),
            ("b_f", &self.b_f),
            ("w_xo", &self.w_xo),
            ("w_ho", &self.w_ho),
            ("b_o", &self.b_o),
            ("w_xg", &self.w_xg),
            ("w_hg", &self.w_hg),
            ("b_g", &self.b_g),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }
}

/// Standard LSTM gate equations for one step. `x` is `[B, F]` (or `[F]`),
/// `h_prev`/`c_prev` are `[B, H]` (or `[H]`). Returns `(h, c)`.
pub fn lstm_cell(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    params: &LstmParams,
) -> Result<(Tensor, Tensor)> {
    let i = sigmoid(&add(
        &linear(x, &params.w_xi, Some(&params.b_i))?,
        &linear(h_prev, &params.w_hi, None)?,
    )?);
    let f = sigmoid(&add(
        &linear(x, &params.w_xf, Some(&params.b_f))?,
        &linear(h_prev, &params.w_hf, None)?,
    )?);
    let o = sigmoid(&add(
        &linear(x, &params.w_xo, Some(&params.b_o))?,
        &linear(h_prev, &params.w_ho, None)?,
    )?);
    let g = tanh_t(&add(
        &linear(x, &params.w_xg, Some(&params.b_g))?,
        &linear(h_prev, &params.w_hg, None)?,
    )?);
    let c = add(&mul(&f, c_prev)?, &mul(&i, &g)?)?;
    let h = mul(&o, &tanh_t(&c))?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::max_rel_error;
    use crate::tensor::mse_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state_is_fixed_point() {
        let params = LstmParams::zeros(2, 3);
        let x = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let h0 = Tensor::zeros(&[3]);
        let c0 = Tensor::zeros(&[3]);
        let (h, c) = lstm_cell(&x, &h0, &c0, &params).unwrap();
        assert_eq!(h.to_vec(), vec![0.0; 3]);
        assert_eq!(c.to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn single_step_matches_hand_computed_gate_algebra() {
        // 1-dim everything: w_x = 1 for every gate, w_h = 0, biases 0,
        // x = 0.5, h0 = 0, c0 = 0.
        //   i = f = o = sigmoid(0.5), g = tanh(0.5)
        //   c = i*g, h = o*tanh(c)
        let params = LstmParams::zeros(1, 1);
        for w in [&params.w_xi, &params.w_xf, &params.w_xo, &params.w_xg] {
            w.set_data(vec![1.0]);
        }
        params.w_hi.set_data(vec![0.0]);
        let x = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let h0 = Tensor::zeros(&[1]);
        let c0 = Tensor::zeros(&[1]);
        let (h, c) = lstm_cell(&x, &h0, &c0, &params).unwrap();
        let s = 1.0 / (1.0 + (-0.5f64).exp());
        let g = 0.5f64.tanh();
        let c_exp = s * g;
        let h_exp = s * c_exp.tanh();
        assert!((c.item() - c_exp).abs() < 1e-12);
        assert!((h.item() - h_exp).abs() < 1e-12);
    }

    #[test]
    fn three_step_unrolled_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let params = LstmParams::new(2, 3, &mut rng);
            let xs: Vec<Tensor> = (0..3)
                .map(|_| {
                    Tensor::from_vec(&[2], (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap()
                })
                .collect();
            let target = Tensor::from_vec(&[3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let all = params.params();
            let err = max_rel_error(&all, &mut || {
                let mut h = Tensor::zeros(&[3]);
                let mut c = Tensor::zeros(&[3]);
                for x in &xs {
                    let (nh, nc) = lstm_cell(x, &h, &c, &params).unwrap();
                    h = nh;
                    c = nc;
                }
                mse_loss(&h, &target).unwrap()
            });
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }
}
