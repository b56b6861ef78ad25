//! Tour of the tensor engine: reverse-mode gradients, a finite-difference
//! spot check on conv2d, and a small Adam training loop.
//!
//! Usage: cargo run --release --example autodiff_basics

use popmap::tensor::{conv2d, linear, mse_loss, relu, Adam, AdamConfig, ParamGroup, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> popmap::Result<()> {
    // reverse-mode gradients through a composite expression
    let w = Tensor::param(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])?;
    let b = Tensor::param(&[2], vec![0.0, 0.1])?;
    let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0])?;
    let y = relu(&linear(&x, &w, Some(&b))?);
    let target = Tensor::from_vec(&[1, 2], vec![1.0, 0.0])?;
    let loss = mse_loss(&y, &target)?;
    loss.backward()?;
    println!("loss {:.4}", loss.item());
    println!("dL/dw = {:?}", w.grad().unwrap());

    // finite-difference check of one conv2d weight
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::randn_param(&[1, 1, 6, 6], 1.0, &mut rng);
    let kernel = Tensor::randn_param(&[1, 1, 3, 3], 0.5, &mut rng);
    let bias = Tensor::zeros(&[1]);
    let loss_of = |k: &Tensor| -> popmap::Result<Tensor> {
        let out = conv2d(&img, k, &bias)?;
        mse_loss(&out, &Tensor::zeros(&[1, 1, 6, 6]))
    };
    let l = loss_of(&kernel)?;
    l.backward()?;
    let analytic = kernel.grad().unwrap()[4];
    let eps = 1e-6;
    let mut shifted = kernel.to_vec();
    shifted[4] += eps;
    let kp = Tensor::param(&[1, 1, 3, 3], shifted.clone())?;
    shifted[4] -= 2.0 * eps;
    let km = Tensor::param(&[1, 1, 3, 3], shifted)?;
    let numeric = (loss_of(&kp)?.item() - loss_of(&km)?.item()) / (2.0 * eps);
    println!(
        "conv2d center-weight gradient: analytic {analytic:.8} vs central difference {numeric:.8}"
    );

    // a tiny regression fit with Adam
    let w = Tensor::randn_param(&[1, 4], 0.5, &mut rng);
    let b = Tensor::param(&[1], vec![0.0])?;
    let mut opt = Adam::new(
        vec![ParamGroup {
            params: vec![w.clone(), b.clone()],
            lr: 0.05,
        }],
        AdamConfig::default(),
    )?;
    let xs = Tensor::from_vec(&[8, 4], (0..32).map(|i| (i % 7) as f64 / 7.0).collect())?;
    // target: sum of the features
    let ys = Tensor::from_vec(
        &[8, 1],
        (0..8)
            .map(|r| (0..4).map(|c| ((r * 4 + c) % 7) as f64 / 7.0).sum())
            .collect(),
    )?;
    let mut final_loss = f64::NAN;
    for _ in 0..300 {
        opt.zero_grad();
        let pred = linear(&xs, &w, Some(&b))?;
        let loss = mse_loss(&pred, &ys)?;
        final_loss = loss.item();
        loss.backward()?;
        opt.step()?;
    }
    println!("after 300 Adam steps: loss {final_loss:.2e}, weights {:?}", w.to_vec());
    Ok(())
}
