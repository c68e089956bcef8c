//! Reverse-mode gradients of a two-layer network checked against central
//! differences.
//!
//! `cargo run --release --example autodiff`

use temporal_bigen::tensor::Tensor;

fn loss(w1: &Tensor, w2: &Tensor, x: &Tensor, targets: &[usize]) -> temporal_bigen::Result<Tensor> {
    x.matmul(w1)?.relu().matmul(w2)?.cross_entropy_logits(targets, &[true; 4])
}

fn main() -> temporal_bigen::Result<()> {
    let x = Tensor::new((0..12).map(|i| (i as f64 * 0.7).sin()).collect(), &[4, 3]);
    let w1_data: Vec<f64> = (0..15).map(|i| (i as f64 * 1.3).cos() * 0.5).collect();
    let w2_data: Vec<f64> = (0..10).map(|i| (i as f64 * 0.4).sin() * 0.5).collect();
    let targets = [0, 1, 1, 0];

    let w1 = Tensor::param(w1_data.clone(), &[3, 5]);
    let w2 = Tensor::param(w2_data.clone(), &[5, 2]);
    let l = loss(&w1, &w2, &x, &targets)?;
    l.backward()?;
    let grad = w1.grad().expect("w1 is a leaf with a gradient");
    println!("loss {:.6}", l.item());

    let eps = 1e-5;
    let w2c = Tensor::new(w2_data, &[5, 2]);
    let mut worst = 0.0f64;
    for i in 0..w1_data.len() {
        let at = |delta: f64| {
            let mut w = w1_data.clone();
            w[i] += delta;
            loss(&Tensor::new(w, &[3, 5]), &w2c, &x, &targets).map(|t| t.item())
        };
        let fd = (at(eps)? - at(-eps)?) / (2.0 * eps);
        worst = worst.max((fd - grad[i]).abs());
        println!("dL/dw1[{i:>2}] tape {:>+.8} fd {:>+.8}", grad[i], fd);
    }
    println!("max abs difference {worst:.2e}");
    Ok(())
}
