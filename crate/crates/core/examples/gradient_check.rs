//! Finite-difference checks of the hand-written backward passes, plus a
//! negative control with deliberately corrupted gradients.
//!
//! cargo run --release --example gradient_check

use capnet::diagnostics::{run_suites, Layer, SuiteConfig};
use capnet::neural::{grad_check, Activation, Linear, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capnet::Result<()> {
    // One layer by hand: loss = sum of a tanh layer's outputs over a batch of two.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = Linear::init(4, 3, &mut rng);
    let x = Tensor::new(vec![2, 4], vec![0.3, -0.7, 0.2, 0.9, -0.1, 0.5, 0.4, -0.6])?;
    let (y, cache) = layer.forward(&x, Activation::Tanh)?;
    let grads = layer.backward(&cache, &Tensor::new(y.shape().to_vec(), vec![1.0; y.len()])?)?;
    let report = grad_check(
        |p| {
            let x = Tensor::new(vec![2, 4], p.to_vec()).expect("shape");
            layer.forward(&x, Activation::Tanh).expect("shape").0.data().iter().sum()
        },
        x.data(),
        grads.input.data(),
        1e-5,
    );
    println!("tanh layer input gradient: max relative error {:.2e}", report.max_rel_error);

    let config = SuiteConfig {
        layers: vec![Layer::Fc, Layer::Lstm, Layer::Ccc, Layer::Capnet],
        seeds: 3,
        ..SuiteConfig::default()
    };
    for r in run_suites(&config) {
        println!("{r}");
    }
    let faulty = SuiteConfig {
        inject_fault: true,
        ..config
    };
    let caught = run_suites(&faulty).iter().all(|r| !r.passed);
    println!("corrupted gradients detected by every suite: {caught}");
    Ok(())
}
