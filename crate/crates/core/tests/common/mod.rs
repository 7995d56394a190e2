#![allow(dead_code)]

use ftx_core::model::ModelConfig;
use ftx_core::{FTimeXer, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Tiny configuration used for end-to-end gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        lookback: 4,
        patch_len: 2,
        d_model: 8,
        layers: 1,
        heads: 2,
        d_endo: 1,
        d_exo: 2,
        ..Default::default()
    }
}

/// Moves every parameter off its initial value so zero-initialized biases
/// and unit gains are exercised like any other weight.
pub fn jitter(model: &mut FTimeXer<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst relative error between tape gradients and central differences of
/// `loss` over every scalar parameter.
pub fn param_gradcheck<F>(model: &FTimeXer<f64>, step: f64, loss: F) -> (f64, usize)
where
    F: Fn(&FTimeXer<f64>, &ftx_core::model::Bound<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let grads = loss(model, &bound).unwrap().backward().unwrap();
    let analytic: Vec<Tensor<f64>> = bound
        .vars()
        .iter()
        .map(|v| grads.get(v).unwrap())
        .collect();

    let eval = |m: &FTimeXer<f64>| {
        let tape = Tape::new();
        let b = m.bind(&tape, false);
        loss(m, &b).unwrap().item().unwrap()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = model.clone();
    for (p, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe.params().tensors()[p].data()[j];
            probe.params_mut().tensors_mut()[p].data_mut()[j] = orig + step;
            let up = eval(&probe);
            probe.params_mut().tensors_mut()[p].data_mut()[j] = orig - step;
            let down = eval(&probe);
            probe.params_mut().tensors_mut()[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(g.data()[j], numeric);
            if err > worst {
                worst = err;
            }
            checked += 1;
        }
    }
    (worst, checked)
}
