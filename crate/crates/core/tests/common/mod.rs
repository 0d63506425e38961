#![allow(dead_code)]

use flowscale_core::{FlowModel, GridField, ModelConfig, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn random_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> GridField {
    GridField::new(1, h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Adds uniform noise of half-width `amp` to every trainable parameter, so that
/// zero-initialized output layers and identity actnorms become non-trivial.
pub fn perturb(params: &mut ParamSet, amp: f64, rng: &mut ChaCha8Rng) {
    let trainable: Vec<bool> = (0..params.len()).map(|i| params.is_trainable(i)).collect();
    for (t, tr) in params.tensors_mut().iter_mut().zip(trainable) {
        if tr {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amp..amp));
        }
    }
}

pub fn small_config(num_scales: usize, hidden: usize, cond: usize) -> ModelConfig {
    ModelConfig {
        upsampling: 2,
        num_scales,
        steps_per_scale: 2,
        hidden_channels: hidden,
        cond_channels: cond,
        channels: 1,
    }
}

pub fn random_model(config: ModelConfig, seed: u64, amp: f64) -> FlowModel {
    let mut m = FlowModel::new(config, seed).unwrap();
    perturb(m.params_mut(), amp, &mut rng(seed ^ 0x5eed));
    m
}
