#![allow(dead_code)]

use dntk::{ActivationSpec, Network, NetworkConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Small random architecture: K in [1,4], hbar in [1,3], widths <= 8.
pub fn random_net(rng: &mut ChaCha8Rng, activation: ActivationSpec, use_bias: bool) -> Network {
    let shortcuts = rng.random_range(1..=4);
    let hbar = rng.random_range(1..=3);
    let cfg = NetworkConfig {
        input_dim: rng.random_range(1..=5),
        output_dim: rng.random_range(1..=3),
        hbar,
        shortcuts,
        widths: (0..shortcuts * hbar).map(|_| rng.random_range(1..=8)).collect(),
        activation,
        apply_layer_scaling: rng.random_bool(0.5),
        weight_std: 1.0,
        bias_std: if use_bias { 0.3 } else { 0.0 },
        use_bias,
        scale_init_by_width: false,
    };
    let mut net = Network::init(cfg, rng.random()).unwrap();
    net.make_stable_pertinent(0.95).unwrap();
    net
}

pub fn random_input(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
}

/// Largest entrywise difference over the larger of the two block scales.
pub fn block_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 {
        return (a - b).amax();
    }
    (a - b).amax() / scale
}
