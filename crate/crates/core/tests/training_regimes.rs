use dntk::data::gen_sine;
use dntk::training::train;
use dntk::{ActivationSpec, Error, Network, NetworkConfig, TrainConfig};

fn deep_sine(weight_std: f64, bias_std: f64) -> NetworkConfig {
    let mut cfg = NetworkConfig::uniform(1, 1, 20, 25, 2, ActivationSpec::Relu);
    cfg.weight_std = weight_std;
    cfg.bias_std = bias_std;
    cfg.use_bias = true;
    cfg
}

#[test]
fn deep_sine_with_variance_reading_diverges() {
    let data = gen_sine(300, 1).unwrap();
    let cfg = TrainConfig::new(0.001, 5, 64, 1);
    for seed in 0..3 {
        let net = Network::init(deep_sine(0.2f64.sqrt(), 0.1f64.sqrt()), seed).unwrap();
        let err = train(net, &data.x, &data.y, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1 }), "seed {seed}: {err:?}");
    }
}

#[test]
fn deep_sine_with_std_reading_trains() {
    let data = gen_sine(300, 1).unwrap();
    let cfg = TrainConfig::new(0.001, 5, 64, 1);
    for seed in 0..3 {
        let net = Network::init(deep_sine(0.2, 0.1), seed).unwrap();
        let (_, curve) = train(net, &data.x, &data.y, &cfg).unwrap();
        assert!(curve[5] < curve[0], "seed {seed}: {curve:?}");
    }
}
