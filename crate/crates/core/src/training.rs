//! Mini-batch gradient descent on squared loss and the kernel-drift tracker.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::netarch::{Gradients, Network};
use crate::stats;

fn default_learning_rate() -> f64 {
    0.001
}

fn default_batch_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            epochs,
            batch_size,
            seed,
        }
    }

    /// A zero learning rate is accepted and leaves the network untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_data(net: &Network, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Shape {
            context: "label count",
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    let n_o = net.config.output_dim;
    if let Some(bad) = ys.iter().find(|y| y.len() != n_o) {
        return Err(Error::Shape {
            context: "label dimension",
            expected: n_o,
            actual: bad.len(),
        });
    }
    Ok(())
}

/// Mean of `||f(x) - y||^2` over the data set.
pub fn mean_loss(net: &Network, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        total += (net.forward(x)?.output - y).norm_squared();
    }
    Ok(total / xs.len() as f64)
}

/// One pass over a shuffled copy of the data. `epoch` is 1-based and seeds the shuffle.
pub fn train_epoch(
    net: &mut Network,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stats::derive_seed(cfg.seed, epoch as u64)));
    if cfg.learning_rate == 0.0 {
        return Ok(());
    }
    let diverged = |_| Error::Divergence { epoch };
    let mut grads = Gradients::zeros(net);
    for batch in order.chunks(cfg.batch_size) {
        let b = batch.len() as f64;
        grads.fill_zero();
        let mut loss = 0.0;
        for &i in batch {
            let trace = net.forward(&xs[i]).map_err(diverged)?;
            let residual = &trace.output - &ys[i];
            loss += residual.norm_squared();
            net.accumulate_vjp(&trace, &(residual * (2.0 / b)), &mut grads);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let lr = cfg.learning_rate;
        for (w, g) in net.weights.iter_mut().zip(&grads.weights) {
            w.zip_apply(g, |a, b| *a -= lr * b);
        }
        if let Some(bs) = net.biases.as_mut() {
            for (bv, g) in bs.iter_mut().zip(&grads.biases) {
                bv.axpy(-lr, g, 1.0);
            }
        }
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs. The loss curve has `epochs + 1` entries:
/// the mean loss before training, then after each epoch.
pub fn train(
    mut net: Network,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    cfg: &TrainConfig,
) -> Result<(Network, Vec<f64>)> {
    cfg.validate()?;
    check_data(&net, xs, ys)?;
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    curve.push(mean_loss(&net, xs, ys)?);
    for epoch in 1..=cfg.epochs {
        train_epoch(&mut net, xs, ys, cfg, epoch)?;
        let loss = mean_loss(&net, xs, ys).map_err(|_| Error::Divergence { epoch })?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        curve.push(loss);
    }
    Ok((net, curve))
}

pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        out.push_str(&format!("{e},{l:.16e}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftRecord {
    pub epoch: usize,
    pub values_t0: Vec<f64>,
    pub values_t: Vec<f64>,
    pub drift: Vec<f64>,
}

impl DriftRecord {
    pub fn mean_drift(&self) -> f64 {
        stats::mean(&self.drift)
    }

    pub fn std_drift(&self) -> f64 {
        stats::std_dev(&self.drift)
    }
}

pub type ProbePair = (DVector<f64>, DVector<f64>);

fn probe_traces(net: &Network, probes: &[ProbePair]) -> Result<Vec<f64>> {
    probes
        .iter()
        .map(|(x, xp)| {
            let k = kernels::ntk_d_expanded(net, &net.forward(x)?, &net.forward(xp)?)?;
            Ok(k.trace)
        })
        .collect()
}

/// Trains `net0` and records `|tr NTK_d(t) - tr NTK_d(0)|` on every probe pair
/// at each checkpoint epoch (0 means before training). Returns one record per
/// checkpoint in the given order.
pub fn track_invariance(
    net0: &Network,
    cfg: &TrainConfig,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    probes: &[ProbePair],
    checkpoints: &[usize],
) -> Result<Vec<DriftRecord>> {
    if probes.is_empty() {
        return Err(Error::Domain("at least one probe pair is required".into()));
    }
    cfg.validate()?;
    check_data(net0, xs, ys)?;
    let values_t0 = probe_traces(net0, probes)?;
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    let mut net = net0.clone();
    let mut snapshots = std::collections::BTreeMap::new();
    snapshots.insert(0, values_t0.clone());
    for epoch in 1..=last {
        train_epoch(&mut net, xs, ys, cfg, epoch)?;
        if checkpoints.contains(&epoch) {
            let values = probe_traces(&net, probes).map_err(|_| Error::Divergence { epoch })?;
            snapshots.insert(epoch, values);
        }
    }
    Ok(checkpoints
        .iter()
        .map(|&epoch| {
            let values_t = snapshots[&epoch].clone();
            let drift = values_t
                .iter()
                .zip(&values_t0)
                .map(|(a, b)| (a - b).abs())
                .collect();
            DriftRecord {
                epoch,
                values_t0: values_t0.clone(),
                values_t,
                drift,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netarch::{ActivationSpec, NetworkConfig};
    use nalgebra::DMatrix;

    fn one_dim(w: f64) -> Network {
        let cfg = NetworkConfig::uniform(1, 1, 1, 1, 1, ActivationSpec::Identity);
        Network::from_parts(cfg, vec![DMatrix::from_element(1, 1, w)], None).unwrap()
    }

    fn small_tanh(seed: u64) -> Network {
        let mut cfg = NetworkConfig::uniform(2, 1, 4, 3, 1, ActivationSpec::Tanh);
        cfg.weight_std = 0.5;
        cfg.bias_std = 0.1;
        cfg.use_bias = true;
        Network::init(cfg, seed).unwrap()
    }

    fn toy_data() -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let xs: Vec<_> = (0..10)
            .map(|i| DVector::from_vec(vec![(i as f64 * 0.3).cos(), (i as f64 * 0.7).sin()]))
            .collect();
        let ys = xs.iter().map(|x| DVector::from_element(1, x[0] * x[1])).collect();
        (xs, ys)
    }

    #[test]
    fn one_step_matches_hand_gradient() {
        // f = (x + w x)/sqrt 2, loss f^2, dL/dw = 2 f x / sqrt 2 = 1.5 at w = 0.5, x = 1
        let xs = vec![DVector::from_element(1, 1.0)];
        let ys = vec![DVector::from_element(1, 0.0)];
        let cfg = TrainConfig::new(0.1, 1, 1, 0);
        let (net, curve) = train(one_dim(0.5), &xs, &ys, &cfg).unwrap();
        assert!((net.weights[0][(0, 0)] - (0.5 - 0.1 * 1.5)).abs() < 1e-15);
        assert!((curve[0] - 1.125).abs() < 1e-15);
        assert_eq!(curve.len(), 2);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (xs, ys) = toy_data();
        let net = small_tanh(1);
        let (trained, curve) = train(net.clone(), &xs, &ys, &TrainConfig::new(0.0, 3, 4, 9)).unwrap();
        assert_eq!(trained, net);
        assert!(curve.iter().all(|&l| l == curve[0]));
    }

    #[test]
    fn deterministic_and_improving() {
        let (xs, ys) = toy_data();
        let cfg = TrainConfig::new(0.05, 20, 4, 2);
        let (a, ca) = train(small_tanh(3), &xs, &ys, &cfg).unwrap();
        let (b, _) = train(small_tanh(3), &xs, &ys, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ca.last().unwrap() < &ca[0]);
    }

    #[test]
    fn divergence_names_epoch() {
        let xs = vec![DVector::from_element(1, 1e150)];
        let ys = vec![DVector::from_element(1, 0.0)];
        let err = train(one_dim(1e150), &xs, &ys, &TrainConfig::new(1.0, 2, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1 }), "{err:?}");
    }

    #[test]
    fn drift_checkpoints() {
        let (xs, ys) = toy_data();
        let net = small_tanh(5);
        let probes = vec![(xs[0].clone(), xs[1].clone()), (xs[2].clone(), xs[2].clone())];
        let recs = track_invariance(&net, &TrainConfig::new(0.05, 0, 4, 1), &xs, &ys, &probes, &[0, 2, 4]).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs[0].drift.iter().all(|&d| d == 0.0));
        assert!(recs[2].drift.iter().all(|&d| d >= 0.0));
        assert!(recs[2].mean_drift() > 0.0);
        let frozen = track_invariance(&net, &TrainConfig::new(0.0, 0, 4, 1), &xs, &ys, &probes, &[3]).unwrap();
        assert!(frozen[0].drift.iter().all(|&d| d == 0.0));
        assert!(track_invariance(&net, &TrainConfig::new(0.1, 0, 4, 1), &xs, &ys, &[], &[1]).is_err());
    }

    #[test]
    fn csv_header() {
        assert_eq!(loss_curve_csv(&[0.5]), "epoch,loss\n0,5.0000000000000000e-1\n");
    }
}
