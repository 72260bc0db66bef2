//! Eigen/singular-value tools and the spectral bound checks.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{self, LabelKind, SphereVariant};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelKind};
use crate::netarch::{ActivationSpec, Network, NetworkConfig};
use crate::stats::{self, LinearFit};
use crate::training::{self, TrainConfig};

/// Matrices up to this order use a dense symmetric eigensolve.
pub const DENSE_EIGEN_LIMIT: usize = 2048;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 10_000;

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Contract(format!(
            "matrix is not square ({}x{})",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax();
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::Contract(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    if m.nrows() == 0 {
        return Err(Error::Domain("empty matrix".into()));
    }
    if m.nrows() <= DENSE_EIGEN_LIMIT {
        Ok(m.symmetric_eigenvalues().min())
    } else {
        smallest_eigenvalue_lanczos(m)
    }
}

/// Lanczos with full reorthogonalization; stops once the Ritz residual of the
/// smallest Ritz pair is below `1e-10 * ||m||_max`.
pub fn smallest_eigenvalue_lanczos(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    let n = m.nrows();
    let tol = 1e-10 * m.amax().max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let start: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let mut basis: Vec<DVector<f64>> = vec![start.normalize()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut estimate = f64::NAN;
    for step in 0..n {
        let q = &basis[step];
        let mut w = m * q;
        let alpha = q.dot(&w);
        alphas.push(alpha);
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let beta = w.norm();

        let k = alphas.len();
        let t = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alphas[i]
            } else if i + 1 == j {
                betas[i]
            } else if j + 1 == i {
                betas[j]
            } else {
                0.0
            }
        });
        let eig = t.symmetric_eigen();
        let (idx, &theta) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty tridiagonal");
        estimate = theta;
        let residual = beta * eig.eigenvectors[(k - 1, idx)].abs();
        if residual <= tol || beta <= tol || step + 1 == n {
            return Ok(estimate);
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    Err(Error::IterationLimit {
        iterations: n,
        estimate,
    })
}

fn power_iterate(m: &DMatrix<f64>, start: DVector<f64>) -> Result<f64> {
    let norm = start.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let mut v = start / norm;
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITER {
        let w = m * &v;
        let estimate = w.norm();
        let u = m.tr_mul(&w);
        let un = u.norm();
        if un == 0.0 || estimate == 0.0 {
            return Ok(estimate);
        }
        if (estimate - prev).abs() <= POWER_TOL * estimate {
            return Ok(estimate);
        }
        prev = estimate;
        v = u / un;
    }
    Err(Error::IterationLimit {
        iterations: POWER_MAX_ITER,
        estimate: prev,
    })
}

/// `sigma_max` by power iteration on `m^T m`, started from the normalized
/// all-ones vector. A second deterministic start (alternating-sign ramp)
/// covers matrices whose leading right singular vector is orthogonal to the
/// all-ones direction; the larger estimate wins.
pub fn largest_singular_value(m: &DMatrix<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matrix has non-finite entries".into()));
    }
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return Ok(0.0);
    }
    let ones = power_iterate(m, DVector::from_element(n, 1.0))?;
    if n == 1 {
        return Ok(ones);
    }
    let ramp = DVector::from_fn(n, |i, _| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * (1.0 + i as f64 / n as f64)
    });
    Ok(ones.max(power_iterate(m, ramp)?))
}

fn ln_double_factorial(k: i64) -> f64 {
    // (-1)!! = 0!! = 1
    let mut acc = 0.0;
    let mut i = k;
    while i > 1 {
        acc += (i as f64).ln();
        i -= 2;
    }
    acc
}

fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// Normalized Hermite coefficient of leaky ReLU with slope `alpha` for even `r >= 2`:
/// `(1 - alpha)/sqrt(2 pi) * (-1)^{(r-2)/2} * (r-3)!! / sqrt(r!)`.
pub fn hermite_coefficient(r: u32, alpha: f64) -> Result<f64> {
    if r < 2 || r % 2 == 1 {
        return Err(Error::Domain(format!("r must be an even integer >= 2, got {r}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let sign = if ((r - 2) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let magnitude = (ln_double_factorial(r as i64 - 3) - 0.5 * ln_factorial(r as u64)).exp();
    Ok((1.0 - alpha) / (2.0 * std::f64::consts::PI).sqrt() * sign * magnitude)
}

/// `K (2K + 1) / 6 * n_max^2`.
pub fn theorem3_bound(shortcuts: usize, n_max: usize) -> f64 {
    let k = shortcuts as f64;
    k * (2.0 * k + 1.0) / 6.0 * (n_max as f64).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem3Check {
    pub sigma_max: f64,
    pub bound: f64,
    pub n_max: usize,
    pub holds: bool,
    /// `|phi| <= 1` for the configured activation.
    pub bounded_activation: bool,
    /// Largest `C_phi * sigma_max(W_hat^l)` over all layers.
    pub max_layer_gain: f64,
    pub stable_pertinent: bool,
    /// Every input entry lies in `[-1, 1]`, so `z^0` obeys the same bound as hidden layers.
    pub bounded_inputs: bool,
}

impl Theorem3Check {
    pub fn preconditions_met(&self) -> bool {
        self.bounded_activation && self.stable_pertinent && self.bounded_inputs
    }
}

/// Compares `sigma_max(NTK_d(x, x'))` against the quadratic-in-`K` bound.
/// Violated preconditions are reported in the result, not rejected.
pub fn check_theorem3(net: &Network, x: &DVector<f64>, xp: &DVector<f64>) -> Result<Theorem3Check> {
    let cfg = &net.config;
    let tx = net.forward(x)?;
    let txp = net.forward(xp)?;
    let kernel = kernels::ntk_d_expanded(net, &tx, &txp)?;
    let sigma_max = largest_singular_value(&kernel.block)?;
    let n_max = cfg.n_max();
    let bound = theorem3_bound(cfg.shortcuts, n_max);
    let c_phi = cfg.activation.derivative_bound();
    let mut max_layer_gain = 0.0f64;
    for l in 1..=net.depth() {
        max_layer_gain = max_layer_gain.max(c_phi * largest_singular_value(&net.scaled_weight(l))?);
    }
    let bounded_inputs = x.iter().chain(xp.iter()).all(|v| v.abs() <= 1.0);
    Ok(Theorem3Check {
        sigma_max,
        bound,
        n_max,
        holds: sigma_max <= bound,
        bounded_activation: cfg.activation.is_bounded(),
        max_layer_gain,
        stable_pertinent: max_layer_gain < 1.0,
        bounded_inputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub lambda_min: f64,
    pub sigma_max: f64,
    pub theorem3_bound: f64,
    pub n_max: usize,
    pub hermite_r: u32,
    pub mu_r: f64,
    pub input_dim: usize,
}

/// `lambda_min` of the `NTK_d` Gram over `xs`, `sigma_max` of the block on the
/// probe pair, and the Hermite coefficient of the activation's leaky part.
pub fn spectrum_report(
    net: &Network,
    xs: &[DVector<f64>],
    probe: (&DVector<f64>, &DVector<f64>),
    hermite_r: u32,
) -> Result<SpectrumReport> {
    let g = kernels::gram(net, KernelKind::NtkD, xs)?;
    let lambda_min = smallest_eigenvalue(&g.entries)?;
    let t3 = check_theorem3(net, probe.0, probe.1)?;
    let alpha = match net.config.activation {
        ActivationSpec::LeakyRelu { slope } => slope,
        _ => 0.0,
    };
    Ok(SpectrumReport {
        lambda_min,
        sigma_max: t3.sigma_max,
        theorem3_bound: t3.bound,
        n_max: t3.n_max,
        hermite_r,
        mu_r: hermite_coefficient(hermite_r, alpha)?,
        input_dim: net.config.input_dim,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSample {
    pub d: usize,
    pub trial: usize,
    pub lambda_min: f64,
    pub max_diagonal: f64,
}

impl ScalingSample {
    /// `lambda_min >= -1e-8 * max diagonal`.
    pub fn is_psd(&self) -> bool {
        self.lambda_min >= -1e-8 * self.max_diagonal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub d: usize,
    pub mean_lambda_min: f64,
    pub std_lambda_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub samples: Vec<ScalingSample>,
    /// Least-squares fit of mean `lambda_min` against `d`; `None` with fewer
    /// than two distinct `d`.
    pub fit: Option<LinearFit>,
}

impl ScalingTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,mean_lambda_min,std_lambda_min\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.16e},{:.16e}\n", r.d, r.mean_lambda_min, r.std_lambda_min));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSetup {
    pub d_values: Vec<usize>,
    pub n_samples: usize,
    pub trials: usize,
    pub template: NetworkConfig,
    pub train: TrainConfig,
    pub variant: SphereVariant,
    pub seed: u64,
}

/// For each `d`, trains the template network briefly on well-scaled inputs
/// and records `lambda_min` of the `NTK_d` Gram over the training inputs.
/// Trial `t` uses seed `seed + t` (independent of `d`).
pub fn lambda_min_scaling_experiment(setup: &ScalingSetup) -> Result<ScalingTable> {
    if setup.trials == 0 {
        return Err(Error::Domain("trials must be >= 1".into()));
    }
    if setup.d_values.is_empty() {
        return Err(Error::Domain("d_values must not be empty".into()));
    }
    let jobs: Vec<(usize, usize)> = setup
        .d_values
        .iter()
        .flat_map(|&d| (0..setup.trials).map(move |t| (d, t)))
        .collect();
    let samples: Vec<ScalingSample> = jobs
        .par_iter()
        .map(|&(d, trial)| -> Result<ScalingSample> {
            let trial_seed = setup.seed.wrapping_add(trial as u64);
            let mut cfg = setup.template.clone();
            cfg.input_dim = d;
            let data = data::gen_wellscaled(
                setup.n_samples,
                d,
                LabelKind::StandardNormal,
                setup.variant,
                stats::derive_seed(trial_seed, 1),
            )?;
            let net = Network::init(cfg, stats::derive_seed(trial_seed, 2))?;
            let mut train = setup.train.clone();
            train.seed = stats::derive_seed(trial_seed, 3);
            let (net, _) = training::train(net, &data.x, &data.y, &train)?;
            let g = kernels::gram(&net, KernelKind::NtkD, &data.x)?;
            Ok(ScalingSample {
                d,
                trial,
                lambda_min: smallest_eigenvalue(&g.entries)?,
                max_diagonal: g.max_diagonal(),
            })
        })
        .collect::<Result<_>>()?;

    let rows: Vec<ScalingRow> = setup
        .d_values
        .iter()
        .map(|&d| {
            let vals: Vec<f64> = samples.iter().filter(|s| s.d == d).map(|s| s.lambda_min).collect();
            ScalingRow {
                d,
                mean_lambda_min: stats::mean(&vals),
                std_lambda_min: stats::std_dev(&vals),
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.d as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_lambda_min).collect();
    let fit = stats::linear_fit(&xs, &ys);
    Ok(ScalingTable { rows, samples, fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_examples() {
        assert!((smallest_eigenvalue(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0, -1.0]));
        assert!((smallest_eigenvalue(&d).unwrap() + 1.0).abs() < 1e-14);
        let s = DMatrix::from_element(1, 1, 3.5);
        assert_eq!(smallest_eigenvalue(&s).unwrap(), 3.5);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(smallest_eigenvalue(&asym), Err(Error::Contract(_))));
    }

    #[test]
    fn lanczos_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 120;
        let a: DMatrix<f64> = DMatrix::from_fn(n, 40, |_, _| StandardNormal.sample(&mut rng));
        // rank-deficient PSD part plus a small negative shift
        let m: DMatrix<f64> = &a * a.transpose() - DMatrix::<f64>::identity(n, n) * 0.25;
        let dense = m.symmetric_eigenvalues().min();
        let lanczos = smallest_eigenvalue_lanczos(&m).unwrap();
        assert!((dense - lanczos).abs() <= 1e-8 * m.amax(), "{dense} vs {lanczos}");
    }

    #[test]
    fn singular_value_examples() {
        assert_eq!(largest_singular_value(&DMatrix::zeros(3, 2)).unwrap(), 0.0);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        assert!((largest_singular_value(&d).unwrap() - 3.0).abs() < 1e-9);
        let u = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let v = DVector::from_vec(vec![0.0, 3.0 / 2f64.sqrt(), -3.0 / 2f64.sqrt()]);
        let outer = &u * v.transpose();
        assert!((largest_singular_value(&outer).unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn singular_value_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m: DMatrix<f64> = DMatrix::from_fn(7, 5, |_, _| StandardNormal.sample(&mut rng));
            let svd = m.clone().svd(false, false).singular_values.max();
            let power = largest_singular_value(&m).unwrap();
            assert!((svd - power).abs() <= 1e-6 * svd);
        }
    }

    #[test]
    fn hermite_values() {
        let h2 = hermite_coefficient(2, 0.0).unwrap();
        assert!((h2 - 1.0 / (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((h2 - 0.2820948).abs() < 1e-7);
        let h4 = hermite_coefficient(4, 0.0).unwrap();
        assert!((h4 + 1.0 / (48.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert_eq!(hermite_coefficient(2, 1.0).unwrap(), 0.0);
        assert!(matches!(hermite_coefficient(3, 0.0), Err(Error::Domain(_))));
        assert!(matches!(hermite_coefficient(0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn hermite_sign_and_decay() {
        for alpha in [0.0, 0.1, 0.5] {
            let mut prev = f64::INFINITY;
            for r in (2..=30).step_by(2) {
                let mu = hermite_coefficient(r, alpha).unwrap();
                let expected_sign = if (r / 2) % 2 == 1 { 1.0 } else { -1.0 };
                assert_eq!(mu.signum(), expected_sign);
                assert!(mu.abs() < prev);
                prev = mu.abs();
            }
        }
    }

    #[test]
    fn theorem3_arithmetic() {
        assert_eq!(theorem3_bound(10, 20), 14000.0);
        assert_eq!(theorem3_bound(1, 1), 0.5);
    }

    #[test]
    fn theorem3_zero_net() {
        let mut cfg = NetworkConfig::uniform(2, 2, 3, 2, 2, ActivationSpec::Tanh);
        cfg.weight_std = 0.0;
        let net = Network::init(cfg, 0).unwrap();
        let x = DVector::from_vec(vec![0.5, -0.5]);
        let check = check_theorem3(&net, &x, &x).unwrap();
        assert_eq!(check.sigma_max, 0.0);
        assert!(check.holds);
        assert!(check.preconditions_met());
    }
}
