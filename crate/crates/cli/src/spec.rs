//! Experiment specification files.

use std::path::{Path, PathBuf};

use dntk::data::{CircleSpacing, SphereVariant};
use dntk::{NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory that relative dataset paths resolve against.
pub const DATA_DIR_ENV: &str = "DNTK_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Sine,
    ImageRegression,
    HbarKSweep,
    LambdaMinScaling,
    SigmaMaxScaling,
    Invariance,
    Gaussianity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetName {
    pub fn input_dim(self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => 784,
            DatasetName::Cifar10 => 3072,
        }
    }
}

/// Experiment-specific data options. Unset fields take the documented
/// defaults when the spec is resolved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_paths: Option<Vec<PathBuf>>,
    /// Total samples drawn (image and scaling experiments).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_values: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_values: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbar_values: Option<Vec<usize>>,
    /// Epochs at which kernels are evaluated during training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_gammas: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circle_spacing: Option<CircleSpacing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<SphereVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_bins: Option<usize>,
    /// Use hidden width `K^2` in the invariance experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_k_squared: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<[Vec<f64>; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    pub trials: usize,
    pub output_dir: PathBuf,
    pub network: NetworkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wide_network: Option<NetworkConfig>,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSpec,
}

/// Spec problems detected before any work starts.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ValidationError> {
    Err(ValidationError(msg.into()))
}

fn require<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T, ValidationError> {
    v.as_ref()
        .ok_or_else(|| ValidationError(format!("missing required field data.{field}")))
}

fn nonempty(v: &Option<Vec<usize>>, field: &str) -> Result<(), ValidationError> {
    let values = require(v, field)?;
    if values.is_empty() || values.contains(&0) {
        return invalid(format!("data.{field} must be a non-empty list of positive integers"));
    }
    Ok(())
}

/// Resolves a dataset path against `DNTK_DATA_DIR` when it is relative.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<ExperimentSpec, ValidationError> {
        serde_json::from_str(text).map_err(|e| ValidationError(format!("invalid spec: {e}")))
    }

    /// Fills unset data options with their defaults for this experiment.
    pub fn resolve(mut self) -> ExperimentSpec {
        let d = &mut self.data;
        let epochs = self.train.epochs;
        match self.experiment {
            ExperimentKind::Sine => {
                d.n_train.get_or_insert(300);
                d.n_test.get_or_insert(200);
            }
            ExperimentKind::ImageRegression | ExperimentKind::HbarKSweep => {
                d.checkpoints.get_or_insert_with(|| vec![0, epochs]);
                d.angle_bins.get_or_insert(18);
            }
            ExperimentKind::LambdaMinScaling => {
                d.n_samples.get_or_insert(100);
                d.variant.get_or_insert(SphereVariant::Gaussian);
            }
            ExperimentKind::SigmaMaxScaling => {
                d.n_samples.get_or_insert(100);
                d.variant.get_or_insert(SphereVariant::Sphere);
                d.probe.get_or_insert_with(|| [vec![0.0, 1.0], vec![1.0, 0.0]]);
            }
            ExperimentKind::Invariance => {
                d.n_samples.get_or_insert(100);
                d.n_gammas.get_or_insert(64);
                d.circle_spacing.get_or_insert(CircleSpacing::Uniform);
                d.width_k_squared.get_or_insert(true);
            }
            ExperimentKind::Gaussianity => {
                d.repetitions.get_or_insert(1);
                let n = self.network.input_dim;
                d.probe.get_or_insert_with(|| {
                    let mut e1 = vec![0.0; n];
                    e1[0] = 1.0;
                    [e1, vec![1.0 / (n as f64).sqrt(); n]]
                });
            }
        }
        self
    }

    /// Checks experiment-specific requirements; call on a resolved spec.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.trials == 0 {
            return invalid("trials must be >= 1");
        }
        self.network
            .validate()
            .map_err(|e| ValidationError(format!("network: {e}")))?;
        if let Some(w) = &self.wide_network {
            w.validate()
                .map_err(|e| ValidationError(format!("wide_network: {e}")))?;
        }
        self.train
            .validate()
            .map_err(|e| ValidationError(format!("train: {e}")))?;
        let d = &self.data;
        match self.experiment {
            ExperimentKind::Sine => {
                for (name, net) in [("network", Some(&self.network)), ("wide_network", self.wide_network.as_ref())] {
                    if let Some(net) = net {
                        if net.input_dim != 1 || net.output_dim != 1 {
                            return invalid(format!("{name}: sine needs input_dim = output_dim = 1"));
                        }
                    }
                }
                if d.n_train == Some(0) || d.n_test == Some(0) {
                    return invalid("data.n_train and data.n_test must be positive");
                }
            }
            ExperimentKind::ImageRegression | ExperimentKind::HbarKSweep => {
                let dataset = *require(&d.dataset, "dataset")?;
                match dataset {
                    DatasetName::Mnist | DatasetName::FashionMnist => {
                        for (field, path) in [("images_path", &d.images_path), ("labels_path", &d.labels_path)] {
                            let p = resolve_data_path(require(path, field)?);
                            if !p.is_file() {
                                return invalid(format!("data.{field}: file not found: {}", p.display()));
                            }
                        }
                    }
                    DatasetName::Cifar10 => {
                        let paths = require(&d.batch_paths, "batch_paths")?;
                        if paths.is_empty() {
                            return invalid("data.batch_paths must not be empty");
                        }
                        for p in paths {
                            let p = resolve_data_path(p);
                            if !p.is_file() {
                                return invalid(format!("data.batch_paths: file not found: {}", p.display()));
                            }
                        }
                    }
                }
                if *require(&d.n_samples, "n_samples")? < 2 {
                    return invalid("data.n_samples must be >= 2");
                }
                let nets = [Some(&self.network), self.wide_network.as_ref()];
                for net in nets.into_iter().flatten() {
                    if net.input_dim != dataset.input_dim() || net.output_dim != dntk::data::IMAGE_CLASSES {
                        return invalid(format!(
                            "networks for {dataset:?} need input_dim = {} and output_dim = {}",
                            dataset.input_dim(),
                            dntk::data::IMAGE_CLASSES
                        ));
                    }
                }
                if self.experiment == ExperimentKind::HbarKSweep {
                    nonempty(&d.k_values, "k_values")?;
                    nonempty(&d.hbar_values, "hbar_values")?;
                }
                if let Some(c) = &d.checkpoints {
                    if c.iter().any(|&e| e > self.train.epochs) {
                        return invalid("data.checkpoints must not exceed train.epochs");
                    }
                }
            }
            ExperimentKind::LambdaMinScaling => {
                nonempty(&d.d_values, "d_values")?;
                if self.network.output_dim != 1 {
                    return invalid("network: lambda_min_scaling uses scalar labels (output_dim = 1)");
                }
            }
            ExperimentKind::SigmaMaxScaling => {
                nonempty(&d.k_values, "k_values")?;
                if self.network.output_dim != 1 {
                    return invalid("network: sigma_max_scaling uses scalar labels (output_dim = 1)");
                }
                self.check_probe()?;
            }
            ExperimentKind::Invariance => {
                nonempty(&d.k_values, "k_values")?;
                if self.network.input_dim != 2 || self.network.output_dim != 1 {
                    return invalid("network: invariance needs input_dim = 2 and output_dim = 1");
                }
                if d.n_gammas.unwrap_or(1) == 0 {
                    return invalid("data.n_gammas must be positive");
                }
            }
            ExperimentKind::Gaussianity => {
                nonempty(&d.k_values, "k_values")?;
                if d.repetitions == Some(0) {
                    return invalid("data.repetitions must be positive");
                }
                self.check_probe()?;
            }
        }
        Ok(())
    }

    fn check_probe(&self) -> Result<(), ValidationError> {
        let probe = require(&self.data.probe, "probe")?;
        let n = self.network.input_dim;
        if probe.iter().any(|p| p.len() != n) {
            return invalid(format!("data.probe vectors must have length input_dim = {n}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINE: &str = r#"{
        "experiment": "sine",
        "trials": 2,
        "output_dir": "out",
        "network": {"input_dim": 1, "output_dim": 1, "hbar": 2, "shortcuts": 2,
                    "widths": [3, 3, 3, 3], "activation": {"kind": "relu"}, "weight_std": 0.2},
        "train": {"epochs": 1}
    }"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let spec = ExperimentSpec::from_json(SINE).unwrap().resolve();
        assert_eq!(spec.data.n_train, Some(300));
        assert_eq!(spec.train.learning_rate, 0.001);
        assert_eq!(spec.train.batch_size, 64);
        spec.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_names_rejected() {
        let typo = SINE.replace("\"trials\"", "\"trails\"");
        assert!(ExperimentSpec::from_json(&typo).unwrap_err().0.contains("trails"));
        let bad = SINE.replace("\"sine\"", "\"cosine\"");
        let err = ExperimentSpec::from_json(&bad).unwrap_err().0;
        assert!(err.contains("lambda_min_scaling") && err.contains("gaussianity"), "{err}");
    }

    #[test]
    fn image_regression_requires_paths() {
        let text = SINE.replace("\"sine\"", "\"image_regression\"");
        let mut spec = ExperimentSpec::from_json(&text).unwrap().resolve();
        spec.data.dataset = Some(DatasetName::Mnist);
        let err = spec.validate().unwrap_err().0;
        assert!(err.contains("data.images_path"), "{err}");
    }

    #[test]
    fn echo_roundtrips() {
        let spec = ExperimentSpec::from_json(SINE).unwrap().resolve();
        let text = serde_json::to_string_pretty(&spec).unwrap();
        assert_eq!(ExperimentSpec::from_json(&text).unwrap(), spec);
    }
}
