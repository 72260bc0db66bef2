//! Experiment runners. Each returns the `results.csv` body, a summary
//! document and any warnings; file output is handled by the caller.

use std::f64::consts::PI;

use dntk::data::{self, CircleSpacing, Dataset, LabelKind, SphereVariant};
use dntk::kernels::{self, KernelKind};
use dntk::spectrum::{self, ScalingSetup};
use dntk::stats::{self, derive_seed};
use dntk::training::{self, ProbePair};
use dntk::{regression, Error, Network, NetworkConfig, TrainConfig};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::spec::{resolve_data_path, DatasetName, ExperimentKind, ExperimentSpec};

/// Below this many samples the normality statistics are flagged as unreliable.
pub const MIN_RELIABLE_TRIALS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    Validation(String),
    Numeric(String),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Io(_) => 1,
            RunError::Validation(_) => 2,
            RunError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Validation(m) => write!(f, "validation error: {m}"),
            RunError::Numeric(m) => write!(f, "numeric failure: {m}"),
            RunError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> RunError {
        match e {
            Error::Io { .. } => RunError::Io(e.to_string()),
            Error::Format(_) | Error::Length(_) => RunError::Validation(e.to_string()),
            _ => RunError::Numeric(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub csv: String,
    pub summary: Value,
    pub warnings: Vec<String>,
    /// Additional CSV files written next to `results.csv`.
    pub extra: Vec<(String, String)>,
    /// Set when some group of trials produced no usable result.
    pub numeric_failure: Option<String>,
}

impl Outcome {
    fn new(csv: String, summary: Value) -> Outcome {
        Outcome {
            csv,
            summary,
            warnings: Vec::new(),
            extra: Vec::new(),
            numeric_failure: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Diverged,
    Error,
}

impl Status {
    fn of(e: &Error) -> Status {
        match e {
            Error::Divergence { .. } | Error::NonFinite { .. } | Error::NonFiniteKernel { .. } => Status::Diverged,
            _ => Status::Error,
        }
    }
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| RunError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| RunError::Io(e.to_string()))
}

fn trial_seed(spec: &ExperimentSpec, trial: usize) -> u64 {
    spec.seed.wrapping_add(trial as u64)
}

/// `template` with `K` shortcuts, separation `hbar` and every hidden width `n`.
pub fn reshape(template: &NetworkConfig, shortcuts: usize, hbar: usize, width: usize) -> NetworkConfig {
    let mut cfg = template.clone();
    cfg.shortcuts = shortcuts;
    cfg.hbar = hbar;
    cfg.widths = vec![width; shortcuts * hbar];
    cfg
}

fn train_cfg(spec: &ExperimentSpec, seed: u64) -> TrainConfig {
    let mut t = spec.train.clone();
    t.seed = seed;
    t
}

/// Mean and standard deviation of the finite entries; `None` when empty.
fn finite_stats(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (None, None);
    }
    let std = if v.len() > 1 { Some(stats::std_dev(&v)) } else { None };
    (Some(stats::mean(&v)), std)
}

pub fn run(spec: &ExperimentSpec) -> Result<Outcome, RunError> {
    match spec.experiment {
        ExperimentKind::Sine => sine(spec),
        ExperimentKind::ImageRegression => image_regression(spec),
        ExperimentKind::HbarKSweep => hbar_k_sweep(spec),
        ExperimentKind::LambdaMinScaling => lambda_min_scaling(spec),
        ExperimentKind::SigmaMaxScaling => sigma_max_scaling(spec),
        ExperimentKind::Invariance => invariance(spec),
        ExperimentKind::Gaussianity => gaussianity(spec),
    }
}

// ---------------------------------------------------------------- sine

#[derive(Debug, Clone, Serialize)]
struct SineRow {
    trial: usize,
    kernel: &'static str,
    status: Status,
    rmse: f64,
    final_loss: f64,
}

/// Trains `cfg`, then kernel-regresses `test` from `train` with the trained
/// network's kernel. Returns `(rmse, final training loss)`.
pub fn regression_rmse(
    cfg: &NetworkConfig,
    kind: KernelKind,
    train: &Dataset,
    test: &Dataset,
    tcfg: &TrainConfig,
    net_seed: u64,
) -> dntk::Result<(f64, f64)> {
    let net = Network::init(cfg.clone(), net_seed)?;
    let (net, curve) = training::train(net, &train.x, &train.y, tcfg)?;
    let ft = kernels::features(&net, kind, &train.x)?;
    let fs = kernels::features(&net, kind, &test.x)?;
    let k_train = kernels::gram_from_features(&ft)?.entries;
    let k_cross = kernels::cross_from_features(&fs, &ft)?;
    let k_test = kernels::gram_from_features(&fs)?.entries;
    let r = regression::gp_regress(
        &k_train,
        &k_cross,
        &k_test,
        &train.label_matrix(),
        regression::default_jitter(&k_train),
    )?;
    Ok((regression::rmse(&r.mean, &test.label_matrix()), curve[curve.len() - 1]))
}

fn kernel_nets(spec: &ExperimentSpec) -> Vec<(&'static str, KernelKind, &NetworkConfig)> {
    let mut out = vec![("ntk_d", KernelKind::NtkD, &spec.network)];
    if let Some(w) = &spec.wide_network {
        out.push(("ntk_w", KernelKind::NtkW, w));
    }
    out
}

fn sine(spec: &ExperimentSpec) -> Result<Outcome, RunError> {
    let n_train = spec.data.n_train.unwrap_or(300);
    let n_test = spec.data.n_test.unwrap_or(200);
    let nets = kernel_nets(spec);
    let jobs: Vec<(usize, usize)> = (0..spec.trials)
        .flat_map(|t| (0..nets.len()).map(move |k| (t, k)))
        .collect();
    let rows: Vec<SineRow> = jobs
        .par_iter()
        .map(|&(trial, k)| -> Result<SineRow, RunError> {
            let s = trial_seed(spec, trial);
            let (name, kind, cfg) = nets[k];
            let all = data::gen_sine(n_train + n_test, derive_seed(s, 1))?;
            let idx: Vec<usize> = (0..n_train + n_test).collect();
            let (train, test) = (all.subset(&idx[..n_train]), all.subset(&idx[n_train..]));
            let res = regression_rmse(cfg, kind, &train, &test, &train_cfg(spec, derive_seed(s, 3)), derive_seed(s, 2));
            Ok(match res {
                Ok((rmse, final_loss)) => SineRow { trial, kernel: name, status: Status::Ok, rmse, final_loss },
                Err(e) => SineRow { trial, kernel: name, status: Status::of(&e), rmse: f64::NAN, final_loss: f64::NAN },
            })
        })
        .collect::<Result<_, _>>()?;

    let mut out = Outcome::new(csv_string(&rows)?, Value::Null);
    let mut per_kernel = serde_json::Map::new();
    for (name, _, _) in &nets {
        let mine: Vec<&SineRow> = rows.iter().filter(|r| r.kernel == *name).collect();
        let ok: Vec<f64> = mine.iter().filter(|r| r.status == Status::Ok).map(|r| r.rmse).collect();
        let diverged = mine.iter().filter(|r| r.status == Status::Diverged).count();
        if ok.is_empty() {
            out.numeric_failure = Some(format!("{name}: no trial finished ({diverged} diverged)"));
        }
        let (mean, std) = finite_stats(&ok);
        per_kernel.insert(
            name.to_string(),
            json!({"mean_rmse": mean, "std_rmse": std, "ok_trials": ok.len(), "diverged_trials": diverged}),
        );
    }
    out.summary = json!({"experiment": "sine", "trials": spec.trials, "kernels": per_kernel});
    Ok(out)
}

// ---------------------------------------------------------------- images

pub fn load_images(spec: &ExperimentSpec, warnings: &mut Vec<String>) -> Result<Dataset, RunError> {
    let d = &spec.data;
    let want = d.n_samples.unwrap_or(0);
    let ds = match d.dataset.ok_or_else(|| RunError::Validation("missing data.dataset".into()))? {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let images = resolve_data_path(d.images_path.as_deref().unwrap_or_else(|| std::path::Path::new("")));
            let labels = resolve_data_path(d.labels_path.as_deref().unwrap_or_else(|| std::path::Path::new("")));
            data::load_idx(&images, &labels, Some(want))?
        }
        DatasetName::Cifar10 => {
            let paths: Vec<_> = d.batch_paths.iter().flatten().map(|p| resolve_data_path(p)).collect();
            data::load_cifar10(&paths, Some(want))?
        }
    };
    if ds.len() < want {
        warnings.push(format!("requested {want} samples but only {} are available", ds.len()));
    }
    if ds.len() < 2 {
        return Err(RunError::Validation("dataset holds fewer than 2 samples".into()));
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointRow {
    pub epoch: usize,
    pub status: Status,
    pub accuracy: f64,
    pub mean_angle: f64,
    pub train_loss: f64,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AngleRow {
    pub epoch: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

fn evaluate_checkpoint(
    net: &Network,
    kind: KernelKind,
    train: &Dataset,
    test: &Dataset,
    bins: usize,
) -> dntk::Result<(f64, kernels::AngleStats)> {
    let ft = kernels::features(net, kind, &train.x)?;
    let fs = kernels::features(net, kind, &test.x)?;
    let g = kernels::gram_from_features(&ft)?;
    let k_cross = kernels::cross_from_features(&fs, &ft)?;
    let k_test = kernels::gram_from_features(&fs)?.entries;
    let r = regression::gp_regress(
        &g.entries,
        &k_cross,
        &k_test,
        &train.label_matrix(),
        regression::default_jitter(&g.entries),
    )?;
    let acc = regression::classify(&r, &test.label_matrix())?.accuracy;
    Ok((acc, kernels::angle_stats(&g, bins)?))
}

/// Trains `cfg` and evaluates kernel-regression accuracy and the angle
/// histogram of the training Gram at each checkpoint epoch. A failure ends
/// the curve with a single non-ok row.
pub fn accuracy_curve(
    cfg: &NetworkConfig,
    kind: KernelKind,
    train: &Dataset,
    test: &Dataset,
    tcfg: &TrainConfig,
    net_seed: u64,
    checkpoints: &[usize],
    bins: usize,
) -> (Vec<CheckpointRow>, Vec<AngleRow>) {
    let mut rows = Vec::new();
    let mut angles = Vec::new();
    let failed = |epoch, e: &Error| CheckpointRow {
        epoch,
        status: Status::of(e),
        accuracy: f64::NAN,
        mean_angle: f64::NAN,
        train_loss: f64::NAN,
        error: Some(e.to_string()),
    };
    let mut net = match Network::init(cfg.clone(), net_seed) {
        Ok(n) => n,
        Err(e) => return (vec![failed(0, &e)], angles),
    };
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    for epoch in 0..=last {
        if epoch > 0 {
            if let Err(e) = training::train_epoch(&mut net, &train.x, &train.y, tcfg, epoch) {
                rows.push(failed(epoch, &e));
                return (rows, angles);
            }
        }
        if !checkpoints.contains(&epoch) {
            continue;
        }
        let eval = training::mean_loss(&net, &train.x, &train.y)
            .and_then(|loss| evaluate_checkpoint(&net, kind, train, test, bins).map(|r| (loss, r)));
        match eval {
            Ok((train_loss, (accuracy, st))) => {
                rows.push(CheckpointRow {
                    epoch,
                    status: Status::Ok,
                    accuracy,
                    mean_angle: st.mean(),
                    train_loss,
                    error: None,
                });
                for (b, &count) in st.counts.iter().enumerate() {
                    angles.push(AngleRow { epoch, bin_lo: st.bin_edges[b], bin_hi: st.bin_edges[b + 1], count });
                }
            }
            Err(e) => {
                rows.push(failed(epoch, &e));
                return (rows, angles);
            }
        }
    }
    (rows, angles)
}

#[derive(Debug, Clone, Serialize)]
struct ImageRow {
    trial: usize,
    kernel: &'static str,
    #[serde(rename = "K")]
    shortcuts: usize,
    hbar: usize,
    epoch: usize,
    status: Status,
    accuracy: f64,
    mean_angle: f64,
    train_loss: f64,
    #[serde(skip)]
    error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct ImageAngleRow {
    trial: usize,
    kernel: &'static str,
    #[serde(rename = "K")]
    shortcuts: usize,
    hbar: usize,
    epoch: usize,
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
}

struct ImageJob<'a> {
    trial: usize,
    kernel: &'static str,
    kind: KernelKind,
    cfg: std::borrow::Cow<'a, NetworkConfig>,
}

fn run_image_jobs(spec: &ExperimentSpec, jobs: Vec<ImageJob<'_>>) -> Result<Outcome, RunError> {
    let mut warnings = Vec::new();
    let ds = load_images(spec, &mut warnings)?;
    let checkpoints = spec.data.checkpoints.clone().unwrap_or_else(|| vec![0, spec.train.epochs]);
    let bins = spec.data.angle_bins.unwrap_or(18);
    let results: Vec<(Vec<ImageRow>, Vec<ImageAngleRow>)> = jobs
        .par_iter()
        .map(|job| {
            let s = trial_seed(spec, job.trial);
            let (train, test) = ds.split_half(derive_seed(s, 1));
            let tcfg = train_cfg(spec, derive_seed(s, 3));
            let (rows, angles) =
                accuracy_curve(&job.cfg, job.kind, &train, &test, &tcfg, derive_seed(s, 2), &checkpoints, bins);
            let tag = |p: CheckpointRow| ImageRow {
                trial: job.trial,
                kernel: job.kernel,
                shortcuts: job.cfg.shortcuts,
                hbar: job.cfg.hbar,
                epoch: p.epoch,
                status: p.status,
                accuracy: p.accuracy,
                mean_angle: p.mean_angle,
                train_loss: p.train_loss,
                error: p.error,
            };
            let tag_angle = |b: AngleRow| ImageAngleRow {
                trial: job.trial,
                kernel: job.kernel,
                shortcuts: job.cfg.shortcuts,
                hbar: job.cfg.hbar,
                epoch: b.epoch,
                bin_lo: b.bin_lo,
                bin_hi: b.bin_hi,
                count: b.count,
            };
            (rows.into_iter().map(tag).collect(), angles.into_iter().map(tag_angle).collect())
        })
        .collect();
    let rows: Vec<ImageRow> = results.iter().flat_map(|r| r.0.clone()).collect();
    let angle_rows: Vec<ImageAngleRow> = results.iter().flat_map(|r| r.1.clone()).collect();

    let mut groups: Vec<(&'static str, usize, usize)> = Vec::new();
    for j in &jobs {
        let key = (j.kernel, j.cfg.shortcuts, j.cfg.hbar);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut numeric_failure = None;
    let mut summary_groups = Vec::new();
    for (kernel, k, hbar) in groups {
        let mine: Vec<&ImageRow> = rows
            .iter()
            .filter(|r| r.kernel == kernel && r.shortcuts == k && r.hbar == hbar)
            .collect();
        let mut per_epoch = Vec::new();
        for &epoch in &checkpoints {
            let acc: Vec<f64> = mine
                .iter()
                .filter(|r| r.epoch == epoch && r.status == Status::Ok)
                .map(|r| r.accuracy)
                .collect();
            let ang: Vec<f64> = mine
                .iter()
                .filter(|r| r.epoch == epoch && r.status == Status::Ok)
                .map(|r| r.mean_angle)
                .collect();
            let (mean_acc, std_acc) = finite_stats(&acc);
            let (mean_angle, _) = finite_stats(&ang);
            per_epoch.push(json!({
                "epoch": epoch, "mean_accuracy": mean_acc, "std_accuracy": std_acc,
                "mean_angle": mean_angle, "ok_trials": acc.len(),
            }));
        }
        let failed = mine.iter().filter(|r| r.status != Status::Ok).count();
        let final_ok = mine
            .iter()
            .filter(|r| r.status == Status::Ok && Some(&r.epoch) == checkpoints.iter().max())
            .count();
        if final_ok == 0 {
            numeric_failure = Some(format!("{kernel} K={k} hbar={hbar}: no trial reached the final checkpoint"));
        }
        let mut errors: Vec<&str> = mine.iter().filter_map(|r| r.error.as_deref()).collect();
        errors.sort_unstable();
        errors.dedup();
        summary_groups.push(json!({
            "kernel": kernel, "K": k, "hbar": hbar, "failed_trials": failed, "errors": errors,
            "checkpoints": per_epoch,
        }));
    }
    let mut out = Outcome::new(
        csv_string(&rows)?,
        json!({
            "experiment": match spec.experiment { ExperimentKind::HbarKSweep => "hbar_k_sweep", _ => "image_regression" },
            "trials": spec.trials,
            "n_samples": ds.len(),
            "groups": summary_groups,
        }),
    );
    out.extra.push(("angles.csv".into(), csv_string(&angle_rows)?));
    out.warnings = warnings;
    out.numeric_failure = numeric_failure;
    Ok(out)
}

fn image_regression(spec: &ExperimentSpec) -> Result<Outcome, RunError> {
    let nets = kernel_nets(spec);
    let jobs = (0..spec.trials)
        .flat_map(|trial| {
            nets.iter().map(move |&(kernel, kind, cfg)| ImageJob {
                trial,
                kernel,
                kind,
                cfg: std::borrow::Cow::Borrowed(cfg),
            })
        })
        .collect();
    run_image_jobs(spec, jobs)
}

fn hbar_k_sweep(spec: &ExperimentSpec) -> Result<Outcome, RunError> {
    let width = spec.network.widths[0];
    let mut jobs = Vec::new();
    for &k in spec.data.k_values.iter().flatten() {
        for &hbar in spec.data.hbar_values.iter().flatten() {
            let cfg = reshape(&spec.network, k, hbar, width);
            for trial in 0..spec.trials {
                jobs.push(ImageJob {
                    trial,
                    kernel: "ntk_d",
                    kind: KernelKind::NtkD,
                    cfg: std::borrow::Cow::Owned(cfg.clone()),
                });
            }
        }
    }
    run_image_jobs(spec, jobs)
}

// ---------------------------------------------------------------- spectra

#[derive(Debug, Clone, Serialize)]
struct LambdaRow {
    d: usize,
    trial: usize,
    lambda_min: f64,
    max_diagonal: f64,
    psd: bool,
}

fn lambda_min_scaling(spec: &ExperimentSpec) -> Result<Outcome, RunError> {
    let setup = ScalingSetup {
        d_values: spec.data.d_values.clone().unwrap_or_default(),
        n_samples: spec.data.n_samples.unwrap_or(100),
        trials: spec.trials,
        template: spec.network.clone(),
        train: spec.train.clone(),
        variant: spec.data.variant.unwrap_or(SphereVariant::Gaussian),
        seed: spec.seed,
    };
    let table = spectrum::lambda_min_scaling_experiment(&setup)?;
    let rows: Vec<LambdaRow> = table
        .samples
        .iter()
        .map(|s| LambdaRow {
            d: s.d,
            trial: s.trial,
            lambda_min: s.lambda_min,
            max_diagonal: s.max_diagonal,
            psd: s.is_psd(),
        })
        .collect();
    let violations = rows.iter().filter(|r| !r.psd).count();
    let mut out = Outcome::new(
        csv_string(&rows)?,
        json!({
            "experiment": "lambda_min_scaling",
            "trials": spec.trials,
            "rows": table.rows,
            "fit": table.fit,
            "psd_violations": violations,
        }),
    );
    out.extra.push(("lambda_min_by_d.csv".into(), table.to_csv()));
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct SigmaRow {
    #[serde(rename = "K")]
    shortcuts: usize,
    trial: usize,
    status: Status,
    sigma_max: f64,
    bound: f64,
    holds: bool,
    preconditions_met: bool,
}

fn sigma_max_scaling(spec: &ExperimentSpec) -> Result<Outcome, RunError> {
    let [p0, p1] = spec.data.probe.clone().expect("resolved spec has a probe");
    let (x, xp) = (DVector::from_vec(p0), DVector::from_vec(p1));
    let n = spec.data.n_samples.unwrap_or(100);
    let variant = spec.data.variant.unwrap_or(SphereVariant::Sphere);
    let width = spec.network.widths[0];
    let hbar = spec.network.hbar;
    let k_values = spec.data.k_values.clone().unwrap_or_default();
    let jobs: Vec<(usize, usize)> = k_values
        .iter()
        .flat_map(|&k| (0..spec.trials).map(move |t| (k, t)))
        .collect();
    let rows: Vec<SigmaRow> = jobs
        .par_iter()
        .map(|&(k, trial)| {
            let s = trial_seed(spec, trial);
            let cfg = reshape(&spec.network, k, hbar, width);
            let bound = spectrum::theorem3_bound(k, cfg.n_max());
            let run = || -> dntk::Result<spectrum::Theorem3Check> {
                let mut net = Network::init(cfg.clone(), derive_seed(derive_seed(s, 2), k as u64))?;
                if spec.train.epochs > 0 {
                    let ds = data::gen_wellscaled(n, cfg.input_dim, LabelKind::StandardNormal, variant, derive_seed(s, 1))?;
                    net = training::train(net, &ds.x, &ds.y, &train_cfg(spec, derive_seed(s, 3)))?.0;
                }
                spectrum::check_theorem3(&net, &x, &xp)
            };
            match run() {
                Ok(c) => SigmaRow {
                    shortcuts: k,
                    trial,
                    status: Status::Ok,
                    sigma_max: c.sigma_max,
                    bound: c.bound,
                    holds: c.holds,
                    preconditions_met: c.preconditions_met(),
                },
                Err(e) => SigmaRow {
                    shortcuts: k,
                    trial,
                    status: Status::of(&e),
                    sigma_max: f64::NAN,
                    bound,
                    holds: false,
                    preconditions_met: false,
                },
            }
        })
        .collect();

    let mut numeric_failure = None;
    let mut per_k = Vec::new();
    let (mut ks, mut means) = (Vec::new(), Vec::new());
    for &k in &k_values {
        let ok: Vec<&SigmaRow> = rows.iter().filter(|r| r.shortcuts == k && r.status == Status::Ok).collect();
        let vals: Vec<f64> = ok.iter().map(|r| r.sigma_max).collect();
        let (mean, std) = finite_stats(&vals);
        if let Some(m) = mean {
            ks.push(k as f64);
            means.push(m);
        } else {
            numeric_failure = Some(format!("K={k}: no trial finished"));
        }
        per_k.push(json!({
            "K": k,
            "mean_sigma_max": mean,
            "std_sigma_max": std,
            "bound": spectrum::theorem3_bound(k, reshape(&spec.network, k, hbar, width).n_max()),
            "violations": ok.iter().filter(|r| !r.holds).count(),
            "violations_with_preconditions": ok.iter().filter(|r| !r.holds && r.preconditions_met).count(),
            "failed_trials": spec.trials - ok.len(),
        }));
    }
    let mut out = Outcome::new(
        csv_string(&rows)?,
        json!({
            "experiment": "sigma_max_scaling",
            "trials": spec.trials,
            "per_k": per_k,
            "fit_vs_k": stats::linear_fit(&ks, &means),
        }),
    );
    out.numeric_failure = numeric_failure;
    Ok(out)
}

// ---------------------------------------------------------------- invariance

/// `x_fixed = (1, 0)` paired with `(cos g, sin g)` for `g = -pi + 2 pi i / n`.
pub fn circle_probes(n: usize) -> (Vec<f64>, Vec<ProbePair>) {
    let gammas: Vec<f64> = (0..n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect();
    let fixed = data::circle_point(0.0).0;
    let probes = gammas.iter().map(|&g| (fixed.clone(), data::circle_point(g).0)).collect();
    (gammas, probes)
}

#[derive(Debug, Clone, Serialize)]
struct DriftRow {
    #[serde(rename = "K")]
    shortcuts: usize,
    gamma: f64,
    mean_drift: f64,
    std_drift: f64,
}

#[derive(Debug, Clone, Serialize)]
struct TrialDriftRow {
    #[serde(rename = "K")]
    shortcuts: usize,
    trial: usize,
    epoch: usize,
    status: Status,
    mean_drift: f64,
    mean_trace_t0: f64,
}

fn invariance(spec: &ExperimentSpec) -> Result<Outcome, RunError> {
    let d = &spec.data;
    let k_values = d.k_values.clone().unwrap_or_default();
    let n_samples = d.n_samples.unwrap_or(100);
    let spacing = d.circle_spacing.unwrap_or(CircleSpacing::Uniform);
    let (gammas, probes) = circle_probes(d.n_gammas.unwrap_or(64));
    let checkpoints = d.checkpoints.clone().unwrap_or_else(|| vec![spec.train.epochs]);
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    let hbar = spec.network.hbar;
    let jobs: Vec<(usize, usize)> = k_values
        .iter()
        .flat_map(|&k| (0..spec.trials).map(move |t| (k, t)))
        .collect();
    let results: Vec<dntk::Result<Vec<training::DriftRecord>>> = jobs
        .par_iter()
        .map(|&(k, trial)| {
            let s = trial_seed(spec, trial);
            let width = if d.width_k_squared.unwrap_or(true) { k * k } else { spec.network.widths[0] };
            let cfg = reshape(&spec.network, k, hbar, width);
            let ds = data::gen_circle(n_samples, spacing, derive_seed(s, 1))?;
            let net = Network::init(cfg, derive_seed(s, 2))?;
            training::track_invariance(&net, &train_cfg(spec, derive_seed(s, 3)), &ds.x, &ds.y, &probes, &checkpoints)
        })
        .collect();

    let mut trial_rows = Vec::new();
    for (&(k, trial), res) in jobs.iter().zip(&results) {
        match res {
            Ok(records) => {
                for r in records {
                    trial_rows.push(TrialDriftRow {
                        shortcuts: k,
                        trial,
                        epoch: r.epoch,
                        status: Status::Ok,
                        mean_drift: r.mean_drift(),
                        mean_trace_t0: stats::mean(&r.values_t0),
                    });
                }
            }
            Err(e) => trial_rows.push(TrialDriftRow {
                shortcuts: k,
                trial,
                epoch: last,
                status: Status::of(e),
                mean_drift: f64::NAN,
                mean_trace_t0: f64::NAN,
            }),
        }
    }

    let mut rows = Vec::new();
    let mut per_k = Vec::new();
    let mut numeric_failure = None;
    let mut means = Vec::new();
    for &k in &k_values {
        let finals: Vec<&training::DriftRecord> = jobs
            .iter()
            .zip(&results)
            .filter(|((kk, _), _)| *kk == k)
            .filter_map(|(_, r)| r.as_ref().ok())
            .filter_map(|recs| recs.iter().find(|r| r.epoch == last))
            .collect();
        for (g, &gamma) in gammas.iter().enumerate() {
            let vals: Vec<f64> = finals.iter().map(|r| r.drift[g]).collect();
            let (mean, std) = finite_stats(&vals);
            rows.push(DriftRow {
                shortcuts: k,
                gamma,
                mean_drift: mean.unwrap_or(f64::NAN),
                std_drift: std.unwrap_or(f64::NAN),
            });
        }
        let trial_means: Vec<f64> = finals.iter().map(|r| r.mean_drift()).collect();
        let trace0: Vec<f64> = finals.iter().map(|r| stats::mean(&r.values_t0)).collect();
        let (mean, std) = finite_stats(&trial_means);
        if mean.is_none() {
            numeric_failure = Some(format!("K={k}: no trial finished"));
        }
        means.push(mean);
        per_k.push(json!({
            "K": k,
            "width": if d.width_k_squared.unwrap_or(true) { k * k } else { spec.network.widths[0] },
            "mean_drift": mean,
            "std_drift": std,
            "mean_trace_t0": finite_stats(&trace0).0,
            "ok_trials": finals.len(),
            "failed_trials": spec.trials - finals.len(),
        }));
    }
    let decreasing = means.len() > 1
        && means.iter().all(Option::is_some)
        && means.windows(2).all(|w| w[1] < w[0]);
    let mut out = Outcome::new(
        csv_string(&rows)?,
        json!({
            "experiment": "invariance",
            "trials": spec.trials,
            "epoch": last,
            "per_k": per_k,
            "drift_strictly_decreasing": decreasing,
        }),
    );
    out.extra.push(("trials.csv".into(), csv_string(&trial_rows)?));
    out.numeric_failure = numeric_failure;
    Ok(out)
}

// ---------------------------------------------------------------- gaussianity

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Normality {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    /// Kolmogorov-Smirnov distance of the standardized sample from `N(0, 1)`.
    pub ks: Option<f64>,
}

impl Normality {
    pub fn is_degenerate(&self) -> bool {
        self.skewness.is_none()
    }
}

pub fn normality(samples: &[f64]) -> Normality {
    let n = samples.len();
    let mean = if n > 0 { stats::mean(samples) } else { f64::NAN };
    let std = if n > 1 { stats::std_dev(samples) } else { f64::NAN };
    let skewness = stats::skewness(samples);
    let excess_kurtosis = stats::excess_kurtosis(samples);
    let ks = if skewness.is_some() && std > 0.0 {
        let unit = Normal::new(0.0, 1.0).expect("standard normal");
        let mut z: Vec<f64> = samples.iter().map(|v| (v - mean) / std).collect();
        z.sort_by(f64::total_cmp);
        let nf = n as f64;
        let d = z.iter().enumerate().fold(0.0f64, |acc, (i, &v)| {
            let c = unit.cdf(v);
            acc.max((i as f64 + 1.0) / nf - c).max(c - i as f64 / nf)
        });
        Some(d)
    } else {
        None
    };
    Normality {
        n,
        mean,
        std,
        skewness,
        excess_kurtosis,
        ks,
    }
}

#[derive(Debug, Clone, Serialize)]
struct GaussRow {
    #[serde(rename = "K")]
    shortcuts: usize,
    repetition: usize,
    n: usize,
    mean: f64,
    std: f64,
    skewness: Option<f64>,
    excess_kurtosis: Option<f64>,
    ks: Option<f64>,
    failed: usize,
}

/// NTK_d traces on the probe pair for `trials` fresh initializations.
pub fn probe_traces(cfg: &NetworkConfig, probe: &ProbePair, seeds: impl Iterator<Item = u64>) -> (Vec<f64>, usize) {
    let seeds: Vec<u64> = seeds.collect();
    let vals: Vec<Option<f64>> = seeds
        .par_iter()
        .map(|&s| {
            let net = Network::init(cfg.clone(), s).ok()?;
            let k = kernels::ntk_d_expanded(&net, &net.forward(&probe.0).ok()?, &net.forward(&probe.1).ok()?).ok()?;
            k.trace.is_finite().then_some(k.trace)
        })
        .collect();
    let failed = vals.iter().filter(|v| v.is_none()).count();
    (vals.into_iter().flatten().collect(), failed)
}

fn gaussianity(spec: &ExperimentSpec) -> Result<Outcome, RunError> {
    let [p0, p1] = spec.data.probe.clone().expect("resolved spec has a probe");
    let probe = (DVector::from_vec(p0), DVector::from_vec(p1));
    let reps = spec.data.repetitions.unwrap_or(1);
    let width = spec.network.widths[0];
    let hbar = spec.network.hbar;
    let k_values = spec.data.k_values.clone().unwrap_or_default();
    let mut warnings = Vec::new();
    if spec.trials < MIN_RELIABLE_TRIALS {
        warnings.push(format!(
            "trials = {} < {MIN_RELIABLE_TRIALS}: normality statistics are unreliable",
            spec.trials
        ));
    }
    let mut rows = Vec::new();
    for &k in &k_values {
        let cfg = reshape(&spec.network, k, hbar, width);
        for rep in 0..reps {
            let seeds = (0..spec.trials).map(|t| derive_seed(derive_seed(trial_seed(spec, t), rep as u64), k as u64));
            let (vals, failed) = probe_traces(&cfg, &probe, seeds);
            let st = normality(&vals);
            rows.push(GaussRow {
                shortcuts: k,
                repetition: rep,
                n: st.n,
                mean: st.mean,
                std: st.std,
                skewness: st.skewness,
                excess_kurtosis: st.excess_kurtosis,
                ks: st.ks,
                failed,
            });
        }
    }
    let mut per_k = Vec::new();
    let mut degenerate = 0;
    for &k in &k_values {
        let mine: Vec<&GaussRow> = rows.iter().filter(|r| r.shortcuts == k).collect();
        let flagged = mine.iter().filter(|r| r.skewness.is_none()).count();
        degenerate += flagged;
        let med = |f: &dyn Fn(&GaussRow) -> Option<f64>| {
            let v: Vec<f64> = mine.iter().filter_map(|r| f(r)).map(f64::abs).collect();
            (!v.is_empty()).then(|| stats::median(&v))
        };
        per_k.push(json!({
            "K": k,
            "median_abs_skewness": med(&|s| s.skewness),
            "median_abs_excess_kurtosis": med(&|s| s.excess_kurtosis),
            "median_ks": med(&|s| s.ks),
            "degenerate_repetitions": flagged,
        }));
    }
    if degenerate > 0 {
        warnings.push(format!("{degenerate} sample(s) had zero variance; statistics undefined"));
    }
    let mut out = Outcome::new(
        csv_string(&rows)?,
        json!({
            "experiment": "gaussianity",
            "trials": spec.trials,
            "repetitions": reps,
            "per_k": per_k,
        }),
    );
    out.warnings = warnings;
    Ok(out)
}
