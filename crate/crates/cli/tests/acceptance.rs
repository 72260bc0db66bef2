//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. A
//! failing criterion is reported, not asserted; the process exits non-zero
//! only if a criterion cannot be evaluated at all.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dntk::kernels::{ntk_d_definition, ntk_d_expanded};
use dntk::oracle::{brute_ntk_d, fd_jacobian, hermite_quadrature, naive_forward};
use dntk::spectrum::{check_theorem3, hermite_coefficient, theorem3_bound};
use dntk::{ActivationSpec, Network, NetworkConfig};
use dntk_cli::experiments;
use dntk_cli::spec::DATA_DIR_ENV;
use dntk_cli::ExperimentSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const KERNEL_FORM_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const GRAD_FD_STEP: f64 = 1e-4;
const PSD_REL_TOL: f64 = 1e-8;
const LAMBDA_MIN_PEARSON: f64 = 0.9;
const DRIFT_REFERENCE: [f64; 3] = [0.019, 0.009, 0.004];
const DRIFT_FACTOR: f64 = 3.0;
const SINE_RMSE_MAX: f64 = 0.1;
const IMAGE_GAP_MAX: f64 = 0.10;
const HERMITE_TOL: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Report {
    id: u32,
    name: &'static str,
    verdict: Verdict,
    detail: String,
    elapsed: Duration,
    limit: Duration,
}

impl Report {
    fn print(&self) {
        let tag = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        };
        println!(
            "{tag} [{}] {}: {} ({:.1}s, limit {}s)",
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs()
        );
    }
}

fn criterion(
    id: u32,
    name: &'static str,
    limit_secs: u64,
    body: impl FnOnce() -> (Verdict, String),
) -> Report {
    let start = Instant::now();
    let (mut verdict, mut detail) = body();
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(limit_secs);
    if verdict == Verdict::Pass && elapsed > limit {
        verdict = Verdict::Fail;
        detail.push_str("; runtime limit exceeded");
    }
    let r = Report {
        id,
        name,
        verdict,
        detail,
        elapsed,
        limit,
    };
    r.print();
    r
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn info(msg: impl std::fmt::Display) {
    println!("INFO {msg}");
}

fn random_net(rng: &mut ChaCha8Rng, activation: ActivationSpec, max_k: usize, max_hbar: usize, max_width: usize) -> Network {
    let shortcuts = rng.random_range(1..=max_k);
    let hbar = rng.random_range(1..=max_hbar);
    let cfg = NetworkConfig {
        input_dim: rng.random_range(1..=5),
        output_dim: rng.random_range(1..=3),
        hbar,
        shortcuts,
        widths: (0..shortcuts * hbar).map(|_| rng.random_range(1..=max_width)).collect(),
        activation,
        apply_layer_scaling: rng.random_bool(0.5),
        weight_std: 1.0,
        bias_std: 0.3,
        use_bias: rng.random_bool(0.5),
        scale_init_by_width: false,
    };
    let mut net = Network::init(cfg, rng.random()).expect("valid config");
    net.make_stable_pertinent(0.95).expect("epsilon in range");
    net
}

fn random_input(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    let diff = (a - b).amax();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn kernel_forms() -> (Verdict, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let (act, h) = if case % 2 == 0 {
            (ActivationSpec::Tanh, 1e-4)
        } else {
            (ActivationSpec::LeakyRelu { slope: 0.1 }, 1e-7)
        };
        let net = random_net(&mut rng, act, 4, 3, 8);
        let d = net.config.input_dim;
        let (x, xp) = (random_input(&mut rng, d), random_input(&mut rng, d));
        let def = ntk_d_definition(&net, &x, &xp).unwrap().block;
        let exp = ntk_d_expanded(&net, &net.forward(&x).unwrap(), &net.forward(&xp).unwrap())
            .unwrap()
            .block;
        let brute = brute_ntk_d(&net, &x, &xp, h).unwrap().block;
        worst = worst
            .max(rel_err(&def, &exp))
            .max(rel_err(&def, &brute))
            .max(rel_err(&exp, &brute));
    }
    (
        verdict(worst <= KERNEL_FORM_TOL),
        format!("max pairwise relative error {worst:.2e} over 50 nets (tol {KERNEL_FORM_TOL:.0e})"),
    )
}

fn sq_loss(net: &Network, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    naive_forward(net, x.as_slice())
        .iter()
        .zip(y.iter())
        .map(|(f, t)| (f - t).powi(2))
        .sum()
}

fn gradients() -> (Verdict, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = GRAD_FD_STEP;
    let (mut worst_f, mut worst_loss) = (0.0f64, 0.0f64);
    let mut seeds = 0;
    while seeds < 20 {
        let net = random_net(&mut rng, ActivationSpec::Tanh, 4, 3, 8);
        if net.param_count() > 500 {
            continue;
        }
        seeds += 1;
        let x = random_input(&mut rng, net.config.input_dim);
        let y = random_input(&mut rng, net.config.output_dim);
        let trace = net.forward(&x).unwrap();
        let jac = net.output_jacobians(&trace);
        let grads = net.vjp(&trace, &((&trace.output - &y) * 2.0));
        let mut probe = net.clone();
        for l in 1..=net.depth() {
            worst_f = worst_f.max(rel_err(&jac[l - 1], &fd_jacobian(&net, &x, l, h).unwrap().matrix));
            let w = net.weights[l - 1].clone();
            let fd = DMatrix::from_fn(w.nrows(), w.ncols(), |p, j| {
                probe.weights[l - 1][(p, j)] = w[(p, j)] + h;
                let plus = sq_loss(&probe, &x, &y);
                probe.weights[l - 1][(p, j)] = w[(p, j)] - h;
                let minus = sq_loss(&probe, &x, &y);
                probe.weights[l - 1][(p, j)] = w[(p, j)];
                (plus - minus) / (2.0 * h)
            });
            worst_loss = worst_loss.max(rel_err(&grads.weights[l - 1], &fd));
        }
    }
    let worst = worst_f.max(worst_loss);
    (
        verdict(worst <= GRAD_TOL),
        format!("max relative error: output {worst_f:.2e}, loss {worst_loss:.2e} over 20 tanh nets (tol {GRAD_TOL:.0e})"),
    )
}

fn theorem3() -> (Verdict, String) {
    let spot = theorem3_bound(10, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut violations, mut unmet) = (0, 0);
    let mut tightest = 0.0f64;
    for case in 0..100 {
        let act = if case % 2 == 0 {
            ActivationSpec::Tanh
        } else {
            ActivationSpec::Sigmoid
        };
        let net = random_net(&mut rng, act, 10, 2, 20);
        let d = net.config.input_dim;
        let (x, xp) = (random_input(&mut rng, d), random_input(&mut rng, d));
        let c = check_theorem3(&net, &x, &xp).unwrap();
        if !c.preconditions_met() {
            unmet += 1;
        }
        if !c.holds {
            violations += 1;
        }
        tightest = tightest.max(c.sigma_max / c.bound);
    }
    (
        verdict(violations == 0 && unmet == 0 && spot == 14000.0),
        format!(
            "{violations} violations over 100 nets ({unmet} with unmet preconditions); max sigma/bound {tightest:.3e}; bound(K=10, n=20) = {spot}"
        ),
    )
}

fn specs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn load(name: &str) -> ExperimentSpec {
    let text = fs::read_to_string(specs_dir().join(name)).expect("shipped spec");
    ExperimentSpec::from_json(&text).expect("shipped spec parses")
}

fn run(spec: ExperimentSpec) -> Result<(Value, experiments::Outcome), String> {
    let spec = spec.resolve();
    spec.validate().map_err(|e| e.to_string())?;
    let out = experiments::run(&spec).map_err(|e| e.to_string())?;
    Ok((out.summary.clone(), out))
}

fn lambda_min() -> (Verdict, String) {
    let (s, _) = match run(load("lambda_min.json")) {
        Ok(v) => v,
        Err(e) => return (Verdict::Fail, e),
    };
    let slope = s["fit"]["slope"].as_f64().unwrap_or(f64::NAN);
    let r = s["fit"]["pearson_r"].as_f64().unwrap_or(f64::NAN);
    let psd = s["psd_violations"].as_u64().unwrap_or(u64::MAX);
    (
        verdict(slope > 0.0 && r >= LAMBDA_MIN_PEARSON && psd == 0),
        format!(
            "slope {slope:.3e}, pearson r {r:.4} (need > 0 and >= {LAMBDA_MIN_PEARSON}), {psd} samples below -{PSD_REL_TOL:.0e}*max diag"
        ),
    )
}

fn invariance() -> (Verdict, String) {
    let (s, _) = match run(load("invariance.json")) {
        Ok(v) => v,
        Err(e) => return (Verdict::Fail, e),
    };
    let means: Vec<f64> = s["per_k"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["mean_drift"].as_f64().unwrap_or(f64::NAN))
        .collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let within = means
        .iter()
        .zip(DRIFT_REFERENCE)
        .all(|(m, r)| *m <= r * DRIFT_FACTOR && *m >= r / DRIFT_FACTOR);
    for row in s["per_k"].as_array().unwrap() {
        let m = row["mean_drift"].as_f64().unwrap_or(f64::NAN);
        let t0 = row["mean_trace_t0"].as_f64().unwrap_or(f64::NAN);
        info(format!(
            "invariance K={} width={}: mean drift {m:.4}, mean trace at t=0 {t0:.3}, relative drift {:.3}",
            row["K"],
            row["width"],
            m / t0
        ));
    }
    (
        verdict(decreasing && within),
        format!(
            "mean drift per K = {:?} vs reference {:?} (within x{DRIFT_FACTOR}: {within}, strictly decreasing: {decreasing})",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>(),
            DRIFT_REFERENCE
        ),
    )
}

fn sine_rmse(spec: ExperimentSpec) -> Result<(Option<f64>, u64), String> {
    let (s, _) = run(spec)?;
    let k = &s["kernels"]["ntk_d"];
    Ok((k["mean_rmse"].as_f64(), k["diverged_trials"].as_u64().unwrap_or(0)))
}

fn sine() -> (Verdict, String) {
    let mut spec = load("sine.json");
    spec.wide_network = None;
    let (mean, diverged) = match sine_rmse(spec) {
        Ok(v) => v,
        Err(e) => return (Verdict::Fail, e),
    };
    let mut alt = load("sine_std.json");
    alt.wide_network = None;
    if let Ok((Some(m), d)) = sine_rmse(alt) {
        info(format!(
            "sine with initialization values read as standard deviations (W 0.2, b 0.1): mean rmse {m:.4}, {d} diverged"
        ));
    }
    let ok = diverged == 0 && mean.is_some_and(|m| m <= SINE_RMSE_MAX);
    (
        verdict(ok),
        format!(
            "mean test rmse {} (need <= {SINE_RMSE_MAX}), {diverged}/10 trials diverged with W ~ N(0, 0.2), b ~ N(0, 0.1)",
            mean.map_or("n/a".to_string(), |m| format!("{m:.4}"))
        ),
    )
}

fn image_regression() -> (Verdict, String) {
    let root = match std::env::var_os(DATA_DIR_ENV) {
        Some(r) => PathBuf::from(r),
        None => return (Verdict::Skip, format!("{DATA_DIR_ENV} not set")),
    };
    let mut spec = load("mnist.json");
    let images = spec.data.images_path.clone().unwrap();
    if !root.join(&images).is_file() {
        return (Verdict::Skip, format!("{} not found", root.join(images).display()));
    }
    spec.data.n_samples = Some(500);
    spec.data.checkpoints = Some(vec![spec.train.epochs]);
    let (s, _) = match run(spec) {
        Ok(v) => v,
        Err(e) => return (Verdict::Fail, e),
    };
    let acc = |kernel: &str| {
        s["groups"]
            .as_array()
            .unwrap()
            .iter()
            .find(|g| g["kernel"] == kernel)
            .and_then(|g| g["checkpoints"][0]["mean_accuracy"].as_f64())
    };
    match (acc("ntk_d"), acc("ntk_w")) {
        (Some(d), Some(w)) => (
            verdict((d - w).abs() <= IMAGE_GAP_MAX),
            format!("accuracy ntk_d {d:.3} vs ntk_w {w:.3} (gap <= {IMAGE_GAP_MAX})"),
        ),
        _ => (Verdict::Fail, "a kernel produced no finished trial".into()),
    }
}

fn hermite() -> (Verdict, String) {
    let mut worst = 0.0f64;
    for r in [2, 4, 6, 8] {
        for alpha in [0.0, 0.1, 0.5] {
            let closed = hermite_coefficient(r, alpha).unwrap();
            let quad = hermite_quadrature(r, alpha, 64).unwrap();
            worst = worst.max((closed - quad).abs());
        }
    }
    (
        verdict(worst <= HERMITE_TOL),
        format!("max |closed - quadrature| {worst:.2e} (tol {HERMITE_TOL:.0e})"),
    )
}

fn gaussianity() -> (Verdict, String) {
    let mut spec = load("gaussianity.json");
    spec.trials = 500;
    spec.data.repetitions = Some(5);
    spec.data.k_values = Some(vec![4, 32]);
    let (s, _) = match run(spec) {
        Ok(v) => v,
        Err(e) => return (Verdict::Fail, e),
    };
    let rows = s["per_k"].as_array().unwrap();
    let get = |i: usize, key: &str| rows[i][key].as_f64().unwrap_or(f64::NAN);
    let (s4, s32) = (get(0, "median_abs_skewness"), get(1, "median_abs_skewness"));
    let (k4, k32) = (get(0, "median_abs_excess_kurtosis"), get(1, "median_abs_excess_kurtosis"));
    (
        verdict(s32 < s4 && k32 < k4),
        format!("non-blocking; median |skew| {s4:.3} -> {s32:.3}, median |excess kurtosis| {k4:.3} -> {k32:.3} (K=4 -> K=32)"),
    )
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let reports = [
        criterion(1, "kernel-form equivalence", 30, kernel_forms),
        criterion(2, "gradient correctness", 30, gradients),
        criterion(3, "sigma_max upper bound", 120, theorem3),
        criterion(4, "lambda_min grows linearly in d", 600, lambda_min),
        criterion(5, "training invariance", 900, invariance),
        criterion(6, "sine regression", 300, sine),
        criterion(7, "image regression", 1800, image_regression),
        criterion(8, "hermite coefficients", 1, hermite),
        criterion(9, "gaussianity probe", 600, gaussianity),
    ];
    let count = |v: Verdict| reports.iter().filter(|r| r.verdict == v).count();
    println!(
        "acceptance: {} passed, {} failed, {} skipped",
        count(Verdict::Pass),
        count(Verdict::Fail),
        count(Verdict::Skip)
    );
}
