//! Shortcut-related deep network.
//!
//! Layers `1..=L` follow `z^l = phi(s_l W^l z^{l-1} + b^l)` with `z^0 = x` and
//! `s_l = 1/sqrt(n_l)` when layer scaling is enabled (1 otherwise). Every
//! `hbar`-th post-activation, including the input itself, is routed to the
//! output through an all-ones matrix:
//!
//! ```text
//! f(x) = 1/sqrt(M_z) * sum_{k=0..K} J^{k*hbar} z^{k*hbar},   M_z = sum_k n_{k*hbar}
//! ```
//!
//! Since every `J` is all-ones, `J z` is the entry sum of `z` replicated `n_o`
//! times and is never materialized.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum;

/// Element-wise activation. Derivatives at the kink of (leaky) ReLU take the
/// negative-side slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActivationSpec {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

impl ActivationSpec {
    /// Upper bound `C_phi` on `|phi'|`.
    pub fn derivative_bound(&self) -> f64 {
        match self {
            ActivationSpec::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    /// Derivative value assigned at non-differentiable points (and at 0 generally).
    pub fn zero_convention(&self) -> f64 {
        match *self {
            ActivationSpec::Identity | ActivationSpec::Tanh => 1.0,
            ActivationSpec::Relu => 0.0,
            ActivationSpec::LeakyRelu { slope } => slope,
            ActivationSpec::Sigmoid => 0.25,
        }
    }

    /// Range `[min, max]` that every derivative value falls into.
    pub fn slope_range(&self) -> (f64, f64) {
        match *self {
            ActivationSpec::Identity => (1.0, 1.0),
            ActivationSpec::Relu | ActivationSpec::Tanh => (0.0, 1.0),
            ActivationSpec::LeakyRelu { slope } => (slope, 1.0),
            ActivationSpec::Sigmoid => (0.0, 0.25),
        }
    }

    /// True when `|phi(t)| <= 1` for every `t`.
    pub fn is_bounded(&self) -> bool {
        matches!(self, ActivationSpec::Tanh | ActivationSpec::Sigmoid)
    }

    pub fn validate(&self) -> Result<()> {
        if let ActivationSpec::LeakyRelu { slope } = *self {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!(
                    "leaky_relu slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, t: f64) -> f64 {
        match *self {
            ActivationSpec::Identity => t,
            ActivationSpec::Relu => {
                if t > 0.0 {
                    t
                } else {
                    0.0
                }
            }
            ActivationSpec::LeakyRelu { slope } => {
                if t > 0.0 {
                    t
                } else {
                    slope * t
                }
            }
            ActivationSpec::Tanh => t.tanh(),
            ActivationSpec::Sigmoid => 1.0 / (1.0 + (-t).exp()),
        }
    }

    #[inline]
    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            ActivationSpec::Identity => 1.0,
            ActivationSpec::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationSpec::LeakyRelu { slope } => {
                if t > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationSpec::Tanh => {
                let th = t.tanh();
                1.0 - th * th
            }
            ActivationSpec::Sigmoid => {
                let s = 1.0 / (1.0 + (-t).exp());
                s * (1.0 - s)
            }
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hbar: usize,
    /// Number of shortcut connections `K`.
    pub shortcuts: usize,
    /// Widths `n_1..n_L`, `L = K * hbar`.
    pub widths: Vec<usize>,
    pub activation: ActivationSpec,
    #[serde(default)]
    pub apply_layer_scaling: bool,
    pub weight_std: f64,
    #[serde(default)]
    pub bias_std: f64,
    #[serde(default = "default_true")]
    pub use_bias: bool,
    /// Divide the initialization std of layer `l` by `sqrt(n_l)`, giving
    /// variances of the form `c / n_l`.
    #[serde(default)]
    pub scale_init_by_width: bool,
}

impl NetworkConfig {
    /// Config with `K * hbar` layers of equal width.
    pub fn uniform(
        input_dim: usize,
        output_dim: usize,
        width: usize,
        shortcuts: usize,
        hbar: usize,
        activation: ActivationSpec,
    ) -> Self {
        NetworkConfig {
            input_dim,
            output_dim,
            hbar,
            shortcuts,
            widths: vec![width; shortcuts * hbar],
            activation,
            apply_layer_scaling: false,
            weight_std: 1.0,
            bias_std: 0.0,
            use_bias: false,
            scale_init_by_width: false,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// `n_l` for `l in 0..=L`, with `n_0 = d`.
    pub fn width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.widths[layer - 1]
        }
    }

    pub fn is_shortcut(&self, layer: usize) -> bool {
        layer % self.hbar == 0
    }

    pub fn shortcut_layers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.shortcuts).map(move |k| k * self.hbar)
    }

    /// `M_z = sum_{k=0..K} n_{k*hbar}`.
    pub fn m_z(&self) -> usize {
        self.shortcut_layers().map(|l| self.width(l)).sum()
    }

    /// Largest width including input and output dimensions.
    pub fn n_max(&self) -> usize {
        self.widths
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(0)
    }

    pub fn layer_scale(&self, layer: usize) -> f64 {
        if self.apply_layer_scaling {
            1.0 / (self.width(layer) as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input_dim and output_dim must be positive".into()));
        }
        if self.hbar == 0 || self.shortcuts == 0 {
            return Err(Error::Config("hbar and shortcuts must be positive".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("widths must not be empty".into()));
        }
        if self.widths.len() != self.shortcuts * self.hbar {
            return Err(Error::Config(format!(
                "expected K*hbar = {} widths, got {}",
                self.shortcuts * self.hbar,
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("all widths must be positive".into()));
        }
        for (name, v) in [("weight_std", self.weight_std), ("bias_std", self.bias_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        self.activation.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    /// `weights[l - 1]` is `W^l` with shape `n_l x n_{l-1}`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Option<Vec<DVector<f64>>>,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: DVector<f64>,
    /// `z[l]` for `l in 0..=L`; `z[0]` is the input.
    pub z: Vec<DVector<f64>>,
    /// `d_diag[l - 1]` is the diagonal of `D^l`.
    pub d_diag: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

/// Parameter gradients of a scalar objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    /// All-zero gradients shaped like `net`'s parameters.
    pub fn zeros(net: &Network) -> Gradients {
        Gradients {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: (1..=net.depth()).map(|l| DVector::zeros(net.config.width(l))).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
    }
}

fn gaussian_fill(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    if std == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("std validated finite and non-negative");
    // row-major draw order so the stream does not depend on storage layout
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = normal.sample(rng);
        }
    }
    m
}

impl Network {
    /// Draws every weight from `N(0, weight_std^2)` and every bias from
    /// `N(0, bias_std^2)` (both divided by `n_l` in variance when
    /// `scale_init_by_width` is set).
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = config.depth();
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 1..=depth {
            let rows = config.width(l);
            let cols = config.width(l - 1);
            let width_factor = if config.scale_init_by_width {
                1.0 / (rows as f64).sqrt()
            } else {
                1.0
            };
            weights.push(gaussian_fill(&mut rng, rows, cols, config.weight_std * width_factor));
            if config.use_bias {
                let b = gaussian_fill(&mut rng, rows, 1, config.bias_std * width_factor);
                biases.push(DVector::from_column_slice(b.as_slice()));
            }
        }
        let biases = config.use_bias.then_some(biases);
        Ok(Network { config, weights, biases })
    }

    /// Builds a network from explicit parameters, checking shapes.
    pub fn from_parts(
        config: NetworkConfig,
        weights: Vec<DMatrix<f64>>,
        biases: Option<Vec<DVector<f64>>>,
    ) -> Result<Network> {
        config.validate()?;
        if weights.len() != config.depth() {
            return Err(Error::Shape {
                context: "weight count",
                expected: config.depth(),
                actual: weights.len(),
            });
        }
        for (i, w) in weights.iter().enumerate() {
            let l = i + 1;
            if w.nrows() != config.width(l) {
                return Err(Error::Shape {
                    context: "weight rows",
                    expected: config.width(l),
                    actual: w.nrows(),
                });
            }
            if w.ncols() != config.width(l - 1) {
                return Err(Error::Shape {
                    context: "weight cols",
                    expected: config.width(l - 1),
                    actual: w.ncols(),
                });
            }
        }
        if let Some(bs) = &biases {
            if bs.len() != config.depth() {
                return Err(Error::Shape {
                    context: "bias count",
                    expected: config.depth(),
                    actual: bs.len(),
                });
            }
            for (i, b) in bs.iter().enumerate() {
                if b.len() != config.width(i + 1) {
                    return Err(Error::Shape {
                        context: "bias length",
                        expected: config.width(i + 1),
                        actual: b.len(),
                    });
                }
            }
        }
        Ok(Network { config, weights, biases })
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    /// `W^l` for `l in 1..=L`.
    pub fn weight(&self, layer: usize) -> &DMatrix<f64> {
        &self.weights[layer - 1]
    }

    /// `W^l` with the layer scaling applied.
    pub fn scaled_weight(&self, layer: usize) -> DMatrix<f64> {
        self.weight(layer) * self.config.layer_scale(layer)
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weights.iter().map(|w| w.len()).sum();
        let b: usize = self
            .biases
            .as_ref()
            .map_or(0, |bs| bs.iter().map(|b| b.len()).sum());
        w + b
    }

    /// Applies the shortcut read-out to stored post-activations.
    pub fn shortcut_output(&self, z: &[DVector<f64>]) -> DVector<f64> {
        let total: f64 = self.config.shortcut_layers().map(|l| z[l].sum()).sum();
        let value = total / (self.config.m_z() as f64).sqrt();
        DVector::from_element(self.config.output_dim, value)
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if x.len() != cfg.input_dim {
            return Err(Error::Shape {
                context: "input",
                expected: cfg.input_dim,
                actual: x.len(),
            });
        }
        let act = cfg.activation;
        let depth = self.depth();
        let mut z = Vec::with_capacity(depth + 1);
        let mut d_diag = Vec::with_capacity(depth);
        z.push(x.clone());
        for l in 1..=depth {
            let mut pre = self.weight(l) * &z[l - 1];
            let scale = cfg.layer_scale(l);
            if scale != 1.0 {
                pre *= scale;
            }
            if let Some(bs) = &self.biases {
                pre += &bs[l - 1];
            }
            let post = pre.map(|t| act.apply(t));
            if post.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            d_diag.push(pre.map(|t| act.derivative(t)));
            z.push(post);
        }
        let output = self.shortcut_output(&z);
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: depth });
        }
        Ok(ForwardTrace {
            input: x.clone(),
            z,
            d_diag,
            output,
        })
    }

    /// Checks that a trace has the layer shapes of this network.
    pub fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let depth = self.depth();
        if trace.z.len() != depth + 1 || trace.d_diag.len() != depth {
            return Err(Error::Contract(
                "trace depth does not match network".into(),
            ));
        }
        for l in 0..=depth {
            if trace.z[l].len() != self.config.width(l) {
                return Err(Error::Contract(format!(
                    "trace layer {l} has width {}, network expects {}",
                    trace.z[l].len(),
                    self.config.width(l)
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep for a batch of output cotangents (`n_o x c`).
    ///
    /// Returns the pre-activation adjoints `A^l` (`n_l x c`) for `l = 1..=L`,
    /// i.e. column `c` of `A^l` is `d<cot_c, f>/d(pre^l)`. Weight gradients
    /// follow as `s_l * A^l[:, c] * z^{l-1}^T`.
    pub fn backward(&self, trace: &ForwardTrace, cotangent: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let cfg = &self.config;
        let depth = self.depth();
        let inv_sqrt_m = 1.0 / (cfg.m_z() as f64).sqrt();
        // J^T C / sqrt(M_z): every row equals the column sums of C
        let col_sums: Vec<f64> = cotangent
            .column_iter()
            .map(|c| c.sum() * inv_sqrt_m)
            .collect();
        let shortcut_adj = |rows: usize| {
            DMatrix::from_fn(rows, col_sums.len(), |_, c| col_sums[c])
        };

        let mut adj_pre = vec![DMatrix::zeros(0, 0); depth];
        let mut adj_z = shortcut_adj(cfg.width(depth));
        for l in (1..=depth).rev() {
            let d = &trace.d_diag[l - 1];
            let mut a = adj_z;
            for (mut row, &dv) in a.row_iter_mut().zip(d.iter()) {
                row *= dv;
            }
            if l > 1 {
                let mut next = self.weight(l).tr_mul(&a);
                let scale = cfg.layer_scale(l);
                if scale != 1.0 {
                    next *= scale;
                }
                if cfg.is_shortcut(l - 1) {
                    next += shortcut_adj(cfg.width(l - 1));
                }
                adj_z = next;
            } else {
                adj_z = DMatrix::zeros(0, 0);
            }
            adj_pre[l - 1] = a;
        }
        adj_pre
    }

    /// `df/dW^l` for every layer, stacked over the input-neuron index `j`:
    /// row `j * n_l + p`, column `o` holds `d f_o / d W^l_{p j}`.
    pub fn output_jacobians(&self, trace: &ForwardTrace) -> Vec<DMatrix<f64>> {
        let n_o = self.config.output_dim;
        let adj = self.backward(trace, &DMatrix::identity(n_o, n_o));
        adj.iter()
            .enumerate()
            .map(|(i, a)| {
                let l = i + 1;
                let scale = self.config.layer_scale(l);
                let z_prev = &trace.z[l - 1];
                let n_l = a.nrows();
                DMatrix::from_fn(z_prev.len() * n_l, n_o, |r, o| {
                    let (j, p) = (r / n_l, r % n_l);
                    scale * z_prev[j] * a[(p, o)]
                })
            })
            .collect()
    }

    /// Gradient of `<cot, f(x)>` with respect to all weights and biases.
    pub fn vjp(&self, trace: &ForwardTrace, cotangent: &DVector<f64>) -> Gradients {
        let mut grads = Gradients::zeros(self);
        self.accumulate_vjp(trace, cotangent, &mut grads);
        grads
    }

    /// Adds the gradient of `<cot, f(x)>` into `grads` without allocating
    /// per-layer matrices.
    pub fn accumulate_vjp(&self, trace: &ForwardTrace, cotangent: &DVector<f64>, grads: &mut Gradients) {
        let cot = DMatrix::from_column_slice(cotangent.len(), 1, cotangent.as_slice());
        let adj = self.backward(trace, &cot);
        for (i, a) in adj.iter().enumerate() {
            let l = i + 1;
            let col = a.column(0);
            grads.weights[i].ger(self.config.layer_scale(l), &col, &trace.z[l - 1], 1.0);
            grads.biases[i] += col;
        }
    }

    /// Per-layer check of `C_phi * sigma_max(W_hat^l) <= epsilon`.
    pub fn is_stable_pertinent(&self, epsilon: f64) -> Result<Vec<bool>> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        let c_phi = self.config.activation.derivative_bound();
        (1..=self.depth())
            .map(|l| {
                let sigma = spectrum::largest_singular_value(&self.scaled_weight(l))?;
                Ok(c_phi * sigma <= epsilon)
            })
            .collect()
    }

    /// Rescales each layer so that `C_phi * sigma_max(W_hat^l) <= epsilon`.
    /// Layers already inside the bound are left untouched.
    pub fn make_stable_pertinent(&mut self, epsilon: f64) -> Result<()> {
        let c_phi = self.config.activation.derivative_bound();
        for l in 1..=self.depth() {
            let sigma = spectrum::largest_singular_value(&self.scaled_weight(l))?;
            let current = c_phi * sigma;
            if current > epsilon {
                // small margin so the check survives power-iteration round-off
                self.weights[l - 1] *= epsilon / current * (1.0 - 1e-9);
            }
        }
        Ok(())
    }
}
