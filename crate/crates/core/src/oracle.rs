//! Slow reference implementations for the test suite.
//!
//! Nothing here calls the fast forward, gradient, kernel or spectral code:
//! the forward pass is re-implemented with plain loops and all derivatives
//! are central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelValue;
use crate::netarch::Network;

/// Refuse brute-force kernels above this many parameters.
pub const BRUTE_PARAM_LIMIT: usize = 10_000;

/// `df/dW^l` in the stacked layout: row `j * n_l + p`, column `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    pub layer: usize,
    pub matrix: DMatrix<f64>,
}

/// Loop-based forward pass with the shortcut read-out.
pub fn naive_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let cfg = &net.config;
    let hbar = cfg.hbar;
    let mut z = x.to_vec();
    let mut acc: f64 = z.iter().sum();
    let mut m_z = z.len();
    for (i, w) in net.weights.iter().enumerate() {
        let l = i + 1;
        let rows = w.nrows();
        let s = if cfg.apply_layer_scaling { 1.0 / (rows as f64).sqrt() } else { 1.0 };
        let mut next = vec![0.0; rows];
        for (p, out) in next.iter_mut().enumerate() {
            let mut pre = 0.0;
            for (j, zj) in z.iter().enumerate() {
                pre += w[(p, j)] * zj;
            }
            pre *= s;
            if let Some(bs) = &net.biases {
                pre += bs[i][p];
            }
            *out = cfg.activation.apply(pre);
        }
        z = next;
        if l % hbar == 0 {
            acc += z.iter().sum::<f64>();
            m_z += rows;
        }
    }
    vec![acc / (m_z as f64).sqrt(); cfg.output_dim]
}

/// Central-difference Jacobian of the output with respect to `W^layer`.
pub fn fd_jacobian(net: &Network, x: &DVector<f64>, layer: usize, h: f64) -> Result<JacobianBlock> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    if layer == 0 || layer > net.weights.len() {
        return Err(Error::Index {
            index: layer,
            lo: 1,
            hi: net.weights.len(),
        });
    }
    let n_o = net.config.output_dim;
    let (n_l, n_prev) = net.weights[layer - 1].shape();
    let mut probe = net.clone();
    let mut matrix = DMatrix::zeros(n_prev * n_l, n_o);
    for j in 0..n_prev {
        for p in 0..n_l {
            let orig = probe.weights[layer - 1][(p, j)];
            probe.weights[layer - 1][(p, j)] = orig + h;
            let plus = naive_forward(&probe, x.as_slice());
            probe.weights[layer - 1][(p, j)] = orig - h;
            let minus = naive_forward(&probe, x.as_slice());
            probe.weights[layer - 1][(p, j)] = orig;
            for o in 0..n_o {
                matrix[(j * n_l + p, o)] = (plus[o] - minus[o]) / (2.0 * h);
            }
        }
    }
    Ok(JacobianBlock { layer, matrix })
}

/// Block-diagonal matrix with `n_{l-1}` copies of `(W^l)^T`.
pub fn block_diag_transpose(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (n_l, n_prev) = w.shape();
    let mut out = DMatrix::zeros(n_prev * n_prev, n_prev * n_l);
    for j in 0..n_prev {
        for q in 0..n_prev {
            for p in 0..n_l {
                out[(j * n_prev + q, j * n_l + p)] = w[(p, q)];
            }
        }
    }
    out
}

/// Depth-induced kernel from finite-difference Jacobians of the shortcut
/// layers and the literal block-diagonal `W^T` stack.
pub fn brute_ntk_d(net: &Network, x: &DVector<f64>, xp: &DVector<f64>, h: f64) -> Result<KernelValue> {
    let params = net.param_count();
    if params > BRUTE_PARAM_LIMIT {
        return Err(Error::SizeGuard {
            params,
            limit: BRUTE_PARAM_LIMIT,
        });
    }
    let cfg = &net.config;
    let n_o = cfg.output_dim;
    let mut block = DMatrix::zeros(n_o, n_o);
    for kappa in 1..=cfg.shortcuts {
        let l = kappa * cfg.hbar;
        let d = block_diag_transpose(&net.weights[l - 1]);
        let a = &d * fd_jacobian(net, x, l, h)?.matrix;
        let b = &d * fd_jacobian(net, xp, l, h)?.matrix;
        block += a.transpose() * b;
    }
    Ok(KernelValue::from_block(block))
}

fn hermite_he(r: u32, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if r == 0 {
        return prev;
    }
    for k in 1..r {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Gauss rule from a symmetric tridiagonal Jacobi matrix (Golub-Welsch);
/// weights are normalized to sum to one.
fn golub_welsch(diag: &[f64], off: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let j = DMatrix::from_fn(n, n, |a, b| {
        if a == b {
            diag[a]
        } else if a + 1 == b {
            off[a]
        } else if b + 1 == a {
            off[b]
        } else {
            0.0
        }
    });
    let eig = j.symmetric_eigen();
    let nodes = eig.eigenvalues.iter().copied().collect();
    let weights = (0..n).map(|i| eig.eigenvectors[(0, i)].powi(2)).collect();
    (nodes, weights)
}

/// `E[phi_alpha(g) He_r(g)] / sqrt(r!)` for `g ~ N(0, 1)` and
/// `phi_alpha(g) = max(g, alpha g)`.
///
/// Leaky ReLU is split as `(1+a)/2 g + (1-a)/2 |g|`. The linear part uses
/// probabilists' Gauss-Hermite nodes; the `|g|` part substitutes `t = g^2/2`
/// and uses Gauss-Laguerre nodes, so both parts are exact for polynomial `He_r`
/// once `nodes > r`.
pub fn hermite_quadrature(r: u32, alpha: f64, nodes: usize) -> Result<f64> {
    if nodes < 64 {
        return Err(Error::Domain(format!("at least 64 nodes required, got {nodes}")));
    }
    let gh_off: Vec<f64> = (1..nodes).map(|k| (k as f64).sqrt()).collect();
    let (gh_x, gh_w) = golub_welsch(&vec![0.0; nodes], &gh_off);
    let linear: f64 = gh_x
        .iter()
        .zip(&gh_w)
        .map(|(&x, &w)| w * x * hermite_he(r, x))
        .sum();

    let gl_diag: Vec<f64> = (0..nodes).map(|k| 2.0 * k as f64 + 1.0).collect();
    let gl_off: Vec<f64> = (1..nodes).map(|k| k as f64).collect();
    let (gl_t, gl_w) = golub_welsch(&gl_diag, &gl_off);
    // E|g| f(g) = 1/sqrt(2 pi) * sum_i w_i [f(g_i) + f(-g_i)],  g_i = sqrt(2 t_i)
    let abs_part: f64 = gl_t
        .iter()
        .zip(&gl_w)
        .map(|(&t, &w)| {
            let g = (2.0 * t.max(0.0)).sqrt();
            w * (hermite_he(r, g) + hermite_he(r, -g))
        })
        .sum::<f64>()
        / (2.0 * std::f64::consts::PI).sqrt();

    let expectation = 0.5 * (1.0 + alpha) * linear + 0.5 * (1.0 - alpha) * abs_part;
    let r_fact: f64 = (1..=r).map(|k| k as f64).product();
    Ok(expectation / r_fact.sqrt())
}
