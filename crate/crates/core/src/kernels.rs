//! Width- and depth-induced tangent kernels.
//!
//! The depth-induced kernel sums, over the shortcut layers `l = k' * hbar`
//! (`k' = 1..=K`), the inner products of the weight gradients `df/dW^l` after
//! left-multiplication by a block-diagonal stack of `(W^l)^T`. It factorizes
//! into
//!
//! ```text
//! NTK_d(x, x') = sum_{k'} 1/M_z * <z^{l-1}(x), z^{l-1}(x')> * Delta^l(x)^T Delta^l(x')
//! Delta^l(x)   = sum_{k >= k'} [prod_{i=l..k*hbar} W_hat^i^T D^i(x)] J^T
//! ```
//!
//! Biases never enter any kernel. Inner products between matrix-valued
//! gradients are `A^T B`, so every kernel value is an `n_o x n_o` block; the
//! scalar kernel used for regression is its trace.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netarch::{ForwardTrace, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct KernelValue {
    pub block: DMatrix<f64>,
    pub trace: f64,
}

impl KernelValue {
    pub fn from_block(block: DMatrix<f64>) -> KernelValue {
        let trace = block.trace();
        KernelValue { block, trace }
    }
}

/// `Delta^{k' hbar}(x)`, shape `n_{k' hbar - 1} x n_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    pub kappa_prime: usize,
    pub value: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    NtkW,
    NtkD,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::NtkW => "ntk_w",
            KernelKind::NtkD => "ntk_d",
        }
    }
}

/// Walks the shortcut suffix sums from layer `L` down to `k_min * hbar`,
/// handing each `Delta^{k' hbar}` to `emit` as soon as it is available.
/// One `W^T D` product per layer.
fn walk_deltas(
    net: &Network,
    trace: &ForwardTrace,
    k_min: usize,
    mut emit: impl FnMut(usize, DMatrix<f64>),
) {
    let cfg = &net.config;
    let n_o = cfg.output_dim;
    let hbar = cfg.hbar;
    let depth = cfg.depth();
    // tail^i = sum over shortcut layers k*hbar >= i of [prod_{m=i+1..k*hbar} W_hat^m^T D^m] J^T
    let mut tail = DMatrix::from_element(cfg.width(depth), n_o, 1.0);
    for l in (k_min * hbar..=depth).rev() {
        let mut scaled = tail;
        for (mut row, &dv) in scaled.row_iter_mut().zip(trace.d_diag[l - 1].iter()) {
            row *= dv;
        }
        let mut product = net.weight(l).tr_mul(&scaled);
        let s = cfg.layer_scale(l);
        if s != 1.0 {
            product *= s;
        }
        if l % hbar == 0 {
            emit(l / hbar, product.clone());
        }
        if l - 1 >= k_min * hbar && cfg.is_shortcut(l - 1) {
            product.add_scalar_mut(1.0);
        }
        tail = product;
    }
}

fn check_kappa(net: &Network, kappa_prime: usize) -> Result<()> {
    let k = net.config.shortcuts;
    if kappa_prime == 0 || kappa_prime > k {
        return Err(Error::Index {
            index: kappa_prime,
            lo: 1,
            hi: k,
        });
    }
    Ok(())
}

/// `Delta^{k' hbar}(x)` for a single `k'`.
pub fn compute_delta(net: &Network, trace: &ForwardTrace, kappa_prime: usize) -> Result<DeltaMatrix> {
    check_kappa(net, kappa_prime)?;
    net.check_trace(trace)?;
    let mut out = None;
    walk_deltas(net, trace, kappa_prime, |k, value| {
        if k == kappa_prime {
            out = Some(value);
        }
    });
    Ok(DeltaMatrix {
        kappa_prime,
        value: out.expect("walk reaches k'"),
    })
}

/// All `Delta^{k' hbar}(x)` for `k' = 1..=K`, in increasing `k'` order.
pub fn compute_deltas(net: &Network, trace: &ForwardTrace) -> Result<Vec<DeltaMatrix>> {
    net.check_trace(trace)?;
    let mut out = Vec::with_capacity(net.config.shortcuts);
    walk_deltas(net, trace, 1, |kappa_prime, value| {
        out.push(DeltaMatrix { kappa_prime, value })
    });
    out.reverse();
    Ok(out)
}

/// Closed-form depth-induced kernel from two forward traces.
pub fn ntk_d_expanded(net: &Network, trace_x: &ForwardTrace, trace_xp: &ForwardTrace) -> Result<KernelValue> {
    let fx = DepthFeatures::new(net, trace_x)?;
    let fxp = DepthFeatures::new(net, trace_xp)?;
    Ok(KernelValue::from_block(fx.block_with(&fxp)))
}

/// Depth-induced kernel evaluated from its definition: reverse-mode weight
/// gradients of the shortcut layers, each stacked block left-multiplied by
/// `(W^l)^T`, paired as `A^T B`.
pub fn ntk_d_definition(net: &Network, x: &DVector<f64>, xp: &DVector<f64>) -> Result<KernelValue> {
    let tx = net.forward(x)?;
    let txp = net.forward(xp)?;
    let jx = net.output_jacobians(&tx);
    let jxp = net.output_jacobians(&txp);
    let cfg = &net.config;
    let n_o = cfg.output_dim;
    let mut block = DMatrix::zeros(n_o, n_o);
    for kappa_prime in 1..=cfg.shortcuts {
        let l = kappa_prime * cfg.hbar;
        let w = net.weight(l);
        let n_l = cfg.width(l);
        let n_prev = cfg.width(l - 1);
        let (gx, gxp) = (&jx[l - 1], &jxp[l - 1]);
        for j in 0..n_prev {
            let a = w.tr_mul(&gx.rows(j * n_l, n_l));
            let b = w.tr_mul(&gxp.rows(j * n_l, n_l));
            block += a.tr_mul(&b);
        }
    }
    Ok(KernelValue::from_block(block))
}

/// Width-induced kernel: sum over all layers of `(df(x)/dW^l)^T df(x')/dW^l`.
pub fn ntk_w(net: &Network, x: &DVector<f64>, xp: &DVector<f64>) -> Result<KernelValue> {
    let tx = net.forward(x)?;
    let txp = net.forward(xp)?;
    let jx = net.output_jacobians(&tx);
    let jxp = net.output_jacobians(&txp);
    let n_o = net.config.output_dim;
    let block = jx
        .iter()
        .zip(&jxp)
        .fold(DMatrix::zeros(n_o, n_o), |acc, (a, b)| acc + a.tr_mul(b));
    Ok(KernelValue::from_block(block))
}

/// Per-sample quantities from which `NTK_d` factorizes.
#[derive(Debug, Clone)]
pub struct DepthFeatures {
    inv_m_z: f64,
    z: Vec<DVector<f64>>,
    delta: Vec<DMatrix<f64>>,
}

impl DepthFeatures {
    pub fn new(net: &Network, trace: &ForwardTrace) -> Result<DepthFeatures> {
        let cfg = &net.config;
        let delta = compute_deltas(net, trace)?
            .into_iter()
            .map(|d| d.value)
            .collect();
        let z = (1..=cfg.shortcuts)
            .map(|k| trace.z[k * cfg.hbar - 1].clone())
            .collect();
        Ok(DepthFeatures {
            inv_m_z: 1.0 / cfg.m_z() as f64,
            z,
            delta,
        })
    }

    pub fn block_with(&self, other: &DepthFeatures) -> DMatrix<f64> {
        let n_o = self.delta.first().map_or(0, |d| d.ncols());
        let mut block = DMatrix::zeros(n_o, n_o);
        for k in 0..self.z.len() {
            let zz = self.z[k].dot(&other.z[k]) * self.inv_m_z;
            block += self.delta[k].tr_mul(&other.delta[k]) * zz;
        }
        block
    }

    pub fn trace_with(&self, other: &DepthFeatures) -> f64 {
        (0..self.z.len())
            .map(|k| self.z[k].dot(&other.z[k]) * self.delta[k].dot(&other.delta[k]))
            .sum::<f64>()
            * self.inv_m_z
    }
}

/// Per-sample quantities from which `NTK_w` factorizes: for each layer the
/// incoming activation and the scaled pre-activation adjoint.
#[derive(Debug, Clone)]
pub struct WidthFeatures {
    z_prev: Vec<DVector<f64>>,
    adj: Vec<DMatrix<f64>>,
}

impl WidthFeatures {
    pub fn new(net: &Network, trace: &ForwardTrace) -> Result<WidthFeatures> {
        net.check_trace(trace)?;
        let n_o = net.config.output_dim;
        let adj = net
            .backward(trace, &DMatrix::identity(n_o, n_o))
            .into_iter()
            .enumerate()
            .map(|(i, a)| a * net.config.layer_scale(i + 1))
            .collect();
        let z_prev = trace.z[..trace.z.len() - 1].to_vec();
        Ok(WidthFeatures { z_prev, adj })
    }

    pub fn block_with(&self, other: &WidthFeatures) -> DMatrix<f64> {
        let n_o = self.adj.first().map_or(0, |a| a.ncols());
        let mut block = DMatrix::zeros(n_o, n_o);
        for l in 0..self.adj.len() {
            block += self.adj[l].tr_mul(&other.adj[l]) * self.z_prev[l].dot(&other.z_prev[l]);
        }
        block
    }

    pub fn trace_with(&self, other: &WidthFeatures) -> f64 {
        (0..self.adj.len())
            .map(|l| self.z_prev[l].dot(&other.z_prev[l]) * self.adj[l].dot(&other.adj[l]))
            .sum()
    }
}

/// Kernel features of one sample, reusable across every pair it appears in.
#[derive(Debug, Clone)]
pub enum KernelFeatures {
    Width(WidthFeatures),
    Depth(DepthFeatures),
}

impl KernelFeatures {
    pub fn new(net: &Network, kind: KernelKind, x: &DVector<f64>) -> Result<KernelFeatures> {
        let trace = net.forward(x)?;
        Ok(match kind {
            KernelKind::NtkW => KernelFeatures::Width(WidthFeatures::new(net, &trace)?),
            KernelKind::NtkD => KernelFeatures::Depth(DepthFeatures::new(net, &trace)?),
        })
    }

    pub fn trace_with(&self, other: &KernelFeatures) -> f64 {
        match (self, other) {
            (KernelFeatures::Width(a), KernelFeatures::Width(b)) => a.trace_with(b),
            (KernelFeatures::Depth(a), KernelFeatures::Depth(b)) => a.trace_with(b),
            _ => panic!("mixed kernel features"),
        }
    }

    pub fn block_with(&self, other: &KernelFeatures) -> DMatrix<f64> {
        match (self, other) {
            (KernelFeatures::Width(a), KernelFeatures::Width(b)) => a.block_with(b),
            (KernelFeatures::Depth(a), KernelFeatures::Depth(b)) => a.block_with(b),
            _ => panic!("mixed kernel features"),
        }
    }
}

pub fn features(net: &Network, kind: KernelKind, xs: &[DVector<f64>]) -> Result<Vec<KernelFeatures>> {
    xs.par_iter()
        .map(|x| KernelFeatures::new(net, kind, x))
        .collect()
}

/// Symmetric matrix of pairwise trace-kernel values.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
}

impl GramMatrix {
    pub fn n_samples(&self) -> usize {
        self.entries.nrows()
    }

    pub fn max_diagonal(&self) -> f64 {
        self.entries.diagonal().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Header-less CSV, 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        matrix_to_csv(&self.entries)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn from_csv(text: &str) -> Result<GramMatrix> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Format(format!("bad value {v:?}: {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Format("gram csv is not square".into()));
        }
        Ok(GramMatrix {
            entries: DMatrix::from_fn(n, n, |i, j| rows[i][j]),
        })
    }
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 24);
    for row in m.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Gram matrix from precomputed features; upper triangle evaluated, lower mirrored.
pub fn gram_from_features(feats: &[KernelFeatures]) -> Result<GramMatrix> {
    let n = feats.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| feats[i].trace_with(&feats[j]))
        .collect();
    let mut entries = DMatrix::zeros(n, n);
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        if !v.is_finite() {
            return Err(Error::NonFiniteKernel { i, j });
        }
        entries[(i, j)] = v;
        entries[(j, i)] = v;
    }
    Ok(GramMatrix { entries })
}

/// `rows x cols` matrix of trace-kernel values between two feature sets.
pub fn cross_from_features(rows: &[KernelFeatures], cols: &[KernelFeatures]) -> Result<DMatrix<f64>> {
    let values: Vec<f64> = (0..rows.len() * cols.len())
        .into_par_iter()
        .map(|idx| rows[idx / cols.len()].trace_with(&cols[idx % cols.len()]))
        .collect();
    let m = DMatrix::from_row_slice(rows.len(), cols.len(), &values);
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteKernel {
            i: idx / cols.len(),
            j: idx % cols.len(),
        });
    }
    Ok(m)
}

/// Trace-kernel Gram matrix over a dataset. Forward traces are computed
/// once per sample.
pub fn gram(net: &Network, kind: KernelKind, xs: &[DVector<f64>]) -> Result<GramMatrix> {
    if xs.is_empty() {
        return Err(Error::Domain("gram needs at least one sample".into()));
    }
    gram_from_features(&features(net, kind, xs)?)
}

/// Pairwise angles in kernel space and their histogram over `[0, pi/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleStats {
    pub angles: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Angles beyond `pi/2` (negative kernel values), not binned.
    pub above_range: usize,
}

impl AngleStats {
    pub fn mean(&self) -> f64 {
        if self.angles.is_empty() {
            return f64::NAN;
        }
        self.angles.iter().sum::<f64>() / self.angles.len() as f64
    }

    /// Fraction of angles in `[lo, hi]`.
    pub fn fraction_within(&self, lo: f64, hi: f64) -> f64 {
        if self.angles.is_empty() {
            return f64::NAN;
        }
        let hits = self.angles.iter().filter(|&&a| a >= lo && a <= hi).count();
        hits as f64 / self.angles.len() as f64
    }
}

pub fn angle_stats(g: &GramMatrix, bins: usize) -> Result<AngleStats> {
    if bins == 0 {
        return Err(Error::Domain("bins must be positive".into()));
    }
    let m = &g.entries;
    let n = m.nrows();
    if let Some(i) = (0..n).find(|&i| m[(i, i)] <= 0.0) {
        return Err(Error::DegenerateKernel(i));
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    let width = half_pi / bins as f64;
    let bin_edges = (0..=bins).map(|b| b as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    let mut above_range = 0;
    let mut angles = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let cos = (m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt()).clamp(-1.0, 1.0);
            let angle = cos.acos();
            angles.push(angle);
            if angle > half_pi {
                above_range += 1;
            } else {
                let b = ((angle / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
        }
    }
    Ok(AngleStats {
        angles,
        bin_edges,
        counts,
        above_range,
    })
}
