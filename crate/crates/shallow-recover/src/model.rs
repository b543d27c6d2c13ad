//! Forward models, cross-entropy loss, and analytic per-sample/batch
//! gradients and Hessians for the two network types.
//!
//! The FCN output is `(1/K) sum_k phi(w_k^T x)` and the non-overlapping CNN
//! output is `(1/K) sum_k phi(w^T x^(k))` over K disjoint strides of x, with
//! `phi` the sigmoid. Labels are Bernoulli with success probability equal to
//! the network output, and the loss is the empirical cross entropy.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{RecoverError, Result};
use crate::sum::{Kahan, KahanBuf, REDUCTION_CHUNK};

/// Clamp for the output probability inside loss/gradient/Hessian ratios.
pub const PROB_EPS: f64 = 1e-12;

/// Dense Hessians are rejected above this flattened dimension.
pub const HESSIAN_DIM_CAP: usize = 512;

/// Fully-connected weights: a d x K matrix whose k-th column is neuron k.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnWeights {
    pub mat: DMatrix<f64>,
}

impl FcnWeights {
    pub fn new(mat: DMatrix<f64>) -> Self {
        Self { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn neurons(&self) -> usize {
        self.mat.ncols()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.norm()
    }
}

/// Shared convolutional filter of length m applied to K disjoint strides.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnWeights {
    pub filter: DVector<f64>,
    pub strides: usize,
}

impl CnnWeights {
    pub fn new(filter: DVector<f64>, strides: usize) -> Self {
        Self { filter, strides }
    }

    pub fn filter_len(&self) -> usize {
        self.filter.len()
    }

    /// Input dimension d = m * K.
    pub fn dim(&self) -> usize {
        self.filter.len() * self.strides
    }
}

/// Either network, as produced by ground-truth generation and consumed by
/// the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub enum NetworkWeights {
    Fcn(FcnWeights),
    Cnn(CnnWeights),
}

impl NetworkWeights {
    pub fn dim(&self) -> usize {
        match self {
            NetworkWeights::Fcn(w) => w.dim(),
            NetworkWeights::Cnn(w) => w.dim(),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            NetworkWeights::Fcn(w) => w.frobenius_norm(),
            NetworkWeights::Cnn(w) => w.filter.norm(),
        }
    }

    /// Flattened parameter vector (column-major for FCN).
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            NetworkWeights::Fcn(w) => w.mat.as_slice().to_vec(),
            NetworkWeights::Cnn(w) => w.filter.as_slice().to_vec(),
        }
    }
}

/// A labelled sample: standard-normal input and binary label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: u8,
}

/// A dataset of n samples sharing input dimension d, stored flat row-major.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub d: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<u8>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn y(&self, i: usize) -> f64 {
        self.ys[i] as f64
    }

    /// Copy of a contiguous index range (used by the three-way split).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            d: self.d,
            xs: self.xs[range.start * self.d..range.end * self.d].to_vec(),
            ys: self.ys[range.clone()].to_vec(),
            seed: self.seed,
        }
    }
}

/// Sigmoid and its first three derivatives, via the stable `exp(-|z|)` branch.
pub fn sigmoid_derivatives(z: f64, order: u8) -> Result<f64> {
    if !z.is_finite() {
        return Err(RecoverError::NonFinite("sigmoid argument"));
    }
    let p = sigmoid(z);
    Ok(match order {
        0 => p,
        1 => p * (1.0 - p),
        2 => p * (1.0 - p) * (1.0 - 2.0 * p),
        3 => p * (1.0 - p) * (1.0 - 6.0 * p + 6.0 * p * p),
        _ => {
            return Err(RecoverError::InvalidArgument(format!(
                "sigmoid derivative order must be 0..=3, got {order}"
            )))
        }
    })
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        1.0 / (1.0 + e)
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(RecoverError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_label(y: f64) -> Result<()> {
    if y != 0.0 && y != 1.0 {
        return Err(RecoverError::InvalidLabel(y));
    }
    Ok(())
}

/// FCN forward pass: (1/K) sum_k phi(w_k^T x).
pub fn forward_fcn(w: &FcnWeights, x: &[f64]) -> Result<f64> {
    check_dim(w.dim(), x.len())?;
    let k = w.neurons();
    let mut acc = 0.0;
    for col in w.mat.column_iter() {
        acc += sigmoid(dot(col.as_slice(), x));
    }
    Ok(acc / k as f64)
}

/// CNN forward pass over the K non-overlapping strides.
pub fn forward_cnn(w: &CnnWeights, x: &[f64]) -> Result<f64> {
    check_dim(w.dim(), x.len())?;
    let m = w.filter_len();
    let mut acc = 0.0;
    for k in 0..w.strides {
        acc += sigmoid(dot(w.filter.as_slice(), &x[k * m..(k + 1) * m]));
    }
    Ok(acc / w.strides as f64)
}

pub fn forward(w: &NetworkWeights, x: &[f64]) -> Result<f64> {
    match w {
        NetworkWeights::Fcn(w) => forward_fcn(w, x),
        NetworkWeights::Cnn(w) => forward_cnn(w, x),
    }
}

/// Block-diagonal embedding of a CNN filter into FCN weights: column k holds
/// the filter in rows m(k-1)+1..mk.
pub fn cnn_to_fcn(w: &CnnWeights) -> FcnWeights {
    let m = w.filter_len();
    let d = w.dim();
    let mut mat = DMatrix::zeros(d, w.strides);
    for k in 0..w.strides {
        for i in 0..m {
            mat[(k * m + i, k)] = w.filter[i];
        }
    }
    FcnWeights::new(mat)
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Cross-entropy of a predicted probability against a binary label.
pub fn cross_entropy(p: f64, y: f64) -> Result<f64> {
    check_label(y)?;
    let p = clamp_prob(p);
    Ok(-y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}

pub fn sample_loss(w: &NetworkWeights, x: &[f64], y: f64) -> Result<f64> {
    cross_entropy(forward(w, x)?, y)
}

/// Per-neuron pre-activations and sigmoid derivative values for one sample.
struct FcnEval {
    phi1: Vec<f64>,
    phi2: Vec<f64>,
    h: f64,
}

fn eval_fcn(w: &FcnWeights, x: &[f64], with_second: bool) -> FcnEval {
    let k = w.neurons();
    let mut phi1 = vec![0.0; k];
    let mut phi2 = if with_second { vec![0.0; k] } else { Vec::new() };
    let mut h = 0.0;
    for (j, col) in w.mat.column_iter().enumerate() {
        let p = sigmoid(dot(col.as_slice(), x));
        h += p;
        let p1 = p * (1.0 - p);
        phi1[j] = p1;
        if with_second {
            phi2[j] = p1 * (1.0 - 2.0 * p);
        }
    }
    FcnEval {
        phi1,
        phi2,
        h: h / k as f64,
    }
}

/// Per-sample FCN gradient: column j is -(1/K) (y-H)/(H(1-H)) phi'(w_j^T x) x.
pub fn grad_fcn_sample(w: &FcnWeights, x: &[f64], y: f64) -> Result<DMatrix<f64>> {
    check_dim(w.dim(), x.len())?;
    check_label(y)?;
    let (d, k) = (w.dim(), w.neurons());
    let ev = eval_fcn(w, x, false);
    let h = clamp_prob(ev.h);
    let ratio = (y - h) / (h * (1.0 - h));
    let mut g = DMatrix::zeros(d, k);
    for j in 0..k {
        let coeff = -ratio * ev.phi1[j] / k as f64;
        for i in 0..d {
            g[(i, j)] = coeff * x[i];
        }
    }
    Ok(g)
}

/// Per-sample CNN gradient: the full stride sum
/// `-(1/K) (y-H)/(H(1-H)) sum_k phi'(w^T x^(k)) x^(k)`.
pub fn grad_cnn_sample(w: &CnnWeights, x: &[f64], y: f64) -> Result<DVector<f64>> {
    check_dim(w.dim(), x.len())?;
    check_label(y)?;
    let m = w.filter_len();
    let kk = w.strides;
    let mut h = 0.0;
    let mut phi1 = vec![0.0; kk];
    for k in 0..kk {
        let p = sigmoid(dot(w.filter.as_slice(), &x[k * m..(k + 1) * m]));
        h += p;
        phi1[k] = p * (1.0 - p);
    }
    let h = clamp_prob(h / kk as f64);
    let ratio = (y - h) / (h * (1.0 - h));
    let mut g = DVector::zeros(m);
    for k in 0..kk {
        let coeff = -ratio * phi1[k] / kk as f64;
        let xk = &x[k * m..(k + 1) * m];
        for i in 0..m {
            g[i] += coeff * xk[i];
        }
    }
    Ok(g)
}

/// Hessian coefficients shared by FCN and CNN: the off-diagonal curvature
/// factor `(H^2 + y - 2yH) / (H(1-H))^2` and the residual ratio.
#[inline]
fn hessian_ratios(h: f64, y: f64) -> (f64, f64) {
    let denom = h * (1.0 - h);
    let curv = (h * h + y - 2.0 * y * h) / (denom * denom);
    let ratio = (y - h) / denom;
    (curv, ratio)
}

/// Per-sample FCN Hessian, a dK x dK symmetric matrix of blocks
/// `xi_{j,l} x x^T` (column-major neuron-block layout).
pub fn hessian_fcn_sample(w: &FcnWeights, x: &[f64], y: f64) -> Result<DMatrix<f64>> {
    check_dim(w.dim(), x.len())?;
    check_label(y)?;
    let (d, k) = (w.dim(), w.neurons());
    let dk = d * k;
    if dk > HESSIAN_DIM_CAP {
        return Err(RecoverError::HessianSizeCap {
            cap: HESSIAN_DIM_CAP,
            requested: dk,
        });
    }
    let xi = fcn_xi(w, x, y);
    let mut hess = DMatrix::zeros(dk, dk);
    for j in 0..k {
        for l in j..k {
            let c = xi[(j, l)];
            if l == j {
                // mirror a single computed product so the block is exactly
                // symmetric in floating point
                for a in 0..d {
                    for b in a..d {
                        let v = c * x[a] * x[b];
                        hess[(j * d + a, j * d + b)] = v;
                        hess[(j * d + b, j * d + a)] = v;
                    }
                }
            } else {
                for a in 0..d {
                    for b in 0..d {
                        let v = c * x[a] * x[b];
                        hess[(j * d + a, l * d + b)] = v;
                        hess[(l * d + b, j * d + a)] = v;
                    }
                }
            }
        }
    }
    Ok(hess)
}

/// The xi_{j,l} coefficient matrix for one FCN sample.
fn fcn_xi(w: &FcnWeights, x: &[f64], y: f64) -> DMatrix<f64> {
    let k = w.neurons();
    let ev = eval_fcn(w, x, true);
    let h = clamp_prob(ev.h);
    let (curv, ratio) = hessian_ratios(h, y);
    let kf = k as f64;
    let mut xi = DMatrix::zeros(k, k);
    for j in 0..k {
        for l in j..k {
            let mut v = curv * ev.phi1[j] * ev.phi1[l] / (kf * kf);
            if j == l {
                v -= ratio * ev.phi2[j] / kf;
            }
            xi[(j, l)] = v;
            xi[(l, j)] = v;
        }
    }
    xi
}

/// Per-sample CNN Hessian: `sum_{j,l} g_{j,l} x^(j) x^(l)^T`, m x m.
pub fn hessian_cnn_sample(w: &CnnWeights, x: &[f64], y: f64) -> Result<DMatrix<f64>> {
    check_dim(w.dim(), x.len())?;
    check_label(y)?;
    let m = w.filter_len();
    if m > HESSIAN_DIM_CAP {
        return Err(RecoverError::HessianSizeCap {
            cap: HESSIAN_DIM_CAP,
            requested: m,
        });
    }
    let kk = w.strides;
    let kf = kk as f64;
    let mut h = 0.0;
    let mut phi1 = vec![0.0; kk];
    let mut phi2 = vec![0.0; kk];
    for k in 0..kk {
        let p = sigmoid(dot(w.filter.as_slice(), &x[k * m..(k + 1) * m]));
        h += p;
        let p1 = p * (1.0 - p);
        phi1[k] = p1;
        phi2[k] = p1 * (1.0 - 2.0 * p);
    }
    let h = clamp_prob(h / kf);
    let (curv, ratio) = hessian_ratios(h, y);
    let mut hess = DMatrix::zeros(m, m);
    for j in 0..kk {
        let xj = &x[j * m..(j + 1) * m];
        for l in 0..kk {
            let xl = &x[l * m..(l + 1) * m];
            let mut g = curv * phi1[j] * phi1[l] / (kf * kf);
            if j == l {
                g -= ratio * phi2[j] / kf;
            }
            for a in 0..m {
                for b in 0..m {
                    hess[(a, b)] += g * xj[a] * xl[b];
                }
            }
        }
    }
    // symmetry is exact up to accumulation order; enforce it
    let sym = (&hess + hess.transpose()) * 0.5;
    Ok(sym)
}

/// Runs `per_chunk` over fixed-size sample ranges in parallel and merges the
/// accumulators sequentially in chunk order.
pub(crate) fn chunked_reduce<F>(n: usize, out_len: usize, per_chunk: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut KahanBuf) + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(REDUCTION_CHUNK).collect();
    let parts: Vec<KahanBuf> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = KahanBuf::new(out_len);
            per_chunk(s..(s + REDUCTION_CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = KahanBuf::new(out_len);
    for p in &parts {
        total.merge(p);
    }
    total.into_vec()
}

/// Mean cross-entropy loss over the dataset.
pub fn batch_loss(w: &NetworkWeights, data: &Dataset) -> Result<f64> {
    check_dim(w.dim(), data.d)?;
    let n = data.len();
    let sums = chunked_reduce(n, 1, |range, acc| {
        let mut local = Kahan::default();
        for i in range {
            let p = forward(w, data.x(i)).expect("dims checked");
            local.add(cross_entropy(p, data.y(i)).expect("label checked"));
        }
        acc.add_at(0, local.value());
    });
    Ok(sums[0] / n as f64)
}

/// Mean FCN gradient over the dataset (equals the gradient of the empirical
/// loss).
pub fn batch_grad_fcn(w: &FcnWeights, data: &Dataset) -> Result<DMatrix<f64>> {
    check_dim(w.dim(), data.d)?;
    let (d, k) = (w.dim(), w.neurons());
    let n = data.len();
    let kf = k as f64;
    let sums = chunked_reduce(n, d * k, |range, acc| {
        for i in range {
            let x = data.x(i);
            let y = data.y(i);
            let ev = eval_fcn(w, x, false);
            let h = clamp_prob(ev.h);
            let ratio = (y - h) / (h * (1.0 - h));
            for j in 0..k {
                let coeff = -ratio * ev.phi1[j] / kf;
                acc.add_scaled(j * d, x, coeff);
            }
        }
    });
    let mut g = DMatrix::from_column_slice(d, k, &sums);
    g /= n as f64;
    Ok(g)
}

/// Mean CNN gradient over the dataset.
pub fn batch_grad_cnn(w: &CnnWeights, data: &Dataset) -> Result<DVector<f64>> {
    check_dim(w.dim(), data.d)?;
    let m = w.filter_len();
    let kk = w.strides;
    let kf = kk as f64;
    let n = data.len();
    let sums = chunked_reduce(n, m, |range, acc| {
        let mut phi1 = vec![0.0; kk];
        for i in range {
            let x = data.x(i);
            let y = data.y(i);
            let mut h = 0.0;
            for k in 0..kk {
                let p = sigmoid(dot(w.filter.as_slice(), &x[k * m..(k + 1) * m]));
                h += p;
                phi1[k] = p * (1.0 - p);
            }
            let h = clamp_prob(h / kf);
            let ratio = (y - h) / (h * (1.0 - h));
            for k in 0..kk {
                acc.add_scaled(0, &x[k * m..(k + 1) * m], -ratio * phi1[k] / kf);
            }
        }
    });
    let mut g = DVector::from_column_slice(&sums);
    g /= n as f64;
    Ok(g)
}

/// Mean FCN Hessian over the dataset, dK x dK.
pub fn batch_hessian_fcn(w: &FcnWeights, data: &Dataset) -> Result<DMatrix<f64>> {
    check_dim(w.dim(), data.d)?;
    let (d, k) = (w.dim(), w.neurons());
    let dk = d * k;
    if dk > HESSIAN_DIM_CAP {
        return Err(RecoverError::HessianSizeCap {
            cap: HESSIAN_DIM_CAP,
            requested: dk,
        });
    }
    let n = data.len();
    let sums = chunked_reduce(n, dk * dk, |range, acc| {
        for i in range {
            let x = data.x(i);
            let xi = fcn_xi(w, x, data.y(i));
            for j in 0..k {
                for l in j..k {
                    let c = xi[(j, l)];
                    for a in 0..d {
                        let ca = c * x[a];
                        for b in 0..d {
                            let v = ca * x[b];
                            acc.add_at((l * d + b) * dk + j * d + a, v);
                            if l != j {
                                acc.add_at((j * d + a) * dk + l * d + b, v);
                            }
                        }
                    }
                }
            }
        }
    });
    let mut hmat = DMatrix::from_column_slice(dk, dk, &sums);
    hmat /= n as f64;
    Ok(hmat)
}

/// Mean CNN Hessian over the dataset, m x m.
pub fn batch_hessian_cnn(w: &CnnWeights, data: &Dataset) -> Result<DMatrix<f64>> {
    check_dim(w.dim(), data.d)?;
    let m = w.filter_len();
    if m > HESSIAN_DIM_CAP {
        return Err(RecoverError::HessianSizeCap {
            cap: HESSIAN_DIM_CAP,
            requested: m,
        });
    }
    let kk = w.strides;
    let kf = kk as f64;
    let n = data.len();
    let sums = chunked_reduce(n, m * m, |range, acc| {
        let mut phi1 = vec![0.0; kk];
        let mut phi2 = vec![0.0; kk];
        for i in range {
            let x = data.x(i);
            let y = data.y(i);
            let mut h = 0.0;
            for k in 0..kk {
                let p = sigmoid(dot(w.filter.as_slice(), &x[k * m..(k + 1) * m]));
                h += p;
                let p1 = p * (1.0 - p);
                phi1[k] = p1;
                phi2[k] = p1 * (1.0 - 2.0 * p);
            }
            let h = clamp_prob(h / kf);
            let (curv, ratio) = hessian_ratios(h, y);
            for j in 0..kk {
                let xj = &x[j * m..(j + 1) * m];
                for l in 0..kk {
                    let xl = &x[l * m..(l + 1) * m];
                    let mut g = curv * phi1[j] * phi1[l] / (kf * kf);
                    if j == l {
                        g -= ratio * phi2[j] / kf;
                    }
                    for a in 0..m {
                        let ga = g * xj[a];
                        for b in 0..m {
                            acc.add_at(b * m + a, ga * xl[b]);
                        }
                    }
                }
            }
        }
    });
    let mut hmat = DMatrix::from_column_slice(m, m, &sums);
    hmat /= n as f64;
    let sym = (&hmat + hmat.transpose()) * 0.5;
    Ok(sym)
}

/// Batch gradient for either network, flattened.
pub fn batch_grad(w: &NetworkWeights, data: &Dataset) -> Result<Vec<f64>> {
    Ok(match w {
        NetworkWeights::Fcn(w) => batch_grad_fcn(w, data)?.as_slice().to_vec(),
        NetworkWeights::Cnn(w) => batch_grad_cnn(w, data)?.as_slice().to_vec(),
    })
}

/// Fused single-pass mean loss and flattened gradient; the optimizer's hot
/// path (one sigmoid evaluation per neuron per sample, no per-sample
/// allocation).
pub fn batch_loss_grad(w: &NetworkWeights, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    check_dim(w.dim(), data.d)?;
    let n = data.len();
    match w {
        NetworkWeights::Fcn(w) => {
            let (d, k) = (w.dim(), w.neurons());
            let kf = k as f64;
            let sums = chunked_reduce(n, d * k + 1, |range, acc| {
                let mut phi1 = vec![0.0f64; k];
                let mut local_loss = Kahan::default();
                for i in range {
                    let x = data.x(i);
                    let y = data.y(i);
                    let mut h = 0.0;
                    for (j, col) in w.mat.column_iter().enumerate() {
                        let p = sigmoid(dot(col.as_slice(), x));
                        h += p;
                        phi1[j] = p * (1.0 - p);
                    }
                    let h = clamp_prob(h / kf);
                    local_loss.add(-(y * h.ln() + (1.0 - y) * (1.0 - h).ln()));
                    let ratio = (y - h) / (h * (1.0 - h));
                    for j in 0..k {
                        acc.add_scaled(j * d, x, -ratio * phi1[j] / kf);
                    }
                }
                acc.add_at(d * k, local_loss.value());
            });
            let loss = sums[d * k] / n as f64;
            let grad: Vec<f64> = sums[..d * k].iter().map(|v| v / n as f64).collect();
            Ok((loss, grad))
        }
        NetworkWeights::Cnn(w) => {
            let m = w.filter_len();
            let kk = w.strides;
            let kf = kk as f64;
            let filt = w.filter.as_slice();
            let sums = chunked_reduce(n, m + 1, |range, acc| {
                let mut phi1 = vec![0.0f64; kk];
                let mut local_loss = Kahan::default();
                for i in range {
                    let x = data.x(i);
                    let y = data.y(i);
                    let mut h = 0.0;
                    for j in 0..kk {
                        let p = sigmoid(dot(filt, &x[j * m..(j + 1) * m]));
                        h += p;
                        phi1[j] = p * (1.0 - p);
                    }
                    let h = clamp_prob(h / kf);
                    local_loss.add(-(y * h.ln() + (1.0 - y) * (1.0 - h).ln()));
                    let ratio = (y - h) / (h * (1.0 - h));
                    for j in 0..kk {
                        acc.add_scaled(0, &x[j * m..(j + 1) * m], -ratio * phi1[j] / kf);
                    }
                }
                acc.add_at(m, local_loss.value());
            });
            let loss = sums[m] / n as f64;
            let grad: Vec<f64> = sums[..m].iter().map(|v| v / n as f64).collect();
            Ok((loss, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigmoid_derivative_values() {
        assert_eq!(sigmoid_derivatives(0.0, 0).unwrap(), 0.5);
        assert_eq!(sigmoid_derivatives(0.0, 1).unwrap(), 0.25);
        assert_abs_diff_eq!(
            sigmoid_derivatives(3f64.ln(), 0).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(sigmoid_derivatives(0.0, 2).unwrap(), 0.0, epsilon = 1e-15);
        assert!(sigmoid_derivatives(f64::NAN, 0).is_err());
        assert!(sigmoid_derivatives(0.0, 4).is_err());
        // large-argument stability
        assert!(sigmoid_derivatives(700.0, 0).unwrap().is_finite());
        assert!(sigmoid_derivatives(-700.0, 1).unwrap().is_finite());
    }

    #[test]
    fn forward_fcn_basics() {
        let w = FcnWeights::new(DMatrix::zeros(4, 2));
        assert_eq!(forward_fcn(&w, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.5);

        let w = FcnWeights::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        assert_abs_diff_eq!(
            forward_fcn(&w, &[3f64.ln(), 5.0]).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        assert!(forward_fcn(&w, &[1.0]).is_err());
    }

    #[test]
    fn forward_fcn_matches_scalar_loop() {
        let mut rng = crate::rng::RngStream::new(11, crate::rng::StreamId::new("fwd", 0));
        let (d, k) = (3, 2);
        let mut wbuf = vec![0.0; d * k];
        rng.fill_normal(&mut wbuf);
        let w = FcnWeights::new(DMatrix::from_column_slice(d, k, &wbuf));
        let mut x = vec![0.0; d];
        rng.fill_normal(&mut x);
        // independent scalar-loop oracle
        let mut acc = 0.0;
        for j in 0..k {
            let mut z = 0.0;
            for i in 0..d {
                z += wbuf[j * d + i] * x[i];
            }
            acc += 1.0 / (1.0 + (-z).exp());
        }
        assert_abs_diff_eq!(
            forward_fcn(&w, &x).unwrap(),
            acc / k as f64,
            epsilon = 1e-14
        );
    }

    #[test]
    fn cnn_embedding_identities() {
        let w = CnnWeights::new(DVector::from_column_slice(&[3.0]), 2);
        let f = cnn_to_fcn(&w);
        assert_eq!(f.mat, DMatrix::from_column_slice(2, 2, &[3.0, 0.0, 0.0, 3.0]));
        assert_abs_diff_eq!(
            f.frobenius_norm(),
            (2f64).sqrt() * 3.0,
            epsilon = 1e-14
        );

        let mut rng = crate::rng::RngStream::new(5, crate::rng::StreamId::new("emb", 0));
        let mut filt = vec![0.0; 4];
        rng.fill_normal(&mut filt);
        let w = CnnWeights::new(DVector::from_column_slice(&filt), 3);
        let f = cnn_to_fcn(&w);
        let mut x = vec![0.0; 12];
        rng.fill_normal(&mut x);
        assert_abs_diff_eq!(
            forward_cnn(&w, &x).unwrap(),
            forward_fcn(&f, &x).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn forward_cnn_single_tap() {
        let w = CnnWeights::new(DVector::from_column_slice(&[1.0]), 2);
        let l3 = 3f64.ln();
        assert_abs_diff_eq!(forward_cnn(&w, &[l3, l3]).unwrap(), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_values() {
        assert_abs_diff_eq!(cross_entropy(0.5, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(cross_entropy(0.5, 0.0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            cross_entropy(0.75, 1.0).unwrap(),
            -(0.75f64.ln()),
            epsilon = 1e-15
        );
        assert!(cross_entropy(0.5, 0.3).is_err());
        // clamping keeps the loss finite at the boundary
        assert!(cross_entropy(0.0, 1.0).unwrap().is_finite());
    }

    #[test]
    fn grad_fcn_at_zero_weights() {
        let (d, k) = (4, 3);
        let w = FcnWeights::new(DMatrix::zeros(d, k));
        let x = [0.3, -1.2, 0.7, 2.0];
        let g = grad_fcn_sample(&w, &x, 1.0).unwrap();
        // H = 0.5, phi' = 0.25, ratio = 2 => each column -(0.5/K) x
        for j in 0..k {
            for i in 0..d {
                assert_abs_diff_eq!(g[(i, j)], -0.5 / k as f64 * x[i], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn grad_cnn_at_zero_weights() {
        let w = CnnWeights::new(DVector::zeros(3), 2);
        let x = [1.0, -0.5, 0.25, 2.0, 0.1, -1.0];
        let g = grad_cnn_sample(&w, &x, 1.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(g[i], -0.25 * (x[i] + x[3 + i]), epsilon = 1e-14);
        }
    }

    fn central_diff_loss(w: &NetworkWeights, x: &[f64], y: f64, step: f64) -> Vec<f64> {
        let flat = w.to_flat();
        let mut grad = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let mut wp = flat.clone();
            let mut wm = flat.clone();
            wp[i] += step;
            wm[i] -= step;
            let rebuild = |f: &[f64]| match w {
                NetworkWeights::Fcn(fw) => NetworkWeights::Fcn(FcnWeights::new(
                    DMatrix::from_column_slice(fw.dim(), fw.neurons(), f),
                )),
                NetworkWeights::Cnn(cw) => NetworkWeights::Cnn(CnnWeights::new(
                    DVector::from_column_slice(f),
                    cw.strides,
                )),
            };
            let lp = sample_loss(&rebuild(&wp), x, y).unwrap();
            let lm = sample_loss(&rebuild(&wm), x, y).unwrap();
            grad[i] = (lp - lm) / (2.0 * step);
        }
        grad
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = crate::rng::RngStream::new(7, crate::rng::StreamId::new("fd", 0));
        for trial in 0..20 {
            let (d, k) = (10, 3);
            let mut wbuf = vec![0.0; d * k];
            rng.fill_normal(&mut wbuf);
            for v in wbuf.iter_mut() {
                *v *= 0.4;
            }
            let w = FcnWeights::new(DMatrix::from_column_slice(d, k, &wbuf));
            let mut x = vec![0.0; d];
            rng.fill_normal(&mut x);
            let y = (trial % 2) as f64;
            let g = grad_fcn_sample(&w, &x, y).unwrap();
            let fd = central_diff_loss(&NetworkWeights::Fcn(w), &x, y, 1e-4);
            let gn = g.norm().max(1e-12);
            for (a, b) in g.as_slice().iter().zip(&fd) {
                assert!((a - b).abs() / gn <= 1e-5, "fcn grad mismatch {a} vs {b}");
            }
        }
    }

    #[test]
    fn cnn_grad_equals_fcn_block_aggregation() {
        let mut rng = crate::rng::RngStream::new(9, crate::rng::StreamId::new("agg", 0));
        let (m, kk) = (4, 3);
        let mut filt = vec![0.0; m];
        rng.fill_normal(&mut filt);
        let w = CnnWeights::new(DVector::from_column_slice(&filt), kk);
        let f = cnn_to_fcn(&w);
        let mut x = vec![0.0; m * kk];
        rng.fill_normal(&mut x);
        let gc = grad_cnn_sample(&w, &x, 1.0).unwrap();
        let gf = grad_fcn_sample(&f, &x, 1.0).unwrap();
        for i in 0..m {
            let mut agg = 0.0;
            for k in 0..kk {
                agg += gf[(k * m + i, k)];
            }
            assert_abs_diff_eq!(gc[i], agg, epsilon = 1e-12);
        }
    }

    #[test]
    fn hessian_is_symmetric_and_matches_grad_differences() {
        let mut rng = crate::rng::RngStream::new(13, crate::rng::StreamId::new("hess", 0));
        let (d, k) = (5, 2);
        let mut wbuf = vec![0.0; d * k];
        rng.fill_normal(&mut wbuf);
        for v in wbuf.iter_mut() {
            *v *= 0.4;
        }
        let w = FcnWeights::new(DMatrix::from_column_slice(d, k, &wbuf));
        let mut x = vec![0.0; d];
        rng.fill_normal(&mut x);
        let h = hessian_fcn_sample(&w, &x, 1.0).unwrap();
        assert_eq!(h.clone(), h.transpose());
        // finite differences of the analytic gradient
        let step = 1e-5;
        let hn = h.norm().max(1e-12);
        for p in 0..d * k {
            let mut wp = wbuf.clone();
            let mut wm = wbuf.clone();
            wp[p] += step;
            wm[p] -= step;
            let gp = grad_fcn_sample(
                &FcnWeights::new(DMatrix::from_column_slice(d, k, &wp)),
                &x,
                1.0,
            )
            .unwrap();
            let gm = grad_fcn_sample(
                &FcnWeights::new(DMatrix::from_column_slice(d, k, &wm)),
                &x,
                1.0,
            )
            .unwrap();
            for q in 0..d * k {
                let fd = (gp.as_slice()[q] - gm.as_slice()[q]) / (2.0 * step);
                assert!(
                    (h[(q, p)] - fd).abs() / hn <= 1e-4,
                    "hessian mismatch at ({q},{p}): {} vs {fd}",
                    h[(q, p)]
                );
            }
        }
    }

    #[test]
    fn hessian_size_cap_enforced() {
        let w = FcnWeights::new(DMatrix::zeros(200, 3));
        let x = vec![0.0; 200];
        assert!(matches!(
            hessian_fcn_sample(&w, &x, 1.0),
            Err(RecoverError::HessianSizeCap { .. })
        ));
    }

    #[test]
    fn label_symmetry() {
        let mut rng = crate::rng::RngStream::new(21, crate::rng::StreamId::new("sym", 0));
        let (d, k) = (6, 2);
        let mut wbuf = vec![0.0; d * k];
        rng.fill_normal(&mut wbuf);
        let w = FcnWeights::new(DMatrix::from_column_slice(d, k, &wbuf));
        let mut x = vec![0.0; d];
        rng.fill_normal(&mut x);
        let h = forward_fcn(&w, &x).unwrap();
        assert_abs_diff_eq!(
            cross_entropy(h, 1.0).unwrap(),
            cross_entropy(1.0 - h, 0.0).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn batch_grad_matches_sample_mean() {
        let mut rng = crate::rng::RngStream::new(17, crate::rng::StreamId::new("batch", 0));
        let (d, k, n) = (4, 2, 37);
        let mut wbuf = vec![0.0; d * k];
        rng.fill_normal(&mut wbuf);
        let w = FcnWeights::new(DMatrix::from_column_slice(d, k, &wbuf));
        let mut xs = vec![0.0; n * d];
        rng.fill_normal(&mut xs);
        let ys: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let data = Dataset {
            d,
            xs,
            ys,
            seed: 0,
        };
        let g = batch_grad_fcn(&w, &data).unwrap();
        let mut mean = DMatrix::zeros(d, k);
        for i in 0..n {
            mean += grad_fcn_sample(&w, data.x(i), data.y(i)).unwrap();
        }
        mean /= n as f64;
        assert!((g - mean).norm() < 1e-12);
    }

    #[test]
    fn fused_loss_grad_matches_separate_passes() {
        let mut rng = crate::rng::RngStream::new(23, crate::rng::StreamId::new("fused", 0));
        let d = 6;
        let n = 4 * REDUCTION_CHUNK / 3 + 11; // spans a partial final chunk
        let mut xs = vec![0.0; n * d];
        rng.fill_normal(&mut xs);
        let ys: Vec<u8> = (0..n).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let data = Dataset {
            d,
            xs,
            ys,
            seed: 0,
        };

        let mut wbuf = vec![0.0; d * 2];
        rng.fill_normal(&mut wbuf);
        let fcn = NetworkWeights::Fcn(FcnWeights::new(DMatrix::from_column_slice(d, 2, &wbuf)));
        let mut fbuf = vec![0.0; 3];
        rng.fill_normal(&mut fbuf);
        let cnn = NetworkWeights::Cnn(CnnWeights::new(DVector::from_vec(fbuf), 2));

        for w in [&fcn, &cnn] {
            let (loss, grad) = batch_loss_grad(w, &data).unwrap();
            let loss_sep = batch_loss(w, &data).unwrap();
            let grad_sep = batch_grad(w, &data).unwrap();
            assert_abs_diff_eq!(loss, loss_sep, epsilon = 1e-13);
            assert_eq!(grad.len(), grad_sep.len());
            for (a, b) in grad.iter().zip(&grad_sep) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-13);
            }
        }
    }
}
