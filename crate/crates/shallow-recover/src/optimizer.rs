//! Constant-step gradient descent on the empirical cross-entropy loss,
//! permutation-aligned error, and contraction-rate fitting.

use nalgebra::DMatrix;

use crate::error::{RecoverError, Result};
use crate::model::{batch_loss_grad, CnnWeights, Dataset, FcnWeights, NetworkWeights};
use crate::rng::RngStream;

/// Gradient descent configuration.
#[derive(Clone, Copy, Debug)]
pub struct GDConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// Terminate when the gradient Frobenius norm drops below this.
    pub grad_tol: f64,
    /// Record every `trace_stride`-th iterate summary (1 = every iterate).
    pub trace_stride: usize,
}

pub const DEFAULT_STEP_FCN: f64 = 0.2;
pub const DEFAULT_MAX_ITERS: usize = 3500;
pub const DEFAULT_GRAD_TOL: f64 = 1e-9;

impl GDConfig {
    /// Defaults echoing the step-size scalings eta (FCN) and eta/K (CNN).
    pub fn default_for(model: &NetworkWeights) -> Self {
        let eta = match model {
            NetworkWeights::Fcn(_) => DEFAULT_STEP_FCN,
            NetworkWeights::Cnn(w) => DEFAULT_STEP_FCN / w.strides as f64,
        };
        Self {
            step_size: eta,
            max_iters: DEFAULT_MAX_ITERS,
            grad_tol: DEFAULT_GRAD_TOL,
            trace_stride: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(RecoverError::InvalidArgument("step size must be > 0".into()));
        }
        if self.max_iters == 0 || self.trace_stride == 0 {
            return Err(RecoverError::InvalidArgument(
                "max_iters and trace_stride must be >= 1".into(),
            ));
        }
        if self.grad_tol < 0.0 {
            return Err(RecoverError::InvalidArgument("grad_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// One recorded iterate summary.
#[derive(Clone, Copy, Debug)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Permutation-aligned distance to the ground truth, when supplied.
    pub aligned_err: Option<f64>,
    /// Frobenius distance to the final iterate (filled retroactively).
    pub dist_to_final: f64,
}

/// Why the run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    GradTolReached,
    MaxIters,
}

/// Full trace of a gradient-descent run.
#[derive(Clone, Debug)]
pub struct GDTrace {
    pub records: Vec<TraceRecord>,
    pub final_weights: NetworkWeights,
    pub iterations: usize,
    pub stop: StopReason,
    /// Count of recorded steps where the loss did not decrease.
    pub ascent_steps: usize,
}

fn weights_from_flat(template: &NetworkWeights, flat: &[f64]) -> NetworkWeights {
    match template {
        NetworkWeights::Fcn(w) => NetworkWeights::Fcn(FcnWeights::new(
            DMatrix::from_column_slice(w.dim(), w.neurons(), flat),
        )),
        NetworkWeights::Cnn(w) => NetworkWeights::Cnn(CnnWeights::new(
            nalgebra::DVector::from_column_slice(flat),
            w.strides,
        )),
    }
}

fn flat_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn flat_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Run gradient descent `W_{t+1} = W_t - eta grad f_n(W_t)` on a fixed
/// dataset. The final iterate stands in for the local critical point.
pub fn gd_run(
    data: &Dataset,
    w0: &NetworkWeights,
    cfg: &GDConfig,
    truth: Option<&NetworkWeights>,
) -> Result<GDTrace> {
    cfg.validate()?;
    if w0.dim() != data.d {
        return Err(RecoverError::DimensionMismatch {
            expected: data.d,
            got: w0.dim(),
        });
    }
    let mut current = w0.to_flat();
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut flats: Vec<Vec<f64>> = Vec::new();
    let mut prev_loss = f64::INFINITY;
    let mut ascent_steps = 0usize;
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0usize;

    let aligned = |flat: &[f64]| -> Result<Option<f64>> {
        match truth {
            Some(t) => {
                let w = weights_from_flat(w0, flat);
                Ok(Some(aligned_error_generic(&w, t)?.0))
            }
            None => Ok(None),
        }
    };

    for t in 0..=cfg.max_iters {
        let w = weights_from_flat(w0, &current);
        let (loss, grad) = batch_loss_grad(&w, data)?;
        if !loss.is_finite() {
            return Err(RecoverError::Divergence { iteration: t });
        }
        let gnorm = flat_norm(&grad);
        if !gnorm.is_finite() {
            return Err(RecoverError::Divergence { iteration: t });
        }
        if t % cfg.trace_stride == 0 || gnorm <= cfg.grad_tol || t == cfg.max_iters {
            if loss > prev_loss {
                ascent_steps += 1;
            }
            records.push(TraceRecord {
                iter: t,
                loss,
                grad_norm: gnorm,
                aligned_err: aligned(&current)?,
                dist_to_final: 0.0,
            });
            flats.push(current.clone());
            prev_loss = loss;
        }
        iterations = t;
        if gnorm <= cfg.grad_tol {
            stop = StopReason::GradTolReached;
            break;
        }
        if t == cfg.max_iters {
            break;
        }
        for (c, g) in current.iter_mut().zip(&grad) {
            *c -= cfg.step_size * g;
        }
    }

    let final_flat = flats.last().expect("at least one record").clone();
    for (rec, flat) in records.iter_mut().zip(&flats) {
        rec.dist_to_final = flat_dist(flat, &final_flat);
    }
    Ok(GDTrace {
        records,
        final_weights: weights_from_flat(w0, &final_flat),
        iterations,
        stop,
        ascent_steps,
    })
}

/// Near-truth initialization: truth plus a random direction of the given
/// Frobenius radius.
pub fn near_truth_init(
    truth: &NetworkWeights,
    radius: f64,
    stream: &mut RngStream,
) -> NetworkWeights {
    let flat = truth.to_flat();
    let dir = stream.unit_vector(flat.len());
    let moved: Vec<f64> = flat
        .iter()
        .zip(&dir)
        .map(|(w, u)| w + radius * u)
        .collect();
    weights_from_flat(truth, &moved)
}

/// Default near-truth radii: 0.1 ||W*||_F for FCN, 0.9 ||w*|| for CNN.
pub fn default_init_radius(truth: &NetworkWeights) -> f64 {
    match truth {
        NetworkWeights::Fcn(_) => 0.1 * truth.norm(),
        NetworkWeights::Cnn(_) => 0.9 * truth.norm(),
    }
}

fn column_cost_matrix(w: &FcnWeights, truth: &FcnWeights) -> DMatrix<f64> {
    let k = w.neurons();
    let mut cost = DMatrix::zeros(k, k);
    for j in 0..k {
        for l in 0..k {
            cost[(j, l)] = (w.mat.column(j) - truth.mat.column(l)).norm_squared();
        }
    }
    cost
}

/// Hungarian algorithm (Jonker-style with potentials), O(K^3). Returns the
/// column assignment minimizing the total cost: `assign[l]` is the column of
/// `w` matched to column l of the truth.
fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[col] = row matched to col (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[j - 1] = p[j] - 1;
    }
    assign
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            prefix.push(v);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..k).collect(), &mut out);
    out
}

/// Minimum over column permutations of ||W Pi - W*||_F, with the argmin
/// permutation: `perm[l]` is the column of `w` assigned to truth column l.
/// Exhaustive for K <= 8, assignment matching above.
pub fn aligned_error(w: &FcnWeights, truth: &FcnWeights) -> Result<(f64, Vec<usize>)> {
    if w.dim() != truth.dim() || w.neurons() != truth.neurons() {
        return Err(RecoverError::DimensionMismatch {
            expected: truth.dim() * truth.neurons(),
            got: w.dim() * w.neurons(),
        });
    }
    let k = w.neurons();
    let cost = column_cost_matrix(w, truth);
    let perm = if k <= 8 {
        let mut best = (f64::INFINITY, Vec::new());
        for perm in permutations(k) {
            let total: f64 = perm.iter().enumerate().map(|(l, &j)| cost[(j, l)]).sum();
            if total < best.0 {
                best = (total, perm);
            }
        }
        best.1
    } else {
        hungarian(&cost)
    };
    let total: f64 = perm.iter().enumerate().map(|(l, &j)| cost[(j, l)]).sum();
    Ok((total.sqrt(), perm))
}

/// Aligned error for either model; the CNN filter has no permutation
/// ambiguity so the distance is plain.
pub fn aligned_error_generic(w: &NetworkWeights, truth: &NetworkWeights) -> Result<(f64, Vec<usize>)> {
    match (w, truth) {
        (NetworkWeights::Fcn(a), NetworkWeights::Fcn(b)) => aligned_error(a, b),
        (NetworkWeights::Cnn(a), NetworkWeights::Cnn(b)) => {
            if a.filter.len() != b.filter.len() {
                return Err(RecoverError::DimensionMismatch {
                    expected: b.filter.len(),
                    got: a.filter.len(),
                });
            }
            Ok(((&a.filter - &b.filter).norm(), vec![0]))
        }
        _ => Err(RecoverError::InvalidArgument(
            "cannot compare FCN against CNN weights".into(),
        )),
    }
}

/// Fitted contraction of ||W_t - What|| over the pre-convergence tail.
#[derive(Clone, Copy, Debug)]
pub struct LinearRateFit {
    pub ratio: f64,
    pub r_squared: f64,
    pub window: (usize, usize),
}

/// Least-squares slope of log distance-to-final vs iteration over the last
/// half of the pre-convergence records, excluding the final 5 points.
pub fn fit_linear_rate(trace: &GDTrace) -> Result<LinearRateFit> {
    let usable: Vec<&TraceRecord> = trace
        .records
        .iter()
        .filter(|r| r.dist_to_final > 0.0)
        .collect();
    let skip_tail = 5usize;
    if usable.len() < 10 + skip_tail {
        return Err(RecoverError::InsufficientTrace {
            needed: 10 + skip_tail,
            got: usable.len(),
        });
    }
    let end = usable.len() - skip_tail;
    let start = end / 2;
    let window = &usable[start..end];
    let n = window.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in window {
        let x = r.iter as f64;
        let y = r.dist_to_final.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return Err(RecoverError::Degenerate("constant iteration index".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let ss_tot = syy - sy * sy / n;
    let intercept = (sy - slope * sx) / n;
    let ss_res: f64 = window
        .iter()
        .map(|r| {
            let pred = intercept + slope * r.iter as f64;
            let e = r.dist_to_final.ln() - pred;
            e * e
        })
        .sum();
    let r_squared = if ss_tot <= 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearRateFit {
        ratio: slope.exp(),
        r_squared,
        window: (window.first().unwrap().iter, window.last().unwrap().iter),
    })
}
