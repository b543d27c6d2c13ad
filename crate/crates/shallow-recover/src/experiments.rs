//! Seeded experiment harness: success-rate and error-scaling sweeps over
//! sample-size grids, manifest plumbing, and the worker-pool setup.
//!
//! Determinism contract: (config, master seed) fixes every CSV byte, at any
//! worker count. Per-trial work runs on independent RNG streams and the
//! inner reductions are order-fixed, so parallel scheduling cannot leak into
//! the output.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::datagen::{make_ground_truth, sample_dataset, GroundTruthSpec, ModelKind};
use crate::error::{RecoverError, Result};
use crate::model::NetworkWeights;
use crate::optimizer::{aligned_error_generic, default_init_radius, gd_run, GDConfig};
use crate::rng::{RngStream, StreamId};

/// Environment variable overriding the worker count (0 or unset = auto).
pub const THREADS_ENV: &str = "SHALLOW_RECOVER_THREADS";

/// Install the global worker pool from the environment. Safe to call more
/// than once; later calls are no-ops.
pub fn init_thread_pool() {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// How each trial picks its starting point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Moment-method initialization (fcn only).
    Tensor,
    /// Uniform in the ball around the ground truth; radius from config or
    /// the model default.
    NearTruth,
    /// Gaussian with Frobenius norm matched to the ground truth.
    Random,
}

/// Sweep configuration shared by the experiment kinds.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub d: usize,
    pub k: usize,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    /// Inits per trial (success rate) or Monte-Carlo runs per cell (error
    /// scaling); the paper's L.
    pub inits: usize,
    pub sd_threshold: f64,
    pub gd: GDConfig,
    pub init_mode: InitMode,
    /// Init radius; None = model default.
    pub radius: Option<f64>,
    pub weight_scale: f64,
    pub master_seed: u64,
}

/// Default SD thresholds for declaring two runs "the same minimizer".
pub const SD_THRESHOLD_FCN: f64 = 1e-4;
pub const SD_THRESHOLD_CNN: f64 = 1e-15;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.trials == 0 || self.inits == 0 {
            return Err(RecoverError::InvalidArgument("all counts must be >= 1".into()));
        }
        if !(self.sd_threshold > 0.0) {
            return Err(RecoverError::InvalidArgument("SD threshold must be > 0".into()));
        }
        if self.n_grid.is_empty() {
            return Err(RecoverError::InvalidArgument("empty n grid".into()));
        }
        if self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(RecoverError::InvalidArgument(
                "n grid must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// 17-significant-digit decimal, fixed format for CSV fields.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Root-mean-square deviation of the vectorized outputs about their mean.
/// No permutation alignment: the metric asks whether runs hit literally the
/// same minimizer.
pub fn sd_metric(outputs: &[Vec<f64>]) -> Result<f64> {
    let l = outputs.len();
    if l < 2 {
        return Err(RecoverError::InvalidArgument(format!(
            "SD metric needs at least 2 outputs, got {l}"
        )));
    }
    let p = outputs[0].len();
    if outputs.iter().any(|o| o.len() != p) {
        return Err(RecoverError::DimensionMismatch {
            expected: p,
            got: outputs.iter().map(|o| o.len()).find(|&q| q != p).unwrap(),
        });
    }
    let mut mean = vec![0.0f64; p];
    for o in outputs {
        for (m, v) in mean.iter_mut().zip(o) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= l as f64;
    }
    let mut total = 0.0;
    for o in outputs {
        total += o
            .iter()
            .zip(&mean)
            .map(|(v, m)| (v - m) * (v - m))
            .sum::<f64>();
    }
    Ok((total / l as f64).sqrt())
}

fn ball_init(truth: &NetworkWeights, radius: f64, stream: &mut RngStream) -> NetworkWeights {
    let flat = truth.to_flat();
    let dir = stream.unit_vector(flat.len());
    let r = radius * stream.uniform().powf(1.0 / flat.len() as f64);
    let moved: Vec<f64> = flat.iter().zip(&dir).map(|(w, u)| w + r * u).collect();
    match truth {
        NetworkWeights::Fcn(w) => NetworkWeights::Fcn(crate::model::FcnWeights::new(
            nalgebra::DMatrix::from_column_slice(w.dim(), w.neurons(), &moved),
        )),
        NetworkWeights::Cnn(w) => NetworkWeights::Cnn(crate::model::CnnWeights::new(
            nalgebra::DVector::from_column_slice(&moved),
            w.strides,
        )),
    }
}

fn random_matched_norm_init(truth: &NetworkWeights, stream: &mut RngStream) -> NetworkWeights {
    let flat = truth.to_flat();
    let dir = stream.unit_vector(flat.len());
    let scale = truth.norm();
    let w: Vec<f64> = dir.iter().map(|u| u * scale).collect();
    match truth {
        NetworkWeights::Fcn(wt) => NetworkWeights::Fcn(crate::model::FcnWeights::new(
            nalgebra::DMatrix::from_column_slice(wt.dim(), wt.neurons(), &w),
        )),
        NetworkWeights::Cnn(wt) => NetworkWeights::Cnn(crate::model::CnnWeights::new(
            nalgebra::DVector::from_column_slice(&w),
            wt.strides,
        )),
    }
}

/// Draw a starting point per the configured init mode.
pub fn draw_init(
    cfg: &ExperimentConfig,
    truth: &NetworkWeights,
    data: &crate::model::Dataset,
    stream: &mut RngStream,
) -> Result<NetworkWeights> {
    match cfg.init_mode {
        InitMode::NearTruth => {
            let r = cfg.radius.unwrap_or_else(|| default_init_radius(truth));
            Ok(ball_init(truth, r, stream))
        }
        InitMode::Random => Ok(random_matched_norm_init(truth, stream)),
        InitMode::Tensor => {
            let (out, _) = crate::tensorinit::init_full(data, cfg.k, stream)?;
            Ok(NetworkWeights::Fcn(out.w0))
        }
    }
}

fn truth_for(cfg: &ExperimentConfig, cell: usize, trial: usize) -> Result<NetworkWeights> {
    // mix the cell/trial indices into the ground-truth seed so every trial
    // draws an independent teacher
    let seed = cfg
        .master_seed
        .wrapping_mul(0x100000001b3)
        .wrapping_add((cell as u64) << 32)
        .wrapping_add(trial as u64);
    make_ground_truth(&GroundTruthSpec {
        kind: cfg.model,
        d: cfg.d,
        k: cfg.k,
        scale: cfg.weight_scale,
        seed,
    })
}

/// One cell of the success-rate sweep.
#[derive(Clone, Debug)]
pub struct SuccessCell {
    pub n: usize,
    pub success_rate: f64,
}

/// Success-rate sweep: per (d, n) cell, `trials` datasets; each runs GD from
/// L inits in the near-truth ball; success iff the SD of the L final weight
/// vectors is at most the threshold.
pub fn success_rate_experiment(cfg: &ExperimentConfig) -> Result<(String, Vec<SuccessCell>)> {
    cfg.validate()?;
    init_thread_pool();
    let mut cells = Vec::new();
    for (ci, &n) in cfg.n_grid.iter().enumerate() {
        let successes: Vec<Result<bool>> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| -> Result<bool> {
                let truth = truth_for(cfg, ci, trial)?;
                let mut data_stream = RngStream::new(
                    cfg.master_seed,
                    StreamId::new("sr-data", (ci * cfg.trials + trial) as u64),
                );
                let data = sample_dataset(&truth, n, &mut data_stream)?;
                let finals: Vec<Result<Vec<f64>>> = (0..cfg.inits)
                    .into_par_iter()
                    .map(|init_i| -> Result<Vec<f64>> {
                        let mut init_stream = RngStream::new(
                            cfg.master_seed,
                            StreamId::new(
                                "sr-init",
                                ((ci * cfg.trials + trial) * cfg.inits + init_i) as u64,
                            ),
                        );
                        let w0 = draw_init(cfg, &truth, &data, &mut init_stream)?;
                        let mut gd = cfg.gd;
                        gd.trace_stride = gd.max_iters.max(1);
                        let trace = gd_run(&data, &w0, &gd, None)?;
                        Ok(trace.final_weights.to_flat())
                    })
                    .collect();
                let finals: Vec<Vec<f64>> = finals.into_iter().collect::<Result<_>>()?;
                Ok(sd_metric(&finals)? <= cfg.sd_threshold)
            })
            .collect();
        let successes: Vec<bool> = successes.into_iter().collect::<Result<_>>()?;
        let rate = successes.iter().filter(|&&s| s).count() as f64 / cfg.trials as f64;
        cells.push(SuccessCell { n, success_rate: rate });
    }
    let mut csv = String::from("model,d,k,n,n_over_dlog2d,trials,success_rate\n");
    let model = match cfg.model {
        ModelKind::Fcn => "fcn",
        ModelKind::Cnn => "cnn",
    };
    let dlog2d = cfg.d as f64 * (cfg.d as f64).log2().powi(2);
    for cell in &cells {
        writeln!(
            csv,
            "{model},{},{},{},{},{},{}",
            cfg.d,
            cfg.k,
            cell.n,
            fmt_float(cell.n as f64 / dlog2d),
            cfg.trials,
            fmt_float(cell.success_rate)
        )
        .expect("string write");
    }
    Ok((csv, cells))
}

/// One cell of the error-scaling sweep.
#[derive(Clone, Debug)]
pub struct ErrorCell {
    pub n: usize,
    pub mean_rel_sq_err: f64,
    /// Median aligned (unsquared, unnormalized) error across runs.
    pub median_aligned_err: f64,
}

/// Error-scaling sweep: per n, L Monte-Carlo runs, each with a fresh dataset
/// and a near-truth start; reports the mean relative squared aligned error.
pub fn error_scaling_experiment(cfg: &ExperimentConfig) -> Result<(String, Vec<ErrorCell>)> {
    cfg.validate()?;
    init_thread_pool();
    let mut cells = Vec::new();
    for (ci, &n) in cfg.n_grid.iter().enumerate() {
        let runs: Vec<Result<f64>> = (0..cfg.inits)
            .into_par_iter()
            .map(|run| -> Result<f64> {
                let truth = truth_for(cfg, ci, run)?;
                let mut data_stream = RngStream::new(
                    cfg.master_seed,
                    StreamId::new("es-data", (ci * cfg.inits + run) as u64),
                );
                let data = sample_dataset(&truth, n, &mut data_stream)?;
                let mut init_stream = RngStream::new(
                    cfg.master_seed,
                    StreamId::new("es-init", (ci * cfg.inits + run) as u64),
                );
                let w0 = draw_init(cfg, &truth, &data, &mut init_stream)?;
                let mut gd = cfg.gd;
                gd.trace_stride = gd.max_iters.max(1);
                let trace = gd_run(&data, &w0, &gd, None)?;
                let (err, _) = aligned_error_generic(&trace.final_weights, &truth)?;
                Ok(err)
            })
            .collect();
        let errs: Vec<f64> = runs.into_iter().collect::<Result<_>>()?;
        let truth_norm = truth_for(cfg, ci, 0)?.norm();
        let mean_rel_sq: f64 =
            errs.iter().map(|e| e * e).sum::<f64>() / (cfg.inits as f64 * truth_norm * truth_norm);
        let mut sorted = errs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        cells.push(ErrorCell {
            n,
            mean_rel_sq_err: mean_rel_sq,
            median_aligned_err: median,
        });
    }
    let mut csv = String::from("model,d,k,n,mean_rel_sq_err,sqrt_dlogn_over_n\n");
    let model = match cfg.model {
        ModelKind::Fcn => "fcn",
        ModelKind::Cnn => "cnn",
    };
    for cell in &cells {
        let rate = (cfg.d as f64 * (cell.n as f64).ln() / cell.n as f64).sqrt();
        writeln!(
            csv,
            "{model},{},{},{},{},{}",
            cfg.d,
            cfg.k,
            cell.n,
            fmt_float(cell.mean_rel_sq_err),
            fmt_float(rate)
        )
        .expect("string write");
    }
    Ok((csv, cells))
}

/// Run metadata written next to every output file.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
    started: Instant,
}

impl RunManifest {
    pub fn new(experiment: &str) -> Self {
        let mut m = Self {
            entries: Vec::new(),
            started: Instant::now(),
        };
        m.push("experiment", experiment);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_config(&mut self, cfg: &ExperimentConfig) {
        self.push(
            "model",
            match cfg.model {
                ModelKind::Fcn => "fcn",
                ModelKind::Cnn => "cnn",
            },
        );
        self.push("d", cfg.d);
        self.push("k", cfg.k);
        self.push(
            "n_grid",
            cfg.n_grid
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        self.push("trials", cfg.trials);
        self.push("inits", cfg.inits);
        self.push("sd_threshold", fmt_float(cfg.sd_threshold));
        self.push("eta", fmt_float(cfg.gd.step_size));
        self.push("max_iters", cfg.gd.max_iters);
        self.push("grad_tol", fmt_float(cfg.gd.grad_tol));
        self.push(
            "init",
            match cfg.init_mode {
                InitMode::Tensor => "tensor",
                InitMode::NearTruth => "near-truth",
                InitMode::Random => "random",
            },
        );
        self.push(
            "radius",
            cfg.radius.map(fmt_float).unwrap_or_else(|| "default".into()),
        );
        self.push("weight_scale", fmt_float(cfg.weight_scale));
        self.push("seed", cfg.master_seed);
    }

    /// Render as `key: value` lines, appending the elapsed wall clock.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k}: {v}").expect("string write");
        }
        writeln!(out, "wall_clock_secs: {:.3}", self.started.elapsed().as_secs_f64())
            .expect("string write");
        out
    }
}

/// Parse an `--n-grid` spec: either a comma list (`1024,2048`) or
/// `start:end:x2` / `start:end:+1000` (geometric / additive stepping).
pub fn parse_n_grid(spec: &str) -> Result<Vec<usize>> {
    let bad = |msg: &str| RecoverError::InvalidArgument(format!("n-grid '{spec}': {msg}"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:end:step"));
        }
        let start: usize = parts[0].parse().map_err(|_| bad("bad start"))?;
        let end: usize = parts[1].parse().map_err(|_| bad("bad end"))?;
        let step = parts[2];
        let mut grid = Vec::new();
        let mut n = start;
        if let Some(f) = step.strip_prefix('x') {
            let factor: usize = f.parse().map_err(|_| bad("bad factor"))?;
            if factor < 2 || start == 0 {
                return Err(bad("geometric step needs factor >= 2 and start >= 1"));
            }
            while n <= end {
                grid.push(n);
                n = n.saturating_mul(factor);
            }
        } else if let Some(a) = step.strip_prefix('+') {
            let add: usize = a.parse().map_err(|_| bad("bad increment"))?;
            if add == 0 {
                return Err(bad("additive step must be >= 1"));
            }
            while n <= end {
                grid.push(n);
                n = n.saturating_add(add);
            }
        } else {
            return Err(bad("step must look like x2 or +1000"));
        }
        if grid.is_empty() {
            return Err(bad("empty grid"));
        }
        Ok(grid)
    } else {
        let grid: Vec<usize> = spec
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad list entry"))?;
        if grid.is_empty() {
            return Err(bad("empty grid"));
        }
        Ok(grid)
    }
}
