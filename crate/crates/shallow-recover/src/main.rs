use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use shallow_recover::datagen::{
    make_ground_truth, sample_dataset, GroundTruthSpec, ModelKind, DEFAULT_WEIGHT_SCALE,
};
use shallow_recover::error::RecoverError;
use shallow_recover::experiments::{
    error_scaling_experiment, fmt_float, init_thread_pool, parse_n_grid, success_rate_experiment,
    ExperimentConfig, InitMode, RunManifest, SD_THRESHOLD_CNN, SD_THRESHOLD_FCN,
};
use shallow_recover::geometry::{hessian_spectrum_probe, rho_curve, theoretical_radius};
use shallow_recover::model::NetworkWeights;
use shallow_recover::optimizer::{
    aligned_error_generic, gd_run, GDConfig, DEFAULT_GRAD_TOL,
    DEFAULT_MAX_ITERS, DEFAULT_STEP_FCN,
};
use shallow_recover::rng::{RngStream, StreamId};
use shallow_recover::tensorinit::init_full;

#[derive(Parser)]
#[command(
    name = "shallow-recover",
    version,
    about = "Weight recovery for one-hidden-layer sigmoid networks from binary labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Fcn,
    Cnn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Fcn => ModelKind::Fcn,
            ModelArg::Cnn => ModelKind::Cnn,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Tensor,
    NearTruth,
    Random,
}

impl From<InitArg> for InitMode {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Tensor => InitMode::Tensor,
            InitArg::NearTruth => InitMode::NearTruth,
            InitArg::Random => InitMode::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Quick,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate the curvature quantities rho_fcn and rho_cnn over a sigma grid.
    RhoCurve {
        #[arg(long, default_value_t = 0.05)]
        sigma_min: f64,
        #[arg(long, default_value_t = 2.0)]
        sigma_max: f64,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Single gradient-descent recovery run with a full trace CSV.
    Recover {
        #[arg(long, value_enum, default_value_t = ModelArg::Fcn)]
        model: ModelArg,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_STEP_FCN)]
        eta: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        #[arg(long, default_value_t = DEFAULT_GRAD_TOL)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = InitArg::NearTruth)]
        init: InitArg,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Success-rate sweep: fraction of trials whose repeated inits converge
    /// to the same minimizer (SD below threshold).
    SuccessRate {
        #[arg(long, value_enum, default_value_t = ModelArg::Fcn)]
        model: ModelArg,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        /// Sample-size grid: comma list or start:end:x2 / start:end:+step.
        #[arg(long)]
        n_grid: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        inits: usize,
        #[arg(long)]
        sd_threshold: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_STEP_FCN)]
        eta: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        #[arg(long, default_value_t = DEFAULT_GRAD_TOL)]
        tol: f64,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Error-scaling sweep: mean relative squared aligned error per n.
    ErrorScaling {
        #[arg(long, value_enum, default_value_t = ModelArg::Fcn)]
        model: ModelArg,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n_grid: String,
        /// Monte-Carlo runs per cell.
        #[arg(long, default_value_t = 100)]
        inits: usize,
        #[arg(long, default_value_t = DEFAULT_STEP_FCN)]
        eta: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        #[arg(long, default_value_t = DEFAULT_GRAD_TOL)]
        tol: f64,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Probe Hessian eigenvalue extremes at random points in the
    /// theoretical ball around the ground truth.
    HessianProbe {
        #[arg(long, value_enum, default_value_t = ModelArg::Fcn)]
        model: ModelArg,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Multiplier on the theoretical radius.
        #[arg(long, default_value_t = 1.0)]
        radius_constant: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate the moment-method initialization on a fresh dataset.
    InitEval {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &RecoverError) -> ExitCode {
    match err {
        RecoverError::InvalidArgument(_)
        | RecoverError::DimensionMismatch { .. }
        | RecoverError::InvalidLabel(_) => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}

fn manifest_path(out: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".manifest");
        PathBuf::from(p)
    })
}

fn write_outputs(
    out: &Path,
    body: &str,
    manifest_target: &Path,
    manifest: &RunManifest,
) -> shallow_recover::Result<()> {
    std::fs::write(out, body)?;
    std::fs::write(manifest_target, manifest.render())?;
    Ok(())
}

fn run(cli: Cli) -> shallow_recover::Result<()> {
    init_thread_pool();
    match cli.command {
        Command::RhoCurve {
            sigma_min,
            sigma_max,
            steps,
            out,
            manifest,
        } => {
            let points = rho_curve(sigma_min, sigma_max, steps)?;
            let mut csv = String::from("sigma,rho_fcn,rho_cnn\n");
            for p in &points {
                writeln!(
                    csv,
                    "{},{},{}",
                    fmt_float(p.sigma),
                    fmt_float(p.rho_fcn),
                    fmt_float(p.rho_cnn)
                )
                .expect("string write");
            }
            let mut m = RunManifest::new("rho-curve");
            m.push("sigma_min", fmt_float(sigma_min));
            m.push("sigma_max", fmt_float(sigma_max));
            m.push("steps", steps);
            write_outputs(&out, &csv, &manifest_path(&out, &manifest), &m)
        }
        Command::Recover {
            model,
            d,
            k,
            n,
            eta,
            max_iters,
            tol,
            init,
            radius,
            seed,
            out,
            manifest,
        } => {
            let cfg = ExperimentConfig {
                model: model.into(),
                d,
                k,
                n_grid: vec![n],
                trials: 1,
                inits: 1,
                sd_threshold: 1.0,
                gd: GDConfig {
                    step_size: eta,
                    max_iters,
                    grad_tol: tol,
                    trace_stride: 1,
                },
                init_mode: init.into(),
                radius,
                weight_scale: DEFAULT_WEIGHT_SCALE,
                master_seed: seed,
            };
            cfg.validate()?;
            let truth = make_ground_truth(&GroundTruthSpec {
                kind: cfg.model,
                d,
                k,
                scale: cfg.weight_scale,
                seed,
            })?;
            let mut data_stream = RngStream::new(seed, StreamId::new("recover-data", 0));
            let data = sample_dataset(&truth, n, &mut data_stream)?;
            let mut init_stream = RngStream::new(seed, StreamId::new("recover-init", 0));
            let w0 = shallow_recover::experiments::draw_init(&cfg, &truth, &data, &mut init_stream)?;
            let trace = gd_run(&data, &w0, &cfg.gd, Some(&truth))?;
            let mut csv = String::from("iter,loss,grad_norm,aligned_err,dist_to_final\n");
            for r in &trace.records {
                writeln!(
                    csv,
                    "{},{},{},{},{}",
                    r.iter,
                    fmt_float(r.loss),
                    fmt_float(r.grad_norm),
                    fmt_float(r.aligned_err.unwrap_or(f64::NAN)),
                    fmt_float(r.dist_to_final)
                )
                .expect("string write");
            }
            let (final_err, _) = aligned_error_generic(&trace.final_weights, &truth)?;
            let mut m = RunManifest::new("recover");
            m.push_config(&cfg);
            m.push("n", n);
            m.push("iterations", trace.iterations);
            m.push("stop", format!("{:?}", trace.stop));
            m.push("final_aligned_err", fmt_float(final_err));
            write_outputs(&out, &csv, &manifest_path(&out, &manifest), &m)
        }
        Command::SuccessRate {
            model,
            d,
            k,
            n_grid,
            mut trials,
            mut inits,
            sd_threshold,
            eta,
            max_iters,
            tol,
            radius,
            seed,
            preset,
            out,
            manifest,
        } => {
            if matches!(preset, Some(Preset::Quick)) {
                trials = trials.min(10);
                inits = inits.min(5);
            }
            let model: ModelKind = model.into();
            let threshold = sd_threshold.unwrap_or(match model {
                ModelKind::Fcn => SD_THRESHOLD_FCN,
                ModelKind::Cnn => SD_THRESHOLD_CNN,
            });
            let cfg = ExperimentConfig {
                model,
                d,
                k,
                n_grid: parse_n_grid(&n_grid)?,
                trials,
                inits,
                sd_threshold: threshold,
                gd: GDConfig {
                    step_size: eta,
                    max_iters,
                    grad_tol: tol,
                    trace_stride: 1,
                },
                init_mode: InitMode::NearTruth,
                radius,
                weight_scale: DEFAULT_WEIGHT_SCALE,
                master_seed: seed,
            };
            let mut m = RunManifest::new("success-rate");
            m.push_config(&cfg);
            let (csv, _) = success_rate_experiment(&cfg)?;
            write_outputs(&out, &csv, &manifest_path(&out, &manifest), &m)
        }
        Command::ErrorScaling {
            model,
            d,
            k,
            n_grid,
            mut inits,
            eta,
            max_iters,
            tol,
            radius,
            seed,
            preset,
            out,
            manifest,
        } => {
            if matches!(preset, Some(Preset::Quick)) {
                inits = inits.min(20);
            }
            let cfg = ExperimentConfig {
                model: model.into(),
                d,
                k,
                n_grid: parse_n_grid(&n_grid)?,
                trials: 1,
                inits,
                sd_threshold: 1.0,
                gd: GDConfig {
                    step_size: eta,
                    max_iters,
                    grad_tol: tol,
                    trace_stride: 1,
                },
                init_mode: InitMode::NearTruth,
                radius,
                weight_scale: DEFAULT_WEIGHT_SCALE,
                master_seed: seed,
            };
            let mut m = RunManifest::new("error-scaling");
            m.push_config(&cfg);
            let (csv, _) = error_scaling_experiment(&cfg)?;
            write_outputs(&out, &csv, &manifest_path(&out, &manifest), &m)
        }
        Command::HessianProbe {
            model,
            d,
            k,
            n,
            points,
            radius_constant,
            seed,
            out,
            manifest,
        } => {
            let truth = make_ground_truth(&GroundTruthSpec {
                kind: model.into(),
                d,
                k,
                scale: DEFAULT_WEIGHT_SCALE,
                seed,
            })?;
            let mut data_stream = RngStream::new(seed, StreamId::new("probe-data", 0));
            let data = sample_dataset(&truth, n, &mut data_stream)?;
            let radius = theoretical_radius(&truth, radius_constant)?;
            let mut probe_stream = RngStream::new(seed, StreamId::new("probe-points", 0));
            let report = hessian_spectrum_probe(&data, &truth, radius, points, &mut probe_stream)?;
            let mut csv = String::from("dist,lambda_min,lambda_max\n");
            for p in &report.probes {
                writeln!(
                    csv,
                    "{},{},{}",
                    fmt_float(p.dist),
                    fmt_float(p.lambda_min),
                    fmt_float(p.lambda_max)
                )
                .expect("string write");
            }
            let mut m = RunManifest::new("hessian-probe");
            m.push("d", d);
            m.push("k", k);
            m.push("n", n);
            m.push("points", points);
            m.push("seed", seed);
            m.push("radius", fmt_float(report.radius));
            m.push("rho", fmt_float(report.rho));
            m.push("min_lambda_min", fmt_float(report.min_lambda_min()));
            m.push("max_lambda_max", fmt_float(report.max_lambda_max()));
            write_outputs(&out, &csv, &manifest_path(&out, &manifest), &m)
        }
        Command::InitEval { d, k, n, seed, out } => {
            let truth = make_ground_truth(&GroundTruthSpec {
                kind: ModelKind::Fcn,
                d,
                k,
                scale: DEFAULT_WEIGHT_SCALE,
                seed,
            })?;
            let mut data_stream = RngStream::new(seed, StreamId::new("init-eval-data", 0));
            let data = sample_dataset(&truth, n, &mut data_stream)?;
            let mut init_stream = RngStream::new(seed, StreamId::new("init-eval", 0));
            let (result, tensors) = init_full(&data, k, &mut init_stream)?;
            let mut m = RunManifest::new("init-eval");
            m.push("d", d);
            m.push("k", k);
            m.push("n", n);
            m.push("seed", seed);
            m.push("j2", tensors.j2);
            m.push("j3", tensors.j3);
            m.push("l1", tensors.l1);
            m.push("lsq_residual", fmt_float(result.lsq_residual));
            m.push("decomp_residual", fmt_float(result.decomp_residual));
            for i in 0..k {
                m.push(&format!("magnitude_{i}"), fmt_float(result.magnitudes[i]));
                m.push(&format!("sign_{i}"), result.signs[i]);
            }
            let w0 = NetworkWeights::Fcn(result.w0);
            let (err, _) = aligned_error_generic(&w0, &truth)?;
            m.push("aligned_error", fmt_float(err));
            m.push("truth_norm", fmt_float(truth.norm()));
            std::fs::write(&out, m.render())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
