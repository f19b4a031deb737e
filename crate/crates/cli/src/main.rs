use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopman_csi::checkpoint::{load_tracker, save_tracker};
use koopman_csi::harness::{
    loss_curve_csv, predict_episode, predictions_csv, rmse, run_experiment, scenario_config,
    train_on_trace, ExperimentConfig, KalmanConfig, PreprocessConfig,
};
use koopman_csi::optim::{TrainConfig, TrainVariant};
use koopman_csi::piae::{LossWeights, PiaeDims};
use koopman_csi::preprocess::{plan_episodes, EpisodePlan, SavgolConfig};
use koopman_csi::scenario::{generate_trace, Trace};
use koopman_csi::{Error, Result};

/// Path-loss tracking with context-coupled Koopman autoencoders.
#[derive(Parser, Debug)]
#[command(name = "csitrack", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic channel trace and write it as CSV.
    Generate(GenerateArgs),
    /// Train a model over a trace's episodes and save a checkpoint.
    Train(TrainCmdArgs),
    /// Forecast one episode's silent span from a saved checkpoint.
    Predict(PredictArgs),
    /// Paired with/without-context experiment across scenarios.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Scenario name (e.g. 5G_1W_28GHz) or null_regime.
    #[arg(long, default_value = "5G_1W_28GHz")]
    scenario: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples (10 Hz).
    #[arg(long, default_value_t = 800)]
    len: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Start index of the first training window.
    #[arg(long, default_value_t = 0)]
    train_start: usize,
    /// Training window length per episode.
    #[arg(long, default_value_t = 200)]
    train_len: usize,
    /// Silent span length to forecast per episode.
    #[arg(long, default_value_t = 200)]
    silence_len: usize,
    /// Offset between consecutive episode starts.
    #[arg(long, default_value_t = 200)]
    stride: usize,
}

impl PlanArgs {
    fn to_plan(&self) -> EpisodePlan {
        EpisodePlan {
            train_start: self.train_start,
            train_len: self.train_len,
            silence_len: self.silence_len,
            stride: self.stride,
        }
    }
}

#[derive(Args, Debug)]
struct DimsArgs {
    /// Shared latent dimension of the CSI branch.
    #[arg(long, default_value_t = 50)]
    latent: usize,
    #[arg(long, default_value_t = 64)]
    csi_hidden: usize,
    /// Latent dimension of the context branch.
    #[arg(long, default_value_t = 950)]
    ctx_latent: usize,
    #[arg(long, default_value_t = 64)]
    ctx_hidden: usize,
}

impl DimsArgs {
    fn to_dims(&self) -> PiaeDims {
        PiaeDims {
            csi_in: 1,
            csi_hidden: self.csi_hidden,
            csi_latent: self.latent,
            ctx_in: 19,
            ctx_hidden: self.ctx_hidden,
            ctx_latent: self.ctx_latent,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Train the variational model instead of the deterministic one.
    #[arg(long)]
    vkae: bool,
    /// Decoupled baseline: no context branch, B fixed at zero.
    #[arg(long)]
    no_context: bool,
    /// Alternate epochs between the CSI group and the context group.
    #[arg(long)]
    alternating: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight of the current-step reconstruction loss.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Weight of the context reconstruction loss.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Weight of the latent transition loss.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Weight of the KL terms (variational model only).
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    /// Fixed observation variance of the CSI decoder (variational model).
    #[arg(long, default_value_t = 0.5)]
    sigma2_csi: f64,
    /// Fixed observation variance of the context decoder (variational model).
    #[arg(long, default_value_t = 0.5)]
    sigma2_ctx: f64,
}

impl TrainArgs {
    fn to_config(&self) -> TrainConfig {
        let mut weights = LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
        };
        if self.no_context {
            weights = weights.without_context();
        }
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            weights,
            variant: if self.vkae { TrainVariant::Vkae } else { TrainVariant::Piae },
            alternating: self.alternating,
            use_context: !self.no_context,
            sigma2_csi: self.sigma2_csi,
            sigma2_ctx: self.sigma2_ctx,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct SavgolArgs {
    /// Skip smoothing of the training window.
    #[arg(long)]
    no_savgol: bool,
    #[arg(long, default_value_t = 11)]
    savgol_window: usize,
    #[arg(long, default_value_t = 3)]
    savgol_order: usize,
}

impl SavgolArgs {
    fn to_preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            savgol: if self.no_savgol {
                None
            } else {
                Some(SavgolConfig {
                    window: self.savgol_window,
                    order: self.savgol_order,
                })
            },
        }
    }
}

#[derive(Args, Debug)]
struct KalmanArgs {
    /// Filter and smooth in latent space instead of open-loop rollout.
    #[arg(long)]
    kalman: bool,
    /// Process noise scale on the latent transition.
    #[arg(long, default_value_t = 1e-4)]
    q_scale: f64,
    /// Observation noise variance.
    #[arg(long, default_value_t = 0.01)]
    r: f64,
    /// Initial latent covariance scale.
    #[arg(long, default_value_t = 1e-2)]
    p0: f64,
}

impl KalmanArgs {
    fn to_config(&self) -> KalmanConfig {
        KalmanConfig {
            enabled: self.kalman,
            q_scale: self.q_scale,
            r: self.r,
            p0: self.p0,
        }
    }
}

#[derive(Args, Debug)]
struct TrainCmdArgs {
    /// Input trace CSV.
    #[arg(long)]
    trace: PathBuf,
    /// Checkpoint output path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch loss curve CSV.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    /// Re-initialize the model for every episode instead of warm-starting.
    #[arg(long)]
    cold_start: bool,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    dims: DimsArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    savgol: SavgolArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Input trace CSV.
    #[arg(long)]
    trace: PathBuf,
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode index under the same plan used for training.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    savgol: SavgolArgs,
    #[command(flatten)]
    kalman: KalmanArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Comma-separated scenario names; default is all five.
    #[arg(long, value_delimiter = ',')]
    scenarios: Vec<String>,
    /// Paired runs per scenario.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 800)]
    trace_len: usize,
    /// First run seeds from seed_base, later runs increment it.
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    /// Directory for report.json / report.csv / report.txt.
    #[arg(long)]
    out_dir: PathBuf,
    /// Re-initialize the model for every episode instead of warm-starting.
    #[arg(long)]
    cold_start: bool,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    dims: DimsArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    savgol: SavgolArgs,
    #[command(flatten)]
    kalman: KalmanArgs,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::Io)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let cfg = scenario_config(&args.scenario, args.seed)?;
    let trace = generate_trace(&cfg, args.len)?;
    trace.save_csv(&args.out)?;
    println!(
        "wrote {} samples of {} (seed {}) to {}",
        trace.len(),
        args.scenario,
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainCmdArgs) -> Result<()> {
    let trace = Trace::load_csv(&args.trace)?;
    let train_cfg = args.train.to_config();
    let episodes = plan_episodes(trace.len(), &args.plan.to_plan())?;
    let (model, history) = train_on_trace(
        &trace,
        args.dims.to_dims(),
        &train_cfg,
        &args.plan.to_plan(),
        &args.savgol.to_preprocess(),
        !args.cold_start,
    )?;
    save_tracker(&model, &train_cfg.weights, train_cfg.seed, &args.out)?;
    if let Some(path) = &args.loss_curve {
        write_text(path, &loss_curve_csv(&history))?;
    }
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs over {} episode(s), final loss {:.6}",
            history.len(),
            episodes.len(),
            last.total
        );
    }
    println!("checkpoint saved to {}", args.out.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let trace = Trace::load_csv(&args.trace)?;
    let (model, _, _) = load_tracker(&args.checkpoint)?;
    let episodes = plan_episodes(trace.len(), &args.plan.to_plan())?;
    let episode = episodes.get(args.episode).ok_or_else(|| {
        Error::param(
            "episode",
            format!("index {} out of range: trace has {} episode(s)", args.episode, episodes.len()),
        )
    })?;
    let prediction = predict_episode(
        &model,
        &trace,
        episode,
        &args.savgol.to_preprocess(),
        &args.kalman.to_config(),
    )?;
    let truth = trace.silence_truth(episode.silence.clone())?;
    let csv = predictions_csv(episode.silence.start, &truth, &prediction.predictions_db);
    match &args.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    println!(
        "episode {}: silence [{}, {}), RMSE {:.4} dB",
        args.episode,
        episode.silence.start,
        episode.silence.end,
        rmse(&prediction.predictions_db, &truth)?
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = ExperimentConfig {
        runs: args.runs,
        trace_len: args.trace_len,
        plan: args.plan.to_plan(),
        dims: args.dims.to_dims(),
        train: args.train.to_config(),
        preprocess: args.savgol.to_preprocess(),
        kalman: args.kalman.to_config(),
        seed_base: args.seed_base,
        warm_start: !args.cold_start,
        ..ExperimentConfig::default()
    };
    if !args.scenarios.is_empty() {
        cfg.scenarios = args.scenarios.clone();
    }
    if !cfg.train.use_context {
        return Err(Error::param(
            "no_context",
            "eval always runs both variants; drop --no-context",
        ));
    }
    let report = run_experiment(&cfg)?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::Io)?;
    write_text(&args.out_dir.join("report.json"), &report.to_json_string()?)?;
    write_text(&args.out_dir.join("report.csv"), &report.to_csv_string())?;
    let summary = report.to_text_summary();
    write_text(&args.out_dir.join("report.txt"), &summary)?;
    print!("{summary}");
    println!("reports written to {}", args.out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Eval(args) => cmd_eval(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
