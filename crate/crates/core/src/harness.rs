//! Experiment harness: runs the train/silence protocol over generated
//! scenarios, paired with-context against without-context on identical data
//! and seeds, and aggregates RMSE reports.

use crate::error::{Error, Result};
use crate::kalman::{
    mat_to_na, ContextStats, LatentBelief, MlpObservation, NoiseConfig, smooth_and_decode,
};
use crate::optim::{LossRecord, TrainConfig, Tracker, WindowTrainer};
use crate::piae::PiaeDims;
use crate::preprocess::{plan_episodes, Episode, EpisodePlan, SavgolConfig, Standardizer};
use crate::scenario::{generate_trace, ScenarioConfig, ScenarioKind, Trace};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub fn rmse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("rmse", format!("{} samples", truth.len()), format!("{}", predicted.len())));
    }
    if predicted.is_empty() {
        return Err(Error::InsufficientData { context: "rmse", need: 1, have: 0 });
    }
    let ss: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((ss / predicted.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub savgol: Option<SavgolConfig>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { savgol: Some(SavgolConfig::default()) }
    }
}

impl PreprocessConfig {
    fn smooth(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.savgol {
            Some(cfg) => cfg.apply(x),
            None => Ok(x.to_vec()),
        }
    }
}

/// Latent-space filtering/smoothing settings. When disabled the forecast is
/// the plain recursive rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    pub enabled: bool,
    pub q_scale: f64,
    pub r: f64,
    pub p0: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            enabled: false,
            q_scale: 1e-4,
            r: 0.01,
            p0: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenarios: Vec<String>,
    pub runs: usize,
    pub trace_len: usize,
    pub plan: EpisodePlan,
    pub dims: PiaeDims,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub kalman: KalmanConfig,
    pub seed_base: u64,
    /// Keep one trainer (parameters and optimizer moments) across the
    /// episodes of a run instead of starting each episode cold.
    pub warm_start: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenarios: ScenarioKind::all_names(),
            runs: 10,
            trace_len: 800,
            plan: EpisodePlan::default(),
            dims: PiaeDims::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            kalman: KalmanConfig::default(),
            seed_base: 0,
            warm_start: true,
        }
    }
}

/// Resolve a scenario name, including the synthetic `null_regime` probe.
pub fn scenario_config(name: &str, seed: u64) -> Result<ScenarioConfig> {
    if name == "null_regime" {
        return Ok(ScenarioConfig::null_regime(seed));
    }
    let kind: ScenarioKind = name.parse()?;
    Ok(ScenarioConfig::preset(kind, seed))
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub episode_index: usize,
    pub silence_start: usize,
    pub predictions_db: Vec<f64>,
    pub truth_db: Vec<f64>,
    pub rmse_silence: f64,
    pub train_fit_rmse: f64,
    pub losses: Vec<LossRecord>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub use_context: bool,
    pub episodes: Vec<EpisodeOutcome>,
    pub rmse_silence_mean: f64,
    pub train_fit_mean: f64,
    pub final_params: Vec<f64>,
}

fn variant_config(base: &TrainConfig, use_context: bool, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.use_context = use_context;
    if !use_context {
        cfg.weights = cfg.weights.without_context();
    }
    cfg
}

/// Fail unless the two variant configurations differ only in the context
/// switch itself and the context reconstruction weight it implies.
pub fn audit_variant_parity(with_ctx: &TrainConfig, without_ctx: &TrainConfig) -> Result<()> {
    let a = serde_json::to_value(with_ctx)?;
    let b = serde_json::to_value(without_ctx)?;
    let mut diffs = Vec::new();
    diff_values("", &a, &b, &mut diffs);
    let allowed = ["use_context", "weights.beta"];
    let illegal: Vec<&String> = diffs.iter().filter(|d| !allowed.contains(&d.as_str())).collect();
    if !illegal.is_empty() {
        return Err(Error::State(format!(
            "variant configs differ beyond the context switch: {illegal:?}"
        )));
    }
    if !diffs.iter().any(|d| d == "use_context") {
        return Err(Error::State("variant configs do not differ in use_context".into()));
    }
    Ok(())
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: std::collections::BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (ma.get(k), mb.get(k)) {
                    (Some(va), Some(vb)) => diff_values(&path, va, vb, out),
                    _ => out.push(path),
                }
            }
        }
        _ => {
            if a != b {
                out.push(prefix.to_string());
            }
        }
    }
}

fn context_rows(trace: &Trace, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    trace.contexts()[range].iter().map(|c| c.to_vec()).collect()
}

struct EpisodeData {
    window: crate::piae::Window,
    standardizer: Standardizer,
    smoothed_train: Vec<f64>,
}

fn prepare_episode(
    trace: &Trace,
    episode: &Episode,
    preprocess: &PreprocessConfig,
) -> Result<EpisodeData> {
    let masked = trace.with_silence(episode.silence.clone())?;
    let raw_train = masked.observed_csi(episode.train.clone())?;
    let smoothed_train = preprocess.smooth(&raw_train)?;
    let ctx_train = context_rows(trace, episode.train.clone());
    let standardizer = Standardizer::fit(&smoothed_train, &ctx_train)?;
    let window = standardizer.standardize_window(&smoothed_train, &ctx_train)?;
    Ok(EpisodeData { window, standardizer, smoothed_train })
}

fn rollout_predictions(
    tracker: &Tracker,
    data: &EpisodeData,
    trace: &Trace,
    episode: &Episode,
) -> Result<Vec<f64>> {
    // The transition into silence step s is driven by the context at s - 1,
    // so an L-step forecast consumes contexts [s-1, s+L-2].
    let s = episode.silence.start;
    let ctx_raw = context_rows(trace, s - 1..episode.silence.end - 1);
    let ctx_std: Vec<Vec<f64>> = ctx_raw
        .iter()
        .map(|u| data.standardizer.apply_ctx(u))
        .collect::<Result<_>>()?;
    let last_h = data
        .window
        .csi
        .last()
        .ok_or_else(|| Error::shape("rollout_predictions", "non-empty window", "empty"))?;
    let preds_std = tracker.forecast(last_h, &ctx_std)?;
    Ok(preds_std.iter().map(|&p| data.standardizer.invert_csi(p)).collect())
}

fn kalman_predictions(
    tracker: &Tracker,
    data: &EpisodeData,
    trace: &Trace,
    episode: &Episode,
    cfg: &KalmanConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mean_model = tracker.mean_model()?;
    let dims = tracker.dims();
    let span = episode.train.start..episode.silence.end;
    let span_len = span.end - span.start;
    let train_len = episode.train.len();

    let mut obs: Vec<Option<f64>> = Vec::with_capacity(span_len);
    for (i, row) in data.window.csi.iter().enumerate() {
        debug_assert!(i < train_len);
        obs.push(Some(row[0]));
    }
    obs.resize(span_len, None);

    let coupled = !tracker.is_decoupled();
    let mut ctx_stats = Vec::with_capacity(span_len - 1);
    for t in span.start..span.end - 1 {
        let u = data.standardizer.apply_ctx(&trace.contexts()[t].to_vec())?;
        let zeta = mean_model.encode_ctx(&u)?;
        ctx_stats.push(ContextStats::deterministic(&zeta));
    }

    let k = mat_to_na(&mean_model.k);
    let b = mat_to_na(&mean_model.b);
    let noise = NoiseConfig::isotropic(dims.csi_latent, cfg.q_scale, cfg.r)?;
    let z0 = tracker.encode_mean(&data.window.csi[0])?;
    let init = LatentBelief::isotropic(DVector::from_vec(z0), cfg.p0)?;
    let observation = MlpObservation::new(&mean_model.csi_dec)?;
    let track = smooth_and_decode(
        &k,
        if coupled { Some(&b) } else { None },
        &noise,
        init,
        &obs,
        &ctx_stats,
        &observation,
    )?;
    let silence_std = &track.decoded[train_len..];
    let train_std = &track.decoded[..train_len];
    let silence_db: Vec<f64> = silence_std.iter().map(|&p| data.standardizer.invert_csi(p)).collect();
    let train_db: Vec<f64> = train_std.iter().map(|&p| data.standardizer.invert_csi(p)).collect();
    Ok((silence_db, train_db))
}

fn reconstruction_fit_db(tracker: &Tracker, data: &EpisodeData) -> Result<Vec<f64>> {
    let mean_model = tracker.mean_model()?;
    data.window
        .csi
        .iter()
        .map(|h| {
            let z = tracker.encode_mean(h)?;
            let y = mean_model.decode_csi(&z)?;
            Ok(data.standardizer.invert_csi(y[0]))
        })
        .collect()
}

/// Predictions for one episode from an already-trained model: the silence
/// forecast and the train-span fit, both in physical units.
#[derive(Debug, Clone)]
pub struct EpisodePrediction {
    pub predictions_db: Vec<f64>,
    pub train_pred_db: Vec<f64>,
}

/// Run the per-episode preprocessing and prediction for a standalone model,
/// e.g. one loaded from a checkpoint. The standardizer is refit on the
/// episode's train window, matching how the pipeline frames its inputs.
pub fn predict_episode(
    tracker: &Tracker,
    trace: &Trace,
    episode: &Episode,
    preprocess: &PreprocessConfig,
    kalman: &KalmanConfig,
) -> Result<EpisodePrediction> {
    let data = prepare_episode(trace, episode, preprocess)?;
    let (predictions_db, train_pred_db) = predict_with_data(tracker, &data, trace, episode, kalman)?;
    Ok(EpisodePrediction { predictions_db, train_pred_db })
}

fn predict_with_data(
    tracker: &Tracker,
    data: &EpisodeData,
    trace: &Trace,
    episode: &Episode,
    kalman: &KalmanConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if kalman.enabled {
        kalman_predictions(tracker, data, trace, episode, kalman)
    } else {
        Ok((
            rollout_predictions(tracker, data, trace, episode)?,
            reconstruction_fit_db(tracker, data)?,
        ))
    }
}

/// Train one model across every episode of a trace and return it together
/// with the concatenated loss history. With `warm_start` the same model
/// carries over between episodes; otherwise each episode trains from scratch
/// and the last episode's model is returned.
pub fn train_on_trace(
    trace: &Trace,
    dims: PiaeDims,
    train: &TrainConfig,
    plan: &EpisodePlan,
    preprocess: &PreprocessConfig,
    warm_start: bool,
) -> Result<(Tracker, Vec<LossRecord>)> {
    let episodes = plan_episodes(trace.len(), plan)?;
    let mut trainer = WindowTrainer::new(dims, train.clone())?;
    let mut history = Vec::new();
    for (idx, episode) in episodes.iter().enumerate() {
        if !warm_start && idx > 0 {
            trainer = WindowTrainer::new(dims, train.clone())?;
        }
        let data = prepare_episode(trace, episode, preprocess)?;
        history.extend(trainer.train_window(&data.window)?);
    }
    Ok((trainer.model().clone(), history))
}

/// Run the full train/predict protocol for one variant over one trace.
pub fn run_pipeline(
    trace: &Trace,
    cfg: &ExperimentConfig,
    use_context: bool,
    seed: u64,
) -> Result<RunOutcome> {
    let episodes = plan_episodes(trace.len(), &cfg.plan)?;
    let train_cfg = variant_config(&cfg.train, use_context, seed);
    let mut trainer = WindowTrainer::new(cfg.dims, train_cfg.clone())?;
    let mut outcomes = Vec::with_capacity(episodes.len());
    for (idx, episode) in episodes.iter().enumerate() {
        if !cfg.warm_start && idx > 0 {
            trainer = WindowTrainer::new(cfg.dims, train_cfg.clone())?;
        }
        let data = prepare_episode(trace, episode, &cfg.preprocess)?;
        let losses = trainer.train_window(&data.window)?;
        let (predictions_db, train_pred_db) =
            predict_with_data(trainer.model(), &data, trace, episode, &cfg.kalman)?;

        let truth_db = trace.silence_truth(episode.silence.clone())?;
        let rmse_silence = rmse(&predictions_db, &truth_db)?;
        let train_fit_rmse = rmse(&train_pred_db, &data.smoothed_train)?;
        outcomes.push(EpisodeOutcome {
            episode_index: idx,
            silence_start: episode.silence.start,
            predictions_db,
            truth_db,
            rmse_silence,
            train_fit_rmse,
            losses,
        });
    }
    let n = outcomes.len() as f64;
    let rmse_silence_mean = outcomes.iter().map(|e| e.rmse_silence).sum::<f64>() / n;
    let train_fit_mean = outcomes.iter().map(|e| e.train_fit_rmse).sum::<f64>() / n;
    Ok(RunOutcome {
        seed,
        use_context,
        episodes: outcomes,
        rmse_silence_mean,
        train_fit_mean,
        final_params: trainer.flat_params(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub rmse_with_context: f64,
    pub rmse_without_context: f64,
    pub train_fit_with_context: f64,
    pub train_fit_without_context: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub mean_rmse_with_context: f64,
    pub mean_rmse_without_context: f64,
    /// mean without-context RMSE divided by mean with-context RMSE.
    pub improvement_ratio: f64,
    /// Runs where the with-context RMSE was strictly lower.
    pub wins_with_context: usize,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub scenarios: Vec<ScenarioReport>,
}

/// The paired evaluation grid: every scenario, `runs` seeds, each seed run
/// once with context and once without on the same generated trace.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.scenarios.is_empty() {
        return Err(Error::param("scenarios", "empty"));
    }
    if cfg.runs == 0 {
        return Err(Error::param("runs", "0"));
    }
    audit_variant_parity(
        &variant_config(&cfg.train, true, cfg.seed_base),
        &variant_config(&cfg.train, false, cfg.seed_base),
    )?;
    let mut scenarios = Vec::with_capacity(cfg.scenarios.len());
    for name in &cfg.scenarios {
        let mut runs = Vec::with_capacity(cfg.runs);
        for i in 0..cfg.runs {
            let seed = cfg.seed_base.wrapping_add(i as u64);
            let trace = generate_trace(&scenario_config(name, seed)?, cfg.trace_len)?;
            let with_ctx = run_pipeline(&trace, cfg, true, seed)?;
            let without_ctx = run_pipeline(&trace, cfg, false, seed)?;
            runs.push(RunResult {
                run: i,
                seed,
                rmse_with_context: with_ctx.rmse_silence_mean,
                rmse_without_context: without_ctx.rmse_silence_mean,
                train_fit_with_context: with_ctx.train_fit_mean,
                train_fit_without_context: without_ctx.train_fit_mean,
            });
        }
        let n = runs.len() as f64;
        let mean_with = runs.iter().map(|r| r.rmse_with_context).sum::<f64>() / n;
        let mean_without = runs.iter().map(|r| r.rmse_without_context).sum::<f64>() / n;
        scenarios.push(ScenarioReport {
            scenario: name.clone(),
            mean_rmse_with_context: mean_with,
            mean_rmse_without_context: mean_without,
            improvement_ratio: mean_without / mean_with,
            wins_with_context: runs
                .iter()
                .filter(|r| r.rmse_with_context < r.rmse_without_context)
                .count(),
            runs,
        });
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        scenarios,
    })
}

impl ExperimentReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<ExperimentReport> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from(
            "scenario,run,seed,rmse_with_context,rmse_without_context,train_fit_with_context,train_fit_without_context\n",
        );
        for sc in &self.scenarios {
            for r in &sc.runs {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    sc.scenario,
                    r.run,
                    r.seed,
                    r.rmse_with_context,
                    r.rmse_without_context,
                    r.train_fit_with_context,
                    r.train_fit_without_context
                ));
            }
        }
        s
    }

    pub fn to_text_summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<18} {:>12} {:>15} {:>8} {:>6}\n",
            "scenario", "rmse w/ ctx", "rmse w/o ctx", "ratio", "wins"
        ));
        for sc in &self.scenarios {
            s.push_str(&format!(
                "{:<18} {:>12.4} {:>15.4} {:>8.2} {:>3}/{}\n",
                sc.scenario,
                sc.mean_rmse_with_context,
                sc.mean_rmse_without_context,
                sc.improvement_ratio,
                sc.wins_with_context,
                sc.runs.len()
            ));
        }
        s
    }
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("epoch,csi_t,csi_t1,context,koopman,kl_z,kl_zeta,total\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.csi_t, r.csi_t1, r.context, r.koopman, r.kl_z, r.kl_zeta, r.total
        ));
    }
    s
}

pub fn predictions_csv(start_index: usize, truth_db: &[f64], predictions_db: &[f64]) -> String {
    let mut s = String::from("t,truth_db,predicted_db\n");
    for (i, (t, p)) in truth_db.iter().zip(predictions_db).enumerate() {
        s.push_str(&format!("{},{},{}\n", start_index + i, t, p));
    }
    s
}
