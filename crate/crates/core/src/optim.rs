//! Adam optimization of a tracking model over one training window, with the
//! CSI branch (including the transition matrices) and the context branch
//! treated as separately steppable parameter groups.

use crate::diffnet::Matrix;
use crate::error::{Error, Result};
use crate::piae::{
    piae_gradients_opts, LossWeights, ParamGroup, ParamRange, PiaeDims, PiaeModel, Window,
};
use crate::vkae::{vkae_gradients_frozen_opts, NoiseBundle, VkaeModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Adam with bias correction over a flat parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "AdamState::apply",
                format!("{} params", self.m.len()),
                format!("params {}, grads {}", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    Piae,
    Vkae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub variant: TrainVariant,
    /// Alternate epochs between the CSI group and the context group instead
    /// of stepping both jointly.
    pub alternating: bool,
    /// With context off the model is built decoupled (B = 0) and the context
    /// branch neither runs nor trains.
    pub use_context: bool,
    pub sigma2_csi: f64,
    pub sigma2_ctx: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            lr: 1e-3,
            weights: LossWeights::default(),
            variant: TrainVariant::Piae,
            alternating: false,
            use_context: true,
            sigma2_csi: 0.5,
            sigma2_ctx: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "0"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::param("lr", format!("{}", self.lr)));
        }
        self.weights.validate()?;
        if self.variant == TrainVariant::Vkae && (self.sigma2_csi <= 0.0 || self.sigma2_ctx <= 0.0) {
            return Err(Error::param("sigma2", "observation variances must be positive"));
        }
        Ok(())
    }
}

/// One epoch of the unified loss breakdown; KL terms are zero for the
/// deterministic variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub csi_t: f64,
    pub csi_t1: f64,
    pub context: f64,
    pub koopman: f64,
    pub kl_z: f64,
    pub kl_zeta: f64,
    pub total: f64,
}

/// Either tracking model behind one parameter-vector interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Tracker {
    Piae(PiaeModel),
    Vkae(VkaeModel),
}

impl Tracker {
    pub fn init(dims: PiaeDims, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(match (cfg.variant, cfg.use_context) {
            (TrainVariant::Piae, true) => Tracker::Piae(PiaeModel::init(dims, rng)?),
            (TrainVariant::Piae, false) => Tracker::Piae(PiaeModel::init_decoupled(dims, rng)?),
            (TrainVariant::Vkae, true) => {
                Tracker::Vkae(VkaeModel::init(dims, cfg.sigma2_csi, cfg.sigma2_ctx, rng)?)
            }
            (TrainVariant::Vkae, false) => {
                Tracker::Vkae(VkaeModel::init_decoupled(dims, cfg.sigma2_csi, cfg.sigma2_ctx, rng)?)
            }
        })
    }

    pub fn variant(&self) -> TrainVariant {
        match self {
            Tracker::Piae(_) => TrainVariant::Piae,
            Tracker::Vkae(_) => TrainVariant::Vkae,
        }
    }

    pub fn dims(&self) -> &PiaeDims {
        match self {
            Tracker::Piae(m) => &m.dims,
            Tracker::Vkae(m) => &m.dims,
        }
    }

    /// Deterministic transition model used for rollouts and filtering: the
    /// model itself, or the posterior-mean extraction of the variational one.
    pub fn mean_model(&self) -> Result<PiaeModel> {
        match self {
            Tracker::Piae(m) => Ok(m.clone()),
            Tracker::Vkae(m) => m.to_mean_piae(),
        }
    }

    pub fn encode_mean(&self, h: &[f64]) -> Result<Vec<f64>> {
        match self {
            Tracker::Piae(m) => m.encode_csi(h),
            Tracker::Vkae(m) => Ok(m.encode_gaussian_csi(h)?.mean),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Tracker::Piae(m) => m.param_count(),
            Tracker::Vkae(m) => m.param_count(),
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            Tracker::Piae(m) => m.write_params(out),
            Tracker::Vkae(m) => m.write_params(out),
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        match self {
            Tracker::Piae(m) => m.read_params(src),
            Tracker::Vkae(m) => m.read_params(src),
        }
    }

    pub fn param_layout(&self) -> Vec<ParamRange> {
        match self {
            Tracker::Piae(m) => m.param_layout(),
            Tracker::Vkae(m) => m.param_layout(),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Tracker::Piae(m) => m.all_finite(),
            Tracker::Vkae(m) => m.all_finite(),
        }
    }

    /// True when the coupling matrix is identically zero, i.e. the model was
    /// built or trained without context.
    pub fn is_decoupled(&self) -> bool {
        match self {
            Tracker::Piae(m) => m.b.is_zero(),
            Tracker::Vkae(m) => m.b.is_zero(),
        }
    }

    /// Forecast `contexts.len()` steps from the last observed sample, in
    /// standardized units. A decoupled model ignores the context values.
    pub fn forecast(&self, last_h: &[f64], contexts: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mean = self.mean_model()?;
        let z0 = self.encode_mean(last_h)?;
        let decoded = crate::piae::rollout_silence(&mean, &z0, contexts)?;
        decoded
            .into_iter()
            .map(|y| {
                y.first().copied().ok_or_else(|| Error::shape("forecast", "scalar output", "empty"))
            })
            .collect()
    }

    fn losses_and_grads(
        &self,
        window: &Window,
        weights: &LossWeights,
        freeze_context: bool,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(LossRecord, Vec<f64>)> {
        let mut flat = Vec::with_capacity(self.param_count());
        let record = match self {
            Tracker::Piae(m) => {
                let (b, grads) = piae_gradients_opts(m, window, weights, freeze_context)?;
                grads.write_flat(&mut flat);
                LossRecord {
                    epoch: 0,
                    csi_t: b.csi_t,
                    csi_t1: b.csi_t1,
                    context: b.context,
                    koopman: b.koopman,
                    kl_z: 0.0,
                    kl_zeta: 0.0,
                    total: b.total,
                }
            }
            Tracker::Vkae(m) => {
                let noise = NoiseBundle::draw(
                    window.len(),
                    m.dims.csi_latent,
                    m.dims.ctx_latent,
                    noise_rng,
                );
                let (b, grads) = vkae_gradients_frozen_opts(m, window, weights, &noise, freeze_context)?;
                grads.write_flat(&mut flat);
                LossRecord {
                    epoch: 0,
                    csi_t: b.csi_t,
                    csi_t1: b.csi_t1,
                    context: b.context,
                    koopman: b.koopman,
                    kl_z: b.kl_z,
                    kl_zeta: b.kl_zeta,
                    total: b.total,
                }
            }
        };
        Ok((record, flat))
    }
}

fn group_ranges(layout: &[ParamRange], group: ParamGroup) -> Vec<(usize, usize)> {
    layout
        .iter()
        .filter(|r| r.group == group)
        .map(|r| (r.offset, r.len))
        .collect()
}

fn gather(src: &[f64], ranges: &[(usize, usize)], dst: &mut Vec<f64>) {
    dst.clear();
    for &(off, len) in ranges {
        dst.extend_from_slice(&src[off..off + len]);
    }
}

fn scatter(dst: &mut [f64], ranges: &[(usize, usize)], src: &[f64]) {
    let mut cursor = 0;
    for &(off, len) in ranges {
        dst[off..off + len].copy_from_slice(&src[cursor..cursor + len]);
        cursor += len;
    }
}

/// Trains one model on successive windows. Keeping the trainer alive across
/// episodes carries both the parameters and the optimizer moments forward.
#[derive(Debug, Clone)]
pub struct WindowTrainer {
    model: Tracker,
    cfg: TrainConfig,
    adam_csi: AdamState,
    adam_ctx: AdamState,
    csi_ranges: Vec<(usize, usize)>,
    ctx_ranges: Vec<(usize, usize)>,
    noise_rng: ChaCha8Rng,
    epochs_run: usize,
}

impl WindowTrainer {
    pub fn new(dims: PiaeDims, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Tracker::init(dims, &cfg, &mut init_rng)?;
        let layout = model.param_layout();
        let csi_ranges = group_ranges(&layout, ParamGroup::Csi);
        let ctx_ranges = group_ranges(&layout, ParamGroup::Context);
        let csi_len: usize = csi_ranges.iter().map(|&(_, l)| l).sum();
        let ctx_len: usize = ctx_ranges.iter().map(|&(_, l)| l).sum();
        let noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let lr = cfg.lr;
        Ok(WindowTrainer {
            model,
            cfg,
            adam_csi: AdamState::new(csi_len, lr),
            adam_ctx: AdamState::new(ctx_len, lr),
            csi_ranges,
            ctx_ranges,
            noise_rng,
            epochs_run: 0,
        })
    }

    pub fn model(&self) -> &Tracker {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.model.param_count());
        self.model.write_params(&mut out);
        out
    }

    /// Run the configured number of epochs on one window, returning the loss
    /// trajectory.
    pub fn train_window(&mut self, window: &Window) -> Result<Vec<LossRecord>> {
        window.check_dims(self.model.dims())?;
        let freeze = !self.cfg.use_context;
        let mut params = self.flat_params();
        let mut sub_params = Vec::new();
        let mut sub_grads = Vec::new();
        let mut records = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let (mut record, grads) =
                self.model
                    .losses_and_grads(window, &self.cfg.weights, freeze, &mut self.noise_rng)?;
            record.epoch = self.epochs_run + epoch;
            if !record.total.is_finite() {
                return Err(Error::numeric("train_window", format!("loss diverged at epoch {}", record.epoch)));
            }
            let step_csi = !self.cfg.alternating || epoch % 2 == 0;
            let step_ctx = !freeze && (!self.cfg.alternating || epoch % 2 == 1);
            if step_csi {
                gather(&params, &self.csi_ranges, &mut sub_params);
                gather(&grads, &self.csi_ranges, &mut sub_grads);
                self.adam_csi.apply(&mut sub_params, &sub_grads)?;
                scatter(&mut params, &self.csi_ranges, &sub_params);
            }
            if step_ctx {
                gather(&params, &self.ctx_ranges, &mut sub_params);
                gather(&grads, &self.ctx_ranges, &mut sub_grads);
                self.adam_ctx.apply(&mut sub_params, &sub_grads)?;
                scatter(&mut params, &self.ctx_ranges, &sub_params);
            }
            self.model.read_params(&params)?;
            records.push(record);
        }
        self.epochs_run += self.cfg.epochs;
        if !self.model.all_finite() {
            return Err(Error::numeric("train_window", "parameters left the finite range"));
        }
        Ok(records)
    }

    /// Forecast `contexts.len()` steps ahead from the last observed sample,
    /// in standardized units. Context values are ignored by a decoupled model.
    pub fn forecast(&self, last_h: &[f64], contexts: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.model.forecast(last_h, contexts)
    }
}

/// Fit z' = K z + B zeta to latent sequences by full-batch Adam on the mean
/// squared one-step residual. `zetas`, when present, must hold one context
/// latent per transition (length one less than `zs`).
pub fn fit_linear_dynamics(
    zs: &[Vec<f64>],
    zetas: Option<&[Vec<f64>]>,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    if zs.len() < 2 {
        return Err(Error::InsufficientData {
            context: "fit_linear_dynamics",
            need: 2,
            have: zs.len(),
        });
    }
    let n = zs[0].len();
    if n == 0 || zs.iter().any(|z| z.len() != n) {
        return Err(Error::shape("fit_linear_dynamics", format!("latent dim {n}"), "ragged sequence".to_string()));
    }
    let transitions = zs.len() - 1;
    let p = match zetas {
        Some(seq) => {
            if seq.len() != transitions {
                return Err(Error::shape(
                    "fit_linear_dynamics",
                    format!("{transitions} context latents"),
                    format!("{}", seq.len()),
                ));
            }
            let p = seq.first().map_or(0, |z| z.len());
            if seq.iter().any(|z| z.len() != p) {
                return Err(Error::shape("fit_linear_dynamics", format!("context dim {p}"), "ragged sequence".to_string()));
            }
            p
        }
        None => 0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = Matrix::glorot(n, n, &mut rng);
    let mut b = if p > 0 { Matrix::glorot(n, p, &mut rng) } else { Matrix::zeros(n, 1) };

    let k_len = k.data().len();
    let b_len = if p > 0 { b.data().len() } else { 0 };
    let mut adam = AdamState::new(k_len + b_len, lr);
    let mut flat = vec![0.0; k_len + b_len];
    let mut grads = vec![0.0; k_len + b_len];
    let scale = 2.0 / transitions as f64;
    let mut resid = vec![0.0; n];
    for _ in 0..steps {
        flat[..k_len].copy_from_slice(k.data());
        if p > 0 {
            flat[k_len..].copy_from_slice(b.data());
        }
        grads.iter_mut().for_each(|g| *g = 0.0);
        for t in 0..transitions {
            let z = &zs[t];
            let z_next = &zs[t + 1];
            k.matvec(z, &mut resid);
            if let Some(seq) = zetas {
                let mut drive = vec![0.0; n];
                b.matvec(&seq[t], &mut drive);
                for i in 0..n {
                    resid[i] += drive[i];
                }
            }
            for i in 0..n {
                resid[i] = z_next[i] - resid[i];
            }
            for i in 0..n {
                let r = scale * resid[i];
                for j in 0..n {
                    grads[i * n + j] -= r * z[j];
                }
                if let Some(seq) = zetas {
                    for j in 0..p {
                        grads[k_len + i * p + j] -= r * seq[t][j];
                    }
                }
            }
        }
        adam.apply(&mut flat, &grads)?;
        k.data_mut().copy_from_slice(&flat[..k_len]);
        if p > 0 {
            b.data_mut().copy_from_slice(&flat[k_len..]);
        }
    }
    Ok((k, b))
}
