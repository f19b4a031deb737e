//! Variational variant of the autoencoder pair.
//!
//! Each encoder emits a Gaussian posterior (mean and log-variance head on a
//! shared hidden layer); training draws one reparameterized sample per step,
//! scores reconstructions under fixed-variance Gaussian likelihoods, and
//! regularizes both posteriors toward the standard normal. The transition
//! consistency term targets the posterior mean of the next step.

use crate::diffnet::{Activation, Matrix, Mlp2, Mlp2Tape, sq_dist};
use crate::error::{Error, Result};
use crate::piae::{LossWeights, ModelGrads, PiaeDims, PiaeModel, Window};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Log-variance outputs are clamped to this symmetric range before use.
pub const LOG_VAR_LIMIT: f64 = 10.0;

const LN_2PI: f64 = 1.8378770664093453;

/// A diagonal Gaussian over a latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianLatent {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }
}

/// Frozen standard-normal draws for one window, one per timestep and latent.
/// Reusing a bundle makes the variational objective deterministic, which the
/// gradient checks and the convergence tests rely on.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub eps_csi: Vec<Vec<f64>>,
    pub eps_ctx: Vec<Vec<f64>>,
}

impl NoiseBundle {
    pub fn draw(t_len: usize, csi_latent: usize, ctx_latent: usize, rng: &mut impl Rng) -> Self {
        let draw_block = |rng: &mut dyn FnMut() -> f64, d: usize, t: usize| -> Vec<Vec<f64>> {
            (0..t).map(|_| (0..d).map(|_| rng()).collect()).collect()
        };
        let mut sample = || rng.sample::<f64, _>(StandardNormal);
        NoiseBundle {
            eps_csi: draw_block(&mut sample, csi_latent, t_len),
            eps_ctx: draw_block(&mut sample, ctx_latent, t_len),
        }
    }

    pub fn zeros(t_len: usize, csi_latent: usize, ctx_latent: usize) -> Self {
        NoiseBundle {
            eps_csi: vec![vec![0.0; csi_latent]; t_len],
            eps_ctx: vec![vec![0.0; ctx_latent]; t_len],
        }
    }

    fn check(&self, t_len: usize, csi_latent: usize, ctx_latent: usize, need_ctx: bool) -> Result<()> {
        if self.eps_csi.len() != t_len || self.eps_csi.iter().any(|e| e.len() != csi_latent) {
            return Err(Error::shape(
                "NoiseBundle csi",
                format!("{t_len} x {csi_latent}"),
                format!("{} rows", self.eps_csi.len()),
            ));
        }
        if need_ctx && (self.eps_ctx.len() != t_len || self.eps_ctx.iter().any(|e| e.len() != ctx_latent)) {
            return Err(Error::shape(
                "NoiseBundle ctx",
                format!("{t_len} x {ctx_latent}"),
                format!("{} rows", self.eps_ctx.len()),
            ));
        }
        Ok(())
    }
}

/// z = mean + exp(log_var / 2) * eps, elementwise.
pub fn reparameterize(lat: &GaussianLatent, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != lat.dim() || lat.log_var.len() != lat.dim() {
        return Err(Error::shape(
            "reparameterize",
            format!("{}", lat.dim()),
            format!("eps {} / log_var {}", eps.len(), lat.log_var.len()),
        ));
    }
    Ok(lat
        .mean
        .iter()
        .zip(lat.log_var.iter())
        .zip(eps.iter())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Negative log density of x under N(mean, sigma2 * I):
/// 0.5 * (||x - mean||^2 / sigma2 + d * ln(2 pi sigma2)).
pub fn nll_gaussian(x: &[f64], mean: &[f64], sigma2: f64) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(Error::shape("nll_gaussian", format!("{}", x.len()), format!("{}", mean.len())));
    }
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::param("sigma2", format!("{sigma2} must be positive")));
    }
    let d = x.len() as f64;
    Ok(0.5 * (sq_dist(x, mean) / sigma2 + d * (LN_2PI + sigma2.ln())))
}

/// KL(N(mean, diag(exp(log_var))) || N(0, I))
/// = 0.5 * sum(exp(lv) + mean^2 - 1 - lv).
pub fn kl_std_normal(lat: &GaussianLatent) -> f64 {
    lat.mean
        .iter()
        .zip(lat.log_var.iter())
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Loss breakdown for the variational variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VkaeLossBreakdown {
    pub csi_t: f64,
    pub csi_t1: f64,
    pub context: f64,
    pub koopman: f64,
    pub kl_z: f64,
    pub kl_zeta: f64,
    pub total: f64,
}

/// Variational autoencoder pair. Encoder outputs stack the mean head on top
/// of the log-variance head; decoders and the transition match the
/// deterministic variant. Observation variances are fixed, not learned.
#[derive(Debug, Clone, PartialEq)]
pub struct VkaeModel {
    pub dims: PiaeDims,
    pub csi_enc: Mlp2,
    pub csi_dec: Mlp2,
    pub ctx_enc: Mlp2,
    pub ctx_dec: Mlp2,
    pub k: Matrix,
    pub b: Matrix,
    pub sigma2_csi: f64,
    pub sigma2_ctx: f64,
}

fn check_sigma2(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::param(name, format!("{v} must be positive and finite")))
    }
}

impl VkaeModel {
    pub fn init(dims: PiaeDims, sigma2_csi: f64, sigma2_ctx: f64, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        Ok(VkaeModel {
            dims,
            csi_enc: Mlp2::glorot(dims.csi_in, dims.csi_hidden, 2 * dims.csi_latent, Activation::ReLU, rng),
            csi_dec: Mlp2::glorot(dims.csi_latent, dims.csi_hidden, dims.csi_in, Activation::ReLU, rng),
            ctx_enc: Mlp2::glorot(dims.ctx_in, dims.ctx_hidden, 2 * dims.ctx_latent, Activation::ReLU, rng),
            ctx_dec: Mlp2::glorot(dims.ctx_latent, dims.ctx_hidden, dims.ctx_in, Activation::ReLU, rng),
            k: crate::piae::contractive_transition(dims.csi_latent),
            b: Matrix::glorot(dims.csi_latent, dims.ctx_latent, rng),
            sigma2_csi: check_sigma2("sigma2_csi", sigma2_csi)?,
            sigma2_ctx: check_sigma2("sigma2_ctx", sigma2_ctx)?,
        })
    }

    /// As [`VkaeModel::init`] with a zeroed coupling matrix.
    pub fn init_decoupled(dims: PiaeDims, sigma2_csi: f64, sigma2_ctx: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut m = VkaeModel::init(dims, sigma2_csi, sigma2_ctx, rng)?;
        m.b.fill(0.0);
        Ok(m)
    }

    /// Lift a deterministic model: mean heads copy the original encoders,
    /// log-variance heads start at zero (unit posterior variance).
    pub fn from_piae(p: &PiaeModel, sigma2_csi: f64, sigma2_ctx: f64) -> Result<Self> {
        let widen = |enc: &Mlp2, latent: usize| -> Result<Mlp2> {
            let hidden = enc.hidden_dim();
            let mut w2 = Matrix::zeros(2 * latent, hidden);
            let mut b2 = vec![0.0; 2 * latent];
            for i in 0..latent {
                for j in 0..hidden {
                    w2.set(i, j, enc.w2.get(i, j));
                }
                b2[i] = enc.b2[i];
            }
            Mlp2::new(enc.w1.clone(), enc.b1.clone(), w2, b2, enc.activation)
        };
        Ok(VkaeModel {
            dims: p.dims,
            csi_enc: widen(&p.csi_enc, p.dims.csi_latent)?,
            csi_dec: p.csi_dec.clone(),
            ctx_enc: widen(&p.ctx_enc, p.dims.ctx_latent)?,
            ctx_dec: p.ctx_dec.clone(),
            k: p.k.clone(),
            b: p.b.clone(),
            sigma2_csi: check_sigma2("sigma2_csi", sigma2_csi)?,
            sigma2_ctx: check_sigma2("sigma2_ctx", sigma2_ctx)?,
        })
    }

    /// Project back to a deterministic model that encodes with the posterior
    /// mean. Used for rollouts and as the Kalman observation model.
    pub fn to_mean_piae(&self) -> Result<PiaeModel> {
        let narrow = |enc: &Mlp2, latent: usize| -> Result<Mlp2> {
            let hidden = enc.hidden_dim();
            let mut w2 = Matrix::zeros(latent, hidden);
            let mut b2 = vec![0.0; latent];
            for i in 0..latent {
                for j in 0..hidden {
                    w2.set(i, j, enc.w2.get(i, j));
                }
                b2[i] = enc.b2[i];
            }
            Mlp2::new(enc.w1.clone(), enc.b1.clone(), w2, b2, enc.activation)
        };
        PiaeModel::new(
            self.dims,
            narrow(&self.csi_enc, self.dims.csi_latent)?,
            self.csi_dec.clone(),
            narrow(&self.ctx_enc, self.dims.ctx_latent)?,
            self.ctx_dec.clone(),
            self.k.clone(),
            self.b.clone(),
        )
    }

    fn split_heads(tape: &Mlp2Tape, latent: usize) -> GaussianLatent {
        let mean = tape.y[..latent].to_vec();
        let log_var = tape.y[latent..]
            .iter()
            .map(|v| v.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT))
            .collect();
        GaussianLatent { mean, log_var }
    }

    pub fn encode_gaussian_csi(&self, h: &[f64]) -> Result<GaussianLatent> {
        let tape = self.csi_enc.forward(h)?;
        Ok(Self::split_heads(&tape, self.dims.csi_latent))
    }

    pub fn encode_gaussian_ctx(&self, u: &[f64]) -> Result<GaussianLatent> {
        let tape = self.ctx_enc.forward(u)?;
        Ok(Self::split_heads(&tape, self.dims.ctx_latent))
    }

    pub fn decode_csi(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.csi_dec.forward_value(z)
    }

    pub fn param_count(&self) -> usize {
        self.csi_enc.param_count()
            + self.csi_dec.param_count()
            + self.ctx_enc.param_count()
            + self.ctx_dec.param_count()
            + self.k.data().len()
            + self.b.data().len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.csi_enc.write_params(out);
        self.csi_dec.write_params(out);
        self.ctx_enc.write_params(out);
        self.ctx_dec.write_params(out);
        out.extend_from_slice(self.k.data());
        out.extend_from_slice(self.b.data());
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        let need = self.param_count();
        if src.len() != need {
            return Err(Error::shape("VkaeModel::read_params", format!("{need}"), format!("{}", src.len())));
        }
        let mut off = 0;
        off += self.csi_enc.read_params(&src[off..])?;
        off += self.csi_dec.read_params(&src[off..])?;
        off += self.ctx_enc.read_params(&src[off..])?;
        off += self.ctx_dec.read_params(&src[off..])?;
        let k_len = self.k.data().len();
        self.k.data_mut().copy_from_slice(&src[off..off + k_len]);
        off += k_len;
        let b_len = self.b.data().len();
        self.b.data_mut().copy_from_slice(&src[off..off + b_len]);
        Ok(())
    }

    /// Component offsets in the flat vector; groups match the deterministic
    /// variant (transition operators move with the CSI group).
    pub fn param_layout(&self) -> Vec<crate::piae::ParamRange> {
        use crate::piae::{ParamGroup, ParamRange};
        let sizes = [
            ("csi_enc", ParamGroup::Csi, self.csi_enc.param_count()),
            ("csi_dec", ParamGroup::Csi, self.csi_dec.param_count()),
            ("ctx_enc", ParamGroup::Context, self.ctx_enc.param_count()),
            ("ctx_dec", ParamGroup::Context, self.ctx_dec.param_count()),
            ("k", ParamGroup::Csi, self.k.data().len()),
            ("b", ParamGroup::Csi, self.b.data().len()),
        ];
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for (name, group, len) in sizes {
            out.push(ParamRange { name, group, offset, len });
            offset += len;
        }
        out
    }

    pub fn grads_zeros(&self) -> ModelGrads {
        ModelGrads::zeros_from_parts(&self.csi_enc, &self.csi_dec, &self.ctx_enc, &self.ctx_dec, &self.k, &self.b)
    }

    pub fn all_finite(&self) -> bool {
        self.csi_enc.all_finite()
            && self.csi_dec.all_finite()
            && self.ctx_enc.all_finite()
            && self.ctx_dec.all_finite()
            && self.k.all_finite()
            && self.b.all_finite()
    }
}

/// Losses under a caller-frozen noise bundle; fully deterministic.
pub fn vkae_losses_frozen(
    model: &VkaeModel,
    window: &Window,
    weights: &LossWeights,
    noise: &NoiseBundle,
) -> Result<VkaeLossBreakdown> {
    let (breakdown, _) = vkae_pass(model, window, weights, noise, false, false)?;
    Ok(breakdown)
}

/// Losses with fresh noise drawn from `rng`.
pub fn vkae_losses(model: &VkaeModel, window: &Window, weights: &LossWeights, rng: &mut impl Rng) -> Result<VkaeLossBreakdown> {
    let noise = NoiseBundle::draw(window.len(), model.dims.csi_latent, model.dims.ctx_latent, rng);
    vkae_losses_frozen(model, window, weights, &noise)
}

/// Loss and pathwise gradient under a frozen noise bundle.
pub fn vkae_gradients_frozen(
    model: &VkaeModel,
    window: &Window,
    weights: &LossWeights,
    noise: &NoiseBundle,
) -> Result<(VkaeLossBreakdown, ModelGrads)> {
    let (breakdown, grads) = vkae_pass(model, window, weights, noise, true, false)?;
    Ok((breakdown, grads.expect("gradients requested")))
}

/// Loss and gradient with fresh noise.
pub fn vkae_gradients(
    model: &VkaeModel,
    window: &Window,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<(VkaeLossBreakdown, ModelGrads)> {
    let noise = NoiseBundle::draw(window.len(), model.dims.csi_latent, model.dims.ctx_latent, rng);
    vkae_gradients_frozen(model, window, weights, &noise)
}

/// No-context training step: context branch skipped, B must stay zero.
pub fn vkae_gradients_frozen_opts(
    model: &VkaeModel,
    window: &Window,
    weights: &LossWeights,
    noise: &NoiseBundle,
    freeze_context: bool,
) -> Result<(VkaeLossBreakdown, ModelGrads)> {
    let (breakdown, grads) = vkae_pass(model, window, weights, noise, true, freeze_context)?;
    Ok((breakdown, grads.expect("gradients requested")))
}

struct HeadTape {
    tape: Mlp2Tape,
    lat: GaussianLatent,
    sample: Vec<f64>,
}

fn vkae_pass(
    model: &VkaeModel,
    window: &Window,
    weights: &LossWeights,
    noise: &NoiseBundle,
    want_grads: bool,
    freeze_context: bool,
) -> Result<(VkaeLossBreakdown, Option<ModelGrads>)> {
    weights.validate()?;
    window.check_dims(&model.dims)?;
    if freeze_context && !model.b.is_zero() {
        return Err(Error::State("freeze_context requires a zero coupling matrix".into()));
    }
    let t_len = window.len();
    let tf = t_len as f64;
    let tm1 = (t_len - 1) as f64;
    let coupled = !freeze_context;
    let ctx_recon = coupled && weights.beta != 0.0;
    noise.check(t_len, model.dims.csi_latent, model.dims.ctx_latent, coupled)?;

    // Forward: posteriors, samples, reconstructions.
    let mut csi_heads = Vec::with_capacity(t_len);
    let mut csi_dec_tapes = Vec::with_capacity(t_len);
    for (t, h) in window.csi.iter().enumerate() {
        let tape = model.csi_enc.forward(h)?;
        let lat = VkaeModel::split_heads(&tape, model.dims.csi_latent);
        let sample = reparameterize(&lat, &noise.eps_csi[t])?;
        csi_dec_tapes.push(model.csi_dec.forward(&sample)?);
        csi_heads.push(HeadTape { tape, lat, sample });
    }
    let mut ctx_heads = Vec::new();
    let mut ctx_dec_tapes = Vec::new();
    if coupled {
        ctx_heads.reserve(t_len);
        for (t, u) in window.contexts.iter().enumerate() {
            let tape = model.ctx_enc.forward(u)?;
            let lat = VkaeModel::split_heads(&tape, model.dims.ctx_latent);
            let sample = reparameterize(&lat, &noise.eps_ctx[t])?;
            if ctx_recon {
                ctx_dec_tapes.push(model.ctx_dec.forward(&sample)?);
            }
            ctx_heads.push(HeadTape { tape, lat, sample });
        }
    }

    // Losses.
    let mut csi_t = 0.0;
    let mut csi_t1 = 0.0;
    for t in 0..t_len {
        let nll = nll_gaussian(&window.csi[t], &csi_dec_tapes[t].y, model.sigma2_csi)?;
        csi_t += nll / tf;
        if t >= 1 {
            csi_t1 += nll / tm1;
        }
    }
    let mut context = 0.0;
    if ctx_recon {
        for t in 0..t_len {
            context += nll_gaussian(&window.contexts[t], &ctx_dec_tapes[t].y, model.sigma2_ctx)? / tf;
        }
    }
    let mut koopman = 0.0;
    let mut rhos: Vec<Vec<f64>> = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        let mut rho = vec![0.0; model.dims.csi_latent];
        model.k.matvec(&csi_heads[t].sample, &mut rho);
        if coupled {
            model.b.matvec_add(&ctx_heads[t].sample, &mut rho);
        }
        for (r, mu_next) in rho.iter_mut().zip(csi_heads[t + 1].lat.mean.iter()) {
            *r = mu_next - *r;
        }
        koopman += sq_dist(&rho, &vec![0.0; rho.len()]) / tm1;
        rhos.push(rho);
    }
    let kl_z = csi_heads.iter().map(|h| kl_std_normal(&h.lat)).sum::<f64>() / tf;
    let kl_zeta = if coupled {
        ctx_heads.iter().map(|h| kl_std_normal(&h.lat)).sum::<f64>() / tf
    } else {
        0.0
    };
    let total = weights.alpha * (csi_t + csi_t1)
        + weights.beta * context
        + weights.gamma * koopman
        + weights.lambda * (kl_z + kl_zeta);
    if !total.is_finite() {
        return Err(Error::numeric("vkae", format!("non-finite total loss {total}")));
    }
    let breakdown = VkaeLossBreakdown {
        csi_t,
        csi_t1,
        context,
        koopman,
        kl_z,
        kl_zeta,
        total,
    };
    if !want_grads {
        return Ok((breakdown, None));
    }

    // Backward.
    let mut grads = model.grads_zeros();
    let m = model.dims.csi_latent;
    let p = model.dims.ctx_latent;
    let mut d_sample_csi: Vec<Vec<f64>> = vec![vec![0.0; m]; t_len];
    let mut d_mean_csi: Vec<Vec<f64>> = vec![vec![0.0; m]; t_len];
    let mut d_sample_ctx: Vec<Vec<f64>> = if coupled { vec![vec![0.0; p]; t_len] } else { Vec::new() };

    // Reconstruction terms -> d(sample).
    for t in 0..t_len {
        let c = weights.alpha * (1.0 / tf + if t >= 1 { 1.0 / tm1 } else { 0.0 });
        let dy: Vec<f64> = csi_dec_tapes[t]
            .y
            .iter()
            .zip(window.csi[t].iter())
            .map(|(yhat, y)| c * (yhat - y) / model.sigma2_csi)
            .collect();
        model
            .csi_dec
            .backward_into(&csi_dec_tapes[t], &dy, &mut grads.csi_dec, &mut d_sample_csi[t]);
    }
    if ctx_recon {
        let c = weights.beta / tf;
        for t in 0..t_len {
            let dy: Vec<f64> = ctx_dec_tapes[t]
                .y
                .iter()
                .zip(window.contexts[t].iter())
                .map(|(yhat, y)| c * (yhat - y) / model.sigma2_ctx)
                .collect();
            model
                .ctx_dec
                .backward_into(&ctx_dec_tapes[t], &dy, &mut grads.ctx_dec, &mut d_sample_ctx[t]);
        }
    }

    // Transition consistency: rho_t = mu_{t+1} - K s_t - B q_t with s, q the
    // drawn samples.
    let g = 2.0 * weights.gamma / tm1;
    if g != 0.0 {
        let mut kt_rho = vec![0.0; m];
        let mut bt_rho = vec![0.0; p];
        for t in 0..t_len - 1 {
            let rho = &rhos[t];
            grads.k.add_outer(rho, &csi_heads[t].sample, -g);
            model.k.matvec_t(rho, &mut kt_rho);
            for (d, v) in d_sample_csi[t].iter_mut().zip(kt_rho.iter()) {
                *d -= g * v;
            }
            for (d, r) in d_mean_csi[t + 1].iter_mut().zip(rho.iter()) {
                *d += g * r;
            }
            if coupled {
                grads.b.add_outer(rho, &ctx_heads[t].sample, -g);
                model.b.matvec_t(rho, &mut bt_rho);
                for (d, v) in d_sample_ctx[t].iter_mut().zip(bt_rho.iter()) {
                    *d -= g * v;
                }
            }
        }
    }

    // Through the sampling and the KL into the encoder heads.
    let kl_c = weights.lambda / tf;
    let mut dy_enc_csi = vec![0.0; 2 * m];
    let mut dx_csi = vec![0.0; model.dims.csi_in];
    for t in 0..t_len {
        head_backward(
            &csi_heads[t],
            &noise.eps_csi[t],
            &d_sample_csi[t],
            &d_mean_csi[t],
            kl_c,
            m,
            &mut dy_enc_csi,
        );
        model
            .csi_enc
            .backward_into(&csi_heads[t].tape, &dy_enc_csi, &mut grads.csi_enc, &mut dx_csi);
    }
    if coupled {
        let zero_mean = vec![0.0; p];
        let mut dy_enc_ctx = vec![0.0; 2 * p];
        let mut dx_ctx = vec![0.0; model.dims.ctx_in];
        for t in 0..t_len {
            head_backward(
                &ctx_heads[t],
                &noise.eps_ctx[t],
                &d_sample_ctx[t],
                &zero_mean,
                kl_c,
                p,
                &mut dy_enc_ctx,
            );
            model
                .ctx_enc
                .backward_into(&ctx_heads[t].tape, &dy_enc_ctx, &mut grads.ctx_enc, &mut dx_ctx);
        }
    }

    Ok((breakdown, Some(grads)))
}

/// Gradient of the encoder output vector [mean, raw log-var] given the
/// cotangents of the drawn sample and of the mean, plus the KL term.
fn head_backward(
    head: &HeadTape,
    eps: &[f64],
    d_sample: &[f64],
    d_mean_extra: &[f64],
    kl_coeff: f64,
    latent: usize,
    dy: &mut [f64],
) {
    for i in 0..latent {
        let mu = head.lat.mean[i];
        let lv = head.lat.log_var[i];
        let sigma = (0.5 * lv).exp();
        // d/d mu: sample passes through identically; KL adds lambda/T * mu.
        dy[i] = d_sample[i] + d_mean_extra[i] + kl_coeff * mu;
        // d/d lv: d(sample)/d lv = 0.5 sigma eps; KL adds 0.5 (e^lv - 1).
        let d_lv = d_sample[i] * 0.5 * sigma * eps[i] + kl_coeff * 0.5 * (lv.exp() - 1.0);
        // Clamp: zero gradient outside the open interval.
        let raw = head.tape.y[latent + i];
        dy[latent + i] = if raw > -LOG_VAR_LIMIT && raw < LOG_VAR_LIMIT { d_lv } else { 0.0 };
    }
}
