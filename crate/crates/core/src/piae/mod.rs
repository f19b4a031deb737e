//! Physics-informed autoencoder pair coupled by a linear latent transition.
//!
//! A CSI encoder/decoder pair and a context encoder/decoder pair are trained
//! jointly so that the CSI latent advances as z' = K z + B zeta, where zeta
//! is the context latent. During reporting gaps the transition is iterated
//! with the encoder/decoder held fixed.

mod grads;
mod model;

pub use grads::{piae_gradients, piae_gradients_opts};
pub(crate) use model::contractive_transition;
pub use model::{
    LossWeights, ModelGrads, ParamGroup, ParamRange, PiaeDims, PiaeLossBreakdown, PiaeModel, Window,
};

use crate::diffnet::sq_dist;
use crate::error::{Error, Result};

/// Loss breakdown for one window. `context` is zero when the context branch
/// is disabled; `total` always reflects the configured weights.
pub fn piae_losses(model: &PiaeModel, window: &Window, weights: &LossWeights) -> Result<PiaeLossBreakdown> {
    weights.validate()?;
    window.check_dims(&model.dims)?;
    let t_len = window.len();
    let coupled = !model.b.is_zero();
    let ctx_recon = weights.beta != 0.0;

    let mut recon_sq = Vec::with_capacity(t_len);
    let mut z = Vec::with_capacity(t_len);
    for h in window.csi.iter() {
        let zt = model.csi_enc.forward_value(h)?;
        let ht = model.csi_dec.forward_value(&zt)?;
        recon_sq.push(sq_dist(&ht, h));
        z.push(zt);
    }

    let mut context = 0.0;
    let mut zeta: Vec<Vec<f64>> = Vec::new();
    if coupled || ctx_recon {
        zeta.reserve(t_len);
        for u in window.contexts.iter() {
            let zt = model.ctx_enc.forward_value(u)?;
            if ctx_recon {
                let ut = model.ctx_dec.forward_value(&zt)?;
                context += sq_dist(&ut, u);
            }
            zeta.push(zt);
        }
        context /= t_len as f64;
    }

    let csi_t = recon_sq.iter().sum::<f64>() / t_len as f64;
    let csi_t1 = recon_sq[1..].iter().sum::<f64>() / (t_len - 1) as f64;

    let mut koopman = 0.0;
    for t in 0..t_len - 1 {
        let pred = if coupled {
            model.koopman_step(&z[t], &zeta[t])?
        } else {
            model.koopman_step_free(&z[t])?
        };
        koopman += sq_dist(&z[t + 1], &pred);
    }
    koopman /= (t_len - 1) as f64;

    let total = weights.alpha * (csi_t + csi_t1) + weights.beta * context + weights.gamma * koopman;
    if !total.is_finite() {
        return Err(Error::numeric("piae_losses", format!("non-finite total loss {total}")));
    }
    Ok(PiaeLossBreakdown {
        csi_t,
        csi_t1,
        context,
        koopman,
        total,
    })
}

/// Iterate the latent transition through a reporting gap, decoding each step.
///
/// `z0` is the encoding of the last observed CSI sample; `contexts[i]` drives
/// the transition into prediction step i. When the coupling matrix is
/// identically zero the context values are never read, only their count.
pub fn rollout_silence(model: &PiaeModel, z0: &[f64], contexts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(rollout_latents(model, z0, contexts)?
        .iter()
        .map(|z| model.csi_dec.forward_value(z))
        .collect::<Result<Vec<_>>>()?)
}

/// Latent-space rollout behind [`rollout_silence`]; also used to seed the
/// Kalman tracker.
pub fn rollout_latents(model: &PiaeModel, z0: &[f64], contexts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if z0.len() != model.dims.csi_latent {
        return Err(Error::shape(
            "rollout_latents z0",
            format!("{}", model.dims.csi_latent),
            format!("{}", z0.len()),
        ));
    }
    if contexts.is_empty() {
        return Err(Error::InsufficientData {
            context: "rollout_latents",
            need: 1,
            have: 0,
        });
    }
    let coupled = !model.b.is_zero();
    let mut out = Vec::with_capacity(contexts.len());
    let mut z = z0.to_vec();
    for u in contexts {
        z = if coupled {
            let zeta = model.ctx_enc.forward_value(u)?;
            model.koopman_step(&z, &zeta)?
        } else {
            model.koopman_step_free(&z)?
        };
        out.push(z.clone());
    }
    Ok(out)
}
