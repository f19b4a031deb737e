use super::model::{LossWeights, ModelGrads, PiaeLossBreakdown, PiaeModel, Window};
use crate::diffnet::sq_dist;
use crate::error::{Error, Result};

/// Loss and full gradient for one window, with the context branch active
/// whenever the coupling matrix or the beta weight demands it.
pub fn piae_gradients(model: &PiaeModel, window: &Window, weights: &LossWeights) -> Result<(PiaeLossBreakdown, ModelGrads)> {
    piae_gradients_opts(model, window, weights, false)
}

/// As [`piae_gradients`], but `freeze_context = true` skips the context
/// branch entirely: its reconstruction is excluded, B receives no gradient,
/// and the transition runs as z' = K z. Requires B to already be zero so the
/// skipped drive really contributes nothing.
pub fn piae_gradients_opts(
    model: &PiaeModel,
    window: &Window,
    weights: &LossWeights,
    freeze_context: bool,
) -> Result<(PiaeLossBreakdown, ModelGrads)> {
    weights.validate()?;
    window.check_dims(&model.dims)?;
    if freeze_context && !model.b.is_zero() {
        return Err(Error::State(
            "freeze_context requires a zero coupling matrix".into(),
        ));
    }
    let t_len = window.len();
    let tf = t_len as f64;
    let tm1 = (t_len - 1) as f64;
    let coupled = !freeze_context;
    let ctx_recon = coupled && weights.beta != 0.0;

    // Forward pass, keeping tapes for every sample.
    let mut enc_tapes = Vec::with_capacity(t_len);
    let mut dec_tapes = Vec::with_capacity(t_len);
    for h in window.csi.iter() {
        let et = model.csi_enc.forward(h)?;
        let dt = model.csi_dec.forward(&et.y)?;
        enc_tapes.push(et);
        dec_tapes.push(dt);
    }
    let mut ctx_enc_tapes = Vec::new();
    let mut ctx_dec_tapes = Vec::new();
    if coupled {
        ctx_enc_tapes.reserve(t_len);
        for u in window.contexts.iter() {
            let et = model.ctx_enc.forward(u)?;
            if ctx_recon {
                ctx_dec_tapes.push(model.ctx_dec.forward(&et.y)?);
            }
            ctx_enc_tapes.push(et);
        }
    }

    // Losses.
    let recon_sq: Vec<f64> = dec_tapes
        .iter()
        .zip(window.csi.iter())
        .map(|(dt, h)| sq_dist(&dt.y, h))
        .collect();
    let csi_t = recon_sq.iter().sum::<f64>() / tf;
    let csi_t1 = recon_sq[1..].iter().sum::<f64>() / tm1;
    let context = if ctx_recon {
        ctx_dec_tapes
            .iter()
            .zip(window.contexts.iter())
            .map(|(dt, u)| sq_dist(&dt.y, u))
            .sum::<f64>()
            / tf
    } else {
        0.0
    };

    let mut grads = ModelGrads::zeros_like(model);
    let mut dz: Vec<Vec<f64>> = vec![vec![0.0; model.dims.csi_latent]; t_len];
    let mut dzeta: Vec<Vec<f64>> = if coupled {
        vec![vec![0.0; model.dims.ctx_latent]; t_len]
    } else {
        Vec::new()
    };

    // Reconstruction backward. The CSI sample at index t enters both means,
    // the second one only for t >= 1.
    for t in 0..t_len {
        let c = weights.alpha * (1.0 / tf + if t >= 1 { 1.0 / tm1 } else { 0.0 });
        let dy: Vec<f64> = dec_tapes[t]
            .y
            .iter()
            .zip(window.csi[t].iter())
            .map(|(yhat, y)| 2.0 * c * (yhat - y))
            .collect();
        model.csi_dec.backward_into(&dec_tapes[t], &dy, &mut grads.csi_dec, &mut dz[t]);
    }
    if ctx_recon {
        let c = weights.beta / tf;
        for t in 0..t_len {
            let dy: Vec<f64> = ctx_dec_tapes[t]
                .y
                .iter()
                .zip(window.contexts[t].iter())
                .map(|(yhat, y)| 2.0 * c * (yhat - y))
                .collect();
            model.ctx_dec.backward_into(&ctx_dec_tapes[t], &dy, &mut grads.ctx_dec, &mut dzeta[t]);
        }
    }

    // Transition-consistency backward. Residual rho_t = z_{t+1} - K z_t - B zeta_t.
    let mut koopman = 0.0;
    let g = 2.0 * weights.gamma / tm1;
    let mut kt_rho = vec![0.0; model.dims.csi_latent];
    let mut bt_rho = vec![0.0; model.dims.ctx_latent];
    for t in 0..t_len - 1 {
        let z_t = &enc_tapes[t].y;
        let z_next = &enc_tapes[t + 1].y;
        let mut rho = vec![0.0; model.dims.csi_latent];
        model.k.matvec(z_t, &mut rho);
        if coupled {
            model.b.matvec_add(&ctx_enc_tapes[t].y, &mut rho);
        }
        for (r, zn) in rho.iter_mut().zip(z_next.iter()) {
            *r = zn - *r;
        }
        koopman += sq_dist_zero(&rho);
        if g != 0.0 {
            grads.k.add_outer(&rho, z_t, -g);
            model.k.matvec_t(&rho, &mut kt_rho);
            for (d, v) in dz[t].iter_mut().zip(kt_rho.iter()) {
                *d -= g * v;
            }
            for (d, r) in dz[t + 1].iter_mut().zip(rho.iter()) {
                *d += g * r;
            }
            if coupled {
                let zeta_t = &ctx_enc_tapes[t].y;
                grads.b.add_outer(&rho, zeta_t, -g);
                model.b.matvec_t(&rho, &mut bt_rho);
                for (d, v) in dzeta[t].iter_mut().zip(bt_rho.iter()) {
                    *d -= g * v;
                }
            }
        }
    }
    koopman /= tm1;

    // Encoder backward with the accumulated latent cotangents.
    let mut dx_csi = vec![0.0; model.dims.csi_in];
    for t in 0..t_len {
        model.csi_enc.backward_into(&enc_tapes[t], &dz[t], &mut grads.csi_enc, &mut dx_csi);
    }
    if coupled {
        let mut dx_ctx = vec![0.0; model.dims.ctx_in];
        for t in 0..t_len {
            model.ctx_enc.backward_into(&ctx_enc_tapes[t], &dzeta[t], &mut grads.ctx_enc, &mut dx_ctx);
        }
    }

    let total = weights.alpha * (csi_t + csi_t1) + weights.beta * context + weights.gamma * koopman;
    if !total.is_finite() {
        return Err(Error::numeric("piae_gradients", format!("non-finite total loss {total}")));
    }
    Ok((
        PiaeLossBreakdown {
            csi_t,
            csi_t1,
            context,
            koopman,
            total,
        },
        grads,
    ))
}

#[inline]
fn sq_dist_zero(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    s
}
