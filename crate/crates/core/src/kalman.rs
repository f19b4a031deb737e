//! Kalman tracking in the learned latent space.
//!
//! The transition is the learned linear map z' = K z + B zeta with the
//! context latent treated as a Gaussian input; the observation is the scalar
//! CSI decoder, linearized by its exact piecewise-linear Jacobian. Silence
//! steps carry no observation: the filter coasts on the prediction, and a
//! fixed-interval smoother then propagates later evidence backward.

use crate::diffnet::{Matrix, Mlp2};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Regularizer added to predicted covariances before inversion in the
/// smoother gain. Guards exact singularity only; kept far below the noise
/// floors in use so the smoothed posterior stays within 1e-8 of exact
/// Gaussian conditioning.
pub const SMOOTHER_RIDGE: f64 = 1e-12;

/// Gaussian belief over the CSI latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LatentBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape(
                "LatentBelief::new",
                format!("{0}x{0}", mean.len()),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        Ok(LatentBelief { mean, cov })
    }

    /// Belief centered at `mean` with covariance p0 * I.
    pub fn isotropic(mean: DVector<f64>, p0: f64) -> Result<Self> {
        if !(p0.is_finite() && p0 >= 0.0) {
            return Err(Error::param("p0", format!("{p0} must be non-negative")));
        }
        let n = mean.len();
        Ok(LatentBelief {
            mean,
            cov: DMatrix::identity(n, n) * p0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Finite entries, symmetric, non-negative diagonal.
    pub fn check_health(&self, context: &'static str) -> Result<()> {
        if self.mean.iter().any(|v| !v.is_finite()) || self.cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(context, "non-finite belief"));
        }
        let n = self.dim();
        for i in 0..n {
            if self.cov[(i, i)] < -1e-12 {
                return Err(Error::numeric(context, format!("negative variance {}", self.cov[(i, i)])));
            }
            for j in 0..i {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-9 {
                    return Err(Error::numeric(context, "asymmetric covariance"));
                }
            }
        }
        Ok(())
    }
}

/// First two moments of the context latent driving one transition. The
/// covariance is diagonal: exact for the deterministic encoder (zero) and
/// for the variational posterior (exp of the log-variance head).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStats {
    pub mean: DVector<f64>,
    pub var_diag: DVector<f64>,
}

impl ContextStats {
    pub fn deterministic(zeta: &[f64]) -> Self {
        ContextStats {
            mean: DVector::from_column_slice(zeta),
            var_diag: DVector::zeros(zeta.len()),
        }
    }

    pub fn gaussian(mean: &[f64], var_diag: &[f64]) -> Result<Self> {
        if mean.len() != var_diag.len() {
            return Err(Error::shape("ContextStats", format!("{}", mean.len()), format!("{}", var_diag.len())));
        }
        if var_diag.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::param("var_diag", "variances must be finite and non-negative"));
        }
        Ok(ContextStats {
            mean: DVector::from_column_slice(mean),
            var_diag: DVector::from_column_slice(var_diag),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Process/observation noise for the latent tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub q: DMatrix<f64>,
    pub r: f64,
}

impl NoiseConfig {
    pub fn isotropic(dim: usize, q_scale: f64, r: f64) -> Result<Self> {
        if !(q_scale.is_finite() && q_scale >= 0.0) {
            return Err(Error::param("q_scale", format!("{q_scale} must be non-negative")));
        }
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::param("r", format!("{r} must be non-negative")));
        }
        Ok(NoiseConfig {
            q: DMatrix::identity(dim, dim) * q_scale,
            r,
        })
    }
}

/// Scalar observation of the latent state.
pub trait ObservationModel {
    fn decode(&self, z: &DVector<f64>) -> Result<f64>;
    fn jacobian(&self, z: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Nonlinear observation through the CSI decoder network.
pub struct MlpObservation<'a> {
    mlp: &'a Mlp2,
}

impl<'a> MlpObservation<'a> {
    pub fn new(mlp: &'a Mlp2) -> Result<Self> {
        if mlp.out_dim() != 1 {
            return Err(Error::shape("MlpObservation", "scalar output".to_string(), format!("{}", mlp.out_dim())));
        }
        Ok(MlpObservation { mlp })
    }
}

impl ObservationModel for MlpObservation<'_> {
    fn decode(&self, z: &DVector<f64>) -> Result<f64> {
        Ok(self.mlp.forward_value(z.as_slice())?[0])
    }

    fn jacobian(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(decoder_jacobian(self.mlp, z.as_slice())?))
    }
}

/// Linear observation y = h . z, handy for oracle comparisons.
pub struct LinearObservation {
    pub h: DVector<f64>,
}

impl ObservationModel for LinearObservation {
    fn decode(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.h.len() {
            return Err(Error::shape("LinearObservation", format!("{}", self.h.len()), format!("{}", z.len())));
        }
        Ok(self.h.dot(z))
    }

    fn jacobian(&self, _z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.h.clone())
    }
}

/// Exact reverse-mode Jacobian row of a scalar-output network. For ReLU
/// activations this is the true derivative everywhere except kink points,
/// where the zero branch is chosen.
pub fn decoder_jacobian(mlp: &Mlp2, z: &[f64]) -> Result<Vec<f64>> {
    if mlp.out_dim() != 1 {
        return Err(Error::shape("decoder_jacobian", "scalar output".to_string(), format!("{}", mlp.out_dim())));
    }
    let tape = mlp.forward(z)?;
    let (dx, _) = mlp.backward(&tape, &[1.0])?;
    Ok(dx)
}

pub fn mat_to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Time update: mean' = K m + B mu_zeta, cov' = K P K^T + B S B^T + Q.
pub fn ekf_predict(
    belief: &LatentBelief,
    k: &DMatrix<f64>,
    coupling: Option<(&DMatrix<f64>, &ContextStats)>,
    q: &DMatrix<f64>,
) -> Result<LatentBelief> {
    let n = belief.dim();
    if k.nrows() != n || k.ncols() != n {
        return Err(Error::shape("ekf_predict K", format!("{n}x{n}"), format!("{}x{}", k.nrows(), k.ncols())));
    }
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::shape("ekf_predict Q", format!("{n}x{n}"), format!("{}x{}", q.nrows(), q.ncols())));
    }
    let mut mean = k * &belief.mean;
    let mut cov = k * &belief.cov * k.transpose() + q;
    if let Some((b, ctx)) = coupling {
        if b.nrows() != n || b.ncols() != ctx.dim() {
            return Err(Error::shape(
                "ekf_predict B",
                format!("{n}x{}", ctx.dim()),
                format!("{}x{}", b.nrows(), b.ncols()),
            ));
        }
        mean += b * &ctx.mean;
        if ctx.var_diag.iter().any(|&v| v != 0.0) {
            // B diag(s) B^T as M M^T with M = B diag(sqrt(s)).
            let mut m = b.clone();
            for (j, &s) in ctx.var_diag.iter().enumerate() {
                let root = s.sqrt();
                m.column_mut(j).scale_mut(root);
            }
            cov += &m * m.transpose();
        }
    }
    symmetrize(&mut cov);
    let out = LatentBelief { mean, cov };
    out.check_health("ekf_predict")?;
    Ok(out)
}

/// Measurement update with a scalar observation, Joseph-form covariance.
pub fn ekf_update(pred: &LatentBelief, observed: f64, obs: &dyn ObservationModel, r: f64) -> Result<LatentBelief> {
    if !observed.is_finite() {
        return Err(Error::numeric("ekf_update", format!("non-finite observation {observed}")));
    }
    let n = pred.dim();
    let h = obs.jacobian(&pred.mean)?;
    if h.len() != n {
        return Err(Error::shape("ekf_update H", format!("{n}"), format!("{}", h.len())));
    }
    let predicted_obs = obs.decode(&pred.mean)?;
    let innovation = observed - predicted_obs;
    let ph = &pred.cov * &h;
    let s = h.dot(&ph) + r;
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Singular { context: "ekf_update innovation variance" });
    }
    let gain = &ph / s;
    let mean = &pred.mean + &gain * innovation;
    // P' = (I - G H) P (I - G H)^T + G r G^T
    let mut i_gh = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            i_gh[(i, j)] -= gain[i] * h[j];
        }
    }
    let mut cov = &i_gh * &pred.cov * i_gh.transpose();
    for i in 0..n {
        for j in 0..n {
            cov[(i, j)] += gain[i] * r * gain[j];
        }
    }
    symmetrize(&mut cov);
    let out = LatentBelief { mean, cov };
    out.check_health("ekf_update")?;
    Ok(out)
}

/// Forward filtering pass over a horizon with optional observations.
///
/// `init` is the prior belief for step 0. Transition t -> t+1 is driven by
/// `ctx[t]`, so `ctx` must hold exactly `obs.len() - 1` entries (pass
/// `None` as `coupling_b` for the decoupled tracker and an empty `ctx`).
/// Returns `(predicted, filtered)`, both indexed by step, with
/// `predicted[0] == init`.
#[allow(clippy::too_many_arguments)]
pub fn filter_sequence(
    k: &DMatrix<f64>,
    coupling_b: Option<&DMatrix<f64>>,
    noise: &NoiseConfig,
    init: LatentBelief,
    obs: &[Option<f64>],
    ctx: &[ContextStats],
    model: &dyn ObservationModel,
) -> Result<(Vec<LatentBelief>, Vec<LatentBelief>)> {
    let t_len = obs.len();
    if t_len == 0 {
        return Err(Error::InsufficientData {
            context: "filter_sequence",
            need: 1,
            have: 0,
        });
    }
    if coupling_b.is_some() && ctx.len() != t_len - 1 {
        return Err(Error::shape("filter_sequence ctx", format!("{}", t_len - 1), format!("{}", ctx.len())));
    }
    let mut predicted = Vec::with_capacity(t_len);
    let mut filtered = Vec::with_capacity(t_len);
    predicted.push(init);
    for t in 0..t_len {
        let post = match obs[t] {
            Some(y) => ekf_update(&predicted[t], y, model, noise.r)?,
            None => predicted[t].clone(),
        };
        if t + 1 < t_len {
            let coupling = coupling_b.map(|b| (b, &ctx[t]));
            predicted.push(ekf_predict(&post, k, coupling, &noise.q)?);
        }
        filtered.push(post);
    }
    Ok((predicted, filtered))
}

/// Fixed-interval smoothing over the filtering output.
///
/// `predicted[t]` must be the prior and `filtered[t]` the posterior of step
/// t from the forward pass. The last smoothed belief equals the last
/// filtered one; earlier steps apply the gain
/// C_t = P_t K^T (P_{t+1|t} + ridge I)^{-1}.
pub fn rts_smooth(
    filtered: &[LatentBelief],
    predicted: &[LatentBelief],
    k: &DMatrix<f64>,
) -> Result<Vec<LatentBelief>> {
    if filtered.len() != predicted.len() {
        return Err(Error::shape(
            "rts_smooth",
            format!("{} predicted beliefs", filtered.len()),
            format!("{}", predicted.len()),
        ));
    }
    let t_len = filtered.len();
    if t_len == 0 {
        return Err(Error::InsufficientData {
            context: "rts_smooth",
            need: 1,
            have: 0,
        });
    }
    let n = filtered[0].dim();
    let ridge = DMatrix::identity(n, n) * SMOOTHER_RIDGE;
    let mut smoothed = vec![filtered[t_len - 1].clone(); t_len];
    for t in (0..t_len - 1).rev() {
        let p_pred_next = &predicted[t + 1].cov + &ridge;
        let chol = p_pred_next
            .clone()
            .cholesky()
            .ok_or(Error::Singular { context: "rts_smooth predicted covariance" })?;
        // C = P_f K^T inv(P_pred); solve on the transposed system.
        let kp = k * &filtered[t].cov; // (K P_f)^T = P_f K^T
        let c = chol.solve(&kp).transpose();
        let mean = &filtered[t].mean + &c * (&smoothed[t + 1].mean - &predicted[t + 1].mean);
        let mut cov =
            &filtered[t].cov + &c * (&smoothed[t + 1].cov - &predicted[t + 1].cov) * c.transpose();
        symmetrize(&mut cov);
        let belief = LatentBelief { mean, cov };
        belief.check_health("rts_smooth")?;
        smoothed[t] = belief;
    }
    Ok(smoothed)
}

/// Smoothed track decoded to the observation space.
#[derive(Debug, Clone)]
pub struct SmoothedTrack {
    pub beliefs: Vec<LatentBelief>,
    pub decoded: Vec<f64>,
    /// Decoded-space variance proxy H P H^T + R per step.
    pub var_proxy: Vec<f64>,
}

/// Filter + smooth + decode in one call.
#[allow(clippy::too_many_arguments)]
pub fn smooth_and_decode(
    k: &DMatrix<f64>,
    coupling_b: Option<&DMatrix<f64>>,
    noise: &NoiseConfig,
    init: LatentBelief,
    obs: &[Option<f64>],
    ctx: &[ContextStats],
    model: &dyn ObservationModel,
) -> Result<SmoothedTrack> {
    let (predicted, filtered) = filter_sequence(k, coupling_b, noise, init, obs, ctx, model)?;
    let beliefs = rts_smooth(&filtered, &predicted, k)?;
    let mut decoded = Vec::with_capacity(beliefs.len());
    let mut var_proxy = Vec::with_capacity(beliefs.len());
    for b in &beliefs {
        decoded.push(model.decode(&b.mean)?);
        let h = model.jacobian(&b.mean)?;
        var_proxy.push(h.dot(&(&b.cov * &h)) + noise.r);
    }
    Ok(SmoothedTrack {
        beliefs,
        decoded,
        var_proxy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Activation;

    /// Identity-activation network computing y = z[0].
    fn pick_first_decoder(n: usize) -> Mlp2 {
        let mut w1 = Matrix::zeros(n, n);
        for i in 0..n {
            w1.set(i, i, 1.0);
        }
        let mut w2 = Matrix::zeros(1, n);
        w2.set(0, 0, 1.0);
        Mlp2::new(w1, vec![0.0; n], w2, vec![0.0], Activation::Identity).unwrap()
    }

    #[test]
    fn scalar_filter_matches_hand_recursion() {
        // 1-dim system: z' = 0.8 z, q = 0.1, y = z + noise, r = 0.5.
        let k = DMatrix::from_row_slice(1, 1, &[0.8]);
        let noise = NoiseConfig {
            q: DMatrix::from_row_slice(1, 1, &[0.1]),
            r: 0.5,
        };
        let dec = pick_first_decoder(1);
        let obs_model = MlpObservation::new(&dec).unwrap();
        let init = LatentBelief::isotropic(DVector::from_vec(vec![0.0]), 1.0).unwrap();
        let ys = [1.0, 0.4, -0.2];
        let obs: Vec<Option<f64>> = ys.iter().map(|&y| Some(y)).collect();
        let (_, filtered) = filter_sequence(&k, None, &noise, init, &obs, &[], &obs_model).unwrap();

        // Hand recursion with scalar formulas.
        let (mut m, mut p) = (0.0f64, 1.0f64);
        for (t, &y) in ys.iter().enumerate() {
            if t > 0 {
                m = 0.8 * m;
                p = 0.8 * p * 0.8 + 0.1;
            }
            let s = p + 0.5;
            let g = p / s;
            m += g * (y - m);
            p = (1.0 - g) * p * (1.0 - g) + g * 0.5 * g;
            assert!((filtered[t].mean[0] - m).abs() < 1e-12, "mean at {t}");
            assert!((filtered[t].cov[(0, 0)] - p).abs() < 1e-12, "cov at {t}");
        }
    }

    #[test]
    fn update_reduces_variance_and_moves_toward_observation() {
        let noise = NoiseConfig::isotropic(2, 0.0, 0.25).unwrap();
        let dec = pick_first_decoder(2);
        let obs_model = MlpObservation::new(&dec).unwrap();
        let prior = LatentBelief::isotropic(DVector::from_vec(vec![0.0, 0.0]), 1.0).unwrap();
        let post = ekf_update(&prior, 2.0, &obs_model, noise.r).unwrap();
        assert!(post.cov[(0, 0)] < prior.cov[(0, 0)]);
        assert!(post.mean[0] > 0.0 && post.mean[0] < 2.0);
        // The unobserved coordinate keeps its prior.
        assert!((post.cov[(1, 1)] - 1.0).abs() < 1e-12);
        assert_eq!(post.mean[1], 0.0);
    }

    #[test]
    fn silence_steps_coast_on_prediction() {
        let k = DMatrix::from_row_slice(1, 1, &[0.9]);
        let noise = NoiseConfig {
            q: DMatrix::from_row_slice(1, 1, &[0.05]),
            r: 0.1,
        };
        let dec = pick_first_decoder(1);
        let obs_model = MlpObservation::new(&dec).unwrap();
        let init = LatentBelief::isotropic(DVector::from_vec(vec![1.0]), 0.2).unwrap();
        let obs = vec![None, None, None];
        let (predicted, filtered) = filter_sequence(&k, None, &noise, init, &obs, &[], &obs_model).unwrap();
        for t in 0..3 {
            assert_eq!(predicted[t], filtered[t]);
        }
        assert!((filtered[1].mean[0] - 0.9).abs() < 1e-15);
        assert!((filtered[2].mean[0] - 0.81).abs() < 1e-15);
        // Uncertainty grows without observations.
        assert!(filtered[2].cov[(0, 0)] > filtered[1].cov[(0, 0)] - 0.05);
    }

    #[test]
    fn smoother_terminal_matches_filter_and_variance_never_worse() {
        let k = DMatrix::from_row_slice(1, 1, &[0.95]);
        let noise = NoiseConfig {
            q: DMatrix::from_row_slice(1, 1, &[0.02]),
            r: 0.3,
        };
        let dec = pick_first_decoder(1);
        let obs_model = MlpObservation::new(&dec).unwrap();
        let init = LatentBelief::isotropic(DVector::from_vec(vec![0.0]), 1.0).unwrap();
        let obs = vec![Some(0.5), None, Some(-0.3), None, Some(0.2)];
        let (predicted, filtered) = filter_sequence(&k, None, &noise, init, &obs, &[], &obs_model).unwrap();
        let smoothed = rts_smooth(&filtered, &predicted, &k).unwrap();
        let last = filtered.len() - 1;
        assert_eq!(smoothed[last], filtered[last]);
        for t in 0..filtered.len() {
            assert!(
                smoothed[t].cov[(0, 0)] <= filtered[t].cov[(0, 0)] + 1e-9,
                "smoothing must not increase variance at {t}"
            );
        }
    }

    #[test]
    fn context_drive_shifts_the_prediction() {
        let k = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        let q = DMatrix::zeros(2, 2);
        let belief = LatentBelief::isotropic(DVector::from_vec(vec![0.0, 0.0]), 0.0).unwrap();
        let ctx = ContextStats::gaussian(&[3.0], &[0.25]).unwrap();
        let pred = ekf_predict(&belief, &k, Some((&b, &ctx)), &q).unwrap();
        assert_eq!(pred.mean[0], 3.0);
        assert_eq!(pred.mean[1], -6.0);
        // B S B^T with S = 0.25: [[0.25, -0.5], [-0.5, 1.0]]
        assert!((pred.cov[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((pred.cov[(0, 1)] + 0.5).abs() < 1e-15);
        assert!((pred.cov[(1, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decoder_jacobian_is_constant_for_linear_decoder() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let mlp = Mlp2::glorot(3, 4, 1, Activation::Identity, &mut rng);
        let j1 = decoder_jacobian(&mlp, &[0.0, 0.0, 0.0]).unwrap();
        let j2 = decoder_jacobian(&mlp, &[5.0, -2.0, 1.0]).unwrap();
        assert_eq!(j1, j2);
        // Equals the product row w2 * w1.
        for c in 0..3 {
            let mut expect = 0.0;
            for h in 0..4 {
                expect += mlp.w2.get(0, h) * mlp.w1.get(h, c);
            }
            assert!((j1[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_decoder_jacobian_matches_finite_difference_off_kinks() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        let mut mlp = Mlp2::glorot(3, 5, 1, Activation::ReLU, &mut rng);
        for b in mlp.b1.iter_mut() {
            *b = 0.17;
        }
        let z = [0.4, -0.3, 0.9];
        let jac = decoder_jacobian(&mlp, &z).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut zp = z;
            zp[i] += eps;
            let fp = mlp.forward_value(&zp).unwrap()[0];
            zp[i] -= 2.0 * eps;
            let fm = mlp.forward_value(&zp).unwrap()[0];
            let numeric = (fp - fm) / (2.0 * eps);
            assert!((jac[i] - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn non_positive_innovation_variance_is_singular() {
        let dec = pick_first_decoder(1);
        let obs_model = MlpObservation::new(&dec).unwrap();
        let prior = LatentBelief::isotropic(DVector::from_vec(vec![0.0]), 0.0).unwrap();
        let res = ekf_update(&prior, 1.0, &obs_model, 0.0);
        assert!(matches!(res, Err(Error::Singular { .. })));
    }

    #[test]
    fn context_length_is_validated() {
        let k = DMatrix::identity(1, 1);
        let b = DMatrix::identity(1, 1);
        let noise = NoiseConfig::isotropic(1, 0.01, 0.1).unwrap();
        let dec = pick_first_decoder(1);
        let obs_model = MlpObservation::new(&dec).unwrap();
        let init = LatentBelief::isotropic(DVector::from_vec(vec![0.0]), 1.0).unwrap();
        let obs = vec![Some(0.1), Some(0.2), Some(0.3)];
        let ctx = vec![ContextStats::deterministic(&[0.0]); 1];
        let res = filter_sequence(&k, Some(&b), &noise, init, &obs, &ctx, &obs_model);
        assert!(matches!(res, Err(Error::Shape { .. })));
    }
}
