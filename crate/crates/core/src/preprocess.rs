//! Report-stream preprocessing: Savitzky-Golay denoising of the raw CSI
//! sequence, per-feature standardization, and the episode plan that slices a
//! trace into train windows and silence intervals.

use crate::error::{ensure_all_finite, Error, Result};
use crate::piae::Window;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Least-squares smoothing weights for a centred window: fit a polynomial of
/// `order` through the window samples, keep its value at the centre.
pub fn savgol_coeffs(window: usize, order: usize) -> Result<Vec<f64>> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::param("window", format!("{window} (need odd >= 3)")));
    }
    if order >= window {
        return Err(Error::param("order", format!("{order} must be below window {window}")));
    }
    let half = (window / 2) as i64;
    let cols = order + 1;
    let a = DMatrix::from_fn(window, cols, |r, c| ((r as i64 - half) as f64).powi(c as i32));
    let ata = a.transpose() * &a;
    let chol = ata
        .cholesky()
        .ok_or(Error::Singular { context: "savgol normal equations" })?;
    // Solve (A^T A) x = A^T e_j for each window position; weight_j = x[0].
    let at = a.transpose();
    let mut weights = Vec::with_capacity(window);
    for j in 0..window {
        let rhs = DVector::from_column_slice(at.column(j).as_slice());
        let x = chol.solve(&rhs);
        weights.push(x[0]);
    }
    Ok(weights)
}

/// Smooth a sequence with a Savitzky-Golay filter, mirroring at the edges
/// (reflection about the boundary sample, which is not duplicated).
pub fn savgol_filter(x: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    ensure_all_finite(x, "savgol input")?;
    let n = x.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if window > 2 * n - 1 {
        return Err(Error::InsufficientData {
            context: "savgol_filter",
            need: (window + 1) / 2,
            have: n,
        });
    }
    let w = savgol_coeffs(window, order)?;
    let half = (window / 2) as i64;
    let reflect = |p: i64| -> usize {
        if p < 0 {
            (-p) as usize
        } else if p >= n as i64 {
            (2 * (n as i64 - 1) - p) as usize
        } else {
            p as usize
        }
    };
    let mut out = Vec::with_capacity(n);
    for t in 0..n as i64 {
        let mut acc = 0.0;
        for (j, &wj) in w.iter().enumerate() {
            acc += wj * x[reflect(t + j as i64 - half)];
        }
        out.push(acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavgolConfig {
    pub window: usize,
    pub order: usize,
}

impl Default for SavgolConfig {
    fn default() -> Self {
        SavgolConfig { window: 11, order: 3 }
    }
}

impl SavgolConfig {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        savgol_filter(x, self.window, self.order)
    }
}

/// Affine scaler for the scalar CSI stream and the context features, fitted
/// with population statistics. Constant features keep scale one so they pass
/// through unchanged (minus their mean); their indices are recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    csi_mean: f64,
    csi_std: f64,
    ctx_mean: Vec<f64>,
    ctx_std: Vec<f64>,
    constant_features: Vec<usize>,
}

const VAR_FLOOR: f64 = 1e-24;

fn mean_and_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64, bool) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var < VAR_FLOOR {
        (mean, 1.0, true)
    } else {
        (mean, var.sqrt(), false)
    }
}

impl Standardizer {
    pub fn fit(csi: &[f64], contexts: &[Vec<f64>]) -> Result<Self> {
        if csi.len() < 2 {
            return Err(Error::InsufficientData {
                context: "Standardizer::fit",
                need: 2,
                have: csi.len(),
            });
        }
        if contexts.len() != csi.len() {
            return Err(Error::shape(
                "Standardizer::fit",
                format!("{} context rows", csi.len()),
                format!("{}", contexts.len()),
            ));
        }
        ensure_all_finite(csi, "Standardizer csi")?;
        let dim = contexts[0].len();
        for row in contexts {
            if row.len() != dim {
                return Err(Error::shape("Standardizer::fit", format!("context dim {dim}"), format!("{}", row.len())));
            }
            ensure_all_finite(row, "Standardizer context")?;
        }
        let (csi_mean, csi_std, _) = mean_and_std(csi.iter().copied(), csi.len());
        let mut ctx_mean = Vec::with_capacity(dim);
        let mut ctx_std = Vec::with_capacity(dim);
        let mut constant_features = Vec::new();
        for j in 0..dim {
            let col = contexts.iter().map(move |row| row[j]);
            let (m, s, flat) = mean_and_std(col, contexts.len());
            if flat {
                constant_features.push(j);
            }
            ctx_mean.push(m);
            ctx_std.push(s);
        }
        Ok(Standardizer {
            csi_mean,
            csi_std,
            ctx_mean,
            ctx_std,
            constant_features,
        })
    }

    pub fn context_dim(&self) -> usize {
        self.ctx_mean.len()
    }

    /// Feature indices that were constant over the fit data.
    pub fn constant_features(&self) -> &[usize] {
        &self.constant_features
    }

    pub fn apply_csi(&self, h: f64) -> f64 {
        (h - self.csi_mean) / self.csi_std
    }

    pub fn invert_csi(&self, s: f64) -> f64 {
        s * self.csi_std + self.csi_mean
    }

    pub fn apply_ctx(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.context_dim() {
            return Err(Error::shape("Standardizer::apply_ctx", format!("{}", self.context_dim()), format!("{}", u.len())));
        }
        Ok(u.iter()
            .zip(self.ctx_mean.iter().zip(&self.ctx_std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect())
    }

    pub fn invert_ctx(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.context_dim() {
            return Err(Error::shape("Standardizer::invert_ctx", format!("{}", self.context_dim()), format!("{}", s.len())));
        }
        Ok(s.iter()
            .zip(self.ctx_mean.iter().zip(&self.ctx_std))
            .map(|(&v, (&m, &sd))| v * sd + m)
            .collect())
    }

    /// Standardize aligned CSI and context rows into a training window.
    pub fn standardize_window(&self, csi: &[f64], contexts: &[Vec<f64>]) -> Result<Window> {
        let scaled_csi: Vec<Vec<f64>> = csi.iter().map(|&h| vec![self.apply_csi(h)]).collect();
        let scaled_ctx: Vec<Vec<f64>> = contexts
            .iter()
            .map(|u| self.apply_ctx(u))
            .collect::<Result<_>>()?;
        Window::new(scaled_csi, scaled_ctx)
    }
}

/// Layout of one train-then-silence episode and the stride between episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub train_start: usize,
    pub train_len: usize,
    pub silence_len: usize,
    pub stride: usize,
}

impl Default for EpisodePlan {
    fn default() -> Self {
        EpisodePlan {
            train_start: 0,
            train_len: 200,
            silence_len: 200,
            stride: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub train: Range<usize>,
    pub silence: Range<usize>,
}

/// Enumerate every episode whose full footprint fits in the trace:
/// start = train_start + k * stride while start + train_len + silence_len <= trace_len.
pub fn plan_episodes(trace_len: usize, plan: &EpisodePlan) -> Result<Vec<Episode>> {
    if plan.train_len < 2 {
        return Err(Error::param("train_len", format!("{} (need >= 2)", plan.train_len)));
    }
    if plan.silence_len == 0 {
        return Err(Error::param("silence_len", "0"));
    }
    if plan.stride == 0 {
        return Err(Error::param("stride", "0"));
    }
    let footprint = plan.train_len + plan.silence_len;
    let mut episodes = Vec::new();
    let mut start = plan.train_start;
    while start + footprint <= trace_len {
        episodes.push(Episode {
            train: start..start + plan.train_len,
            silence: start + plan.train_len..start + footprint,
        });
        start += plan.stride;
    }
    if episodes.is_empty() {
        return Err(Error::InsufficientData {
            context: "plan_episodes",
            need: plan.train_start + footprint,
            have: trace_len,
        });
    }
    Ok(episodes)
}
