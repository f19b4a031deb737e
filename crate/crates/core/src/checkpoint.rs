//! Versioned JSON checkpoints for both model variants. Weights are stored as
//! nested row-major arrays; floats survive the round trip bit-exactly thanks
//! to shortest-round-trip formatting.

use crate::diffnet::{Activation, Matrix, Mlp2};
use crate::error::{Error, Result};
use crate::optim::Tracker;
use crate::piae::{LossWeights, PiaeDims, PiaeModel};
use crate::vkae::VkaeModel;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT_PIAE: &str = "piae-1";
pub const FORMAT_VKAE: &str = "vkae-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpJson {
    activation: String,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::schema("checkpoint", format!("{what}: empty matrix")));
    }
    let c = rows[0].len();
    if c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::schema("checkpoint", format!("{what}: ragged or empty rows")));
    }
    let mut data = Vec::with_capacity(r * c);
    for row in rows {
        data.extend_from_slice(row);
    }
    Matrix::new(r, c, data)
}

fn mlp_to_json(m: &Mlp2) -> MlpJson {
    MlpJson {
        activation: "relu".into(),
        w1: matrix_rows(&m.w1),
        b1: m.b1.clone(),
        w2: matrix_rows(&m.w2),
        b2: m.b2.clone(),
    }
}

fn mlp_from_json(j: &MlpJson, what: &str) -> Result<Mlp2> {
    if j.activation != "relu" {
        return Err(Error::schema(
            "checkpoint",
            format!("{what}: unsupported activation '{}'", j.activation),
        ));
    }
    let w1 = matrix_from_rows(&j.w1, what)?;
    let w2 = matrix_from_rows(&j.w2, what)?;
    Mlp2::new(w1, j.b1.clone(), w2, j.b2.clone(), Activation::ReLU)
        .map_err(|e| Error::schema("checkpoint", format!("{what}: {e}")))
}

/// On-disk model snapshot. `sigma2_*` are present exactly when the format is
/// the variational one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: String,
    pub dims: PiaeDims,
    pub loss_weights: LossWeights,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_csi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_ctx: Option<f64>,
    csi_enc: MlpJson,
    csi_dec: MlpJson,
    ctx_enc: MlpJson,
    ctx_dec: MlpJson,
    k: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_tracker(tracker: &Tracker, loss_weights: &LossWeights, seed: u64) -> Self {
        match tracker {
            Tracker::Piae(m) => Checkpoint {
                format_version: FORMAT_PIAE.into(),
                dims: m.dims,
                loss_weights: *loss_weights,
                seed,
                sigma2_csi: None,
                sigma2_ctx: None,
                csi_enc: mlp_to_json(&m.csi_enc),
                csi_dec: mlp_to_json(&m.csi_dec),
                ctx_enc: mlp_to_json(&m.ctx_enc),
                ctx_dec: mlp_to_json(&m.ctx_dec),
                k: matrix_rows(&m.k),
                b: matrix_rows(&m.b),
            },
            Tracker::Vkae(m) => Checkpoint {
                format_version: FORMAT_VKAE.into(),
                dims: m.dims,
                loss_weights: *loss_weights,
                seed,
                sigma2_csi: Some(m.sigma2_csi),
                sigma2_ctx: Some(m.sigma2_ctx),
                csi_enc: mlp_to_json(&m.csi_enc),
                csi_dec: mlp_to_json(&m.csi_dec),
                ctx_enc: mlp_to_json(&m.ctx_enc),
                ctx_dec: mlp_to_json(&m.ctx_dec),
                k: matrix_rows(&m.k),
                b: matrix_rows(&m.b),
            },
        }
    }

    pub fn to_tracker(&self) -> Result<Tracker> {
        let csi_enc = mlp_from_json(&self.csi_enc, "csi_enc")?;
        let csi_dec = mlp_from_json(&self.csi_dec, "csi_dec")?;
        let ctx_enc = mlp_from_json(&self.ctx_enc, "ctx_enc")?;
        let ctx_dec = mlp_from_json(&self.ctx_dec, "ctx_dec")?;
        let k = matrix_from_rows(&self.k, "k")?;
        let b = matrix_from_rows(&self.b, "b")?;
        match self.format_version.as_str() {
            FORMAT_PIAE => {
                if self.sigma2_csi.is_some() || self.sigma2_ctx.is_some() {
                    return Err(Error::schema("checkpoint", "sigma2 fields are not part of the deterministic format"));
                }
                let model = PiaeModel::new(self.dims, csi_enc, csi_dec, ctx_enc, ctx_dec, k, b)
                    .map_err(|e| Error::schema("checkpoint", format!("{e}")))?;
                Ok(Tracker::Piae(model))
            }
            FORMAT_VKAE => {
                let (s_csi, s_ctx) = match (self.sigma2_csi, self.sigma2_ctx) {
                    (Some(a), Some(b)) if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() => (a, b),
                    _ => {
                        return Err(Error::schema(
                            "checkpoint",
                            "variational format needs positive sigma2_csi and sigma2_ctx",
                        ))
                    }
                };
                let model = VkaeModel {
                    dims: self.dims,
                    csi_enc,
                    csi_dec,
                    ctx_enc,
                    ctx_dec,
                    k,
                    b,
                    sigma2_csi: s_csi,
                    sigma2_ctx: s_ctx,
                };
                validate_vkae_shapes(&model)?;
                Ok(Tracker::Vkae(model))
            }
            other => Err(Error::schema("checkpoint", format!("unknown format_version '{other}'"))),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Checkpoint> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Checkpoint::from_json_str(&text)
    }
}

fn validate_vkae_shapes(m: &VkaeModel) -> Result<()> {
    let d = &m.dims;
    let checks = [
        ("csi_enc in", m.csi_enc.in_dim(), d.csi_in),
        ("csi_enc out", m.csi_enc.out_dim(), 2 * d.csi_latent),
        ("csi_dec in", m.csi_dec.in_dim(), d.csi_latent),
        ("csi_dec out", m.csi_dec.out_dim(), d.csi_in),
        ("ctx_enc in", m.ctx_enc.in_dim(), d.ctx_in),
        ("ctx_enc out", m.ctx_enc.out_dim(), 2 * d.ctx_latent),
        ("ctx_dec in", m.ctx_dec.in_dim(), d.ctx_latent),
        ("ctx_dec out", m.ctx_dec.out_dim(), d.ctx_in),
        ("k rows", m.k.rows(), d.csi_latent),
        ("k cols", m.k.cols(), d.csi_latent),
        ("b rows", m.b.rows(), d.csi_latent),
        ("b cols", m.b.cols(), d.ctx_latent),
    ];
    for (what, found, expected) in checks {
        if found != expected {
            return Err(Error::schema(
                "checkpoint",
                format!("{what}: expected {expected}, found {found}"),
            ));
        }
    }
    Ok(())
}

/// Convenience wrappers pairing a tracker with its training metadata.
pub fn save_tracker(tracker: &Tracker, loss_weights: &LossWeights, seed: u64, path: &Path) -> Result<()> {
    Checkpoint::from_tracker(tracker, loss_weights, seed).save(path)
}

pub fn load_tracker(path: &Path) -> Result<(Tracker, LossWeights, u64)> {
    let ck = Checkpoint::load(path)?;
    let tracker = ck.to_tracker()?;
    Ok((tracker, ck.loss_weights, ck.seed))
}
