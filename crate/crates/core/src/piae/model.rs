use crate::diffnet::{Activation, Matrix, Mlp2, Mlp2Grad};
use crate::error::{ensure_all_finite, Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Layer widths for the autoencoder pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiaeDims {
    pub csi_in: usize,
    pub csi_hidden: usize,
    pub csi_latent: usize,
    pub ctx_in: usize,
    pub ctx_hidden: usize,
    pub ctx_latent: usize,
}

impl Default for PiaeDims {
    /// Scalar path loss lifted to a 50-dim latent; 19 context features lifted
    /// to 950. Hidden widths are sized so a full training window fits in a
    /// few seconds of CPU time.
    fn default() -> Self {
        PiaeDims {
            csi_in: 1,
            csi_hidden: 64,
            csi_latent: 50,
            ctx_in: 19,
            ctx_hidden: 64,
            ctx_latent: 950,
        }
    }
}

impl PiaeDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("csi_in", self.csi_in),
            ("csi_hidden", self.csi_hidden),
            ("csi_latent", self.csi_latent),
            ("ctx_in", self.ctx_in),
            ("ctx_hidden", self.ctx_hidden),
            ("ctx_latent", self.ctx_latent),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Weights on the loss terms: alpha scales both CSI reconstruction means,
/// beta the context reconstruction, gamma the latent transition consistency,
/// lambda the KL terms of the variational variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(name, format!("{v} must be finite and non-negative")));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::param("loss weights", "alpha, beta, gamma are all zero"));
        }
        Ok(())
    }

    /// The no-context profile: context reconstruction off; the caller is
    /// expected to also zero and freeze the coupling matrix.
    pub fn without_context(mut self) -> Self {
        self.beta = 0.0;
        self
    }
}

/// A standardized training segment: `csi[t]` and `contexts[t]` are aligned,
/// every sample observed (no silence-masked entries).
#[derive(Debug, Clone)]
pub struct Window {
    pub csi: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
}

impl Window {
    pub fn new(csi: Vec<Vec<f64>>, contexts: Vec<Vec<f64>>) -> Result<Self> {
        if csi.len() != contexts.len() {
            return Err(Error::shape(
                "Window::new",
                format!("{} contexts", csi.len()),
                format!("{}", contexts.len()),
            ));
        }
        if csi.len() < 2 {
            return Err(Error::InsufficientData {
                context: "Window::new",
                need: 2,
                have: csi.len(),
            });
        }
        for row in csi.iter().chain(contexts.iter()) {
            ensure_all_finite(row, "Window::new")?;
        }
        Ok(Window { csi, contexts })
    }

    pub fn from_scalar_csi(csi: &[f64], contexts: Vec<Vec<f64>>) -> Result<Self> {
        Window::new(csi.iter().map(|&h| vec![h]).collect(), contexts)
    }

    pub fn len(&self) -> usize {
        self.csi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.csi.is_empty()
    }

    pub fn check_dims(&self, dims: &PiaeDims) -> Result<()> {
        for row in &self.csi {
            if row.len() != dims.csi_in {
                return Err(Error::shape("Window csi", format!("{}", dims.csi_in), format!("{}", row.len())));
            }
        }
        for row in &self.contexts {
            if row.len() != dims.ctx_in {
                return Err(Error::shape("Window context", format!("{}", dims.ctx_in), format!("{}", row.len())));
            }
        }
        Ok(())
    }
}

/// Loss breakdown for one window evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiaeLossBreakdown {
    pub csi_t: f64,
    pub csi_t1: f64,
    pub context: f64,
    pub koopman: f64,
    pub total: f64,
}

/// Which optimizer group a parameter block belongs to when alternating
/// updates are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// CSI autoencoder plus the transition operators.
    Csi,
    /// Context autoencoder.
    Context,
}

#[derive(Debug, Clone, Copy)]
pub struct ParamRange {
    pub name: &'static str,
    pub group: ParamGroup,
    pub offset: usize,
    pub len: usize,
}

/// Initial latent transition: a mild contraction so unfitted directions
/// shrink under iteration rather than amplify.
pub(crate) fn contractive_transition(n: usize) -> Matrix {
    let mut k = Matrix::identity(n);
    for v in k.data_mut() {
        *v *= 0.0;
    }
    k
}

/// The deterministic autoencoder pair with its coupled linear transition.
#[derive(Debug, Clone, PartialEq)]
pub struct PiaeModel {
    pub dims: PiaeDims,
    pub csi_enc: Mlp2,
    pub csi_dec: Mlp2,
    pub ctx_enc: Mlp2,
    pub ctx_dec: Mlp2,
    pub k: Matrix,
    pub b: Matrix,
}

impl PiaeModel {
    /// Glorot-uniform network weights with zero biases. The transition starts
    /// as a mild contraction (0.9 I): latent directions the training data
    /// never constrains then decay during long rollouts instead of keeping a
    /// random, possibly expansive, initial value.
    pub fn init(dims: PiaeDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        Ok(PiaeModel {
            dims,
            csi_enc: Mlp2::glorot(dims.csi_in, dims.csi_hidden, dims.csi_latent, Activation::ReLU, rng),
            csi_dec: Mlp2::glorot(dims.csi_latent, dims.csi_hidden, dims.csi_in, Activation::ReLU, rng),
            ctx_enc: Mlp2::glorot(dims.ctx_in, dims.ctx_hidden, dims.ctx_latent, Activation::ReLU, rng),
            ctx_dec: Mlp2::glorot(dims.ctx_latent, dims.ctx_hidden, dims.ctx_in, Activation::ReLU, rng),
            k: contractive_transition(dims.csi_latent),
            b: Matrix::glorot(dims.csi_latent, dims.ctx_latent, rng),
        })
    }

    /// Same as [`PiaeModel::init`] but with the coupling matrix zeroed, for
    /// the no-context baseline. Consumes identical randomness so the CSI
    /// branch starts from the same weights as the coupled twin.
    pub fn init_decoupled(dims: PiaeDims, rng: &mut impl Rng) -> Result<Self> {
        let mut model = PiaeModel::init(dims, rng)?;
        model.b.fill(0.0);
        Ok(model)
    }

    pub fn new(
        dims: PiaeDims,
        csi_enc: Mlp2,
        csi_dec: Mlp2,
        ctx_enc: Mlp2,
        ctx_dec: Mlp2,
        k: Matrix,
        b: Matrix,
    ) -> Result<Self> {
        dims.validate()?;
        let expect = [
            ("csi_enc", csi_enc.in_dim(), dims.csi_in, csi_enc.out_dim(), dims.csi_latent),
            ("csi_dec", csi_dec.in_dim(), dims.csi_latent, csi_dec.out_dim(), dims.csi_in),
            ("ctx_enc", ctx_enc.in_dim(), dims.ctx_in, ctx_enc.out_dim(), dims.ctx_latent),
            ("ctx_dec", ctx_dec.in_dim(), dims.ctx_latent, ctx_dec.out_dim(), dims.ctx_in),
        ];
        for (name, got_in, want_in, got_out, want_out) in expect {
            if got_in != want_in || got_out != want_out {
                return Err(Error::shape(
                    "PiaeModel::new",
                    format!("{name} {want_in}->{want_out}"),
                    format!("{got_in}->{got_out}"),
                ));
            }
        }
        if k.rows() != dims.csi_latent || k.cols() != dims.csi_latent {
            return Err(Error::shape(
                "PiaeModel::new K",
                format!("{0}x{0}", dims.csi_latent),
                format!("{}x{}", k.rows(), k.cols()),
            ));
        }
        if b.rows() != dims.csi_latent || b.cols() != dims.ctx_latent {
            return Err(Error::shape(
                "PiaeModel::new B",
                format!("{}x{}", dims.csi_latent, dims.ctx_latent),
                format!("{}x{}", b.rows(), b.cols()),
            ));
        }
        Ok(PiaeModel {
            dims,
            csi_enc,
            csi_dec,
            ctx_enc,
            ctx_dec,
            k,
            b,
        })
    }

    pub fn encode_csi(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.csi_enc.forward_value(h)
    }

    pub fn decode_csi(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.csi_dec.forward_value(z)
    }

    pub fn encode_ctx(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.ctx_enc.forward_value(u)
    }

    pub fn decode_ctx(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        self.ctx_dec.forward_value(zeta)
    }

    /// z' = K z + B zeta.
    pub fn koopman_step(&self, z: &[f64], zeta: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims.csi_latent {
            return Err(Error::shape("koopman_step z", format!("{}", self.dims.csi_latent), format!("{}", z.len())));
        }
        if zeta.len() != self.dims.ctx_latent {
            return Err(Error::shape(
                "koopman_step zeta",
                format!("{}", self.dims.ctx_latent),
                format!("{}", zeta.len()),
            ));
        }
        let mut out = vec![0.0; self.dims.csi_latent];
        self.k.matvec(z, &mut out);
        self.b.matvec_add(zeta, &mut out);
        Ok(out)
    }

    /// z' = K z, the transition with the context drive absent.
    pub fn koopman_step_free(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims.csi_latent {
            return Err(Error::shape(
                "koopman_step_free z",
                format!("{}", self.dims.csi_latent),
                format!("{}", z.len()),
            ));
        }
        let mut out = vec![0.0; self.dims.csi_latent];
        self.k.matvec(z, &mut out);
        Ok(out)
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
            return Err(Error::shape("PiaeModel::read_params", format!("{need}"), format!("{}", src.len())));
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

    /// Offsets of each component in the flat parameter vector, tagged with
    /// its alternating-update group. The transition operators move with the
    /// CSI group.
    pub fn param_layout(&self) -> Vec<ParamRange> {
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
            out.push(ParamRange {
                name,
                group,
                offset,
                len,
            });
            offset += len;
        }
        out
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

/// Gradients for every trainable block of either autoencoder variant.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub csi_enc: Mlp2Grad,
    pub csi_dec: Mlp2Grad,
    pub ctx_enc: Mlp2Grad,
    pub ctx_dec: Mlp2Grad,
    pub k: Matrix,
    pub b: Matrix,
}

impl ModelGrads {
    pub fn zeros_like(model: &PiaeModel) -> Self {
        ModelGrads::zeros_from_parts(
            &model.csi_enc,
            &model.csi_dec,
            &model.ctx_enc,
            &model.ctx_dec,
            &model.k,
            &model.b,
        )
    }

    pub fn zeros_from_parts(
        csi_enc: &Mlp2,
        csi_dec: &Mlp2,
        ctx_enc: &Mlp2,
        ctx_dec: &Mlp2,
        k: &Matrix,
        b: &Matrix,
    ) -> Self {
        ModelGrads {
            csi_enc: Mlp2Grad::zeros_like(csi_enc),
            csi_dec: Mlp2Grad::zeros_like(csi_dec),
            ctx_enc: Mlp2Grad::zeros_like(ctx_enc),
            ctx_dec: Mlp2Grad::zeros_like(ctx_dec),
            k: Matrix::zeros(k.rows(), k.cols()),
            b: Matrix::zeros(b.rows(), b.cols()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.csi_enc.param_count()
            + self.csi_dec.param_count()
            + self.ctx_enc.param_count()
            + self.ctx_dec.param_count()
            + self.k.data().len()
            + self.b.data().len()
    }

    /// Flat layout identical to [`PiaeModel::write_params`].
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.csi_enc.write_flat(out);
        self.csi_dec.write_flat(out);
        self.ctx_enc.write_flat(out);
        self.ctx_dec.write_flat(out);
        out.extend_from_slice(self.k.data());
        out.extend_from_slice(self.b.data());
    }
}
