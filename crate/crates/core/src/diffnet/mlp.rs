use crate::diffnet::matrix::Matrix;
use crate::error::{ensure_all_finite, Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }

    /// Derivative evaluated at the pre-activation value. ReLU uses the
    /// subgradient 0 at exactly 0.
    #[inline]
    fn deriv(self, pre: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Two-layer perceptron y = W2 * act(W1 x + b1) + b2. The output layer is
/// affine; every encoder and decoder in the pipeline is one of these.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

/// Everything recorded during a forward pass that backward needs.
#[derive(Debug, Clone)]
pub struct Mlp2Tape {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub y: Vec<f64>,
}

/// Gradient of some scalar loss with respect to each Mlp2 parameter.
#[derive(Debug, Clone)]
pub struct Mlp2Grad {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp2Grad {
    pub fn zeros_like(mlp: &Mlp2) -> Self {
        Mlp2Grad {
            w1: Matrix::zeros(mlp.w1.rows(), mlp.w1.cols()),
            b1: vec![0.0; mlp.b1.len()],
            w2: Matrix::zeros(mlp.w2.rows(), mlp.w2.cols()),
            b2: vec![0.0; mlp.b2.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1.data_mut().iter_mut().for_each(|v| *v *= s);
        self.b1.iter_mut().for_each(|v| *v *= s);
        self.w2.data_mut().iter_mut().for_each(|v| *v *= s);
        self.b2.iter_mut().for_each(|v| *v *= s);
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    /// Append all gradient entries in the canonical order w1, b1, w2, b2.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
    }
}

impl Mlp2 {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>, activation: Activation) -> Result<Self> {
        if b1.len() != w1.rows() {
            return Err(Error::shape("Mlp2::new b1", format!("{}", w1.rows()), format!("{}", b1.len())));
        }
        if w2.cols() != w1.rows() {
            return Err(Error::shape(
                "Mlp2::new w2",
                format!("cols == {}", w1.rows()),
                format!("{}", w2.cols()),
            ));
        }
        if b2.len() != w2.rows() {
            return Err(Error::shape("Mlp2::new b2", format!("{}", w2.rows()), format!("{}", b2.len())));
        }
        Ok(Mlp2 { w1, b1, w2, b2, activation })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(in_dim: usize, hidden_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        Mlp2 {
            w1: Matrix::glorot(hidden_dim, in_dim, rng),
            b1: vec![0.0; hidden_dim],
            w2: Matrix::glorot(out_dim, hidden_dim, rng),
            b2: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn all_finite(&self) -> bool {
        self.w1.all_finite()
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.all_finite()
            && self.b2.iter().all(|v| v.is_finite())
    }

    /// Forward pass recording the tape needed by `backward`.
    pub fn forward(&self, x: &[f64]) -> Result<Mlp2Tape> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("Mlp2::forward", format!("{}", self.in_dim()), format!("{}", x.len())));
        }
        ensure_all_finite(x, "Mlp2::forward input")?;
        let mut pre = vec![0.0; self.hidden_dim()];
        self.w1.matvec(x, &mut pre);
        for (p, b) in pre.iter_mut().zip(self.b1.iter()) {
            *p += b;
        }
        let hidden: Vec<f64> = pre.iter().map(|&p| self.activation.apply(p)).collect();
        let mut y = self.b2.clone();
        self.w2.matvec_add(&hidden, &mut y);
        Ok(Mlp2Tape {
            x: x.to_vec(),
            pre,
            hidden,
            y,
        })
    }

    /// Forward pass without tape allocation beyond the output.
    pub fn forward_value(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.y)
    }

    /// Reverse-mode step for one recorded sample. Accumulates parameter
    /// gradients into `grad` (+=) and writes d(loss)/d(input) into `dx`.
    pub fn backward_into(&self, tape: &Mlp2Tape, dy: &[f64], grad: &mut Mlp2Grad, dx: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.out_dim());
        debug_assert_eq!(dx.len(), self.in_dim());
        // Output layer: dW2 += dy ⊗ hidden, db2 += dy, dhidden = W2^T dy.
        grad.w2.add_outer(dy, &tape.hidden, 1.0);
        for (g, d) in grad.b2.iter_mut().zip(dy.iter()) {
            *g += d;
        }
        let mut dpre = vec![0.0; self.hidden_dim()];
        self.w2.matvec_t(dy, &mut dpre);
        for (d, p) in dpre.iter_mut().zip(tape.pre.iter()) {
            *d *= self.activation.deriv(*p);
        }
        // Hidden layer: dW1 += dpre ⊗ x, db1 += dpre, dx = W1^T dpre.
        grad.w1.add_outer(&dpre, &tape.x, 1.0);
        for (g, d) in grad.b1.iter_mut().zip(dpre.iter()) {
            *g += d;
        }
        self.w1.matvec_t(&dpre, dx);
    }

    /// Convenience wrapper returning fresh gradients for a single sample.
    pub fn backward(&self, tape: &Mlp2Tape, dy: &[f64]) -> Result<(Vec<f64>, Mlp2Grad)> {
        if dy.len() != self.out_dim() {
            return Err(Error::shape("Mlp2::backward", format!("{}", self.out_dim()), format!("{}", dy.len())));
        }
        let mut grad = Mlp2Grad::zeros_like(self);
        let mut dx = vec![0.0; self.in_dim()];
        self.backward_into(tape, dy, &mut grad, &mut dx);
        Ok((dx, grad))
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
    }

    /// Read parameters back from a flat slice laid out by `write_params`.
    /// Returns the number of entries consumed.
    pub fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.param_count();
        if src.len() < need {
            return Err(Error::shape("Mlp2::read_params", format!("{need}"), format!("{}", src.len())));
        }
        let mut off = 0;
        for dst in [self.w1.data_mut(), &mut self.b1[..], self.w2.data_mut(), &mut self.b2[..]] {
            dst.copy_from_slice(&src[off..off + dst.len()]);
            off += dst.len();
        }
        Ok(need)
    }
}
