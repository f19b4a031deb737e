// Shared helpers for the integration tests. The joint-Gaussian oracle here
// deliberately avoids the recursive filter equations: it materializes the
// full stacked distribution of (z_0, ..., z_{T-1}) and conditions on the
// observed steps directly, so any agreement with the recursive tracker is
// evidence rather than tautology.

use nalgebra::{DMatrix, DVector};

/// Linear-Gaussian state-space model over a fixed horizon.
///
/// z_0 ~ N(m0, P0)
/// z_{t+1} = K z_t + u_t + w_t,  w_t ~ N(0, Q_t)   (t = 0..T-2)
/// y_t = h . z_t + v_t,          v_t ~ N(0, r)     (observed steps only)
pub struct JointModel {
    pub k: DMatrix<f64>,
    /// Deterministic input per transition, length T-1.
    pub step_inputs: Vec<DVector<f64>>,
    /// Process-noise covariance per transition, length T-1.
    pub step_noise: Vec<DMatrix<f64>>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub h: DVector<f64>,
    pub r: f64,
}

impl JointModel {
    pub fn horizon(&self) -> usize {
        self.step_inputs.len() + 1
    }

    fn dim(&self) -> usize {
        self.m0.len()
    }

    /// Mean and covariance of the stacked state (z_0, ..., z_{T-1}).
    pub fn joint(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let t_len = self.horizon();
        let mut mean = DVector::zeros(n * t_len);
        let mut cov = DMatrix::zeros(n * t_len, n * t_len);
        mean.rows_mut(0, n).copy_from(&self.m0);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.p0);
        for t in 0..t_len - 1 {
            let m_t = mean.rows(t * n, n).into_owned();
            let m_next = &self.k * m_t + &self.step_inputs[t];
            mean.rows_mut((t + 1) * n, n).copy_from(&m_next);
            for s in 0..=t {
                let block = &self.k * cov.view((t * n, s * n), (n, n)).into_owned();
                cov.view_mut(((t + 1) * n, s * n), (n, n)).copy_from(&block);
                cov.view_mut((s * n, (t + 1) * n), (n, n))
                    .copy_from(&block.transpose());
            }
            let s_tt = cov.view((t * n, t * n), (n, n)).into_owned();
            let s_next = &self.k * s_tt * self.k.transpose() + &self.step_noise[t];
            cov.view_mut(((t + 1) * n, (t + 1) * n), (n, n))
                .copy_from(&s_next);
        }
        (mean, cov)
    }

    /// Posterior of the stacked state given the observations present in
    /// `obs` (None entries contribute nothing). `obs` may cover a prefix of
    /// the horizon: later steps then stay at their prior/propagated law.
    pub fn condition(&self, obs: &[Option<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        assert!(obs.len() <= self.horizon());
        let n = self.dim();
        let nt = n * self.horizon();
        let (mean, cov) = self.joint();
        let observed: Vec<(usize, f64)> = obs
            .iter()
            .enumerate()
            .filter_map(|(t, y)| y.map(|v| (t, v)))
            .collect();
        if observed.is_empty() {
            return (mean, cov);
        }
        let m = observed.len();
        let mut h_big = DMatrix::zeros(m, nt);
        let mut y = DVector::zeros(m);
        for (row, &(t, v)) in observed.iter().enumerate() {
            for j in 0..n {
                h_big[(row, t * n + j)] = self.h[j];
            }
            y[row] = v;
        }
        let s = &h_big * &cov * h_big.transpose() + DMatrix::identity(m, m) * self.r;
        let chol = s.cholesky().expect("oracle innovation covariance must be SPD");
        // gain^T = S^{-1} H Σ  => gain = Σ H^T S^{-1}
        let gain = chol.solve(&(&h_big * &cov)).transpose();
        let resid = y - &h_big * &mean;
        let post_mean = mean + &gain * resid;
        let post_cov = &cov - gain * (&h_big * &cov);
        (post_mean, post_cov)
    }

    /// Marginal law of step `t` after conditioning on `obs`.
    pub fn marginal(&self, obs: &[Option<f64>], t: usize) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let (mean, cov) = self.condition(obs);
        (
            mean.rows(t * n, n).into_owned(),
            cov.view((t * n, t * n), (n, n)).into_owned(),
        )
    }
}

/// Largest absolute entry-wise difference between two vectors.
pub fn max_vec_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest absolute entry-wise difference between two matrices.
pub fn max_mat_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
