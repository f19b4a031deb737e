// The recursive latent tracker (predict/update/smooth) must reproduce exact
// Gaussian conditioning. The oracle in common/ stacks the whole horizon into
// one joint normal and conditions on the observed steps; with a linear
// observation model the tracker's answers have to match it step by step.

mod common;

use common::{max_mat_diff, max_vec_diff, JointModel};
use koopman_csi::kalman::{
    filter_sequence, rts_smooth, ContextStats, LatentBelief, LinearObservation, NoiseConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-8;

struct Case {
    model: JointModel,
    obs: Vec<Option<f64>>,
    coupling_b: Option<DMatrix<f64>>,
    ctx: Vec<ContextStats>,
    noise: NoiseConfig,
}

fn norm_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random K with spectral radius safely below 1 (scaled by the row-sum bound).
fn stable_k(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let max_row_sum = (0..n)
        .map(|i| (0..n).map(|j| raw[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    raw * (0.9 / max_row_sum.max(1e-9))
}

fn spd_init(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| 0.4 * rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(n, n) * (0.5 + rng.random::<f64>())
}

/// Build a random tracking problem. `coupled` adds a context-driven input
/// whose per-step uncertainty mixes deterministic and noisy transitions;
/// `gaps` knocks out a stretch of observations in the middle and everything
/// after 3/4 of the horizon (the silence pattern used by the pipeline).
fn random_case(seed: u64, n: usize, coupled: bool, gaps: bool) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = 9;
    let p = 3;
    let k = stable_k(&mut rng, n);
    let q_scale = 0.05 + 0.2 * rng.random::<f64>();
    let r = 0.1 + 0.2 * rng.random::<f64>();
    let noise = NoiseConfig::isotropic(n, q_scale, r).unwrap();
    let m0 = norm_vec(&mut rng, n);
    let p0 = spd_init(&mut rng, n);
    let h = norm_vec(&mut rng, n);

    let coupling_b = coupled.then(|| {
        DMatrix::from_fn(n, p, |_, _| 0.7 * rng.sample::<f64, _>(StandardNormal))
    });

    let mut ctx = Vec::new();
    let mut step_inputs = Vec::new();
    let mut step_noise = Vec::new();
    for t in 0..t_len - 1 {
        let q = noise.q.clone();
        match &coupling_b {
            Some(b) => {
                let mean: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                // Every third transition is deterministic in the context.
                let var: Vec<f64> = if t % 3 == 2 {
                    vec![0.0; p]
                } else {
                    (0..p).map(|_| 0.3 * rng.random::<f64>()).collect()
                };
                let stats = if var.iter().all(|&v| v == 0.0) {
                    ContextStats::deterministic(&mean)
                } else {
                    ContextStats::gaussian(&mean, &var).unwrap()
                };
                let mu = DVector::from_vec(mean.clone());
                let mut extra = DMatrix::zeros(n, n);
                for j in 0..p {
                    let col = b.column(j);
                    for a in 0..n {
                        for c in 0..n {
                            extra[(a, c)] += col[a] * var[j] * col[c];
                        }
                    }
                }
                step_inputs.push(b * mu);
                step_noise.push(q + extra);
                ctx.push(stats);
            }
            None => {
                step_inputs.push(DVector::zeros(n));
                step_noise.push(q);
            }
        }
    }

    let obs: Vec<Option<f64>> = (0..t_len)
        .map(|t| {
            let silent = gaps && (t == 3 || t == 4 || t >= 3 * t_len / 4);
            (!silent).then(|| 2.0 * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();

    Case {
        model: JointModel {
            k,
            step_inputs,
            step_noise,
            m0,
            p0,
            h,
            r,
        },
        obs,
        coupling_b,
        ctx,
        noise,
    }
}

/// Run the recursive tracker and compare every predicted, filtered and
/// smoothed marginal against dense joint conditioning.
fn check_case(case: &Case) -> f64 {
    let t_len = case.obs.len();
    let init = LatentBelief::new(case.model.m0.clone(), case.model.p0.clone()).unwrap();
    let observation = LinearObservation {
        h: case.model.h.clone(),
    };
    let (predicted, filtered) = filter_sequence(
        &case.model.k,
        case.coupling_b.as_ref(),
        &case.noise,
        init,
        &case.obs,
        &case.ctx,
        &observation,
    )
    .unwrap();
    let smoothed = rts_smooth(&filtered, &predicted, &case.model.k).unwrap();

    let mut worst: f64 = 0.0;
    for t in 0..t_len {
        // Predicted at t conditions on observations strictly before t.
        let (om, oc) = case.model.marginal(&case.obs[..t], t);
        worst = worst.max(max_vec_diff(&predicted[t].mean, &om));
        worst = worst.max(max_mat_diff(&predicted[t].cov, &oc));

        // Filtered at t conditions on observations up to and including t.
        let (om, oc) = case.model.marginal(&case.obs[..=t], t);
        worst = worst.max(max_vec_diff(&filtered[t].mean, &om));
        worst = worst.max(max_mat_diff(&filtered[t].cov, &oc));

        // Smoothed at t conditions on the whole horizon.
        let (om, oc) = case.model.marginal(&case.obs, t);
        worst = worst.max(max_vec_diff(&smoothed[t].mean, &om));
        worst = worst.max(max_mat_diff(&smoothed[t].cov, &oc));
    }
    worst
}

#[test]
fn tracker_matches_joint_conditioning_scalar_latent() {
    for seed in 0..20 {
        let case = random_case(seed, 1, false, false);
        let worst = check_case(&case);
        assert!(worst < TOL, "seed {seed}: max deviation {worst:.3e}");
    }
}

#[test]
fn tracker_matches_joint_conditioning_dim3_uncoupled() {
    for seed in 0..20 {
        let case = random_case(100 + seed, 3, false, false);
        let worst = check_case(&case);
        assert!(worst < TOL, "seed {seed}: max deviation {worst:.3e}");
    }
}

#[test]
fn tracker_matches_joint_conditioning_dim3_coupled() {
    for seed in 0..20 {
        let case = random_case(200 + seed, 3, true, false);
        let worst = check_case(&case);
        assert!(worst < TOL, "seed {seed}: max deviation {worst:.3e}");
    }
}

#[test]
fn tracker_matches_joint_conditioning_with_observation_gaps() {
    for seed in 0..20 {
        let case = random_case(300 + seed, 3, true, true);
        let worst = check_case(&case);
        assert!(worst < TOL, "seed {seed}: max deviation {worst:.3e}");
    }
}

#[test]
fn tracker_coasts_through_full_silence_like_the_prior() {
    // With no observations at all, filtering must reduce to pure propagation
    // of the prior: predicted == filtered == smoothed == prior marginals.
    for seed in 0..5 {
        let case = {
            let mut c = random_case(400 + seed, 2, true, false);
            c.obs = vec![None; c.obs.len()];
            c
        };
        let worst = check_case(&case);
        assert!(worst < TOL, "seed {seed}: max deviation {worst:.3e}");
    }
}
