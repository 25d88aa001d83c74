//! Canonical experiment setups shared by the tests, benches and CLI.

use crate::adaptive::{AdaptiveConfig, InitialGain};
use crate::baselines::ZoConfig;
use crate::data::{
    build_covariances, iid_batch, snr_diagnostics, CovarianceState, DataBatch, NoiseModel,
};
use crate::error::{Error, Result};
use crate::model::{benchmark_laplacian, four_state_benchmark, random_system, LinearSystem};
use crate::numerics::Mat;
use crate::policy::{certainty_equivalence, k_to_v, PolicyV, Weights};
use crate::rng::{normal_matrix, stream, stream_rng};

/// Target signal-to-noise ratio of the offline fixture, in dB.
pub const OFFLINE_SNR_DB: f64 = -0.12;
/// Batch length of the offline fixture.
pub const OFFLINE_T: usize = 8;
/// Seed of the offline fixture batch.
pub const OFFLINE_SEED: u64 = 0;
/// Stepsize of the offline experiment.
pub const OFFLINE_ETA: f64 = 0.1;
/// Relative-gap targets of the sample-complexity comparison.
pub const COMPLEXITY_TARGETS: [f64; 3] = [1.0, 0.1, 0.01];

/// Rescales the noise of `batch` so that `sigma_min(D0)/|W0|` equals
/// `target_db` and recomputes `X1 = A X0 + B U0 + W0`.
///
/// Only meaningful for non-trajectory batches, where `D0` does not depend
/// on the noise.
pub fn rescale_noise_to_snr(
    sys: &LinearSystem,
    batch: &DataBatch,
    target_db: f64,
) -> Result<DataBatch> {
    let diag = snr_diagnostics(batch)?;
    if diag.noise_norm == 0.0 || diag.sigma_min_d0 == 0.0 {
        return Err(Error::Degenerate(
            "cannot rescale zero noise or rank-deficient data".into(),
        ));
    }
    let ratio = 10f64.powf(target_db / 20.0);
    let w0 = batch.w0.as_ref().expect("diagnostics checked noise")
        * (diag.sigma_min_d0 / (ratio * diag.noise_norm));
    let x1 = &sys.a * &batch.x0 + &sys.b * &batch.u0 + &w0;
    DataBatch::new(batch.x0.clone(), batch.u0.clone(), x1, Some(w0))
}

/// The 4-state, 2-input offline experiment: eight standard normal samples
/// with the noise scaled to [`OFFLINE_SNR_DB`].
pub fn offline_fixture() -> (LinearSystem, DataBatch) {
    let sys = four_state_benchmark();
    let raw = iid_batch(&sys, OFFLINE_T, 1.0, OFFLINE_SEED);
    let batch = rescale_noise_to_snr(&sys, &raw, OFFLINE_SNR_DB)
        .expect("fixture batch has full rank and noise");
    (sys, batch)
}

/// Laplacian benchmark with `Q = 10 I`, `R = I`.
pub fn complexity_system() -> LinearSystem {
    let sys = benchmark_laplacian();
    let n = sys.n();
    let m = sys.m();
    sys.with_weights(Mat::identity(n, n) * 10.0, Mat::identity(m, m))
        .expect("positive definite weights")
}

/// Common initial gain `-0.15 I` of the sample-complexity comparison.
pub fn complexity_initial_gain() -> Mat {
    Mat::identity(3, 3) * -0.15
}

/// Process noise `N(0, 0.01 I)` used on the Laplacian benchmark.
pub fn laplacian_noise(seed: u64) -> NoiseModel {
    NoiseModel::gaussian(0.1, seed)
}

/// Online DeePO settings of the sample-complexity comparison.
pub fn complexity_deepo_config(horizon: usize, seed: u64) -> AdaptiveConfig {
    let mut cfg = AdaptiveConfig::new(horizon, laplacian_noise(seed), seed);
    cfg.initial_gain = InitialGain::Given(complexity_initial_gain());
    cfg
}

/// Zeroth-order settings of the sample-complexity comparison.
pub fn complexity_zo_config(seed: u64) -> ZoConfig {
    ZoConfig::benchmark(laplacian_noise(seed), seed)
}

/// A random plant, a non-trajectory batch on it and a feasible policy.
#[derive(Debug, Clone)]
pub struct Instance {
    pub sys: LinearSystem,
    pub batch: DataBatch,
    pub cov: CovarianceState,
    pub weights: Weights,
    /// Certainty-equivalence gain of the batch.
    pub k_ce: Mat,
    /// Feasible policy away from the optimum.
    pub v: PolicyV,
}

/// Draws a plant with `n` states and `m` inputs, `t` samples with noise
/// scale `noise`, and a feasible `V` whose gain is the certainty-equivalence
/// gain plus a random perturbation, shrunk until it stabilizes the data model.
pub fn random_instance(n: usize, m: usize, t: usize, noise: f64, seed: u64) -> Result<Instance> {
    let sys = random_system(n, m, seed)?;
    let batch = iid_batch(&sys, t, noise, seed);
    let cov = build_covariances(&batch)?;
    let weights = Weights::of(&sys);
    let (k_ce, _) = certainty_equivalence(&batch, &weights)?;
    let mut rng = stream_rng(seed, stream::SWEEP);
    let dir = normal_matrix(&mut rng, m, n);
    let mut scale = 0.5;
    for _ in 0..60 {
        let v = k_to_v(&cov, &(&k_ce + &dir * scale));
        if v.feasible {
            return Ok(Instance {
                sys,
                batch,
                cov,
                weights,
                k_ce,
                v,
            });
        }
        scale *= 0.5;
    }
    Err(Error::Generation { attempts: 60 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_covariances;
    use crate::policy::{is_feasible, k_to_v};

    #[test]
    fn fixture_hits_target_snr() {
        let (_, batch) = offline_fixture();
        let d = snr_diagnostics(&batch).unwrap();
        assert!((d.snr_db - OFFLINE_SNR_DB).abs() < 1e-10);
        assert_eq!(batch.t(), 8);
    }

    #[test]
    fn fixture_zero_gain_is_feasible() {
        let (sys, batch) = offline_fixture();
        let cov = build_covariances(&batch).unwrap();
        let v0 = k_to_v(&cov, &Mat::zeros(sys.m(), sys.n()));
        assert!(v0.feasible && is_feasible(&cov, &v0.v));
    }

    #[test]
    fn random_instances_are_feasible_and_suboptimal() {
        for seed in 0..10 {
            let inst = random_instance(3, 2, 12, 0.01, seed).unwrap();
            assert!(is_feasible(&inst.cov, &inst.v.v));
            assert!((&inst.cov.ubar * &inst.v.v - &inst.k_ce).norm() > 1e-8);
        }
    }

    #[test]
    fn rescaling_keeps_regressors() {
        let sys = four_state_benchmark();
        let raw = iid_batch(&sys, 10, 1.0, 4);
        let b = rescale_noise_to_snr(&sys, &raw, 20.0).unwrap();
        assert_eq!(b.x0, raw.x0);
        assert_eq!(b.u0, raw.u0);
        assert!((snr_diagnostics(&b).unwrap().snr_db - 20.0).abs() < 1e-10);
    }
}
