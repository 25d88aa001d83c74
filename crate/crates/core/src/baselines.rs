//! Comparison methods: indirect certainty-equivalence adaptive control and
//! episodic two-point zeroth-order policy optimization.

use std::io::Write;

use rand::Rng;

use crate::adaptive::{
    drive, events, initialize_with, AdaptiveConfig, AdaptiveLearner, PlantSchedule, RegretTrace,
};
use crate::data::{stack_sample, DataBatch, NoiseModel, Plant};
use crate::error::{Error, Result};
use crate::model::{lqr_cost, optimal_gain, relative_gap, LinearSystem};
use crate::numerics::{dare_gain, solve_dare, Mat, Vector};
use crate::par;
use crate::policy::Weights;
use crate::rng::{stream, stream_rng, unit_sphere_matrix};

/// Recursive least squares for `x_{t+1} = [B A] [u_t; x_t] + w_t`.
#[derive(Debug, Clone)]
pub struct RlsState {
    /// `[B_hat A_hat]`.
    pub theta: Mat,
    /// `(D0 D0')^{-1}`, unnormalized.
    pub p: Mat,
    pub t: usize,
    m: usize,
}

impl RlsState {
    /// Batch initialization `theta = X1 D0'(D0 D0')^{-1}`.
    pub fn from_batch(batch: &DataBatch) -> Result<Self> {
        let d0 = batch.d0();
        let gram = &d0 * d0.transpose();
        let p = gram
            .cholesky()
            .ok_or(Error::RankDeficient { sigma_min: 0.0 })?
            .inverse();
        let theta = &batch.x1 * d0.transpose() * &p;
        Ok(Self {
            theta,
            p,
            t: batch.t(),
            m: batch.m(),
        })
    }

    pub fn update(&mut self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<()> {
        let psi = stack_sample(u, x);
        let p_psi = &self.p * &psi;
        let denom = 1.0 + psi.dot(&p_psi);
        if !(denom.is_finite() && denom > 0.0) {
            return Err(Error::SingularUpdate { denom });
        }
        let gain = &p_psi / denom;
        let innovation = x_next - &self.theta * &psi;
        self.theta += &innovation * gain.transpose();
        self.p -= &gain * p_psi.transpose();
        self.p = crate::numerics::symmetrize(&self.p);
        self.t += 1;
        Ok(())
    }

    pub fn b_hat(&self) -> Mat {
        self.theta.columns(0, self.m).into_owned()
    }

    pub fn a_hat(&self) -> Mat {
        let n = self.theta.nrows();
        self.theta.columns(self.m, n).into_owned()
    }
}

/// Identifies the model by RLS and solves the Riccati equation every step.
#[derive(Debug, Clone)]
pub struct IndirectLearner {
    pub rls: RlsState,
    pub weights: Weights,
    pub k: Mat,
    last_cost: f64,
}

impl IndirectLearner {
    pub fn new(batch: &DataBatch, weights: Weights, k: Mat) -> Result<Self> {
        Ok(Self {
            rls: RlsState::from_batch(batch)?,
            weights,
            k,
            last_cost: f64::NAN,
        })
    }
}

impl AdaptiveLearner for IndirectLearner {
    fn gain(&self) -> &Mat {
        &self.k
    }

    fn observe(&mut self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<u32> {
        self.rls.update(x, u, x_next)?;
        let (a, b) = (self.rls.a_hat(), self.rls.b_hat());
        let solved = solve_dare(&a, &b, &self.weights.q, &self.weights.r)
            .and_then(|s| Ok((dare_gain(&a, &b, &s.p, &self.weights.r)?, s.p.trace())));
        match solved {
            Ok((k, cost)) => {
                self.k = k;
                self.last_cost = cost;
                Ok(0)
            }
            Err(_) => Ok(events::HELD_GAIN),
        }
    }

    fn data_cost(&self) -> f64 {
        self.last_cost
    }
}

/// Indirect adaptive run with the same offline phase, probing and trace
/// schema as [`crate::adaptive::run`].
pub fn indirect_adaptive_run(sys: &LinearSystem, cfg: &AdaptiveConfig) -> Result<RegretTrace> {
    let schedule = PlantSchedule::constant(sys.clone())?;
    let mut plant = Plant::new(sys.clone(), Vector::zeros(sys.n()), &cfg.noise);
    let mut state = initialize_with(&mut plant, cfg, |batch, _, w, k| {
        IndirectLearner::new(batch, w, k)
    })?;
    drive(&mut state, &mut plant, &schedule, cfg.horizon)
}

/// Two-point zeroth-order policy optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoConfig {
    /// Smoothing radius.
    pub r: f64,
    pub eta: f64,
    pub rollout_len: usize,
    pub minibatch: usize,
    /// Process noise of each rollout; its seed is replaced per rollout.
    pub noise: NoiseModel,
    pub max_iters: usize,
    pub seed: u64,
}

impl ZoConfig {
    /// `r = 0.02`, `eta = 1e-3`, rollouts of length 50, minibatch 30.
    pub fn benchmark(noise: NoiseModel, seed: u64) -> Self {
        Self {
            r: 0.02,
            eta: 1e-3,
            rollout_len: 50,
            minibatch: 30,
            noise,
            max_iters: 20_000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) || self.rollout_len == 0 || self.minibatch == 0 {
            return Err(Error::InvalidValue(
                "zeroth-order config needs r > 0 and positive rollout length and minibatch".into(),
            ));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidValue(
                "zeroth-order stepsize must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Empirical cost `(1/T) sum_t x'Qx + u'Ru` of one noisy rollout from
/// `x0 = 0` under `u = K x`.
pub fn rollout_cost(sys: &LinearSystem, k: &Mat, len: usize, noise: &NoiseModel) -> Result<f64> {
    let mut plant = Plant::new(sys.clone(), Vector::zeros(sys.n()), noise);
    let mut total = 0.0;
    for _ in 0..len {
        let u = k * &plant.x;
        total += sys.stage_cost(&plant.x, &u);
        plant.step(&u)?;
    }
    Ok(total / len as f64)
}

/// Minibatch two-point estimate `mean_i (C(K + rF_i) - C(K - rF_i)) (mn/r) F_i`.
/// Rollouts run concurrently; every rollout has its own pre-drawn seed.
pub fn two_point_estimate<R: Rng + ?Sized>(
    sys: &LinearSystem,
    k: &Mat,
    zo: &ZoConfig,
    dir_rng: &mut R,
    seed_rng: &mut R,
) -> Result<Mat> {
    let (m, n) = (k.nrows(), k.ncols());
    let jobs: Vec<(Mat, u64, u64)> = (0..zo.minibatch)
        .map(|_| {
            (
                unit_sphere_matrix(dir_rng, m, n),
                seed_rng.random(),
                seed_rng.random(),
            )
        })
        .collect();
    let scale = (m * n) as f64 / zo.r;
    let terms = par::map(&jobs, |(f, s_plus, s_minus)| -> Result<Mat> {
        let plus = NoiseModel {
            seed: *s_plus,
            ..zo.noise
        };
        let minus = NoiseModel {
            seed: *s_minus,
            ..zo.noise
        };
        let c_plus = rollout_cost(sys, &(k + f * zo.r), zo.rollout_len, &plus)?;
        let c_minus = rollout_cost(sys, &(k - f * zo.r), zo.rollout_len, &minus)?;
        Ok(f * ((c_plus - c_minus) * scale))
    });
    let mut sum = Mat::zeros(m, n);
    for t in terms {
        sum += t?;
    }
    Ok(sum / zo.minibatch as f64)
}

/// First trajectory count at which each relative-gap target was met.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoResult {
    pub targets: Vec<(f64, Option<usize>)>,
    pub iterations: usize,
    pub final_gap: f64,
    pub gaps: Vec<f64>,
}

/// Runs `K <- K - eta * g_hat` from `k0` until every target in
/// `gap_targets` is met or `max_iters` is reached. Progress is measured with
/// the exact cost of the true plant.
pub fn zeroth_order_po_run(
    sys: &LinearSystem,
    k0: &Mat,
    zo: &ZoConfig,
    gap_targets: &[f64],
) -> Result<ZoResult> {
    zo.validate()?;
    let cstar = optimal_gain(sys)?.cstar;
    if !lqr_cost(sys, k0).is_finite() {
        return Err(Error::Infeasible(
            "initial gain does not stabilize the plant".into(),
        ));
    }
    let mut dir_rng = stream_rng(zo.seed, stream::ZO_DIRECTIONS);
    let mut seed_rng = stream_rng(zo.seed, stream::ZO_ROLLOUTS);
    let per_iter = 2 * zo.minibatch;
    let mut hits: Vec<Option<usize>> = vec![None; gap_targets.len()];
    let mut k = k0.clone();
    let mut gaps = vec![relative_gap(lqr_cost(sys, &k), cstar)];
    let mut iterations = 0;
    while iterations < zo.max_iters && hits.iter().any(Option::is_none) {
        let g = two_point_estimate(sys, &k, zo, &mut dir_rng, &mut seed_rng)?;
        k -= g * zo.eta;
        iterations += 1;
        let c = lqr_cost(sys, &k);
        if !c.is_finite() {
            return Err(Error::Infeasible(format!(
                "zeroth-order step {iterations} produced a destabilizing gain (|K| = {:.3e})",
                k.norm()
            )));
        }
        let gap = relative_gap(c, cstar);
        gaps.push(gap);
        for (hit, &eps) in hits.iter_mut().zip(gap_targets) {
            if hit.is_none() && gap <= eps {
                *hit = Some(iterations * per_iter);
            }
        }
    }
    Ok(ZoResult {
        targets: gap_targets.iter().copied().zip(hits).collect(),
        iterations,
        final_gap: *gaps.last().unwrap_or(&f64::NAN),
        gaps,
    })
}

/// Number of input-state pairs collected before a DeePO gain first met
/// each target: the gain `K_t` has seen exactly `t` pairs.
pub fn pairs_to_targets(trace: &RegretTrace, gap_targets: &[f64]) -> Vec<(f64, Option<usize>)> {
    gap_targets
        .iter()
        .map(|&eps| (eps, trace.first_time_below(eps)))
        .collect()
}

/// One row of the sample-complexity table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityRow {
    pub target_eps: f64,
    pub trajectories: Option<usize>,
    pub pairs: Option<usize>,
    pub seed: u64,
}

pub fn write_complexity_csv<W: Write>(rows: &[ComplexityRow], mut out: W) -> Result<()> {
    writeln!(out, "target_eps,trajectories,pairs,seed")?;
    let opt = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.target_eps,
            opt(r.trajectories),
            opt(r.pairs),
            r.seed
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::iid_batch;
    use crate::model::{benchmark_laplacian, four_state_benchmark, model_gradient};
    use crate::numerics::max_abs;
    use crate::policy::least_squares_model;

    #[test]
    fn rls_tracks_batch_least_squares() {
        let sys = four_state_benchmark();
        let batch = iid_batch(&sys, 300, 0.1, 3);
        let mut rls = RlsState::from_batch(&batch.prefix(8)).unwrap();
        for k in 8..300 {
            let (x, u, xn) = batch.column(k);
            rls.update(&x, &u, &xn).unwrap();
        }
        let (a, b) = least_squares_model(&batch).unwrap();
        assert!(max_abs(&(rls.a_hat() - a)) <= 1e-8);
        assert!(max_abs(&(rls.b_hat() - b)) <= 1e-8);
    }

    #[test]
    fn noise_free_indirect_gain_is_optimal() {
        let sys = four_state_benchmark();
        let cfg = AdaptiveConfig::new(20, NoiseModel::none(), 2);
        let tr = indirect_adaptive_run(&sys, &cfg).unwrap();
        for r in &tr.records {
            assert!(r.relative_gap() <= 1e-8, "gap {}", r.relative_gap());
        }
    }

    #[test]
    fn two_point_estimate_aligns_with_gradient() {
        // exact costs stand in for infinitely long noise-free rollouts
        let sys = benchmark_laplacian()
            .with_weights(Mat::identity(3, 3) * 10.0, Mat::identity(3, 3))
            .unwrap();
        let k = Mat::identity(3, 3) * -0.15;
        let zo = ZoConfig::benchmark(NoiseModel::none(), 1);
        let grad = model_gradient(&sys, &k).unwrap();
        let mut rng = stream_rng(1, stream::ZO_DIRECTIONS);
        let mut est = Mat::zeros(3, 3);
        for _ in 0..200 {
            let f = unit_sphere_matrix(&mut rng, 3, 3);
            let d = lqr_cost(&sys, &(&k + &f * zo.r)) - lqr_cost(&sys, &(&k - &f * zo.r));
            est += f * (d * 9.0 / zo.r);
        }
        let cos = est.dot(&grad) / (est.norm() * grad.norm());
        assert!(cos >= 0.5, "cosine {cos}");
    }

    #[test]
    fn complexity_csv_has_header_and_blanks() {
        let rows = [ComplexityRow {
            target_eps: 0.1,
            trajectories: Some(60),
            pairs: None,
            seed: 3,
        }];
        let mut buf = Vec::new();
        write_complexity_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "target_eps,trajectories,pairs,seed\n0.1,60,,3\n"
        );
    }
}
