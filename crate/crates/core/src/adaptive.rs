//! Online adaptive DeePO: one projected gradient step per closed-loop sample.
//!
//! At every time `t >= t0` the learner applies `u_t = K_t x_t + v_t`, folds
//! `(x_t, u_t, x_{t+1})` into the covariances, re-parameterizes the current
//! gain as `V_{t+1} = Phi_{t+1}^{-1} [K_t; I]`, takes one projected gradient
//! step on `J_{t+1}` and reads off `K_{t+1} = Ubar_{t+1} V'_{t+1}`.

use std::io::{BufRead, Write};

use crate::data::{
    build_covariances_weighted, stack_sample, CovarianceState, DataBatch, NoiseModel, Plant,
};
use crate::error::{Error, Result};
use crate::model::{lqr_cost, optimal_gain, LinearSystem};
use crate::numerics::{spectral_radius, Mat, Vector};
use crate::policy::{
    certainty_equivalence, cost_of_matrix, feasible_cost, feasible_cost_value,
    gradient_from_bundle, is_feasible, k_to_v_raw, projector_full_rank, PolicyV, Weights, MIN_ETA,
};
use crate::rng::{normal_vector, stream, stream_rng, StreamRng};

/// Per-step event bits recorded in traces.
pub mod events {
    /// `V_{t+1}` was infeasible; no gradient step was taken.
    pub const SKIPPED_INFEASIBLE: u32 = 1;
    /// No stepsize down to the floor gave a feasible descent step.
    pub const REJECTED_STEP: u32 = 2;
    /// The Riccati solve on the current estimate failed; the gain was held.
    pub const HELD_GAIN: u32 = 4;
    /// `Phi^{-1}` was recomputed directly this step.
    pub const REFRESHED_INVERSE: u32 = 8;
    /// The stepsize was halved at least once for this sample.
    pub const BACKTRACKED: u32 = 16;
}

/// Anything that turns closed-loop samples into a new gain.
pub trait AdaptiveLearner {
    fn gain(&self) -> &Mat;
    /// Folds in `(x_t, u_t, x_{t+1})` and updates the gain. Returns event bits.
    fn observe(&mut self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<u32>;
    /// The learner's own estimate of its cost (`J_t` for DeePO).
    fn data_cost(&self) -> f64;
}

/// Algorithmic state of adaptive DeePO. Never touches the true plant.
#[derive(Debug, Clone)]
pub struct DeepoLearner {
    pub cov: CovarianceState,
    pub weights: Weights,
    pub eta: f64,
    /// `K_t`.
    pub k: Mat,
    /// `V'_t`, satisfying `Phi_t V'_t = [K_t; I]`.
    pub v_prime: PolicyV,
    last_j: f64,
    last_proj_grad: f64,
}

impl DeepoLearner {
    pub fn new(cov: CovarianceState, weights: Weights, k: Mat, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) {
            return Err(Error::InvalidValue(format!("stepsize {eta} must be >= 0")));
        }
        let v = k_to_v_raw(&cov, &k);
        let v_prime = PolicyV::new(&cov, v);
        let last_j = cost_of_matrix(&cov, &weights, &v_prime.v)
            .map(|b| b.j)
            .unwrap_or(f64::INFINITY);
        Ok(Self {
            cov,
            weights,
            eta,
            k,
            v_prime,
            last_j,
            last_proj_grad: f64::NAN,
        })
    }

    pub fn last_proj_grad_norm(&self) -> f64 {
        self.last_proj_grad
    }

    /// One iteration of the online update given the new sample.
    pub fn update(&mut self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<u32> {
        let refreshes = self.cov.refresh_count();
        let v_next = self
            .cov
            .rank_one_update_with_policy(x, u, x_next, &self.v_prime.v)?;
        let mut flags = 0;
        if self.cov.refresh_count() != refreshes {
            flags |= events::REFRESHED_INVERSE;
        }
        let bundle = feasible_cost(&self.cov, &self.weights, &v_next)?;
        let v_new = if bundle.is_finite() {
            self.last_j = bundle.j;
            if self.eta > 0.0 {
                let grad = gradient_from_bundle(&self.cov, &self.weights, &v_next, &bundle);
                let pg = projector_full_rank(&self.cov)? * grad;
                self.last_proj_grad = pg.norm();
                // Halve from the nominal stepsize until the step stays feasible
                // and does not increase J_{t+1}. The next sample restarts at eta.
                let accept = |c: &Mat| -> Result<bool> {
                    Ok(feasible_cost_value(&self.cov, &self.weights, c)? <= bundle.j)
                };
                let mut eta = self.eta;
                loop {
                    let candidate = &v_next - &pg * eta;
                    if accept(&candidate)? {
                        break candidate;
                    }
                    if eta <= MIN_ETA {
                        flags |= events::REJECTED_STEP;
                        break v_next;
                    }
                    eta *= 0.5;
                    flags |= events::BACKTRACKED;
                }
            } else {
                v_next
            }
        } else {
            flags |= events::SKIPPED_INFEASIBLE;
            self.last_j = f64::INFINITY;
            v_next
        };
        self.k = &self.cov.ubar * &v_new;
        self.v_prime = PolicyV {
            v: v_new,
            feasible: flags & events::SKIPPED_INFEASIBLE == 0,
        };
        Ok(flags)
    }
}

impl AdaptiveLearner for DeepoLearner {
    fn gain(&self) -> &Mat {
        &self.k
    }

    fn observe(&mut self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<u32> {
        self.update(x, u, x_next)
    }

    fn data_cost(&self) -> f64 {
        self.last_j
    }
}

/// How the gain at `t0` is obtained from the offline batch.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialGain {
    /// Minimizer of the covariance-parameterized problem on the offline data
    /// (computed through its certainty-equivalence counterpart).
    OfflineOptimum,
    Given(Mat),
}

/// Configuration of an adaptive run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveConfig {
    pub t0: usize,
    /// Number of online steps.
    pub horizon: usize,
    pub eta: f64,
    /// Standard deviation of the Gaussian probing noise `v_t`.
    pub probe_scale: f64,
    /// Standard deviation of the Gaussian offline inputs.
    pub offline_input_scale: f64,
    pub noise: NoiseModel,
    pub forgetting: f64,
    pub seed: u64,
    pub initial_gain: InitialGain,
}

impl AdaptiveConfig {
    /// `t0 = 8`, `eta = 0.01`, unit probing, no forgetting.
    pub fn new(horizon: usize, noise: NoiseModel, seed: u64) -> Self {
        Self {
            t0: 8,
            horizon,
            eta: 0.01,
            probe_scale: 1.0,
            offline_input_scale: 1.0,
            noise,
            forgetting: 1.0,
            seed,
            initial_gain: InitialGain::OfflineOptimum,
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.t0 < n + m {
            return Err(Error::RankDeficient { sigma_min: 0.0 });
        }
        if !(self.eta >= 0.0) || !(self.probe_scale >= 0.0) {
            return Err(Error::InvalidValue(
                "eta and probe scale must be >= 0".into(),
            ));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::InvalidValue("forgetting must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Closed-loop driver state: the learner plus the signals around it.
pub struct AdaptiveState<L: AdaptiveLearner> {
    pub learner: L,
    pub t: usize,
    pub x: Vector,
    pub probe_scale: f64,
    probe: StreamRng,
    /// Unweighted `D0 D0'` and `W0 W0'` for diagnostics.
    gram_d: Mat,
    gram_w: Mat,
}

/// Offline phase: `t0` open-loop steps from `x0 = 0` with Gaussian inputs.
pub fn collect_offline(plant: &mut Plant, cfg: &AdaptiveConfig) -> Result<DataBatch> {
    let (n, m) = (plant.sys.n(), plant.sys.m());
    let mut rng = stream_rng(cfg.seed, stream::OFFLINE_INPUT);
    let mut xs = Mat::zeros(n, cfg.t0);
    let mut us = Mat::zeros(m, cfg.t0);
    let mut xn = Mat::zeros(n, cfg.t0);
    let mut ws = Mat::zeros(n, cfg.t0);
    for t in 0..cfg.t0 {
        let x = plant.x.clone();
        let u = normal_vector(&mut rng, m) * cfg.offline_input_scale;
        let (w, next) = plant.step(&u)?;
        xs.set_column(t, &x);
        us.set_column(t, &u);
        ws.set_column(t, &w);
        xn.set_column(t, &next);
    }
    DataBatch::new(xs, us, xn, Some(ws))
}

fn offline_gain(
    batch: &DataBatch,
    cov: &CovarianceState,
    w: &Weights,
    init: &InitialGain,
) -> Result<Mat> {
    match init {
        InitialGain::Given(k) => Ok(k.clone()),
        InitialGain::OfflineOptimum => {
            let (k, _) = certainty_equivalence(batch, w)?;
            if !is_feasible(cov, &k_to_v_raw(cov, &k)) {
                return Err(Error::Infeasible(
                    "offline data admit no feasible covariance policy".into(),
                ));
            }
            Ok(k)
        }
    }
}

impl<L: AdaptiveLearner> AdaptiveState<L> {
    fn from_parts(learner: L, batch: &DataBatch, x: Vector, cfg: &AdaptiveConfig) -> Self {
        let d0 = batch.d0();
        let gram_w = batch
            .w0
            .as_ref()
            .map(|w| w * w.transpose())
            .unwrap_or_else(|| Mat::zeros(batch.n(), batch.n()));
        Self {
            learner,
            t: batch.t(),
            x,
            probe_scale: cfg.probe_scale,
            probe: stream_rng(cfg.seed, stream::PROBE),
            gram_d: &d0 * d0.transpose(),
            gram_w,
        }
    }

    /// `u_t = K_t x_t + v_t`.
    pub fn control(&mut self) -> Vector {
        let m = self.learner.gain().nrows();
        self.learner.gain() * &self.x + normal_vector(&mut self.probe, m) * self.probe_scale
    }

    /// Applies the control to `plant`, observes and updates the learner.
    pub fn step(&mut self, plant: &mut Plant) -> Result<StepOutcome> {
        let x = self.x.clone();
        let u = self.control();
        let (w, x_next) = plant.step(&u)?;
        let flags = self.learner.observe(&x, &u, &x_next)?;
        let psi = stack_sample(&u, &x);
        self.gram_d += &psi * psi.transpose();
        self.gram_w += &w * w.transpose();
        self.x = x_next;
        self.t += 1;
        Ok(StepOutcome { x, u, flags })
    }

    /// `sigma_min(D0)` and `|W0|` over all samples so far.
    pub fn snr(&self) -> (f64, f64) {
        let smin = self
            .gram_d
            .clone()
            .symmetric_eigenvalues()
            .min()
            .max(0.0)
            .sqrt();
        let wn = self
            .gram_w
            .clone()
            .symmetric_eigenvalues()
            .max()
            .max(0.0)
            .sqrt();
        (smin, wn)
    }
}

/// One closed-loop sample; `x` is the state the control was computed from.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub x: Vector,
    pub u: Vector,
    pub flags: u32,
}

/// Runs the offline phase, computes `K_{t0}` and hands the offline
/// covariances and gain to `make` to build the learner.
pub fn initialize_with<L, F>(
    plant: &mut Plant,
    cfg: &AdaptiveConfig,
    make: F,
) -> Result<AdaptiveState<L>>
where
    L: AdaptiveLearner,
    F: FnOnce(&DataBatch, CovarianceState, Weights, Mat) -> Result<L>,
{
    let (n, m) = (plant.sys.n(), plant.sys.m());
    cfg.validate(n, m)?;
    let batch = collect_offline(plant, cfg)?;
    let cov = build_covariances_weighted(&batch, cfg.forgetting)?;
    let w = Weights::of(&plant.sys);
    let k = offline_gain(&batch, &cov, &w, &cfg.initial_gain)?;
    let learner = make(&batch, cov, w, k)?;
    Ok(AdaptiveState::from_parts(
        learner,
        &batch,
        plant.x.clone(),
        cfg,
    ))
}

/// Runs the offline phase and returns the DeePO closed-loop state.
pub fn initialize(plant: &mut Plant, cfg: &AdaptiveConfig) -> Result<AdaptiveState<DeepoLearner>> {
    initialize_with(plant, cfg, |_, cov, w, k| {
        DeepoLearner::new(cov, w, k, cfg.eta)
    })
}

/// One per-step record of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretRecord {
    pub t: usize,
    pub cost_true: f64,
    pub j_t: f64,
    pub snr_db: f64,
    pub sigma_min_d0: f64,
    pub rho_closed_loop: f64,
    pub event_flags: u32,
    /// `|K_{t+1} - K_t|_F`.
    pub gain_change: f64,
    /// Optimal cost of the plant in force at `t`.
    pub cstar: f64,
    /// Realized `|z_t|^2 = x_t'Q x_t + u_t'R u_t`, probe included.
    pub stage_cost: f64,
}

impl RegretRecord {
    pub fn gap(&self) -> f64 {
        self.cost_true - self.cstar
    }

    pub fn relative_gap(&self) -> f64 {
        (self.cost_true - self.cstar) / self.cstar
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub records: Vec<RegretRecord>,
    pub cstar: f64,
    pub t0: usize,
}

impl RegretTrace {
    /// `Regret_T = (1/T) sum_{t=t0}^{t0+T-1} (C(K_t) - C*)` for `T = 1, 2, ...`.
    pub fn avg_regret(&self) -> Vec<f64> {
        let mut sum = 0.0;
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                sum += r.gap();
                sum / (i + 1) as f64
            })
            .collect()
    }

    pub fn relative_gaps(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(RegretRecord::relative_gap)
            .collect()
    }

    /// First `t` whose gain has relative gap `<= eps`.
    pub fn first_time_below(&self, eps: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.relative_gap() <= eps)
            .map(|r| r.t)
    }

    /// Finite-horizon cost `sum_{k < t} |z_k|^2` over the online phase,
    /// one entry per record.
    pub fn cumulative_stage_cost(&self) -> Vec<f64> {
        let mut sum = 0.0;
        self.records
            .iter()
            .map(|r| {
                sum += r.stage_cost;
                sum
            })
            .collect()
    }

    /// Mean `|K_{t+1} - K_t|_F` over records with `t >= from_t`.
    pub fn mean_gain_change_after(&self, from_t: usize) -> f64 {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.t >= from_t && r.gain_change.is_finite())
            .map(|r| r.gain_change)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "t,cost_true,J_t,regret_avg,snr_db,sigma_min_D0,rho_closed_loop,event_flags"
        )?;
        for (r, avg) in self.records.iter().zip(self.avg_regret()) {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                r.t,
                r.cost_true,
                r.j_t,
                avg,
                r.snr_db,
                r.sigma_min_d0,
                r.rho_closed_loop,
                r.event_flags
            )?;
        }
        Ok(())
    }
}

/// Parsed rows of a regret-trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCsvRow {
    pub t: usize,
    pub cost_true: f64,
    pub j_t: f64,
    pub regret_avg: f64,
    pub snr_db: f64,
    pub sigma_min_d0: f64,
    pub rho_closed_loop: f64,
    pub event_flags: u32,
}

pub const TRACE_COLUMNS: [&str; 8] = [
    "t",
    "cost_true",
    "J_t",
    "regret_avg",
    "snr_db",
    "sigma_min_D0",
    "rho_closed_loop",
    "event_flags",
];

pub fn read_trace_csv<R: BufRead>(input: R) -> Result<Vec<TraceCsvRow>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trace".into()))??;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != TRACE_COLUMNS {
        return Err(Error::Parse(format!("unexpected trace columns: {header}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != TRACE_COLUMNS.len() {
            return Err(Error::Parse(format!("row {}: wrong field count", i + 2)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}: {s:?}: {e}", i + 2)))
        };
        let int = |s: &str| {
            s.parse::<u64>()
                .map_err(|e| Error::Parse(format!("row {}: {s:?}: {e}", i + 2)))
        };
        rows.push(TraceCsvRow {
            t: int(f[0])? as usize,
            cost_true: num(f[1])?,
            j_t: num(f[2])?,
            regret_avg: num(f[3])?,
            snr_db: num(f[4])?,
            sigma_min_d0: num(f[5])?,
            rho_closed_loop: num(f[6])?,
            event_flags: int(f[7])? as u32,
        });
    }
    Ok(rows)
}

/// The true plant as a function of time (piecewise constant).
#[derive(Debug, Clone)]
pub struct PlantSchedule {
    /// `(start_t, system, C*)`, sorted by start.
    segments: Vec<(usize, LinearSystem, f64)>,
}

impl PlantSchedule {
    pub fn constant(sys: LinearSystem) -> Result<Self> {
        Self::switching(vec![(0, sys)])
    }

    pub fn switching(mut segments: Vec<(usize, LinearSystem)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidValue("empty plant schedule".into()));
        }
        segments.sort_by_key(|s| s.0);
        let segments = segments
            .into_iter()
            .map(|(t, sys)| optimal_gain(&sys).map(|o| (t, sys, o.cstar)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { segments })
    }

    pub fn at(&self, t: usize) -> (&LinearSystem, f64) {
        let seg = self
            .segments
            .iter()
            .rev()
            .find(|s| s.0 <= t)
            .unwrap_or(&self.segments[0]);
        (&seg.1, seg.2)
    }
}

/// Drives `state` for `horizon` steps against `schedule` and records
/// true-plant diagnostics for every gain in force.
pub fn drive<L: AdaptiveLearner>(
    state: &mut AdaptiveState<L>,
    plant: &mut Plant,
    schedule: &PlantSchedule,
    horizon: usize,
) -> Result<RegretTrace> {
    let t0 = state.t;
    let mut records = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let t = state.t;
        let (sys, cstar) = schedule.at(t);
        if plant.sys != *sys {
            plant.switch_system(sys.clone());
        }
        let k_t = state.learner.gain().clone();
        let cost_true = lqr_cost(sys, &k_t);
        let rho = spectral_radius(&sys.closed_loop(&k_t)).unwrap_or(f64::NAN);
        if !cost_true.is_finite() {
            return Err(Error::Infeasible(format!(
                "gain at t = {t} does not stabilize the true plant (rho = {rho:.6})"
            )));
        }
        let (smin, wn) = state.snr();
        let j_t = state.learner.data_cost();
        let outcome = state.step(plant)?;
        let gain_change = (state.learner.gain() - &k_t).norm();
        records.push(RegretRecord {
            t,
            cost_true,
            j_t,
            snr_db: crate::data::snr_db(smin, wn),
            sigma_min_d0: smin,
            rho_closed_loop: rho,
            event_flags: outcome.flags,
            gain_change,
            cstar,
            stage_cost: sys.stage_cost(&outcome.x, &outcome.u),
        });
    }
    let cstar = records.first().map_or(schedule.segments[0].2, |r| r.cstar);
    Ok(RegretTrace { records, cstar, t0 })
}

/// Offline phase plus `cfg.horizon` online DeePO steps on a fixed plant.
pub fn run(sys: &LinearSystem, cfg: &AdaptiveConfig) -> Result<RegretTrace> {
    run_schedule(&PlantSchedule::constant(sys.clone())?, cfg)
}

pub fn run_schedule(schedule: &PlantSchedule, cfg: &AdaptiveConfig) -> Result<RegretTrace> {
    let (sys, _) = schedule.at(0);
    let mut plant = Plant::new(sys.clone(), Vector::zeros(sys.n()), &cfg.noise);
    let mut state = initialize(&mut plant, cfg)?;
    drive(&mut state, &mut plant, schedule, cfg.horizon)
}
