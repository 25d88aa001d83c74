//! Trajectory simulation, raw data matrices, sample covariances with
//! rank-one recursive maintenance, persistency-of-excitation level and
//! signal-to-noise diagnostics.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::LinearSystem;
use crate::numerics::{max_abs, sigma_min, singular_values, Mat, Vector, RANK_TOL_REL};
use crate::rng::{normal_matrix, normal_vector, stream, stream_rng, StreamRng};

/// States whose norm exceeds this abort the simulation.
pub const OVERFLOW_GUARD: f64 = 1e12;
/// `Phi * PhiInv` may drift this far from the identity before a refresh.
pub const INVERSE_DRIFT_TOL: f64 = 1e-8;
/// Unconditional direct re-inversion period.
pub const REFRESH_PERIOD: usize = 1000;
const SM_DENOM_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdversarialStrategy {
    /// `w = delta * 1 / sqrt(n)`.
    Constant,
    /// `w = delta * x / |x|` (pushes the state outward).
    AlignedWithState,
    /// Random sign pattern scaled to norm `delta`.
    RandomSign,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    None,
    /// Each entry uniform on `[0, sigma]` (non-zero mean).
    Uniform {
        sigma: f64,
    },
    /// Each entry `N(0, sigma^2)`.
    Gaussian {
        sigma: f64,
    },
    /// Any sequence with `|w_t| <= delta`.
    AdversarialBounded {
        delta: f64,
        strategy: AdversarialStrategy,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            seed: 0,
        }
    }

    pub fn uniform(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Uniform { sigma },
            seed,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian { sigma },
            seed,
        }
    }

    pub fn adversarial(delta: f64, strategy: AdversarialStrategy, seed: u64) -> Self {
        Self {
            kind: NoiseKind::AdversarialBounded { delta, strategy },
            seed,
        }
    }

    pub fn is_none(&self) -> bool {
        match self.kind {
            NoiseKind::None => true,
            NoiseKind::Uniform { sigma } | NoiseKind::Gaussian { sigma } => sigma == 0.0,
            NoiseKind::AdversarialBounded { delta, .. } => delta == 0.0,
        }
    }

    /// Sampler drawing from the process-noise stream of `seed`.
    pub fn sampler(&self) -> NoiseSampler {
        self.sampler_on(stream::PROCESS_NOISE)
    }

    pub fn sampler_on(&self, stream_id: u64) -> NoiseSampler {
        NoiseSampler {
            kind: self.kind,
            rng: stream_rng(self.seed, stream_id),
        }
    }
}

pub struct NoiseSampler {
    kind: NoiseKind,
    rng: StreamRng,
}

impl NoiseSampler {
    pub fn sample(&mut self, x: &Vector) -> Vector {
        let n = x.len();
        match self.kind {
            NoiseKind::None => Vector::zeros(n),
            NoiseKind::Uniform { sigma } => {
                Vector::from_fn(n, |_, _| sigma * self.rng.random::<f64>())
            }
            NoiseKind::Gaussian { sigma } => normal_vector(&mut self.rng, n) * sigma,
            NoiseKind::AdversarialBounded { delta, strategy } => {
                let dir = match strategy {
                    AdversarialStrategy::Constant => Vector::from_element(n, 1.0),
                    AdversarialStrategy::AlignedWithState if x.norm() > 0.0 => x.clone(),
                    AdversarialStrategy::AlignedWithState => Vector::from_element(n, 1.0),
                    AdversarialStrategy::RandomSign => {
                        Vector::from_fn(
                            n,
                            |_, _| {
                                if self.rng.random::<bool>() {
                                    1.0
                                } else {
                                    -1.0
                                }
                            },
                        )
                    }
                };
                let norm = dir.norm();
                dir * (delta / norm)
            }
        }
    }
}

/// Column-aligned `t`-long data: `X1 = A X0 + B U0 + W0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    pub x0: Mat,
    pub u0: Mat,
    pub x1: Mat,
    /// Ground-truth noise, kept only for diagnostics and tests.
    pub w0: Option<Mat>,
}

impl DataBatch {
    pub fn new(x0: Mat, u0: Mat, x1: Mat, w0: Option<Mat>) -> Result<Self> {
        let t = x0.ncols();
        let ok = u0.ncols() == t
            && x1.ncols() == t
            && x1.nrows() == x0.nrows()
            && w0
                .as_ref()
                .is_none_or(|w| w.ncols() == t && w.nrows() == x0.nrows());
        if !ok {
            return Err(Error::Dimension("data batch columns disagree".into()));
        }
        Ok(Self { x0, u0, x1, w0 })
    }

    pub fn t(&self) -> usize {
        self.x0.ncols()
    }

    pub fn n(&self) -> usize {
        self.x0.nrows()
    }

    pub fn m(&self) -> usize {
        self.u0.nrows()
    }

    /// `D0 = [U0; X0]`.
    pub fn d0(&self) -> Mat {
        stack_rows(&self.u0, &self.x0)
    }

    /// First `t` columns.
    pub fn prefix(&self, t: usize) -> DataBatch {
        DataBatch {
            x0: self.x0.columns(0, t).into_owned(),
            u0: self.u0.columns(0, t).into_owned(),
            x1: self.x1.columns(0, t).into_owned(),
            w0: self.w0.as_ref().map(|w| w.columns(0, t).into_owned()),
        }
    }

    pub fn column(&self, k: usize) -> (Vector, Vector, Vector) {
        (
            self.x0.column(k).into_owned(),
            self.u0.column(k).into_owned(),
            self.x1.column(k).into_owned(),
        )
    }

    /// Writes the trajectory CSV (`t, x_1..x_n, u_1..u_m, w_1..w_n`). Rows
    /// `0..t` carry `(x_k, u_k, w_k)`; a final row carries `x_t` alone. Only
    /// valid for consecutive trajectories (`X1[:, k] == X0[:, k + 1]`).
    pub fn write_trajectory_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (n, m, t) = (self.n(), self.m(), self.t());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.extend((1..=n).map(|i| format!("w_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..=t {
            let mut row = vec![k.to_string()];
            if k < t {
                row.extend(self.x0.column(k).iter().map(|v| format!("{v:e}")));
                row.extend(self.u0.column(k).iter().map(|v| format!("{v:e}")));
                match &self.w0 {
                    Some(w) => row.extend(w.column(k).iter().map(|v| format!("{v:e}"))),
                    None => row.extend(std::iter::repeat_n(String::new(), n)),
                }
            } else {
                row.extend(self.x1.column(t - 1).iter().map(|v| format!("{v:e}")));
                row.extend(std::iter::repeat_n(String::new(), m + n));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let n = cols.iter().filter(|c| c.starts_with("x_")).count();
        let m = cols.iter().filter(|c| c.starts_with("u_")).count();
        let nw = cols.iter().filter(|c| c.starts_with("w_")).count();
        if cols.first() != Some(&"t") || n == 0 || m == 0 || nw != n || cols.len() != 1 + 2 * n + m
        {
            return Err(Error::Parse(format!("bad trajectory header: {header}")));
        }
        let mut xs: Vec<Vector> = Vec::new();
        let mut us: Vec<Vector> = Vec::new();
        let mut ws: Vec<Option<Vector>> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "row {}: wrong field count",
                    lineno + 2
                )));
            }
            let parse = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::Parse(format!("row {}: {s:?}: {e}", lineno + 2)))
                }
            };
            let vals = fields[1..]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<Vec<_>>>()?;
            let x: Option<Vec<f64>> = vals[..n].iter().copied().collect();
            let u: Option<Vec<f64>> = vals[n..n + m].iter().copied().collect();
            let w: Option<Vec<f64>> = vals[n + m..].iter().copied().collect();
            let x = x.ok_or_else(|| Error::Parse(format!("row {}: missing state", lineno + 2)))?;
            xs.push(Vector::from_vec(x));
            match u {
                Some(u) => {
                    us.push(Vector::from_vec(u));
                    ws.push(w.map(Vector::from_vec));
                }
                None => break,
            }
        }
        let t = us.len();
        if t == 0 || xs.len() != t + 1 {
            return Err(Error::Parse(
                "trajectory must end with a state-only row".into(),
            ));
        }
        let x0 = Mat::from_columns(&xs[..t]);
        let x1 = Mat::from_columns(&xs[1..]);
        let u0 = Mat::from_columns(&us);
        let w0 = if ws.iter().all(Option::is_some) {
            let cols: Vec<Vector> = ws.into_iter().flatten().collect();
            Some(Mat::from_columns(&cols))
        } else {
            None
        };
        DataBatch::new(x0, u0, x1, w0)
    }
}

pub fn stack_rows(top: &Mat, bottom: &Mat) -> Mat {
    let mut out = Mat::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// `psi = [u; x]`.
pub fn stack_sample(u: &Vector, x: &Vector) -> Vector {
    let mut psi = Vector::zeros(u.len() + x.len());
    psi.rows_mut(0, u.len()).copy_from(u);
    psi.rows_mut(u.len(), x.len()).copy_from(x);
    psi
}

/// Simulates `horizon` steps of `x_{t+1} = A x_t + B u_t + w_t`.
pub fn simulate<F>(
    sys: &LinearSystem,
    mut input_policy: F,
    noise: &NoiseModel,
    horizon: usize,
    x0: &Vector,
) -> Result<DataBatch>
where
    F: FnMut(usize, &Vector) -> Vector,
{
    if horizon == 0 {
        return Err(Error::InvalidValue("horizon must be at least 1".into()));
    }
    let (n, m) = (sys.n(), sys.m());
    let mut plant = Plant::new(sys.clone(), x0.clone(), noise);
    let mut xs = Mat::zeros(n, horizon);
    let mut us = Mat::zeros(m, horizon);
    let mut xn = Mat::zeros(n, horizon);
    let mut ws = Mat::zeros(n, horizon);
    for t in 0..horizon {
        let x = plant.x.clone();
        let u = input_policy(t, &x);
        let (w, next) = plant.step(&u)?;
        xs.set_column(t, &x);
        us.set_column(t, &u);
        ws.set_column(t, &w);
        xn.set_column(t, &next);
    }
    DataBatch::new(xs, us, xn, Some(ws))
}

/// A plant being driven one step at a time, with its own noise stream.
pub struct Plant {
    pub sys: LinearSystem,
    pub x: Vector,
    pub t: usize,
    sampler: NoiseSampler,
}

impl Plant {
    pub fn new(sys: LinearSystem, x0: Vector, noise: &NoiseModel) -> Self {
        Self {
            sys,
            x: x0,
            t: 0,
            sampler: noise.sampler(),
        }
    }

    /// Swaps the true dynamics, keeping state and noise stream.
    pub fn switch_system(&mut self, sys: LinearSystem) {
        self.sys = sys;
    }

    /// Applies `u`, returns `(w_t, x_{t+1})` and advances.
    pub fn step(&mut self, u: &Vector) -> Result<(Vector, Vector)> {
        let w = self.sampler.sample(&self.x);
        let next = &self.sys.a * &self.x + &self.sys.b * u + &w;
        let norm = next.norm();
        if !norm.is_finite() || norm > OVERFLOW_GUARD {
            return Err(Error::Divergence { norm, step: self.t });
        }
        self.x = next.clone();
        self.t += 1;
        Ok((w, next))
    }
}

/// Gaussian input policy `u_t ~ N(0, scale^2 I)` on its own stream.
pub fn gaussian_inputs(m: usize, scale: f64, seed: u64) -> impl FnMut(usize, &Vector) -> Vector {
    let mut rng = stream_rng(seed, stream::OFFLINE_INPUT);
    move |_, _| normal_vector(&mut rng, m) * scale
}

/// Non-trajectory batch with i.i.d. standard normal `X0`, `U0` and
/// `noise_scale * N(0, 1)` noise, `X1 = A X0 + B U0 + W0`.
pub fn iid_batch(sys: &LinearSystem, t: usize, noise_scale: f64, seed: u64) -> DataBatch {
    let mut rng = stream_rng(seed, stream::BATCH);
    let x0 = normal_matrix(&mut rng, sys.n(), t);
    let u0 = normal_matrix(&mut rng, sys.m(), t);
    let w0 = normal_matrix(&mut rng, sys.n(), t) * noise_scale;
    let x1 = &sys.a * &x0 + &sys.b * &u0 + &w0;
    DataBatch {
        x0,
        u0,
        x1,
        w0: Some(w0),
    }
}

/// Running sample covariances of input-state data.
///
/// `Phi = D0 S D0' / t`, `Ubar = U0 S D0' / t`, `Xbar0 = X0 S D0' / t`,
/// `Xbar1 = X1 S D0' / t` with `S = diag(beta^{t-1}, ..., 1)`.
#[derive(Debug, Clone)]
pub struct CovarianceState {
    pub ubar: Mat,
    pub xbar0: Mat,
    pub xbar1: Mat,
    pub phi: Mat,
    pub phi_inv: Mat,
    pub t: usize,
    pub forgetting: f64,
    since_refresh: usize,
    refreshes: usize,
}

impl CovarianceState {
    pub fn n(&self) -> usize {
        self.xbar0.nrows()
    }

    pub fn m(&self) -> usize {
        self.ubar.nrows()
    }

    /// Number of direct re-inversions triggered so far.
    pub fn refresh_count(&self) -> usize {
        self.refreshes
    }

    pub fn with_forgetting(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "forgetting factor {beta} not in (0, 1]"
            )));
        }
        self.forgetting = beta;
        Ok(self)
    }

    /// `|Phi PhiInv - I|_max`.
    pub fn inverse_drift(&self) -> f64 {
        let k = self.phi.nrows();
        max_abs(&(&self.phi * &self.phi_inv - Mat::identity(k, k)))
    }

    /// Smallest singular value of the (weighted) `D0`, `sqrt(t * lambda_min(Phi))`.
    pub fn sigma_min_d0(&self) -> f64 {
        let lmin = self.phi.clone().symmetric_eigenvalues().min().max(0.0);
        (self.t as f64 * lmin).sqrt()
    }

    /// Recomputes `PhiInv` from `Phi` directly.
    pub fn refresh_inverse(&mut self) -> Result<()> {
        self.phi_inv = invert_spd(&self.phi)?;
        self.since_refresh = 0;
        self.refreshes += 1;
        Ok(())
    }

    /// Adds the sample `(x_t, u_t, x_{t+1})`.
    pub fn rank_one_update(&mut self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<()> {
        self.rank_one_update_inner(x, u, x_next, None).map(|_| ())
    }

    /// Adds a sample and carries a policy `V'` with `Phi_t V' = [K; I]`
    /// through to `V = Phi_{t+1}^{-1} Phi_t V'` by the rank-one formula.
    pub fn rank_one_update_with_policy(
        &mut self,
        x: &Vector,
        u: &Vector,
        x_next: &Vector,
        v_prime: &Mat,
    ) -> Result<Mat> {
        self.rank_one_update_inner(x, u, x_next, Some(v_prime))
            .map(|v| v.expect("policy requested"))
    }

    fn rank_one_update_inner(
        &mut self,
        x: &Vector,
        u: &Vector,
        x_next: &Vector,
        v_prime: Option<&Mat>,
    ) -> Result<Option<Mat>> {
        let (n, m) = (self.n(), self.m());
        if x.len() != n || u.len() != m || x_next.len() != n {
            return Err(Error::Dimension("sample does not match covariance".into()));
        }
        let psi = stack_sample(u, x);
        let t = self.t as f64;
        let bt = self.forgetting * t;
        let old = bt / (t + 1.0);
        let new = 1.0 / (t + 1.0);

        let phi_inv_psi = &self.phi_inv * &psi;
        let denom = bt + psi.dot(&phi_inv_psi);
        if !(denom > SM_DENOM_MIN) {
            return Err(Error::SingularUpdate { denom });
        }
        let policy = v_prime.map(|vp| {
            let correction = &phi_inv_psi * (psi.transpose() * vp) / denom;
            (vp - correction) * ((t + 1.0) / bt)
        });
        let scale = (t + 1.0) / bt;
        let mut phi_inv = (&self.phi_inv - &phi_inv_psi * phi_inv_psi.transpose() / denom) * scale;
        phi_inv = (&phi_inv + phi_inv.transpose()) * 0.5;

        let psi_t = psi.transpose();
        self.ubar = &self.ubar * old + u * &psi_t * new;
        self.xbar0 = &self.xbar0 * old + x * &psi_t * new;
        self.xbar1 = &self.xbar1 * old + x_next * &psi_t * new;
        self.phi = stack_rows(&self.ubar, &self.xbar0);
        self.phi_inv = phi_inv;
        self.t += 1;
        self.since_refresh += 1;

        if self.since_refresh >= REFRESH_PERIOD || self.inverse_drift() > INVERSE_DRIFT_TOL {
            self.refresh_inverse()?;
        }
        Ok(policy)
    }
}

fn invert_spd(phi: &Mat) -> Result<Mat> {
    let k = phi.nrows();
    let sym = (phi + phi.transpose()) * 0.5;
    match sym.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => sym
            .lu()
            .solve(&Mat::identity(k, k))
            .ok_or(Error::RankDeficient { sigma_min: 0.0 }),
    }
}

/// Sample covariances of a batch (uniform weights).
pub fn build_covariances(batch: &DataBatch) -> Result<CovarianceState> {
    build_covariances_weighted(batch, 1.0)
}

/// Sample covariances with geometric weights `S = diag(beta^{t-1}, ..., 1)`,
/// normalized by `t`.
pub fn build_covariances_weighted(batch: &DataBatch, beta: f64) -> Result<CovarianceState> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidValue(format!(
            "forgetting factor {beta} not in (0, 1]"
        )));
    }
    let t = batch.t();
    let d0 = batch.d0();
    let k = d0.nrows();
    if t < k {
        return Err(Error::RankDeficient {
            sigma_min: if t == 0 { 0.0 } else { sigma_min(&d0) },
        });
    }
    let sv = singular_values(&d0);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smax == 0.0 || smin <= RANK_TOL_REL * smax {
        return Err(Error::RankDeficient { sigma_min: smin });
    }
    let weights = Vector::from_fn(t, |j, _| beta.powi((t - 1 - j) as i32));
    let mut weighted = d0.clone();
    for (j, mut col) in weighted.column_iter_mut().enumerate() {
        col *= weights[j];
    }
    let inv_t = 1.0 / t as f64;
    let dt = weighted.transpose();
    let ubar = &batch.u0 * &dt * inv_t;
    let xbar0 = &batch.x0 * &dt * inv_t;
    let xbar1 = &batch.x1 * &dt * inv_t;
    let phi = stack_rows(&ubar, &xbar0);
    let phi_inv = invert_spd(&phi)?;
    Ok(CovarianceState {
        ubar,
        xbar0,
        xbar1,
        phi,
        phi_inv,
        t,
        forgetting: beta,
        since_refresh: 0,
        refreshes: 0,
    })
}

/// Block Hankel matrix with `order` block rows.
pub fn hankel(u0: &Mat, order: usize) -> Mat {
    let (m, t) = (u0.nrows(), u0.ncols());
    let cols = t + 1 - order;
    let mut h = Mat::zeros(m * order, cols);
    for i in 0..order {
        h.view_mut((i * m, 0), (m, cols))
            .copy_from(&u0.columns(i, cols));
    }
    h
}

/// `sigma_min(H_order(U0)) / sqrt(t * order)`; zero when the Hankel matrix
/// cannot have full row rank.
pub fn pe_level(u0: &Mat, order: usize) -> Result<f64> {
    let t = u0.ncols();
    if order == 0 || t < order + 1 {
        return Err(Error::InsufficientData {
            needed: order + 1,
            have: t,
        });
    }
    let h = hankel(u0, order);
    if h.nrows() > h.ncols() {
        return Ok(0.0);
    }
    Ok(sigma_min(&h) / ((t * order) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrDiagnostics {
    pub sigma_min_d0: f64,
    pub noise_norm: f64,
    pub snr_db: f64,
}

/// `20 log10(sigma_min(D0) / |W0|)`, `+inf` for zero noise.
pub fn snr_diagnostics(batch: &DataBatch) -> Result<SnrDiagnostics> {
    let w0 = batch.w0.as_ref().ok_or(Error::MissingNoise)?;
    let d0 = batch.d0();
    let sigma_min_d0 = if d0.nrows() > d0.ncols() {
        0.0
    } else {
        sigma_min(&d0)
    };
    let noise_norm = crate::numerics::norm2(w0);
    Ok(SnrDiagnostics {
        sigma_min_d0,
        noise_norm,
        snr_db: snr_db(sigma_min_d0, noise_norm),
    })
}

pub fn snr_db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (signal / noise).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{four_state_benchmark, random_system};
    use crate::numerics::rank;

    fn random_batch(seed: u64, t: usize) -> DataBatch {
        let sys = random_system(4, 2, seed).unwrap();
        simulate(
            &sys,
            gaussian_inputs(2, 1.0, seed),
            &NoiseModel::gaussian(0.1, seed),
            t,
            &Vector::zeros(4),
        )
        .unwrap()
    }

    #[test]
    fn noise_free_zero_plant() {
        let sys = LinearSystem::with_unit_weights(Mat::zeros(2, 2), Mat::identity(2, 1)).unwrap();
        let b = simulate(
            &sys,
            |_, _| Vector::zeros(1),
            &NoiseModel::none(),
            3,
            &Vector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(b.x1, Mat::zeros(2, 3));
    }

    #[test]
    fn dynamics_identity_holds() {
        let sys = four_state_benchmark();
        let b = simulate(
            &sys,
            gaussian_inputs(2, 1.0, 4),
            &NoiseModel::uniform(0.1, 4),
            50,
            &Vector::zeros(4),
        )
        .unwrap();
        let resid = &b.x1 - &sys.a * &b.x0 - &sys.b * &b.u0 - b.w0.as_ref().unwrap();
        assert!(max_abs(&resid) <= 1e-12);
        let w = b.w0.unwrap();
        assert!(w.iter().all(|&v| (0.0..=0.1).contains(&v)));
    }

    #[test]
    fn offline_trajectory_is_full_rank() {
        let sys = four_state_benchmark();
        let b = simulate(
            &sys,
            gaussian_inputs(2, 1.0, 1),
            &NoiseModel::gaussian(1.0, 1),
            8,
            &Vector::zeros(4),
        )
        .unwrap();
        assert_eq!(rank(&b.d0()), 6);
    }

    #[test]
    fn divergence_guard_trips() {
        let sys =
            LinearSystem::with_unit_weights(Mat::from_element(1, 1, 10.0), Mat::identity(1, 1))
                .unwrap();
        let r = simulate(
            &sys,
            |_, _| Vector::zeros(1),
            &NoiseModel::none(),
            100,
            &Vector::from_element(1, 1.0),
        );
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn covariances_of_identity_data() {
        let d = Mat::identity(3, 3);
        let batch = DataBatch::new(
            d.rows(2, 1).into_owned(),
            d.rows(0, 2).into_owned(),
            Mat::zeros(1, 3),
            None,
        )
        .unwrap();
        let cov = build_covariances(&batch).unwrap();
        assert!(max_abs(&(&cov.phi - Mat::identity(3, 3) / 3.0)) < 1e-15);
    }

    #[test]
    fn covariances_match_brute_force_sum() {
        let b = random_batch(2, 8);
        let cov = build_covariances(&b).unwrap();
        let mut phi = Mat::zeros(6, 6);
        for k in 0..8 {
            let (x, u, _) = b.column(k);
            let psi = stack_sample(&u, &x);
            phi += &psi * psi.transpose();
        }
        phi /= 8.0;
        assert!(max_abs(&(&cov.phi - phi)) < 1e-12);
        assert!(max_abs(&(&cov.phi - stack_rows(&cov.ubar, &cov.xbar0))) <= 1e-12);
    }

    #[test]
    fn rank_deficient_batch_is_rejected() {
        let b = random_batch(3, 5);
        assert!(matches!(
            build_covariances(&b),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn zero_sample_scales_phi() {
        let b = random_batch(5, 10);
        let mut cov = build_covariances(&b).unwrap();
        let before = cov.clone();
        cov.rank_one_update(&Vector::zeros(4), &Vector::zeros(2), &Vector::zeros(4))
            .unwrap();
        assert!(max_abs(&(&cov.phi - &before.phi * (10.0 / 11.0))) < 1e-14);
        assert!(max_abs(&(&cov.phi_inv - &before.phi_inv * (11.0 / 10.0))) < 1e-9);
    }

    #[test]
    fn rank_one_update_matches_batch() {
        let b = random_batch(6, 40);
        let mut cov = build_covariances(&b.prefix(10)).unwrap();
        for k in 10..40 {
            let (x, u, xn) = b.column(k);
            cov.rank_one_update(&x, &u, &xn).unwrap();
        }
        let direct = build_covariances(&b).unwrap();
        assert!(max_abs(&(&cov.phi - &direct.phi)) <= 1e-10);
        assert!(max_abs(&(&cov.xbar1 - &direct.xbar1)) <= 1e-10);
        assert!(cov.inverse_drift() <= 1e-8);
        assert_eq!(cov.t, 40);
    }

    #[test]
    fn forgetting_matches_weighted_sum() {
        let b = random_batch(7, 60);
        let beta = 0.95;
        let mut cov = build_covariances_weighted(&b.prefix(10), beta).unwrap();
        for k in 10..60 {
            let (x, u, xn) = b.column(k);
            cov.rank_one_update(&x, &u, &xn).unwrap();
        }
        let mut phi = Mat::zeros(6, 6);
        let mut xbar1 = Mat::zeros(4, 6);
        for k in 0..60 {
            let (x, u, xn) = b.column(k);
            let psi = stack_sample(&u, &x);
            let w = beta.powi((59 - k) as i32) / 60.0;
            phi += &psi * psi.transpose() * w;
            xbar1 += &xn * psi.transpose() * w;
        }
        assert!(max_abs(&(&cov.phi - phi)) <= 1e-10);
        assert!(max_abs(&(&cov.xbar1 - xbar1)) <= 1e-10);
        assert!(cov.inverse_drift() <= 1e-8);
    }

    #[test]
    fn pe_level_examples() {
        let constant = Mat::from_element(1, 50, 2.0);
        assert!(pe_level(&constant, 2).unwrap() < 1e-12);
        assert!(matches!(
            pe_level(&constant.columns(0, 2).into_owned(), 2),
            Err(Error::InsufficientData { .. })
        ));
        let impulse = |t: usize| {
            let mut u = Mat::zeros(2, t);
            u[(0, 0)] = 1.0;
            u
        };
        let small = pe_level(&impulse(50), 3).unwrap();
        let large = pe_level(&impulse(5000), 3).unwrap();
        assert!(large <= small);
        assert!(large < 1e-3);
    }

    #[test]
    fn pe_level_gaussian_is_stable_across_seeds() {
        let levels: Vec<f64> = (0..10)
            .map(|s| {
                let mut rng = stream_rng(s, 0);
                pe_level(&normal_matrix(&mut rng, 2, 200), 5).unwrap()
            })
            .collect();
        let mean = levels.iter().sum::<f64>() / levels.len() as f64;
        assert!(mean > 0.0);
        assert!(levels.iter().all(|&l| l > 0.5 * mean && l < 1.5 * mean));
    }

    #[test]
    fn snr_examples() {
        let mut b = random_batch(8, 8);
        let base = snr_diagnostics(&b).unwrap();
        assert!(base.snr_db.is_finite());
        b.w0 = b.w0.map(|w| w * 2.0);
        let doubled = snr_diagnostics(&b).unwrap();
        assert!((base.snr_db - doubled.snr_db - 20.0 * 2f64.log10()).abs() < 1e-10);
        b.w0 = Some(Mat::zeros(4, 8));
        assert!(snr_diagnostics(&b).unwrap().snr_db.is_infinite());
        b.w0 = None;
        assert!(matches!(snr_diagnostics(&b), Err(Error::MissingNoise)));
    }

    #[test]
    fn adversarial_noise_is_bounded() {
        for strategy in [
            AdversarialStrategy::Constant,
            AdversarialStrategy::AlignedWithState,
            AdversarialStrategy::RandomSign,
        ] {
            let mut s = NoiseModel::adversarial(0.3, strategy, 1).sampler();
            for k in 0..20 {
                let x = Vector::from_vec(vec![k as f64, -1.0, 0.5]);
                assert!(s.sample(&x).norm() <= 0.3 + 1e-15);
            }
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let b = random_batch(9, 12);
        let mut buf = Vec::new();
        b.write_trajectory_csv(&mut buf).unwrap();
        let back = DataBatch::read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back.t(), 12);
        assert!(max_abs(&(&back.x1 - &b.x1)) < 1e-14 * max_abs(&b.x1).max(1.0));
        assert!(back.w0.is_some());
    }
}
