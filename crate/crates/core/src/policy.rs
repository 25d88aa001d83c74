//! LQR with covariance parameterization.
//!
//! A gain `K` is represented through `V` with `Phi V = [K; I_n]`, so that
//! `K = Ubar V` and the closed loop is (up to noise) `Xbar1 V`. The data-driven
//! cost is
//!
//! ```text
//! J(V) = Tr((Q + V'Ubar'R Ubar V) Sigma_V),   Sigma_V = I + Xbar1 V Sigma_V V'Xbar1'
//!      = Tr(P_V),                             P_V = Q + V'Ubar'R Ubar V + V'Xbar1' P_V Xbar1 V
//! ```
//!
//! and is minimized by projected gradient descent on the affine set
//! `Xbar0 V = I_n`.

use std::io::Write;

use crate::data::{CovarianceState, DataBatch};
use crate::error::{Error, Result};
use crate::model::LinearSystem;
use crate::numerics::{
    max_abs, norm2, nullspace_projector, right_pseudoinverse, sigma_min, solve_dare,
    solve_discrete_lyapunov, spectral_radius, Mat, RANK_TOL_REL, STABILITY_MARGIN,
};

/// Tolerance on the subspace constraint `Xbar0 V = I`.
pub const CONS_TOL: f64 = 1e-8;
/// Backtracking gives up below this stepsize.
pub const MIN_ETA: f64 = 1e-12;
/// Clean steps after which a halved stepsize is restored.
pub const RESTORE_AFTER: usize = 10;
/// Increase in `J` attributed to roundoff rather than a bad step.
const ROUNDOFF_SLACK: f64 = 8.0 * f64::EPSILON;

/// LQR weights used by the data-driven cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub q: Mat,
    pub r: Mat,
}

impl Weights {
    pub fn new(q: Mat, r: Mat) -> Self {
        Self { q, r }
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            q: Mat::identity(n, n),
            r: Mat::identity(m, m),
        }
    }

    pub fn of(sys: &LinearSystem) -> Self {
        Self {
            q: sys.q.clone(),
            r: sys.r.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyV {
    pub v: Mat,
    pub feasible: bool,
}

impl PolicyV {
    /// Wraps `v` and evaluates its feasibility against `cov`.
    pub fn new(cov: &CovarianceState, v: Mat) -> Self {
        let feasible = is_feasible(cov, &v);
        Self { v, feasible }
    }

    pub fn constraint_violation(&self, cov: &CovarianceState) -> f64 {
        constraint_violation(cov, &self.v)
    }

    pub fn closed_loop(&self, cov: &CovarianceState) -> Mat {
        &cov.xbar1 * &self.v
    }
}

/// `|Xbar0 V - I|_max`.
pub fn constraint_violation(cov: &CovarianceState, v: &Mat) -> f64 {
    let n = cov.n();
    max_abs(&(&cov.xbar0 * v - Mat::identity(n, n)))
}

pub fn is_feasible(cov: &CovarianceState, v: &Mat) -> bool {
    v.iter().all(|x| x.is_finite())
        && constraint_violation(cov, v) <= CONS_TOL
        && spectral_radius(&(&cov.xbar1 * v)).is_ok_and(|rho| rho < 1.0 - STABILITY_MARGIN)
}

/// `V = Phi^{-1} [K; I_n]`.
pub fn k_to_v(cov: &CovarianceState, k: &Mat) -> PolicyV {
    PolicyV::new(cov, k_to_v_raw(cov, k))
}

pub(crate) fn k_to_v_raw(cov: &CovarianceState, k: &Mat) -> Mat {
    let n = cov.n();
    let stacked = crate::data::stack_rows(k, &Mat::identity(n, n));
    &cov.phi_inv * stacked
}

/// `K = Ubar V`.
pub fn v_to_k(cov: &CovarianceState, v: &PolicyV) -> Mat {
    &cov.ubar * &v.v
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostBundle {
    pub j: f64,
    pub p_v: Mat,
    pub sigma_v: Mat,
}

impl CostBundle {
    fn infeasible(n: usize) -> Self {
        Self {
            j: f64::INFINITY,
            p_v: Mat::zeros(n, n),
            sigma_v: Mat::zeros(n, n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.j.is_finite()
    }
}

/// `J(V)` with its Lyapunov solutions; `J = +inf` when `V` is infeasible.
pub fn cost(cov: &CovarianceState, w: &Weights, v: &PolicyV) -> Result<CostBundle> {
    if !v.feasible {
        return Ok(CostBundle::infeasible(cov.n()));
    }
    cost_of_matrix(cov, w, &v.v)
}

/// `J` at an arbitrary `V` with `rho(Xbar1 V) < 1`, ignoring the subspace
/// constraint. Returns the sentinel when the closed loop is not stable.
pub fn cost_of_matrix(cov: &CovarianceState, w: &Weights, v: &Mat) -> Result<CostBundle> {
    let n = cov.n();
    let acl = &cov.xbar1 * v;
    let sigma_v = match solve_discrete_lyapunov(&acl, &Mat::identity(n, n)) {
        Ok(s) => s,
        Err(Error::SpectralRadius { .. }) => return Ok(CostBundle::infeasible(n)),
        Err(e) => return Err(e),
    };
    let k = &cov.ubar * v;
    let stage = &w.q + k.transpose() * &w.r * &k;
    let p_v = solve_discrete_lyapunov(&acl.transpose(), &stage)?;
    Ok(CostBundle {
        j: p_v.trace(),
        p_v,
        sigma_v,
    })
}

/// `J(V)` when `V` is feasible, else the `+inf` sentinel. Stability is
/// certified by the Lyapunov solves, so no separate eigenvalue check runs.
pub fn feasible_cost(cov: &CovarianceState, w: &Weights, v: &Mat) -> Result<CostBundle> {
    if !v.iter().all(|x| x.is_finite()) || constraint_violation(cov, v) > CONS_TOL {
        return Ok(CostBundle::infeasible(cov.n()));
    }
    cost_of_matrix(cov, w, v)
}

/// `J(V) = Tr(P_V)` alone (one Lyapunov solve), `+inf` when infeasible.
pub fn feasible_cost_value(cov: &CovarianceState, w: &Weights, v: &Mat) -> Result<f64> {
    if !v.iter().all(|x| x.is_finite()) || constraint_violation(cov, v) > CONS_TOL {
        return Ok(f64::INFINITY);
    }
    let acl = &cov.xbar1 * v;
    let k = &cov.ubar * v;
    let stage = &w.q + k.transpose() * &w.r * &k;
    match solve_discrete_lyapunov(&acl.transpose(), &stage) {
        Ok(p) => Ok(p.trace()),
        Err(Error::SpectralRadius { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// `E_V = (Ubar'R Ubar + Xbar1' P_V Xbar1) V`.
fn e_v(cov: &CovarianceState, w: &Weights, v: &Mat, p_v: &Mat) -> Mat {
    curvature(cov, w, p_v) * v
}

fn curvature(cov: &CovarianceState, w: &Weights, p_v: &Mat) -> Mat {
    cov.ubar.transpose() * &w.r * &cov.ubar + cov.xbar1.transpose() * p_v * &cov.xbar1
}

/// `grad J(V) = 2 (Ubar'R Ubar + Xbar1' P_V Xbar1) V Sigma_V`.
pub fn gradient(cov: &CovarianceState, w: &Weights, v: &PolicyV) -> Result<Mat> {
    if !v.feasible {
        return Err(Error::Infeasible("gradient at an infeasible policy".into()));
    }
    let bundle = cost(cov, w, v)?;
    Ok(gradient_from_bundle(cov, w, &v.v, &bundle))
}

pub fn gradient_from_bundle(cov: &CovarianceState, w: &Weights, v: &Mat, b: &CostBundle) -> Mat {
    e_v(cov, w, v, &b.p_v) * &b.sigma_v * 2.0
}

/// `Pi_{Xbar0} = I - Xbar0^+ Xbar0`.
pub fn projector(cov: &CovarianceState) -> Result<Mat> {
    nullspace_projector(&cov.xbar0)
}

/// [`projector`] without the rank check. `Xbar0` is a row block of the
/// invertible `Phi`, so it always has full row rank while `Phi^{-1}` exists.
pub fn projector_full_rank(cov: &CovarianceState) -> Result<Mat> {
    let x = &cov.xbar0;
    let chol = (x * x.transpose())
        .cholesky()
        .ok_or(Error::RankDeficient { sigma_min: 0.0 })?;
    let q = x.ncols();
    Ok(Mat::identity(q, q) - x.transpose() * chol.solve(x))
}

/// Second derivative of `J` along `Z`:
/// `4 Tr(Z'Xbar1' P'[Z] Xbar1 V Sigma_V) + 2 Tr(Z'(Ubar'R Ubar + Xbar1'P_V Xbar1) Z Sigma_V)`
/// with `P'[Z] = Z'E_V + E_V'Z + V'Xbar1' P'[Z] Xbar1 V`.
pub fn hessian_quadratic_form(
    cov: &CovarianceState,
    w: &Weights,
    v: &PolicyV,
    z: &Mat,
) -> Result<f64> {
    if !v.feasible {
        return Err(Error::Infeasible("Hessian at an infeasible policy".into()));
    }
    if z.shape() != v.v.shape() {
        return Err(Error::Dimension("direction shape differs from V".into()));
    }
    let bundle = cost(cov, w, v)?;
    let acl = &cov.xbar1 * &v.v;
    let curv = curvature(cov, w, &bundle.p_v);
    let e = &curv * &v.v;
    let forcing = z.transpose() * &e + e.transpose() * z;
    let p_prime = solve_discrete_lyapunov(&acl.transpose(), &forcing)?;
    let first = (z.transpose() * cov.xbar1.transpose() * &p_prime * &acl * &bundle.sigma_v).trace();
    let second = (z.transpose() * &curv * z * &bundle.sigma_v).trace();
    Ok(4.0 * first + 2.0 * second)
}

/// One row of an optimization trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub j: f64,
    pub proj_grad_norm: f64,
    pub rho_x1v: f64,
    /// Stepsize used to leave this iterate (0 for the last row).
    pub eta_used: f64,
}

#[derive(Debug, Clone)]
pub struct OfflineResult {
    pub policy: PolicyV,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Number of halvings performed by the backtracking guard.
    pub backtracks: usize,
}

impl OfflineResult {
    pub fn costs(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.j).collect()
    }

    pub fn final_cost(&self) -> f64 {
        self.trace.last().map_or(f64::INFINITY, |r| r.j)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_trace_csv(&self.trace, out)
    }
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "iter,J,proj_grad_norm,rho_X1V,eta_used")?;
    for r in trace {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e}",
            r.iter, r.j, r.proj_grad_norm, r.rho_x1v, r.eta_used
        )?;
    }
    Ok(())
}

/// Projected gradient descent `V <- V - eta Pi grad J(V)` on fixed data.
///
/// Steps that leave the feasible set or increase `J` are halved; the
/// nominal stepsize is restored after [`RESTORE_AFTER`] clean steps.
/// Terminates when `|Pi grad J|_F <= grad_tol` or after `max_iters` steps.
pub fn offline_deepo(
    cov: &CovarianceState,
    w: &Weights,
    v0: &PolicyV,
    eta: f64,
    max_iters: usize,
    grad_tol: f64,
) -> Result<OfflineResult> {
    if !(eta > 0.0) {
        return Err(Error::InvalidValue(format!(
            "stepsize {eta} must be positive"
        )));
    }
    if !v0.feasible {
        return Err(Error::Infeasible("initial policy is not feasible".into()));
    }
    let proj = projector(cov)?;
    let mut v = v0.v.clone();
    let mut bundle = cost_of_matrix(cov, w, &v)?;
    let mut trace = Vec::new();
    let mut step = eta;
    let mut clean = 0usize;
    let mut backtracks = 0usize;
    let rho_of = |v: &Mat| spectral_radius(&(&cov.xbar1 * v)).unwrap_or(f64::NAN);

    for iter in 0..=max_iters {
        let pg = &proj * gradient_from_bundle(cov, w, &v, &bundle);
        let pg_norm = pg.norm();
        let row = TraceRow {
            iter,
            j: bundle.j,
            proj_grad_norm: pg_norm,
            rho_x1v: rho_of(&v),
            eta_used: 0.0,
        };
        trace.push(row);
        if pg_norm <= grad_tol || iter == max_iters {
            let converged = pg_norm <= grad_tol;
            return Ok(OfflineResult {
                policy: PolicyV::new(cov, v),
                trace,
                converged,
                backtracks,
            });
        }
        loop {
            let candidate = &v - &pg * step;
            let next = if is_feasible(cov, &candidate) {
                Some(cost_of_matrix(cov, w, &candidate)?)
            } else {
                None
            };
            match next {
                Some(b) if b.is_finite() && b.j <= bundle.j * (1.0 + ROUNDOFF_SLACK) => {
                    trace.last_mut().expect("row pushed").eta_used = step;
                    v = candidate;
                    bundle = b;
                    clean += 1;
                    if clean >= RESTORE_AFTER {
                        step = eta;
                    }
                    break;
                }
                _ => {
                    step *= 0.5;
                    clean = 0;
                    backtracks += 1;
                    if step < MIN_ETA {
                        return Err(Error::StepRejected { min_eta: MIN_ETA });
                    }
                }
            }
        }
    }
    unreachable!("loop returns at iter == max_iters")
}

/// Result of comparing the covariance-parameterized optimum against
/// certainty-equivalence LQR on the least-squares model.
#[derive(Debug, Clone)]
pub struct Equivalence {
    pub j_star: f64,
    pub c_ce_star: f64,
    pub gap: f64,
    pub k_ce: Mat,
    pub policy: PolicyV,
}

/// Least-squares model `[B_hat, A_hat] = X1 D0^+`.
pub fn least_squares_model(batch: &DataBatch) -> Result<(Mat, Mat)> {
    let theta = &batch.x1 * right_pseudoinverse(&batch.d0())?;
    let m = batch.m();
    let n = batch.n();
    let b_hat = theta.columns(0, m).into_owned();
    let a_hat = theta.columns(m, n).into_owned();
    Ok((a_hat, b_hat))
}

/// Certainty-equivalence gain and cost `Tr(P_hat)` for the least-squares model.
pub fn certainty_equivalence(batch: &DataBatch, w: &Weights) -> Result<(Mat, f64)> {
    let (a_hat, b_hat) = least_squares_model(batch)?;
    let sol = solve_dare(&a_hat, &b_hat, &w.q, &w.r).map_err(|e| {
        Error::Infeasible(format!(
            "certainty-equivalence Riccati equation failed: {e}"
        ))
    })?;
    Ok((sol.k, sol.p.trace()))
}

pub fn equivalence_check(
    cov: &CovarianceState,
    w: &Weights,
    batch: &DataBatch,
) -> Result<Equivalence> {
    let (k_ce, c_ce_star) = certainty_equivalence(batch, w)?;
    let v = k_to_v(cov, &k_ce);
    if !v.feasible {
        return Err(Error::Infeasible(
            "certainty-equivalence gain is not feasible under the data closed loop".into(),
        ));
    }
    let res = offline_deepo(cov, w, &v, 1e-3, 1000, 1e-10)?;
    let j_star = res.final_cost();
    Ok(Equivalence {
        j_star,
        c_ce_star,
        gap: (j_star - c_ce_star).abs(),
        k_ce,
        policy: res.policy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    /// Projected gradient dominance constant `mu(a)`.
    pub mu: f64,
    /// Local smoothness constant `l(a)`.
    pub l: f64,
}

/// Gradient dominance and smoothness constants over the sublevel set
/// `{J <= a}`:
///
/// ```text
/// mu(a) = 4a^2 / (s(Q)^{3/2} s(R)^{1/2} s(Ubar))
/// l(a)  = 4a^2 (xi + a - s(Q)) |Xbar1|_F^2 / s(Q)^2 + 2 xi a / s(Q)
/// xi(a) = |Ubar|^2 |R| + |Xbar1|^2 a
/// ```
///
/// where `s(.)` is the smallest singular value and `|.|` the spectral norm.
pub fn theory_constants(cov: &CovarianceState, w: &Weights, a: f64) -> Result<TheoryConstants> {
    let sq = sigma_min(&w.q);
    let sr = sigma_min(&w.r);
    if a < sq {
        return Err(Error::InvalidValue(format!(
            "sublevel {a} below sigma_min(Q) = {sq}"
        )));
    }
    let su = sigma_min(&cov.ubar);
    let ubar_norm = norm2(&cov.ubar);
    if su <= RANK_TOL_REL * ubar_norm.max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(format!("sigma_min(Ubar) = {su:e}")));
    }
    let x1_norm = norm2(&cov.xbar1);
    let x1_fro2 = cov.xbar1.norm_squared();
    let xi = ubar_norm.powi(2) * norm2(&w.r) + x1_norm.powi(2) * a;
    let mu = 4.0 * a * a / (sq.powf(1.5) * sr.sqrt() * su);
    let l = 4.0 * a * a * (xi + a - sq) * x1_fro2 / (sq * sq) + 2.0 * xi * a / sq;
    Ok(TheoryConstants { mu, l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_covariances, gaussian_inputs, simulate, NoiseModel};
    use crate::model::{lqr_cost, optimal_gain, random_system, LinearSystem};
    use crate::numerics::Vector;

    fn noise_free(seed: u64) -> (LinearSystem, DataBatch, CovarianceState) {
        let sys = random_system(3, 2, seed).unwrap();
        let batch = simulate(
            &sys,
            gaussian_inputs(2, 1.0, seed),
            &NoiseModel::none(),
            20,
            &Vector::zeros(3),
        )
        .unwrap();
        let cov = build_covariances(&batch).unwrap();
        (sys, batch, cov)
    }

    #[test]
    fn identity_phi_stacks_gain() {
        let (_, _, mut cov) = noise_free(1);
        cov.phi_inv = Mat::identity(5, 5);
        let k = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = k_to_v(&cov, &k);
        assert_eq!(v.v.rows(0, 2), k);
        assert_eq!(v.v.rows(2, 3), Mat::identity(3, 3));
    }

    #[test]
    fn k_v_round_trip() {
        let (sys, _, cov) = noise_free(2);
        let k = optimal_gain(&sys).unwrap().gain.k;
        let v = k_to_v(&cov, &k);
        assert!(v.feasible);
        assert!(
            max_abs(&(&cov.phi * &v.v - crate::data::stack_rows(&k, &Mat::identity(3, 3)))) < 1e-8
        );
        assert!(max_abs(&(v_to_k(&cov, &v) - &k)) < 1e-8);
    }

    #[test]
    fn noise_free_closed_loop_and_cost() {
        let (sys, _, cov) = noise_free(3);
        let w = Weights::of(&sys);
        let k = Mat::zeros(2, 3);
        let v = k_to_v(&cov, &k);
        assert!(max_abs(&(sys.closed_loop(&v_to_k(&cov, &v)) - v.closed_loop(&cov))) < 1e-10);
        let b = cost(&cov, &w, &v).unwrap();
        let c = lqr_cost(&sys, &k);
        assert!((b.j - c).abs() / c < 1e-8);
        // dual formula
        let kk = v_to_k(&cov, &v);
        let alt = ((&w.q + kk.transpose() * &w.r * &kk) * &b.sigma_v).trace();
        assert!((alt - b.j).abs() / b.j < 1e-10);
    }

    #[test]
    fn infeasible_policy_costs_infinity() {
        let (sys, _, cov) = noise_free(4);
        let w = Weights::of(&sys);
        // closed loop 3 * I is unstable
        let k = sys.b.clone().pseudo_inverse(1e-12).unwrap() * (Mat::identity(3, 3) * 3.0 - &sys.a);
        let v = k_to_v(&cov, &k);
        assert!(!v.feasible);
        assert!(cost(&cov, &w, &v).unwrap().j.is_infinite());
        assert!(gradient(&cov, &w, &v).is_err());
    }

    #[test]
    fn zero_direction_has_zero_curvature() {
        let (sys, _, cov) = noise_free(5);
        let w = Weights::of(&sys);
        let v = k_to_v(&cov, &Mat::zeros(2, 3));
        let h = hessian_quadratic_form(&cov, &w, &v, &Mat::zeros(5, 3)).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn offline_recovers_true_optimum_without_noise() {
        let (sys, _, cov) = noise_free(6);
        let w = Weights::of(&sys);
        let opt = optimal_gain(&sys).unwrap();
        let v0 = k_to_v(&cov, &Mat::zeros(2, 3));
        let res = offline_deepo(&cov, &w, &v0, 0.05, 20_000, 1e-9).unwrap();
        let k = v_to_k(&cov, &res.policy);
        assert!(
            (&k - &opt.gain.k).norm() <= 1e-5,
            "{}",
            (&k - &opt.gain.k).norm()
        );
        let costs = res.costs();
        assert!(costs.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-13)));
    }

    #[test]
    fn optimum_start_terminates_immediately() {
        let (sys, _, cov) = noise_free(7);
        let w = Weights::of(&sys);
        let v0 = k_to_v(&cov, &Mat::zeros(2, 3));
        let star = offline_deepo(&cov, &w, &v0, 0.05, 20_000, 1e-9)
            .unwrap()
            .policy;
        let res = offline_deepo(&cov, &w, &star, 0.05, 100, 1e-9).unwrap();
        assert_eq!(res.trace.len(), 1);
        assert!(res.converged);
    }

    #[test]
    fn mu_scales_quadratically() {
        let (sys, _, cov) = noise_free(8);
        let w = Weights::of(&sys);
        let a = theory_constants(&cov, &w, 10.0).unwrap();
        let b = theory_constants(&cov, &w, 20.0).unwrap();
        assert!((b.mu / a.mu - 4.0).abs() < 1e-12);
        assert!(b.l > a.l);
        assert!(theory_constants(&cov, &w, 0.5).is_err());
    }

    #[test]
    fn trace_csv_has_header() {
        let rows = [TraceRow {
            iter: 0,
            j: 1.0,
            proj_grad_norm: 0.5,
            rho_x1v: 0.3,
            eta_used: 0.1,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iter,J,proj_grad_norm,rho_X1V,eta_used\n0,"));
    }
}
