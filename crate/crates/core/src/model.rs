//! Ground-truth plants, true LQR cost and optimal gains.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    self, is_stable, rank, solve_dare, solve_discrete_lyapunov, spectral_radius, Mat,
};
use crate::rng::{normal_matrix, stream, stream_rng};

const FOUR_STATE_FIXTURE: &str = include_str!("../fixtures/four_state.txt");
const LAPLACIAN_FIXTURE: &str = include_str!("../fixtures/laplacian.txt");

const GENERATION_ATTEMPTS: usize = 100;
/// Open-loop spectral radius band for generated systems.
pub const RANDOM_RHO_BAND: (f64, f64) = (0.5, 0.95);

/// `x_{t+1} = A x_t + B u_t + w_t` with stage cost `x'Qx + u'Ru`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: Mat,
    pub b: Mat,
    pub q: Mat,
    pub r: Mat,
}

impl LinearSystem {
    pub fn new(a: Mat, b: Mat, q: Mat, r: Mat) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if n == 0 || m == 0 {
            return Err(Error::Dimension("empty system".into()));
        }
        if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "A {:?}, B {:?}, Q {:?}, R {:?}",
                a.shape(),
                b.shape(),
                q.shape(),
                r.shape()
            )));
        }
        for (mat, name) in [(&a, "A"), (&b, "B"), (&q, "Q"), (&r, "R")] {
            numerics::ensure_finite(mat, name)?;
        }
        for (mat, name) in [(&q, "Q"), (&r, "R")] {
            if numerics::max_abs(&(mat - mat.transpose())) > 1e-12 * numerics::max_abs(mat) {
                return Err(Error::InvalidValue(format!("{name} is not symmetric")));
            }
            let smin = mat.clone().symmetric_eigenvalues().min();
            if smin <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "{name} is not positive definite (min eigenvalue {smin:e})"
                )));
            }
        }
        Ok(Self { a, b, q, r })
    }

    /// Identity weights.
    pub fn with_unit_weights(a: Mat, b: Mat) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        Self::new(a, b, Mat::identity(n, n), Mat::identity(m, m))
    }

    pub fn with_weights(&self, q: Mat, r: Mat) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), q, r)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self, k: &Mat) -> Mat {
        &self.a + &self.b * k
    }

    /// `[B, AB, ..., A^{n-1}B]`.
    pub fn controllability_matrix(&self) -> Mat {
        let n = self.n();
        let m = self.m();
        let mut ctrb = Mat::zeros(n, n * m);
        let mut block = self.b.clone();
        for i in 0..n {
            ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        ctrb
    }

    pub fn is_controllable(&self) -> bool {
        rank(&self.controllability_matrix()) == self.n()
    }

    /// Stage cost `x'Qx + u'Ru`.
    pub fn stage_cost(&self, x: &numerics::Vector, u: &numerics::Vector) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }
}

/// A state-feedback gain together with its stability under a given plant.
#[derive(Debug, Clone, PartialEq)]
pub struct GainK {
    pub k: Mat,
    pub stable: bool,
}

impl GainK {
    pub fn evaluate(sys: &LinearSystem, k: Mat) -> Self {
        let stable = is_stable(&sys.closed_loop(&k));
        Self { k, stable }
    }

    pub fn zeros(sys: &LinearSystem) -> Self {
        Self::evaluate(sys, Mat::zeros(sys.m(), sys.n()))
    }
}

/// `C(K) = Tr((Q + K'RK) Sigma_K)`, `+inf` when `A + BK` is not stable.
pub fn lqr_cost(sys: &LinearSystem, k: &Mat) -> f64 {
    let acl = sys.closed_loop(k);
    match solve_discrete_lyapunov(&acl, &Mat::identity(sys.n(), sys.n())) {
        Ok(sigma) => ((&sys.q + k.transpose() * &sys.r * k) * sigma).trace(),
        Err(_) => f64::INFINITY,
    }
}

/// `(C(K) - C*) / C*`.
pub fn relative_gap(cost: f64, cstar: f64) -> f64 {
    (cost - cstar) / cstar
}

/// Model-based policy gradient `2((R + B'P_K B)K + B'P_K A) Sigma_K`.
pub fn model_gradient(sys: &LinearSystem, k: &Mat) -> Result<Mat> {
    let acl = sys.closed_loop(k);
    let n = sys.n();
    let sigma = solve_discrete_lyapunov(&acl, &Mat::identity(n, n))?;
    let p = solve_discrete_lyapunov(&acl.transpose(), &(&sys.q + k.transpose() * &sys.r * k))?;
    let bt = sys.b.transpose();
    Ok(((&sys.r + &bt * &p * &sys.b) * k + &bt * &p * &sys.a) * sigma * 2.0)
}

/// Optimal gain `K*` and cost `C* = Tr(P*)`.
#[derive(Debug, Clone)]
pub struct OptimalGain {
    pub gain: GainK,
    pub cstar: f64,
    pub p: Mat,
}

pub fn optimal_gain(sys: &LinearSystem) -> Result<OptimalGain> {
    let sol = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r)?;
    let cstar = sol.p.trace();
    Ok(OptimalGain {
        gain: GainK::evaluate(sys, sol.k),
        cstar,
        p: sol.p,
    })
}

/// Random controllable, open-loop stable plant with `Q = I`, `R = I`.
///
/// Entries are i.i.d. standard normal; `A` is rescaled so its spectral radius
/// is drawn uniformly from [`RANDOM_RHO_BAND`].
pub fn random_system(n: usize, m: usize, seed: u64) -> Result<LinearSystem> {
    if n == 0 || m == 0 {
        return Err(Error::Dimension("n and m must be positive".into()));
    }
    let mut rng = stream_rng(seed, stream::SYSTEM);
    for _ in 0..GENERATION_ATTEMPTS {
        let a = normal_matrix(&mut rng, n, n);
        let b = normal_matrix(&mut rng, n, m);
        let target = rng.random_range(RANDOM_RHO_BAND.0..=RANDOM_RHO_BAND.1);
        let rho = match spectral_radius(&a) {
            Ok(r) if r > 1e-8 => r,
            _ => continue,
        };
        let sys = LinearSystem::with_unit_weights(a * (target / rho), b)?;
        if sys.is_controllable() {
            return Ok(sys);
        }
    }
    Err(Error::Generation {
        attempts: GENERATION_ATTEMPTS,
    })
}

/// Random stable `A` with `B = I` (used for the dimension sweeps).
pub fn random_stable_identity_input(n: usize, seed: u64) -> Result<LinearSystem> {
    let mut rng = stream_rng(seed, stream::SYSTEM);
    for _ in 0..GENERATION_ATTEMPTS {
        let a = normal_matrix(&mut rng, n, n);
        let target = rng.random_range(RANDOM_RHO_BAND.0..=RANDOM_RHO_BAND.1);
        if let Ok(rho) = spectral_radius(&a) {
            if rho > 1e-8 {
                return LinearSystem::with_unit_weights(a * (target / rho), Mat::identity(n, n));
            }
        }
    }
    Err(Error::Generation {
        attempts: GENERATION_ATTEMPTS,
    })
}

/// The 4-state, 2-input random plant used for the offline and adaptive studies.
pub fn four_state_benchmark() -> LinearSystem {
    let blocks = parse_matrix_blocks(FOUR_STATE_FIXTURE).expect("bundled fixture parses");
    LinearSystem::with_unit_weights(blocks[0].clone(), blocks[1].clone())
        .expect("bundled fixture is valid")
}

/// Marginally unstable tridiagonal Laplacian plant with `B = Q = R = I_3`.
pub fn benchmark_laplacian() -> LinearSystem {
    let blocks = parse_matrix_blocks(LAPLACIAN_FIXTURE).expect("bundled fixture parses");
    LinearSystem::with_unit_weights(blocks[0].clone(), blocks[1].clone())
        .expect("bundled fixture is valid")
}

/// Parses whitespace-separated matrix blocks. Blocks are separated by blank
/// lines; lines starting with `#` are ignored.
pub fn parse_matrix_blocks(text: &str) -> Result<Vec<Mat>> {
    let mut blocks = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let flush = |rows: &mut Vec<Vec<f64>>, blocks: &mut Vec<Mat>| -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Parse("ragged matrix block".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        blocks.push(Mat::from_row_slice(rows.len(), cols, &flat));
        rows.clear();
        Ok(())
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            flush(&mut rows, &mut blocks)?;
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {tok:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    flush(&mut rows, &mut blocks)?;
    Ok(blocks)
}

pub fn format_matrix_block(m: &Mat) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Loads a system from a fixture file holding an `A` block and a `B` block,
/// optionally followed by `Q` and `R`.
pub fn load_system(path: &Path) -> Result<LinearSystem> {
    let text = std::fs::read_to_string(path)?;
    let blocks = parse_matrix_blocks(&text)?;
    match blocks.len() {
        2 => LinearSystem::with_unit_weights(blocks[0].clone(), blocks[1].clone()),
        4 => LinearSystem::new(
            blocks[0].clone(),
            blocks[1].clone(),
            blocks[2].clone(),
            blocks[3].clone(),
        ),
        k => Err(Error::Parse(format!(
            "expected 2 or 4 matrix blocks, found {k}"
        ))),
    }
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eig(m: &Mat) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_matrix;

    fn scalar(a: f64) -> LinearSystem {
        let one = Mat::identity(1, 1);
        LinearSystem::new(Mat::from_element(1, 1, a), one.clone(), one.clone(), one).unwrap()
    }

    #[test]
    fn cost_scalar_examples() {
        assert!((lqr_cost(&scalar(0.0), &Mat::zeros(1, 1)) - 1.0).abs() < 1e-14);
        assert!((lqr_cost(&scalar(0.5), &Mat::zeros(1, 1)) - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn optimal_gain_trivial() {
        let opt = optimal_gain(&scalar(0.0)).unwrap();
        assert!(opt.gain.k[(0, 0)].abs() < 1e-12);
        assert!((opt.cstar - 1.0).abs() < 1e-12);
    }

    #[test]
    fn laplacian_fixture() {
        let sys = benchmark_laplacian();
        assert_eq!(sys.a[(0, 0)], 1.01);
        // eigenvalues 1.01 + 0.01 * 2cos(k pi / 4)
        let rho = spectral_radius(&sys.a).unwrap();
        assert!((rho - (1.01 + 0.01 * 2f64.sqrt())).abs() < 1e-12);
        assert!(rho > 1.0);
        assert!(lqr_cost(&sys, &Mat::zeros(3, 3)).is_infinite());
    }

    #[test]
    fn four_state_fixture_is_valid() {
        let sys = four_state_benchmark();
        assert_eq!((sys.n(), sys.m()), (4, 2));
        assert!(sys.is_controllable());
        assert!(spectral_radius(&sys.a).unwrap() < 1.0);
    }

    #[test]
    fn random_system_is_deterministic() {
        let a = random_system(4, 2, 11).unwrap();
        let b = random_system(4, 2, 11).unwrap();
        assert_eq!(a, b);
        let rho = spectral_radius(&a.a).unwrap();
        assert!((0.5 - 1e-12..=0.95 + 1e-12).contains(&rho));
        assert!(a.is_controllable());
    }

    #[test]
    fn rejects_indefinite_weights() {
        let one = Mat::identity(1, 1);
        let bad = LinearSystem::new(one.clone(), one.clone(), -one.clone(), one);
        assert!(matches!(bad, Err(Error::InvalidValue(_))));
    }

    #[test]
    fn optimal_cost_matches_lyapunov_cost_and_zero_gradient() {
        let sys = benchmark_laplacian();
        let opt = optimal_gain(&sys).unwrap();
        let c = lqr_cost(&sys, &opt.gain.k);
        assert!((c - opt.cstar).abs() / opt.cstar <= 1e-8);
        assert!(model_gradient(&sys, &opt.gain.k).unwrap().norm() <= 1e-6);
    }

    #[test]
    fn optimal_gain_beats_random_perturbations() {
        let sys = benchmark_laplacian();
        let opt = optimal_gain(&sys).unwrap();
        let mut rng = stream_rng(3, 0);
        for _ in 0..10_000 {
            let k = &opt.gain.k + normal_matrix(&mut rng, 3, 3) * 0.01;
            assert!(lqr_cost(&sys, &k) >= opt.cstar * (1.0 - 1e-12));
        }
    }

    #[test]
    fn parse_round_trip() {
        let m = Mat::from_row_slice(2, 3, &[1.0, -2.5, 3e-4, 0.0, 7.0, -1e10]);
        let parsed = parse_matrix_blocks(&format_matrix_block(&m)).unwrap();
        assert_eq!(parsed, vec![m]);
        assert!(parse_matrix_blocks("1 2\n3\n").is_err());
    }
}
