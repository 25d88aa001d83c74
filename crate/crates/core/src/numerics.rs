//! Dense matrix kernels shared across the crate: Lyapunov and Riccati
//! solvers, spectral radius, right pseudoinverse and nullspace projector.

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative residual accepted from the Lyapunov solver.
pub const LYAP_TOL: f64 = 1e-11;
/// A matrix counts as Schur stable only if `rho < 1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;
/// Singular values below `RANK_TOL_REL * sigma_max` are treated as zero.
pub const RANK_TOL_REL: f64 = 1e-10;
/// Relative Riccati residual at which value iteration stops.
pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITERS: usize = 100_000;

/// Above this state dimension the Lyapunov solver switches from the
/// vectorized direct solve to squared doubling.
pub const KRONECKER_MAX_N: usize = 6;

const SCHUR_MAX_ITERS: usize = 10_000;
const DOUBLING_MAX_ITERS: usize = 128;
const DIVERGENCE_LIMIT: f64 = 1e15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapunovMethod {
    /// Pick by dimension.
    Auto,
    /// `(I - A kron A) vec(S) = vec(W)` solved by LU.
    Kronecker,
    /// `S <- S + A_k S A_k^T`, `A_k <- A_k^2`.
    Doubling,
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!(
            "{what} has non-finite entries"
        )))
    }
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "spectral radius of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m, "matrix")?;
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let schur =
        Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITERS).ok_or(Error::Convergence {
            what: "Schur eigenvalue iteration",
            residual: f64::NAN,
            iters: SCHUR_MAX_ITERS,
        })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm())))
}

pub fn is_stable(m: &Mat) -> bool {
    spectral_radius(m).is_ok_and(|rho| rho < 1.0 - STABILITY_MARGIN)
}

pub fn singular_values(m: &Mat) -> Vector {
    m.clone().svd(false, false).singular_values
}

pub fn sigma_min(m: &Mat) -> f64 {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return 0.0;
    }
    singular_values(m)
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral norm.
pub fn norm2(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m).iter().copied().fold(0.0, f64::max)
}

/// Solves `S = W + Acl S Acl^T` for a Schur-stable `Acl`.
pub fn solve_discrete_lyapunov(acl: &Mat, w: &Mat) -> Result<Mat> {
    solve_discrete_lyapunov_with(acl, w, LyapunovMethod::Auto)
}

pub fn solve_discrete_lyapunov_with(acl: &Mat, w: &Mat, method: LyapunovMethod) -> Result<Mat> {
    check_square_pair(acl, w)?;
    ensure_finite(w, "Lyapunov forcing term")?;
    ensure_finite(acl, "closed-loop matrix")?;
    let n = acl.nrows();
    let method = match method {
        LyapunovMethod::Auto if n <= KRONECKER_MAX_N => LyapunovMethod::Kronecker,
        LyapunovMethod::Auto => LyapunovMethod::Doubling,
        m => m,
    };
    let sigma = match method {
        LyapunovMethod::Kronecker => {
            require_stable(acl)?;
            lyapunov_kronecker(acl, w)?
        }
        _ => lyapunov_doubling(acl, w)?,
    };
    let sigma = symmetrize(&sigma);
    let residual = lyapunov_residual(acl, w, &sigma);
    let scale = sigma.norm().max(f64::MIN_POSITIVE);
    if residual > LYAP_TOL * scale {
        return Err(Error::Convergence {
            what: "discrete Lyapunov solve",
            residual: residual / scale,
            iters: 0,
        });
    }
    Ok(sigma)
}

fn require_stable(acl: &Mat) -> Result<()> {
    let rho = spectral_radius(acl)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::SpectralRadius {
            rho,
            margin: STABILITY_MARGIN,
        });
    }
    Ok(())
}

/// `||S - W - Acl S Acl^T||_F`.
pub fn lyapunov_residual(acl: &Mat, w: &Mat, sigma: &Mat) -> f64 {
    (sigma - w - acl * sigma * acl.transpose()).norm()
}

fn check_square_pair(acl: &Mat, w: &Mat) -> Result<()> {
    let n = acl.nrows();
    if acl.ncols() != n || w.nrows() != n || w.ncols() != n {
        return Err(Error::Dimension(format!(
            "Lyapunov with A {}x{} and W {}x{}",
            acl.nrows(),
            acl.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(())
}

fn lyapunov_kronecker(acl: &Mat, w: &Mat) -> Result<Mat> {
    let n = acl.nrows();
    let lhs = Mat::identity(n * n, n * n) - acl.kronecker(acl);
    let rhs = Vector::from_column_slice(w.as_slice());
    let x = lhs.lu().solve(&rhs).ok_or(Error::Convergence {
        what: "vectorized Lyapunov LU",
        residual: f64::NAN,
        iters: 0,
    })?;
    Ok(Mat::from_column_slice(n, n, x.as_slice()))
}

/// Squared doubling. Stability is certified along the way by
/// `rho(A) <= |A^(2^k)|_F^(2^-k)`; only when no iterate proves the margin
/// does it fall back to an eigenvalue computation.
fn lyapunov_doubling(acl: &Mat, w: &Mat) -> Result<Mat> {
    let mut sigma = w.clone();
    let mut power = acl.clone();
    let mut exponent = 1.0_f64;
    let mut certified = false;
    for _ in 0..DOUBLING_MAX_ITERS {
        if !certified {
            let bound = power.norm().powf(1.0 / exponent);
            certified = bound < 1.0 - STABILITY_MARGIN;
        }
        let inc = &power * &sigma * power.transpose();
        let inc_norm = inc.norm();
        sigma += inc;
        if !inc_norm.is_finite() || sigma.norm() > DIVERGENCE_LIMIT {
            break;
        }
        if inc_norm <= 0.25 * f64::EPSILON * sigma.norm() {
            if !certified {
                require_stable(acl)?;
            }
            return Ok(sigma);
        }
        power = &power * &power;
        exponent *= 2.0;
    }
    require_stable(acl)?;
    Err(Error::Convergence {
        what: "Lyapunov doubling",
        residual: lyapunov_residual(acl, w, &sigma),
        iters: DOUBLING_MAX_ITERS,
    })
}

/// Result of [`solve_dare`].
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: Mat,
    /// Gain for `u = K x`.
    pub k: Mat,
    pub iterations: usize,
}

/// Value iteration on the discrete algebraic Riccati equation
/// `P = Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`, starting from `P = Q`.
pub fn solve_dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<DareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension("DARE operands".into()));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for it in 1..=DARE_MAX_ITERS {
        let pb = &p * b;
        let gram = r + &bt * &pb;
        let chol = gram.cholesky().ok_or(Error::NotStabilizable)?;
        let bpa = pb.transpose() * a;
        let pa = &p * a;
        let next = symmetrize(&(q + &at * &pa - bpa.transpose() * chol.solve(&bpa)));
        let pnorm = next.norm();
        if !pnorm.is_finite() || pnorm > DIVERGENCE_LIMIT {
            return Err(Error::NotStabilizable);
        }
        let residual = (&next - &p).norm() / pnorm.max(1.0);
        p = next;
        if residual <= DARE_TOL {
            let k = dare_gain(a, b, &p, r)?;
            let acl = a + b * &k;
            if !is_stable(&acl) {
                return Err(Error::NotStabilizable);
            }
            return Ok(DareSolution {
                p,
                k,
                iterations: it,
            });
        }
    }
    Err(Error::Convergence {
        what: "Riccati value iteration",
        residual: riccati_residual(a, b, q, r, &p),
        iters: DARE_MAX_ITERS,
    })
}

/// `K = -(R + B'PB)^{-1} B'PA`.
pub fn dare_gain(a: &Mat, b: &Mat, p: &Mat, r: &Mat) -> Result<Mat> {
    let bt = b.transpose();
    let gram = r + &bt * p * b;
    let chol = gram.cholesky().ok_or(Error::NotStabilizable)?;
    Ok(-chol.solve(&(&bt * p * a)))
}

/// Frobenius norm of the Riccati equation residual at `P`.
pub fn riccati_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> f64 {
    let bt = b.transpose();
    let gram = r + &bt * p * b;
    let bpa = &bt * p * a;
    let corr = match gram.clone().cholesky() {
        Some(c) => bpa.transpose() * c.solve(&bpa),
        None => return f64::INFINITY,
    };
    (q + a.transpose() * p * a - corr - p).norm()
}

/// `M^T (M M^T)^{-1}` for a wide matrix with full row rank.
pub fn right_pseudoinverse(m: &Mat) -> Result<Mat> {
    if m.nrows() > m.ncols() {
        return Err(Error::Dimension(format!(
            "right pseudoinverse needs p <= q, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m, "matrix")?;
    check_full_row_rank(m)?;
    let gram = m * m.transpose();
    let chol = gram
        .cholesky()
        .ok_or(Error::RankDeficient { sigma_min: 0.0 })?;
    Ok(chol.solve(m).transpose())
}

/// `I - M^+ M`, the orthogonal projector onto the nullspace of `M`.
pub fn nullspace_projector(m: &Mat) -> Result<Mat> {
    let pinv = right_pseudoinverse(m)?;
    let q = m.ncols();
    Ok(symmetrize(&(Mat::identity(q, q) - pinv * m)))
}

fn check_full_row_rank(m: &Mat) -> Result<()> {
    let sv = singular_values(m);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = if sv.len() < m.nrows() {
        0.0
    } else {
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    };
    if smax == 0.0 || smin <= RANK_TOL_REL * smax {
        return Err(Error::RankDeficient { sigma_min: smin });
    }
    Ok(())
}

/// Numerical rank with the relative tolerance used throughout the crate.
pub fn rank(m: &Mat) -> usize {
    let sv = singular_values(m);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL_REL * smax).count()
}
