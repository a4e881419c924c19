//! Shared dense/iterative kernels: SPD solves and symmetric generator
//! exponentials. Everything here works on the symmetrized operator
//! `M^{-1/2} A M^{-1/2}` so that plain symmetric factorizations apply.

use nalgebra::{DMatrix, DVector};

use crate::error::{FormError, Result};

/// Above this size, direct factorization gives way to conjugate gradients.
pub const DENSE_SOLVE_LIMIT: usize = 4096;

/// Above this size, semigroups use uniformization instead of a dense
/// eigendecomposition.
pub const DENSE_EIGEN_LIMIT: usize = 2000;

/// Relative residual target for iterative solves.
pub const CG_TOL: f64 = 1e-12;

/// Poisson tail bound for uniformization series truncation.
pub const UNIFORMIZATION_TOL: f64 = 1e-12;

/// SPD solver for systems `(alpha*diag(m) + A) u = b` with `A` symmetric
/// positive semidefinite. Dense Cholesky with iterative refinement up to
/// [`DENSE_SOLVE_LIMIT`] unknowns, Jacobi-preconditioned CG beyond.
pub enum SpdSolver {
    Dense {
        matrix: DMatrix<f64>,
        chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    },
    Iterative {
        matrix: DMatrix<f64>,
    },
}

impl SpdSolver {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n <= DENSE_SOLVE_LIMIT {
            let chol = nalgebra::linalg::Cholesky::new(matrix.clone())
                .ok_or(FormError::SingularInteriorSystem)?;
            Ok(SpdSolver::Dense { matrix, chol })
        } else {
            Ok(SpdSolver::Iterative { matrix })
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            SpdSolver::Dense { matrix, chol } => {
                let mut x = chol.solve(b);
                // Two refinement sweeps; keeps the forward error well below the
                // 1e-10 identity tolerances even for stiff augmented forms.
                for _ in 0..2 {
                    let r = b - matrix * &x;
                    x += chol.solve(&r);
                }
                Ok(x)
            }
            SpdSolver::Iterative { matrix } => conjugate_gradient(matrix, b),
        }
    }
}

fn conjugate_gradient(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = b.len();
    let diag_inv: DVector<f64> = DVector::from_fn(n, |i, _| {
        let d = a[(i, i)];
        if d > 0.0 {
            1.0 / d
        } else {
            1.0
        }
    });
    let precond = |r: &DVector<f64>| r.component_mul(&diag_inv);

    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(DVector::zeros(n));
    }
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let max_iter = 20 * n + 200;
    for _ in 0..max_iter {
        if r.norm() <= CG_TOL * b_norm {
            return Ok(x);
        }
        let ap = a * &p;
        let denom = p.dot(&ap);
        if denom <= 0.0 {
            return Err(FormError::Internal(
                "conjugate gradient hit a non-positive curvature direction on an SPD system".into(),
            ));
        }
        let step = rz / denom;
        x += step * &p;
        r -= step * &ap;
        z = precond(&r);
        let rz_next = r.dot(&z);
        p = &z + (rz_next / rz) * &p;
        rz = rz_next;
    }
    if r.norm() <= 1e-8 * b_norm {
        // Converged loosely; accept but flag nothing. Genuine stagnation on an
        // SPD system is reported below.
        return Ok(x);
    }
    Err(FormError::Internal(format!(
        "conjugate gradient stalled: relative residual {:.3e}",
        r.norm() / b_norm
    )))
}

/// Eigendecomposition of `M^{-1/2} A M^{-1/2}` for a mass vector `m` and a
/// symmetric PSD energy matrix `A`. Used to evaluate `exp(t L)` with
/// `L = -M^{-1} A`.
#[derive(Clone, Debug)]
pub struct SymmetrizedSpectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    sqrt_m: DVector<f64>,
}

impl SymmetrizedSpectrum {
    pub fn new(m: &DVector<f64>, a: &DMatrix<f64>) -> Self {
        let n = m.len();
        let sqrt_m = m.map(f64::sqrt);
        let mut sym = a.clone();
        for i in 0..n {
            for j in 0..n {
                sym[(i, j)] /= sqrt_m[i] * sqrt_m[j];
            }
        }
        // Symmetrize away rounding asymmetry before the eigensolver.
        let sym = (&sym + sym.transpose()) * 0.5;
        let eig = nalgebra::linalg::SymmetricEigen::new(sym);
        SymmetrizedSpectrum {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            sqrt_m,
        }
    }

    /// Applies `exp(t L) f` with `L = -M^{-1} A`.
    pub fn semigroup_apply(&self, t: f64, f: &DVector<f64>) -> DVector<f64> {
        let scaled = f.component_mul(&self.sqrt_m);
        let mut coeffs = self.eigenvectors.transpose() * scaled;
        for (c, lam) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            // PSD up to round-off; clamp tiny negative eigenvalues so P_t stays
            // a contraction.
            *c *= (-t * lam.max(0.0)).exp();
        }
        let back = &self.eigenvectors * coeffs;
        back.component_div(&self.sqrt_m)
    }
}

/// Uniformization fallback for `exp(t L) f` on large sparse forms.
///
/// `rates[x]` is the total event rate at `x`, and `kernel` applies the
/// substochastic jump kernel `K f(x) = (1/rate(x)) * sum_y q(x,y) f(y)`
/// (rows with zero rate act as the identity). The truncation point is chosen
/// so the neglected Poisson tail is below [`UNIFORMIZATION_TOL`].
pub fn uniformized_semigroup_apply<K>(
    rates: &[f64],
    kernel: K,
    t: f64,
    f: &DVector<f64>,
) -> DVector<f64>
where
    K: Fn(&DVector<f64>) -> DVector<f64>,
{
    let uniform_rate = rates.iter().cloned().fold(0.0, f64::max);
    if uniform_rate == 0.0 || t == 0.0 {
        return f.clone();
    }
    let a = uniform_rate * t;
    // P = I + L/uniform_rate applied through the jump kernel.
    let apply_p = |v: &DVector<f64>| -> DVector<f64> {
        let kv = kernel(v);
        DVector::from_fn(v.len(), |x, _| {
            let theta = rates[x] / uniform_rate;
            (1.0 - theta) * v[x] + theta * kv[x]
        })
    };

    let mut term = f.clone();
    let mut weight = (-a).exp();
    let mut acc = &term * weight;
    let mut tail = 1.0 - weight;
    let mut k = 0usize;
    // Cap well past the Poisson bulk; the tail check is the real stop.
    let max_terms = (a + 12.0 * a.sqrt() + 64.0).ceil() as usize;
    while tail > UNIFORMIZATION_TOL && k < max_terms {
        k += 1;
        term = apply_p(&term);
        weight *= a / k as f64;
        if weight.is_finite() {
            acc += &term * weight;
            tail -= weight;
        } else {
            // a is large enough to overflow the direct recursion; restart the
            // weight in log space.
            let log_w = -a + (k as f64) * a.ln() - ln_factorial(k);
            let w = log_w.exp();
            acc += &term * w;
            tail -= w;
        }
    }
    acc
}

fn ln_factorial(k: usize) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

/// Least-squares fit of `log gap = log c - p * log lambda`.
/// Returns `(c, p)`; requires at least 4 usable points.
pub fn fit_power_law(lambdas: &[f64], gaps: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = lambdas
        .iter()
        .zip(gaps.iter())
        .filter(|(l, g)| **l > 0.0 && **g > 1e-300)
        .map(|(l, g)| (l.ln(), g.ln()))
        .collect();
    if pts.len() < 4 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|(x, _)| x).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    Some((intercept.exp(), -slope))
}
