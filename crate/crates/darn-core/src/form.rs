//! Finite-state symmetric Dirichlet forms.
//!
//! A form is a weighted graph with killing over a strictly positive node
//! measure `m`. The energy convention is
//!
//! ```text
//! E(u, v) = 1/2 * sum_{x,y} c(x,y) (u(x)-u(y)) (v(x)-v(y)) + sum_x kappa(x) u(x) v(x)
//! ```
//!
//! with the double sum running over ordered pairs, so each undirected edge
//! `{x, y}` contributes `c(x,y) * (u(x)-u(y)) (v(x)-v(y))` exactly once.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{FormError, Result};
use crate::linalg::{self, SpdSolver, SymmetrizedSpectrum, DENSE_EIGEN_LIMIT};

/// A function on the state space, i.e. an element of `L^2(E; m)`.
pub type L2Vector = DVector<f64>;

/// One undirected conductance, stored with `x < y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub x: usize,
    pub y: usize,
    pub weight: f64,
}

/// A symmetric Dirichlet form on a finite state space.
///
/// Immutable after construction; all operations are pure, so values can be
/// shared freely across threads.
#[derive(Debug)]
pub struct SymmetricForm {
    n: usize,
    m: DVector<f64>,
    kappa: DVector<f64>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, f64)>>,
    spectrum: OnceLock<SymmetrizedSpectrum>,
}

impl Clone for SymmetricForm {
    fn clone(&self) -> Self {
        SymmetricForm {
            n: self.n,
            m: self.m.clone(),
            kappa: self.kappa.clone(),
            edges: self.edges.clone(),
            adjacency: self.adjacency.clone(),
            spectrum: OnceLock::new(),
        }
    }
}

impl PartialEq for SymmetricForm {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.m == other.m
            && self.kappa == other.kappa
            && self.edges == other.edges
    }
}

impl SymmetricForm {
    /// Builds a form from node masses, undirected conductances and killing
    /// weights. Duplicate edges are merged by summation (in input order);
    /// zero-weight edges are dropped.
    pub fn new(m: Vec<f64>, edges: Vec<(usize, usize, f64)>, kappa: Vec<f64>) -> Result<Self> {
        let n = m.len();
        for (i, &v) in m.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(FormError::NonPositiveMass { index: i, value: v });
            }
        }
        if kappa.len() != n {
            return Err(FormError::DimensionMismatch {
                expected: n,
                got: kappa.len(),
            });
        }
        for (i, &v) in kappa.iter().enumerate() {
            if v < 0.0 || !v.is_finite() {
                return Err(FormError::NegativeKilling { index: i, value: v });
            }
        }
        let mut canonical: std::collections::BTreeMap<(usize, usize), f64> =
            std::collections::BTreeMap::new();
        for (x, y, w) in edges {
            if x >= n || y >= n {
                return Err(FormError::EdgeOutOfRange { x, y, n });
            }
            if x == y {
                return Err(FormError::SelfLoop { x, y });
            }
            if w < 0.0 || !w.is_finite() {
                return Err(FormError::NegativeConductance { x, y, weight: w });
            }
            if w == 0.0 {
                continue;
            }
            *canonical.entry((x.min(y), x.max(y))).or_insert(0.0) += w;
        }
        let edges: Vec<Edge> = canonical
            .into_iter()
            .map(|((x, y), weight)| Edge { x, y, weight })
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        for e in &edges {
            adjacency[e.x].push((e.y, e.weight));
            adjacency[e.y].push((e.x, e.weight));
        }
        Ok(SymmetricForm {
            n,
            m: DVector::from_vec(m),
            kappa: DVector::from_vec(kappa),
            edges,
            adjacency,
            spectrum: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn masses(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn killing(&self) -> &DVector<f64> {
        &self.kappa
    }

    /// Canonically ordered undirected edges (`x < y`, sorted, merged).
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of `x` with their conductances.
    pub fn neighbors(&self, x: usize) -> &[(usize, f64)] {
        &self.adjacency[x]
    }

    /// Conductance between `x` and `y` (zero when no edge).
    pub fn conductance(&self, x: usize, y: usize) -> f64 {
        self.adjacency[x]
            .iter()
            .find(|(z, _)| *z == y)
            .map(|(_, w)| *w)
            .unwrap_or(0.0)
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n {
            return Err(FormError::DimensionMismatch {
                expected: self.n,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// The bilinear energy `E(u, v)`.
    pub fn energy(&self, u: &L2Vector, v: &L2Vector) -> Result<f64> {
        self.check_len(u)?;
        self.check_len(v)?;
        let mut total = 0.0;
        for e in &self.edges {
            total += e.weight * (u[e.x] - u[e.y]) * (v[e.x] - v[e.y]);
        }
        for x in 0..self.n {
            total += self.kappa[x] * u[x] * v[x];
        }
        Ok(total)
    }

    /// `E_alpha(u, v) = E(u, v) + alpha * (u, v)_m`.
    pub fn energy_alpha(&self, alpha: f64, u: &L2Vector, v: &L2Vector) -> Result<f64> {
        Ok(self.energy(u, v)? + alpha * self.inner(u, v)?)
    }

    /// The `L^2(E; m)` inner product.
    pub fn inner(&self, u: &L2Vector, v: &L2Vector) -> Result<f64> {
        self.check_len(u)?;
        self.check_len(v)?;
        Ok((0..self.n).map(|x| self.m[x] * u[x] * v[x]).sum())
    }

    /// The `L^2(E; m)` norm.
    pub fn norm(&self, u: &L2Vector) -> Result<f64> {
        Ok(self.inner(u, u)?.max(0.0).sqrt())
    }

    /// The generator `L` characterized by `E(u, v) = -(L u, v)_m`:
    /// `(L u)(x) = m(x)^{-1} [ sum_y c(x,y) (u(y)-u(x)) - kappa(x) u(x) ]`.
    pub fn apply_generator(&self, u: &L2Vector) -> Result<L2Vector> {
        self.check_len(u)?;
        let mut out = DVector::zeros(self.n);
        for x in 0..self.n {
            let mut acc = -self.kappa[x] * u[x];
            for &(y, w) in &self.adjacency[x] {
                acc += w * (u[y] - u[x]);
            }
            out[x] = acc / self.m[x];
        }
        Ok(out)
    }

    /// Dense energy matrix `A` with `E(u, v) = u^T A v`.
    pub fn energy_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for e in &self.edges {
            a[(e.x, e.x)] += e.weight;
            a[(e.y, e.y)] += e.weight;
            a[(e.x, e.y)] -= e.weight;
            a[(e.y, e.x)] -= e.weight;
        }
        for x in 0..self.n {
            a[(x, x)] += self.kappa[x];
        }
        a
    }

    /// Dense matrix `alpha * diag(m) + A`.
    pub fn resolvent_matrix(&self, alpha: f64) -> DMatrix<f64> {
        let mut a = self.energy_matrix();
        for x in 0..self.n {
            a[(x, x)] += alpha * self.m[x];
        }
        a
    }

    /// Prepares a factorized solver for `G_alpha`; reuse it when applying the
    /// resolvent to many right-hand sides.
    pub fn resolvent_solver(&self, alpha: f64) -> Result<ResolventSolver> {
        if !(alpha > 0.0) {
            return Err(FormError::NonPositiveAlpha(alpha));
        }
        let solver = SpdSolver::new(self.resolvent_matrix(alpha))?;
        Ok(ResolventSolver {
            solver,
            m: self.m.clone(),
        })
    }

    /// The resolvent `u = G_alpha f`, the unique solution of
    /// `(alpha*diag(m) + A) u = diag(m) f`, equivalently
    /// `E_alpha(u, g) = (f, g)_m` for all `g`.
    pub fn resolvent(&self, alpha: f64, f: &L2Vector) -> Result<L2Vector> {
        self.check_len(f)?;
        self.resolvent_solver(alpha)?.apply(f)
    }

    fn spectrum(&self) -> &SymmetrizedSpectrum {
        self.spectrum
            .get_or_init(|| SymmetrizedSpectrum::new(&self.m, &self.energy_matrix()))
    }

    /// Total event rate of the associated chain at `x`:
    /// `(sum_y c(x,y) + kappa(x)) / m(x)`.
    pub fn event_rate(&self, x: usize) -> f64 {
        let jump: f64 = self.adjacency[x].iter().map(|(_, w)| w).sum();
        (jump + self.kappa[x]) / self.m[x]
    }

    /// The semigroup `P_t f = exp(t L) f`.
    ///
    /// Dense spectral route up to [`DENSE_EIGEN_LIMIT`] states, uniformization
    /// beyond that.
    pub fn semigroup(&self, t: f64, f: &L2Vector) -> Result<L2Vector> {
        self.check_len(f)?;
        if t < 0.0 {
            return Err(FormError::NegativeTime(t));
        }
        if t == 0.0 {
            return Ok(f.clone());
        }
        if self.n <= DENSE_EIGEN_LIMIT {
            Ok(self.spectrum().semigroup_apply(t, f))
        } else {
            let rates: Vec<f64> = (0..self.n).map(|x| self.event_rate(x)).collect();
            let kernel = |v: &DVector<f64>| -> DVector<f64> {
                DVector::from_fn(self.n, |x, _| {
                    let total = rates[x] * self.m[x];
                    if total == 0.0 {
                        return v[x];
                    }
                    let flow: f64 = self.adjacency[x].iter().map(|&(y, w)| w * v[y]).sum();
                    flow / total
                })
            };
            Ok(linalg::uniformized_semigroup_apply(&rates, kernel, t, f))
        }
    }
}

/// A factorized resolvent: applies `G_alpha` to right-hand sides.
pub struct ResolventSolver {
    solver: SpdSolver,
    m: DVector<f64>,
}

impl ResolventSolver {
    pub fn apply(&self, f: &L2Vector) -> Result<L2Vector> {
        if f.len() != self.m.len() {
            return Err(FormError::DimensionMismatch {
                expected: self.m.len(),
                got: f.len(),
            });
        }
        self.solver.solve(&f.component_mul(&self.m))
    }
}
