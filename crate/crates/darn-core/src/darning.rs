//! Darning (shorting): collapse each hole `K_j` into a single state `a*_j`.
//!
//! The darned form keeps conductances on the retained set `D`, aggregates
//! cut conductances `c*(a*_i, y) = sum_{x in K_i} c(x, y)` and
//! `c*(a*_i, a*_j) = sum_{x in K_i, y in K_j} c(x, y)`, drops intra-hole
//! edges, and sums killing weights over each hole. Target indexing puts the
//! retained nodes first (ascending), then `a*_1 .. a*_N` in input order.

use nalgebra::{DMatrix, DVector};

use crate::error::{FormError, Result};
use crate::form::{L2Vector, SymmetricForm};
use crate::linalg::SpdSolver;

/// Absolute-per-unit tolerance used when checking that a vector is constant
/// on a hole.
pub const CONSTANCY_TOL: f64 = 1e-12;

/// Disjoint nonempty node sets to be collapsed, in input order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoleSet {
    holes: Vec<Vec<usize>>,
}

impl HoleSet {
    /// Node order inside each hole is preserved: per-hole measure vectors are
    /// aligned with it.
    pub fn new(holes: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        for (j, hole) in holes.iter().enumerate() {
            if hole.is_empty() {
                return Err(FormError::EmptyHole { index: j });
            }
            let mut local: std::collections::HashSet<usize> = std::collections::HashSet::new();
            for &x in hole {
                if !local.insert(x) {
                    return Err(FormError::DuplicateHoleNode { index: j, node: x });
                }
                if let Some(&first) = seen.get(&x) {
                    return Err(FormError::OverlappingHoles {
                        first,
                        second: j,
                        node: x,
                    });
                }
                seen.insert(x, j);
            }
        }
        Ok(HoleSet { holes })
    }

    pub fn holes(&self) -> &[Vec<usize>] {
        &self.holes
    }

    pub fn len(&self) -> usize {
        self.holes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.holes.is_empty()
    }

    /// Total number of nodes across all holes.
    pub fn covered(&self) -> usize {
        self.holes.iter().map(Vec::len).sum()
    }

    /// Checks indices against a state count and that `D = E \ F` is nonempty.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        for (j, hole) in self.holes.iter().enumerate() {
            for &x in hole {
                if x >= n {
                    return Err(FormError::HoleOutOfRange { index: j, node: x, n });
                }
            }
        }
        if self.covered() >= n {
            return Err(FormError::NoRetainedStates);
        }
        Ok(())
    }

    /// `hole_of[x] = Some(j)` when `x` lies in `K_j`.
    pub fn membership(&self, n: usize) -> Vec<Option<usize>> {
        let mut member = vec![None; n];
        for (j, hole) in self.holes.iter().enumerate() {
            for &x in hole {
                member[x] = Some(j);
            }
        }
        member
    }
}

/// How the collapsed states are weighted.
#[derive(Clone, Debug, PartialEq)]
pub enum MassMode {
    /// `mass(a*_j) = m(K_j)`: the sticky darned measure.
    Sticky,
    /// User-chosen strictly positive masses (a time change of the sticky
    /// process).
    Explicit(Vec<f64>),
}

/// The node-level surjection `E -> E*` produced by darning, together with the
/// transport maps between functions on the two spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct QuotientMap {
    source_n: usize,
    target_n: usize,
    node_map: Vec<usize>,
    d_nodes: Vec<usize>,
    holes: Vec<Vec<usize>>,
    hole_masses: Vec<f64>,
}

impl QuotientMap {
    pub fn source_n(&self) -> usize {
        self.source_n
    }

    pub fn target_n(&self) -> usize {
        self.target_n
    }

    /// `pi(x)`: target index of source node `x`.
    pub fn node_map(&self) -> &[usize] {
        &self.node_map
    }

    /// Original indices of the retained nodes, in target order.
    pub fn d_nodes(&self) -> &[usize] {
        &self.d_nodes
    }

    pub fn holes(&self) -> &[Vec<usize>] {
        &self.holes
    }

    /// Masses assigned to `a*_1 .. a*_N` in the darned form.
    pub fn hole_masses(&self) -> &[f64] {
        &self.hole_masses
    }

    /// Target index of `a*_j`.
    pub fn hole_target(&self, j: usize) -> usize {
        self.d_nodes.len() + j
    }

    /// `T f`: push a source vector that is constant on each hole down to the
    /// target space. Fails when some hole sees a spread above [`CONSTANCY_TOL`].
    pub fn push(&self, f: &L2Vector) -> Result<L2Vector> {
        if f.len() != self.source_n {
            return Err(FormError::DimensionMismatch {
                expected: self.source_n,
                got: f.len(),
            });
        }
        let mut out = DVector::zeros(self.target_n);
        for (t, &x) in self.d_nodes.iter().enumerate() {
            out[t] = f[x];
        }
        for (j, hole) in self.holes.iter().enumerate() {
            let reference = f[hole[0]];
            let spread = hole
                .iter()
                .map(|&x| (f[x] - reference).abs())
                .fold(0.0, f64::max);
            if spread > CONSTANCY_TOL * (1.0 + reference.abs()) {
                return Err(FormError::NotConstantOnHole { hole: j, spread });
            }
            out[self.hole_target(j)] = reference;
        }
        Ok(out)
    }

    /// `T^{-1} g`: lift a target vector back to the source space,
    /// `f(x) = g(pi(x))`.
    pub fn lift(&self, g: &L2Vector) -> Result<L2Vector> {
        if g.len() != self.target_n {
            return Err(FormError::DimensionMismatch {
                expected: self.target_n,
                got: g.len(),
            });
        }
        Ok(DVector::from_fn(self.source_n, |x, _| g[self.node_map[x]]))
    }

    /// `f -> f*`: the m-weighted hole average
    /// `f*(a*_j) = sum_{x in K_j} f(x) m(x) / m(K_j)`, identity on `D`.
    pub fn average(&self, source_m: &DVector<f64>, f: &L2Vector) -> Result<L2Vector> {
        if f.len() != self.source_n || source_m.len() != self.source_n {
            return Err(FormError::DimensionMismatch {
                expected: self.source_n,
                got: f.len().max(source_m.len()),
            });
        }
        let mut out = DVector::zeros(self.target_n);
        for (t, &x) in self.d_nodes.iter().enumerate() {
            out[t] = f[x];
        }
        for (j, hole) in self.holes.iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for &x in hole {
                num += f[x] * source_m[x];
                den += source_m[x];
            }
            out[self.hole_target(j)] = num / den;
        }
        Ok(out)
    }

    /// Composes `self` with a second darning performed on `self`'s target.
    ///
    /// Fails when the composed layout would not keep all collapsed states
    /// after the retained ones (that cannot happen for refinement chains
    /// produced by [`darn`], because earlier `a*` nodes sort last).
    pub fn compose(&self, second: &QuotientMap) -> Result<QuotientMap> {
        if second.source_n != self.target_n {
            return Err(FormError::IncompatibleForms(format!(
                "composition mismatch: first map targets {} states, second starts from {}",
                self.target_n, second.source_n
            )));
        }
        let node_map: Vec<usize> = self
            .node_map
            .iter()
            .map(|&mid| second.node_map[mid])
            .collect();
        // Preimages of the final indices, in source order.
        let mut preimages: Vec<Vec<usize>> = vec![Vec::new(); second.target_n];
        for (x, &t) in node_map.iter().enumerate() {
            preimages[t].push(x);
        }
        let is_final_hole: Vec<bool> = {
            let mut v = vec![false; second.target_n];
            // A final index is a collapsed state when it is an a* of the second
            // map, or the image of an a* of the first map.
            for j in 0..second.holes.len() {
                v[second.hole_target(j)] = true;
            }
            for j in 0..self.holes.len() {
                v[second.node_map[self.hole_target(j)]] = true;
            }
            v
        };
        let n_holes = is_final_hole.iter().filter(|&&h| h).count();
        let n_d = second.target_n - n_holes;
        if is_final_hole[..n_d].iter().any(|&h| h) {
            return Err(FormError::IncompatibleForms(
                "composed quotient interleaves collapsed and retained states".into(),
            ));
        }
        let d_nodes: Vec<usize> = (0..n_d).map(|t| preimages[t][0]).collect();
        let holes: Vec<Vec<usize>> = (n_d..second.target_n)
            .map(|t| preimages[t].clone())
            .collect();
        // Mass comes from the second map when t is one of its a* nodes,
        // otherwise it was already fixed by the first map.
        let hole_masses: Vec<f64> = (n_d..second.target_n)
            .map(|t| {
                if t >= second.d_nodes.len() {
                    second.hole_masses[t - second.d_nodes.len()]
                } else {
                    let mid = second.d_nodes[t];
                    self.hole_masses[mid - self.d_nodes.len()]
                }
            })
            .collect();
        Ok(QuotientMap {
            source_n: self.source_n,
            target_n: second.target_n,
            node_map,
            d_nodes,
            holes,
            hole_masses,
        })
    }
}

/// Total conductance on edges with both endpoints inside the same hole;
/// darning discards these, and this diagnostic reports how much was dropped.
pub fn dropped_intra_hole_weight(form: &SymmetricForm, holes: &HoleSet) -> Result<f64> {
    holes.validate_for(form.n())?;
    let member = holes.membership(form.n());
    let mut dropped = 0.0;
    for e in form.edges() {
        if let (Some(i), Some(j)) = (member[e.x], member[e.y]) {
            if i == j {
                dropped += e.weight;
            }
        }
    }
    Ok(dropped)
}

/// Collapses each hole into a single state, producing the darned form and the
/// quotient map.
pub fn darn(
    form: &SymmetricForm,
    holes: &HoleSet,
    mass_mode: MassMode,
) -> Result<(SymmetricForm, QuotientMap)> {
    holes.validate_for(form.n())?;
    let n = form.n();
    let member = holes.membership(n);
    let d_nodes: Vec<usize> = (0..n).filter(|&x| member[x].is_none()).collect();
    let n_d = d_nodes.len();
    let target_n = n_d + holes.len();

    let mut node_map = vec![usize::MAX; n];
    for (t, &x) in d_nodes.iter().enumerate() {
        node_map[x] = t;
    }
    for (j, hole) in holes.holes().iter().enumerate() {
        for &x in hole {
            node_map[x] = n_d + j;
        }
    }

    // Masses: m on D; sticky or explicit on the a* states.
    let source_hole_masses: Vec<f64> = holes
        .holes()
        .iter()
        .map(|hole| hole.iter().map(|&x| form.masses()[x]).sum())
        .collect();
    let hole_masses = match mass_mode {
        MassMode::Sticky => source_hole_masses,
        MassMode::Explicit(masses) => {
            if masses.len() != holes.len() {
                return Err(FormError::MassCountMismatch {
                    expected: holes.len(),
                    got: masses.len(),
                });
            }
            for (j, &v) in masses.iter().enumerate() {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(FormError::NonPositiveHoleMass { index: j, value: v });
                }
            }
            masses
        }
    };
    let mut target_m = Vec::with_capacity(target_n);
    target_m.extend(d_nodes.iter().map(|&x| form.masses()[x]));
    target_m.extend(hole_masses.iter().copied());

    let mut target_kappa = vec![0.0; target_n];
    for (t, &x) in d_nodes.iter().enumerate() {
        target_kappa[t] = form.killing()[x];
    }
    for (j, hole) in holes.holes().iter().enumerate() {
        target_kappa[n_d + j] = hole.iter().map(|&x| form.killing()[x]).sum();
    }

    // Aggregate conductances in canonical source-edge order; intra-hole edges
    // vanish from the quotient.
    let mut target_edges: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    for e in form.edges() {
        let tx = node_map[e.x];
        let ty = node_map[e.y];
        if tx == ty {
            continue;
        }
        *target_edges.entry((tx.min(ty), tx.max(ty))).or_insert(0.0) += e.weight;
    }

    let darned = SymmetricForm::new(
        target_m,
        target_edges
            .into_iter()
            .map(|((x, y), w)| (x, y, w))
            .collect(),
        target_kappa,
    )?;
    let map = QuotientMap {
        source_n: n,
        target_n,
        node_map,
        d_nodes,
        holes: holes.holes().to_vec(),
        hole_masses: darned.masses().as_slice()[n_d..].to_vec(),
    };
    Ok((darned, map))
}

/// `Pi f`: the `(.,.)_m`-orthogonal projection onto vectors constant on each
/// hole. Equals `f` on `D` and the m-weighted hole average on each `K_j`.
pub fn project(form: &SymmetricForm, holes: &HoleSet, f: &L2Vector) -> Result<L2Vector> {
    holes.validate_for(form.n())?;
    if f.len() != form.n() {
        return Err(FormError::DimensionMismatch {
            expected: form.n(),
            got: f.len(),
        });
    }
    let mut out = f.clone();
    for hole in holes.holes() {
        let mut num = 0.0;
        let mut den = 0.0;
        for &x in hole {
            num += f[x] * form.masses()[x];
            den += form.masses()[x];
        }
        let avg = num / den;
        for &x in hole {
            out[x] = avg;
        }
    }
    Ok(out)
}

/// Builds the aggregation matrix route for the constrained form `(E, F~)`:
/// columns of `S` are indicators of retained singletons and holes, and the
/// resolvent solves `S^T (alpha M + A) S v = S^T M f`.
///
/// This is deliberately independent of [`darn`]: it aggregates the dense
/// energy matrix instead of the edge list, and serves as the oracle side of
/// the `G~_alpha f = T^{-1} G*_alpha f*` identity.
pub fn constrained_resolvent(
    form: &SymmetricForm,
    holes: &HoleSet,
    alpha: f64,
    f: &L2Vector,
) -> Result<L2Vector> {
    if !(alpha > 0.0) {
        return Err(FormError::NonPositiveAlpha(alpha));
    }
    let (aggregated, groups) = aggregate_matrix(form, holes, &form.resolvent_matrix(alpha))?;
    let mut rhs = DVector::zeros(groups.len());
    for (t, group) in groups.iter().enumerate() {
        rhs[t] = group.iter().map(|&x| form.masses()[x] * f[x]).sum();
    }
    let v = SpdSolver::new(aggregated)?.solve(&rhs)?;
    let mut out = DVector::zeros(form.n());
    for (t, group) in groups.iter().enumerate() {
        for &x in group {
            out[x] = v[t];
        }
    }
    Ok(out)
}

/// Constrained-form semigroup via the aggregated generator exponential.
/// Requires `f` constant on each hole.
pub fn constrained_semigroup(
    form: &SymmetricForm,
    holes: &HoleSet,
    t: f64,
    f: &L2Vector,
) -> Result<L2Vector> {
    if t < 0.0 {
        return Err(FormError::NegativeTime(t));
    }
    let (agg_energy, groups) = aggregate_matrix(form, holes, &form.energy_matrix())?;
    let agg_m = DVector::from_fn(groups.len(), |t, _| {
        groups[t].iter().map(|&x| form.masses()[x]).sum()
    });
    // Group values of f, with the constancy check.
    let member = holes.membership(form.n());
    let mut g = DVector::zeros(groups.len());
    for (ti, group) in groups.iter().enumerate() {
        let reference = f[group[0]];
        for &x in group {
            if let Some(j) = member[x] {
                let spread = (f[x] - reference).abs();
                if spread > CONSTANCY_TOL * (1.0 + reference.abs()) {
                    return Err(FormError::NotConstantOnHole { hole: j, spread });
                }
            }
        }
        g[ti] = reference;
    }
    let spectrum = crate::linalg::SymmetrizedSpectrum::new(&agg_m, &agg_energy);
    let pg = spectrum.semigroup_apply(t, &g);
    let mut out = DVector::zeros(form.n());
    for (ti, group) in groups.iter().enumerate() {
        for &x in group {
            out[x] = pg[ti];
        }
    }
    Ok(out)
}

/// Group-sums a dense symmetric matrix over D-singletons and holes.
/// Returns the aggregated matrix and the node groups in target order.
fn aggregate_matrix(
    form: &SymmetricForm,
    holes: &HoleSet,
    matrix: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<Vec<usize>>)> {
    holes.validate_for(form.n())?;
    let member = holes.membership(form.n());
    let mut groups: Vec<Vec<usize>> = (0..form.n())
        .filter(|&x| member[x].is_none())
        .map(|x| vec![x])
        .collect();
    for hole in holes.holes() {
        groups.push(hole.clone());
    }
    let k = groups.len();
    let mut group_of = vec![0usize; form.n()];
    for (t, group) in groups.iter().enumerate() {
        for &x in group {
            group_of[x] = t;
        }
    }
    let mut agg = DMatrix::zeros(k, k);
    for x in 0..form.n() {
        for y in 0..form.n() {
            agg[(group_of[x], group_of[y])] += matrix[(x, y)];
        }
    }
    Ok((agg, groups))
}

/// Hitting decomposition: column `j` is
/// `u_alpha^{(j)}(x) = E_x[ e^{-alpha sigma_F}; X_{sigma_F} in K_j ]`,
/// the E_alpha-harmonic extension of the boundary data `1_{K_j}`.
///
/// For `alpha = 0` this is the entrance probability `P_x(X_{sigma_F} in K_j)`;
/// the interior system is then singular exactly when some part of `D` neither
/// reaches the holes nor gets killed.
pub fn hitting_decomposition(
    form: &SymmetricForm,
    holes: &HoleSet,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    if alpha < 0.0 {
        return Err(FormError::NegativeAlpha(alpha));
    }
    holes.validate_for(form.n())?;
    let n = form.n();
    let member = holes.membership(n);
    let d_nodes: Vec<usize> = (0..n).filter(|&x| member[x].is_none()).collect();
    let mut d_pos = vec![usize::MAX; n];
    for (i, &x) in d_nodes.iter().enumerate() {
        d_pos[x] = i;
    }

    // Interior block of alpha*M + A over D, in dense form.
    let nd = d_nodes.len();
    let mut interior = DMatrix::zeros(nd, nd);
    for (i, &x) in d_nodes.iter().enumerate() {
        let mut diag = alpha * form.masses()[x] + form.killing()[x];
        for &(y, w) in form.neighbors(x) {
            diag += w;
            if member[y].is_none() {
                interior[(i, d_pos[y])] -= w;
            }
        }
        interior[(i, i)] = diag;
    }
    let solver = match SpdSolver::new(interior) {
        Ok(s) => s,
        Err(_) => return Err(FormError::SingularInteriorSystem),
    };

    let mut out = DMatrix::zeros(n, holes.len());
    for j in 0..holes.len() {
        let mut rhs = DVector::zeros(nd);
        for (i, &x) in d_nodes.iter().enumerate() {
            rhs[i] = form
                .neighbors(x)
                .iter()
                .filter(|&&(y, _)| member[y] == Some(j))
                .map(|&(_, w)| w)
                .sum();
        }
        let u = solver.solve(&rhs)?;
        for (i, &x) in d_nodes.iter().enumerate() {
            out[(x, j)] = u[i];
        }
        for &x in &holes.holes()[j] {
            out[(x, j)] = 1.0;
        }
    }
    Ok(out)
}
