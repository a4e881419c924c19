//! Approximating forms: jump augmentation inside each hole and conductance
//! boosting of intra-hole edges.
//!
//! Jump augmentation adds `lambda * sum_j int_{K_j x K_j} (u(x)-u(y))(v(x)-v(y))
//! dmu_j dmu_j` to the energy. Under the half-convention used by
//! [`SymmetricForm`], a pair `{x, y}` in the same hole therefore gains
//! conductance `2 lambda mu_j(x) mu_j(y)`: the double integral visits the pair
//! twice, and an undirected edge of weight `w` contributes `w (u(x)-u(y))^2`
//! once. Worked two-node check: `K = {x, y}`, `mu = (1, 1)`, `lambda = 3`,
//! `u = (1, 0)` gives added energy `3 * 2 * 1 = 6 = c_add * (1-0)^2`.

use crate::darning::HoleSet;
use crate::error::{FormError, Result};
use crate::form::SymmetricForm;

/// Per-hole weight vectors, aligned with the hole node lists and strictly
/// positive on every node of their hole.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureFamily {
    weights: Vec<Vec<f64>>,
}

impl MeasureFamily {
    pub fn new(holes: &HoleSet, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != holes.len() {
            return Err(FormError::MeasureCountMismatch {
                expected: holes.len(),
                got: weights.len(),
            });
        }
        for (j, (hole, w)) in holes.holes().iter().zip(weights.iter()).enumerate() {
            if w.len() != hole.len() {
                return Err(FormError::MeasureLengthMismatch {
                    hole: j,
                    expected: hole.len(),
                    got: w.len(),
                });
            }
            for (&node, &value) in hole.iter().zip(w.iter()) {
                if !(value > 0.0) || !value.is_finite() {
                    return Err(FormError::MeasureSupportMismatch {
                        hole: j,
                        node,
                        value,
                    });
                }
            }
        }
        Ok(MeasureFamily { weights })
    }

    /// The default family `mu_j = m` restricted to `K_j`.
    pub fn from_masses(form: &SymmetricForm, holes: &HoleSet) -> Result<Self> {
        holes.validate_for(form.n())?;
        let weights = holes
            .holes()
            .iter()
            .map(|hole| hole.iter().map(|&x| form.masses()[x]).collect())
            .collect();
        MeasureFamily::new(holes, weights)
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// `mu_j(K_j)`.
    pub fn total(&self, j: usize) -> f64 {
        self.weights[j].iter().sum()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(FormError::NegativeLambda(lambda));
    }
    Ok(())
}

/// The jump-augmented form `E^{(lambda)}`: conductance
/// `2 lambda mu_j(x) mu_j(y)` is added to every pair of distinct nodes in the
/// same hole. `lambda = 0` returns the form unchanged.
pub fn augment_jump(
    form: &SymmetricForm,
    holes: &HoleSet,
    mu: &MeasureFamily,
    lambda: f64,
) -> Result<SymmetricForm> {
    check_lambda(lambda)?;
    holes.validate_for(form.n())?;
    if mu.weights().len() != holes.len() {
        return Err(FormError::MeasureCountMismatch {
            expected: holes.len(),
            got: mu.weights().len(),
        });
    }
    if lambda == 0.0 {
        return Ok(form.clone());
    }
    let mut edges: Vec<(usize, usize, f64)> = form
        .edges()
        .iter()
        .map(|e| (e.x, e.y, e.weight))
        .collect();
    for (hole, w) in holes.holes().iter().zip(mu.weights().iter()) {
        for a in 0..hole.len() {
            for b in (a + 1)..hole.len() {
                edges.push((hole[a], hole[b], 2.0 * lambda * w[a] * w[b]));
            }
        }
    }
    SymmetricForm::new(
        form.masses().as_slice().to_vec(),
        edges,
        form.killing().as_slice().to_vec(),
    )
}

/// The conductance-boosted form: every edge with both endpoints inside the
/// same hole has its weight multiplied by `1 + lambda`.
pub fn augment_conductance(
    form: &SymmetricForm,
    holes: &HoleSet,
    lambda: f64,
) -> Result<SymmetricForm> {
    check_lambda(lambda)?;
    holes.validate_for(form.n())?;
    if lambda == 0.0 {
        return Ok(form.clone());
    }
    let member = holes.membership(form.n());
    let edges: Vec<(usize, usize, f64)> = form
        .edges()
        .iter()
        .map(|e| {
            let boost = match (member[e.x], member[e.y]) {
                (Some(i), Some(j)) if i == j => 1.0 + lambda,
                _ => 1.0,
            };
            (e.x, e.y, e.weight * boost)
        })
        .collect();
    SymmetricForm::new(
        form.masses().as_slice().to_vec(),
        edges,
        form.killing().as_slice().to_vec(),
    )
}

/// Kill-and-rebirth calibration of the piecing-together construction.
///
/// Killing at rate `r_j(x) = 2 lambda mu_j(K_j) mu_j(x) / m(x)` on `K_j` with
/// rebirth law `nu_j = mu_j / mu_j(K_j)` reproduces exactly the off-diagonal
/// jump rates of [`augment_jump`]:
/// `r_j(x) nu_j(y) = 2 lambda mu_j(x) mu_j(y) / m(x) = c_add(x,y) / m(x)`.
#[derive(Clone, Debug)]
pub struct PiecingRates {
    /// Extra killing rate per node (zero outside the holes).
    pub kill_rate: Vec<f64>,
    /// One rebirth distribution per hole, aligned with the hole node lists.
    pub rebirth: Vec<Vec<f64>>,
}

pub fn piecing_rates(
    form: &SymmetricForm,
    holes: &HoleSet,
    mu: &MeasureFamily,
    lambda: f64,
) -> Result<PiecingRates> {
    check_lambda(lambda)?;
    holes.validate_for(form.n())?;
    if mu.weights().len() != holes.len() {
        return Err(FormError::MeasureCountMismatch {
            expected: holes.len(),
            got: mu.weights().len(),
        });
    }
    let mut kill_rate = vec![0.0; form.n()];
    let mut rebirth = Vec::with_capacity(holes.len());
    for (j, (hole, w)) in holes.holes().iter().zip(mu.weights().iter()).enumerate() {
        let total = mu.total(j);
        for (&x, &wx) in hole.iter().zip(w.iter()) {
            kill_rate[x] = 2.0 * lambda * total * wx / form.masses()[x];
        }
        rebirth.push(w.iter().map(|&wx| wx / total).collect());
    }
    Ok(PiecingRates { kill_rate, rebirth })
}
