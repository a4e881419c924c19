//! Convergence diagnostics for the lambda -> infinity limit: resolvent and
//! semigroup gaps against the sticky darned reference, exact
//! finite-dimensional expectations, and the sweep harness.
//!
//! Mosco convergence is checked through its resolvent characterization
//! (strong resolvent convergence), which is the computable equivalent.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_conductance, augment_jump, MeasureFamily};
use crate::darning::{darn, HoleSet, MassMode, QuotientMap, CONSTANCY_TOL};
use crate::error::{FormError, Result};
use crate::form::{L2Vector, SymmetricForm};
use crate::linalg::fit_power_law;

/// Default convergence threshold on the final gap of a sweep series.
pub const DEFAULT_GAP_TOLERANCE: f64 = 1e-6;

fn check_compatible(aug: &SymmetricForm, base: &SymmetricForm) -> Result<()> {
    if aug.n() != base.n() {
        return Err(FormError::IncompatibleForms(format!(
            "state counts differ: {} vs {}",
            aug.n(),
            base.n()
        )));
    }
    if aug.masses() != base.masses() {
        return Err(FormError::IncompatibleForms(
            "augmented form must keep the base node masses".into(),
        ));
    }
    Ok(())
}

/// `|| G^{aug}_alpha f - T^{-1} G*_alpha f* ||_{L^2(E; m)}` where `G*` is the
/// resolvent of the sticky darned base form and `f*` the m-weighted average.
pub fn resolvent_gap(
    aug: &SymmetricForm,
    base: &SymmetricForm,
    holes: &HoleSet,
    alpha: f64,
    f: &L2Vector,
) -> Result<f64> {
    check_compatible(aug, base)?;
    let (darned, map) = darn(base, holes, MassMode::Sticky)?;
    let aug_side = aug.resolvent(alpha, f)?;
    let darned_side = map.lift(&darned.resolvent(alpha, &map.average(base.masses(), f)?)?)?;
    base.norm(&(aug_side - darned_side))
}

/// `|| P^{aug}_t f - T^{-1} P*_t f* ||_{L^2(E; m)}` for `f` constant on each
/// hole (the closure of the limit domain).
pub fn semigroup_gap(
    aug: &SymmetricForm,
    base: &SymmetricForm,
    holes: &HoleSet,
    t: f64,
    f: &L2Vector,
) -> Result<f64> {
    check_compatible(aug, base)?;
    let (darned, map) = darn(base, holes, MassMode::Sticky)?;
    require_hole_constant(holes, f)?;
    let aug_side = aug.semigroup(t, f)?;
    let darned_side = map.lift(&darned.semigroup(t, &map.average(base.masses(), f)?)?)?;
    base.norm(&(aug_side - darned_side))
}

fn require_hole_constant(holes: &HoleSet, f: &L2Vector) -> Result<()> {
    for (j, hole) in holes.holes().iter().enumerate() {
        let reference = f[hole[0]];
        let spread = hole
            .iter()
            .map(|&x| (f[x] - reference).abs())
            .fold(0.0, f64::max);
        if spread > CONSTANCY_TOL * (1.0 + reference.abs()) {
            return Err(FormError::NotConstantOnHole { hole: j, spread });
        }
    }
    Ok(())
}

/// Exact finite-dimensional expectation under the sub-Markovian dynamics:
/// `sum_x initial(x) f_0(x) (P_{t_1}(f_1 P_{t_2-t_1}(f_2 ...)))(x)`.
///
/// `times` carries `t_1 < t_2 < ... < t_k` (all positive) and `functions`
/// carries `f_0 .. f_k`, with `f_0` read at time zero.
pub fn fdd_exact(
    form: &SymmetricForm,
    initial: &DVector<f64>,
    times: &[f64],
    functions: &[L2Vector],
) -> Result<f64> {
    if initial.len() != form.n() {
        return Err(FormError::DimensionMismatch {
            expected: form.n(),
            got: initial.len(),
        });
    }
    if initial.iter().any(|&w| w < 0.0) || initial.iter().sum::<f64>() <= 0.0 {
        return Err(FormError::InvalidInitialMeasure);
    }
    validate_times(times)?;
    if functions.len() != times.len() + 1 {
        return Err(FormError::FunctionCountMismatch {
            expected: times.len() + 1,
            times: times.len(),
            got: functions.len(),
        });
    }
    // Fold from the last observation backwards: acc ends up holding
    // f_0 * P_{t_1}(f_1 * P_{t_2 - t_1}( ... )).
    let mut acc = functions[times.len()].clone();
    for j in (0..times.len()).rev() {
        let dt = if j == 0 {
            times[0]
        } else {
            times[j] - times[j - 1]
        };
        let propagated = form.semigroup(dt, &acc)?;
        acc = functions[j].component_mul(&propagated);
    }
    Ok(initial.iter().zip(acc.iter()).map(|(w, v)| w * v).sum())
}

pub(crate) fn validate_times(times: &[f64]) -> Result<()> {
    let mut prev = 0.0;
    for (i, &t) in times.iter().enumerate() {
        if !(t > prev) {
            return Err(FormError::NonIncreasingTimes { index: i, value: t });
        }
        prev = t;
    }
    Ok(())
}

/// Which augmentation family a sweep runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Jump,
    Conductance,
}

/// A gap probe: either a resolvent parameter or a semigroup time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Probe {
    Alpha(f64),
    Time(f64),
}

impl Probe {
    pub fn kind(&self) -> &'static str {
        match self {
            Probe::Alpha(_) => "alpha",
            Probe::Time(_) => "t",
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Probe::Alpha(v) | Probe::Time(v) => *v,
        }
    }
}

/// One evaluated gap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapRow {
    pub lambda: f64,
    pub probe: Probe,
    pub function: usize,
    pub gap: f64,
}

/// Fitted `gap ~ c * lambda^{-p}` for one (probe, function) series.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesFit {
    pub probe: Probe,
    pub function: usize,
    /// `Some((c, p))` when at least four usable points exist.
    pub power_law: Option<(f64, f64)>,
    pub final_gap: f64,
    pub converged: bool,
}

/// Sweep output: the gap table plus per-series fits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub lambdas: Vec<f64>,
    pub rows: Vec<GapRow>,
    pub fits: Vec<SeriesFit>,
    pub tolerance: f64,
    /// True when every series ends below tolerance.
    pub all_converged: bool,
}

impl SweepReport {
    /// Gap series for one (probe, function) pair, in schedule order.
    pub fn series(&self, probe: Probe, function: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.probe == probe && r.function == function)
            .map(|r| r.gap)
            .collect()
    }
}

/// Runs the full gap sweep over a lambda schedule.
///
/// For each lambda the augmented form is built (jump or conductance mode) and
/// resolvent gaps are evaluated for every (alpha, function) pair, semigroup
/// gaps for every (t, function) pair. Rows are ordered by
/// (lambda, alphas then ts, function index). Sweep points run in parallel and
/// are merged back in schedule order.
pub fn sweep(
    base: &SymmetricForm,
    holes: &HoleSet,
    mu: Option<&MeasureFamily>,
    mode: AugmentMode,
    schedule: &[f64],
    alphas: &[f64],
    ts: &[f64],
    functions: &[L2Vector],
    tolerance: f64,
) -> Result<SweepReport> {
    if schedule.is_empty() || schedule.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(FormError::BadSchedule);
    }
    if functions.is_empty() {
        return Err(FormError::EmptyTestSet);
    }
    if alphas.is_empty() && ts.is_empty() {
        return Err(FormError::EmptyProbeSet);
    }
    for a in alphas {
        if !(*a > 0.0) {
            return Err(FormError::NonPositiveAlpha(*a));
        }
    }
    for t in ts {
        if !(*t > 0.0) {
            return Err(FormError::NegativeTime(*t));
        }
    }
    let default_mu;
    let mu = match (mode, mu) {
        (AugmentMode::Jump, Some(m)) => Some(m),
        (AugmentMode::Jump, None) => {
            default_mu = MeasureFamily::from_masses(base, holes)?;
            Some(&default_mu)
        }
        (AugmentMode::Conductance, _) => None,
    };
    if !ts.is_empty() {
        for f in functions {
            require_hole_constant(holes, f)?;
        }
    }

    let (darned, map) = darn(base, holes, MassMode::Sticky)?;
    let starred: Vec<L2Vector> = functions
        .iter()
        .map(|f| map.average(base.masses(), f))
        .collect::<Result<_>>()?;

    // Reference side is lambda-independent; compute it once.
    let mut reference: Vec<(Probe, Vec<L2Vector>)> = Vec::new();
    for &alpha in alphas {
        let solver = darned.resolvent_solver(alpha)?;
        let lifted: Vec<L2Vector> = starred
            .iter()
            .map(|fs| map.lift(&solver.apply(fs)?))
            .collect::<Result<_>>()?;
        reference.push((Probe::Alpha(alpha), lifted));
    }
    for &t in ts {
        let lifted: Vec<L2Vector> = starred
            .iter()
            .map(|fs| map.lift(&darned.semigroup(t, fs)?))
            .collect::<Result<_>>()?;
        reference.push((Probe::Time(t), lifted));
    }

    let per_lambda: Vec<Result<Vec<GapRow>>> = schedule
        .par_iter()
        .map(|&lambda| {
            let aug = match mode {
                AugmentMode::Jump => augment_jump(base, holes, mu.unwrap(), lambda)?,
                AugmentMode::Conductance => augment_conductance(base, holes, lambda)?,
            };
            let mut rows = Vec::new();
            for (probe, lifted) in &reference {
                match probe {
                    Probe::Alpha(alpha) => {
                        let solver = aug.resolvent_solver(*alpha)?;
                        for (k, f) in functions.iter().enumerate() {
                            let gap = base.norm(&(solver.apply(f)? - &lifted[k]))?;
                            rows.push(GapRow {
                                lambda,
                                probe: *probe,
                                function: k,
                                gap,
                            });
                        }
                    }
                    Probe::Time(t) => {
                        for (k, f) in functions.iter().enumerate() {
                            let gap = base.norm(&(aug.semigroup(*t, f)? - &lifted[k]))?;
                            rows.push(GapRow {
                                lambda,
                                probe: *probe,
                                function: k,
                                gap,
                            });
                        }
                    }
                }
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in per_lambda {
        rows.extend(r?);
    }

    let mut fits = Vec::new();
    for (probe, _) in &reference {
        for k in 0..functions.len() {
            let gaps: Vec<f64> = rows
                .iter()
                .filter(|r| r.probe == *probe && r.function == k)
                .map(|r| r.gap)
                .collect();
            let final_gap = *gaps.last().unwrap();
            fits.push(SeriesFit {
                probe: *probe,
                function: k,
                power_law: fit_power_law(schedule, &gaps),
                final_gap,
                converged: final_gap < tolerance,
            });
        }
    }
    let all_converged = fits.iter().all(|f| f.converged);
    Ok(SweepReport {
        lambdas: schedule.to_vec(),
        rows,
        fits,
        tolerance,
        all_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darning::constrained_resolvent;
    use crate::testutil::{random_form, random_holes, random_vec};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gap_vanishes_for_the_constrained_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let base = random_form(&mut rng, 12);
        let holes = random_holes(&mut rng, 12);
        let f = random_vec(&mut rng, 12);
        let alpha = 1.2;
        // Feed the oracle output through the darned route by hand.
        let (darned, map) = darn(&base, &holes, MassMode::Sticky).unwrap();
        let oracle = constrained_resolvent(&base, &holes, alpha, &f).unwrap();
        let starred = map.average(base.masses(), &f).unwrap();
        let darned_route = map.lift(&darned.resolvent(alpha, &starred).unwrap()).unwrap();
        assert!(base.norm(&(oracle - darned_route)).unwrap() <= 1e-10);
    }

    #[test]
    fn gap_positive_at_lambda_zero_on_4_state_instance() {
        let base = SymmetricForm::new(
            vec![1.0; 4],
            vec![(0, 1, 1.0), (1, 2, 0.2), (2, 3, 1.0), (0, 3, 0.3)],
            vec![0.0; 4],
        )
        .unwrap();
        let holes = HoleSet::new(vec![vec![1, 2]]).unwrap();
        let f = DVector::from_vec(vec![1.0, -1.0, 2.0, 0.5]);
        let gap = resolvent_gap(&base, &base, &holes, 1.0, &f).unwrap();
        assert!(gap > 1e-3, "expected a visible gap, got {gap}");
    }

    #[test]
    fn quadratic_form_values_decrease_along_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let base = random_form(&mut rng, 10);
        let holes = random_holes(&mut rng, 10);
        let mu = MeasureFamily::from_masses(&base, &holes).unwrap();
        let f = random_vec(&mut rng, 10);
        let alpha = 0.8;
        let (darned, map) = darn(&base, &holes, MassMode::Sticky).unwrap();
        let starred = map.average(base.masses(), &f).unwrap();
        let limit = base
            .inner(
                &f,
                &map.lift(&darned.resolvent(alpha, &starred).unwrap()).unwrap(),
            )
            .unwrap();
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 1.0, 10.0, 100.0, 1000.0] {
            let aug = augment_jump(&base, &holes, &mu, lambda).unwrap();
            let q = base.inner(&f, &aug.resolvent(alpha, &f).unwrap()).unwrap();
            assert!(q <= prev + 1e-12, "quadratic form rose at lambda={lambda}");
            assert!(q + 1e-10 >= limit, "dropped below the darned limit");
            prev = q;
        }
    }

    #[test]
    fn semigroup_gap_requires_hole_constant_function() {
        let base = SymmetricForm::new(
            vec![1.0; 3],
            vec![(0, 1, 1.0), (1, 2, 1.0)],
            vec![0.0; 3],
        )
        .unwrap();
        let holes = HoleSet::new(vec![vec![1, 2]]).unwrap();
        let f = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            semigroup_gap(&base, &base, &holes, 1.0, &f),
            Err(FormError::NotConstantOnHole { .. })
        ));
    }

    #[test]
    fn semigroup_gap_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let base = random_form(&mut rng, 8);
        let holes = random_holes(&mut rng, 8);
        // Conservative variant: strip the killing.
        let base = SymmetricForm::new(
            base.masses().as_slice().to_vec(),
            base.edges().iter().map(|e| (e.x, e.y, e.weight)).collect(),
            vec![0.0; 8],
        )
        .unwrap();
        let ones = DVector::from_element(8, 1.0);
        for t in [0.2, 1.0, 4.0] {
            let gap = semigroup_gap(&base, &base, &holes, t, &ones).unwrap();
            assert!(gap <= 1e-11, "conservative gap {gap}");
        }
    }

    #[test]
    fn semigroup_gap_decreases_on_random_20_state_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let base = random_form(&mut rng, 20);
        let holes = random_holes(&mut rng, 20);
        let mu = MeasureFamily::from_masses(&base, &holes).unwrap();
        let mut f = random_vec(&mut rng, 20);
        for hole in holes.holes() {
            for &x in hole {
                f[x] = f[hole[0]];
            }
        }
        let mut prev = f64::INFINITY;
        for lambda in [1.0, 10.0, 100.0, 1000.0, 10000.0] {
            let aug = augment_jump(&base, &holes, &mu, lambda).unwrap();
            let gap = semigroup_gap(&aug, &base, &holes, 0.7, &f).unwrap();
            assert!(gap <= prev + 1e-9, "gap rose at lambda={lambda}");
            prev = gap;
        }
        assert!(prev <= 1e-3, "final semigroup gap {prev}");
    }

    #[test]
    fn fdd_exact_no_dynamics() {
        let form = SymmetricForm::new(vec![2.0, 1.0], vec![(0, 1, 1.0)], vec![0.0; 2]).unwrap();
        let initial = DVector::from_vec(vec![0.25, 0.75]);
        let f0 = DVector::from_vec(vec![3.0, -1.0]);
        let value = fdd_exact(&form, &initial, &[], &[f0]).unwrap();
        assert_relative_eq!(value, 0.25 * 3.0 - 0.75, epsilon = 1e-14);
    }

    #[test]
    fn fdd_exact_conservative_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let base = random_form(&mut rng, 6);
        let form = SymmetricForm::new(
            base.masses().as_slice().to_vec(),
            base.edges().iter().map(|e| (e.x, e.y, e.weight)).collect(),
            vec![0.0; 6],
        )
        .unwrap();
        let initial = DVector::from_fn(6, |_, _| rng.random::<f64>());
        let ones = DVector::from_element(6, 1.0);
        let value = fdd_exact(
            &form,
            &initial,
            &[0.3, 1.1],
            &[ones.clone(), ones.clone(), ones],
        )
        .unwrap();
        assert_relative_eq!(value, initial.sum(), max_relative = 1e-11);
    }

    #[test]
    fn fdd_exact_validates_times() {
        let form = SymmetricForm::new(vec![1.0], vec![], vec![0.0]).unwrap();
        let one = DVector::from_element(1, 1.0);
        assert!(fdd_exact(&form, &one, &[0.5, 0.5], &[one.clone(), one.clone(), one.clone()]).is_err());
        assert!(fdd_exact(&form, &one, &[0.0], &[one.clone(), one.clone()]).is_err());
        assert!(fdd_exact(&form, &one, &[0.5], &[one.clone()]).is_err());
    }

    #[test]
    fn sweep_constant_harmonic_function_stays_flat() {
        let base = SymmetricForm::new(
            vec![1.0; 4],
            vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)],
            vec![0.0; 4],
        )
        .unwrap();
        let holes = HoleSet::new(vec![vec![1, 2]]).unwrap();
        let ones = DVector::from_element(4, 1.0);
        let report = sweep(
            &base,
            &holes,
            None,
            AugmentMode::Jump,
            &[1.0, 10.0, 100.0],
            &[1.0],
            &[0.5],
            &[ones],
            DEFAULT_GAP_TOLERANCE,
        )
        .unwrap();
        for row in &report.rows {
            assert!(row.gap <= 1e-11, "constant function saw gap {}", row.gap);
        }
        assert!(report.all_converged);
    }

    #[test]
    fn sweep_jump_mode_fitted_exponent_near_one() {
        // 6-state, two holes; empirical decay is ~ lambda^{-1}.
        let base = SymmetricForm::new(
            vec![1.0; 6],
            vec![
                (0, 1, 1.0),
                (1, 2, 0.5),
                (2, 3, 1.5),
                (3, 4, 1.0),
                (4, 5, 0.7),
                (0, 5, 0.4),
            ],
            vec![0.0, 0.1, 0.0, 0.0, 0.2, 0.0],
        )
        .unwrap();
        let holes = HoleSet::new(vec![vec![1, 2], vec![4, 5]]).unwrap();
        let f = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0, 1.4, -0.6]);
        let schedule: Vec<f64> = (0..7).map(|k| 10f64.powi(k)).collect();
        let report = sweep(
            &base,
            &holes,
            None,
            AugmentMode::Jump,
            &schedule,
            &[1.0],
            &[],
            &[f],
            DEFAULT_GAP_TOLERANCE,
        )
        .unwrap();
        let fit = &report.fits[0];
        let (_, p) = fit.power_law.expect("enough points for a fit");
        assert!((p - 1.0).abs() < 0.2, "fitted exponent {p}");
        assert!(fit.converged, "final gap {}", fit.final_gap);
    }

    #[test]
    fn sweep_conductance_mode_flags_no_op_boost() {
        // No intra-hole edges: boosting changes nothing, gaps stay put.
        let base = SymmetricForm::new(
            vec![1.0; 4],
            vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)],
            vec![0.0; 4],
        )
        .unwrap();
        let holes = HoleSet::new(vec![vec![1, 3]]).unwrap();
        let f = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
        let report = sweep(
            &base,
            &holes,
            None,
            AugmentMode::Conductance,
            &[1.0, 10.0, 100.0, 1000.0],
            &[1.0],
            &[],
            &[f],
            DEFAULT_GAP_TOLERANCE,
        )
        .unwrap();
        let gaps = report.series(Probe::Alpha(1.0), 0);
        for pair in gaps.windows(2) {
            assert_relative_eq!(pair[0], pair[1], max_relative = 1e-12);
        }
        assert!(!report.all_converged);
        assert!(gaps[0] > 1e-3);
    }

    #[test]
    fn sweep_rejects_bad_inputs() {
        let base = SymmetricForm::new(vec![1.0; 2], vec![(0, 1, 1.0)], vec![0.0; 2]).unwrap();
        let holes = HoleSet::new(vec![vec![0]]).unwrap();
        let f = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            sweep(&base, &holes, None, AugmentMode::Jump, &[], &[1.0], &[], &[f.clone()], 1e-6),
            Err(FormError::BadSchedule)
        ));
        assert!(matches!(
            sweep(&base, &holes, None, AugmentMode::Jump, &[2.0, 1.0], &[1.0], &[], &[f.clone()], 1e-6),
            Err(FormError::BadSchedule)
        ));
        assert!(matches!(
            sweep(&base, &holes, None, AugmentMode::Jump, &[1.0], &[1.0], &[], &[], 1e-6),
            Err(FormError::EmptyTestSet)
        ));
        assert!(matches!(
            sweep(&base, &holes, None, AugmentMode::Jump, &[1.0], &[], &[], &[f], 1e-6),
            Err(FormError::EmptyProbeSet)
        ));
    }

    #[test]
    fn mosco_recovery_witness_is_exact() {
        // For u constant on holes, E^(lambda)(u,u) = E~(u,u) for every lambda.
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let base = random_form(&mut rng, 9);
        let holes = random_holes(&mut rng, 9);
        let mu = MeasureFamily::from_masses(&base, &holes).unwrap();
        let mut u = random_vec(&mut rng, 9);
        for hole in holes.holes() {
            for &x in hole {
                u[x] = u[hole[0]];
            }
        }
        let reference = base.energy(&u, &u).unwrap();
        for lambda in [1.0, 100.0, 1e6] {
            let aug = augment_jump(&base, &holes, &mu, lambda).unwrap();
            assert_eq!(aug.energy(&u, &u).unwrap(), reference);
        }
    }
}
