//! Pathwise Monte Carlo: exact CTMC realization of a form's Hunt process,
//! the kill-and-rebirth piecing construction, and seeded product-expectation
//! estimators.
//!
//! Seed discipline: every path uses `ChaCha8Rng` seeded from the master seed
//! with the path index as the ChaCha stream number, so path streams are
//! independent and the estimators are reproducible regardless of the
//! parallelism degree.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{piecing_rates, MeasureFamily, PiecingRates};
use crate::convergence::validate_times;
use crate::darning::HoleSet;
use crate::error::{FormError, Result};
use crate::form::{L2Vector, SymmetricForm};

/// One simulated path: a right-continuous step function recorded as
/// (state, holding time) pairs. A killed trace ends strictly before the
/// horizon; an alive trace's holdings sum exactly to the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub seed: u64,
    pub steps: Vec<(usize, f64)>,
    pub killed: bool,
}

impl Trace {
    /// State occupied at time `t` (right-continuous); `None` once killed.
    pub fn state_at(&self, t: f64) -> Option<usize> {
        let mut elapsed = 0.0;
        for &(state, hold) in &self.steps {
            elapsed += hold;
            if t < elapsed {
                return Some(state);
            }
        }
        None
    }

    pub fn total_time(&self) -> f64 {
        self.steps.iter().map(|&(_, h)| h).sum()
    }

    /// Plain-text export: one `time,state` line per event plus a terminal
    /// marker (`killed` or `alive`).
    pub fn export(&self) -> String {
        let mut out = String::new();
        let mut t = 0.0;
        for &(state, hold) in &self.steps {
            out.push_str(&format!("{},{}\n", t, state));
            t += hold;
        }
        out.push_str(&format!(
            "{},{}\n",
            t,
            if self.killed { "killed" } else { "alive" }
        ));
        out
    }
}

/// A Monte Carlo point estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MCEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub paths: usize,
}

/// Precomputed jump tables for exact simulation of a form's chain.
struct CtmcSampler<'a> {
    form: &'a SymmetricForm,
    /// Per state: cumulative conductance over neighbors, then total with
    /// killing appended.
    cumulative: Vec<Vec<(usize, f64)>>,
    total_weight: Vec<f64>,
}

impl<'a> CtmcSampler<'a> {
    fn new(form: &'a SymmetricForm) -> Self {
        let n = form.n();
        let mut cumulative = Vec::with_capacity(n);
        let mut total_weight = Vec::with_capacity(n);
        for x in 0..n {
            let mut acc = 0.0;
            let mut cum = Vec::with_capacity(form.neighbors(x).len());
            for &(y, w) in form.neighbors(x) {
                acc += w;
                cum.push((y, acc));
            }
            cumulative.push(cum);
            total_weight.push(acc + form.killing()[x]);
        }
        CtmcSampler {
            form,
            cumulative,
            total_weight,
        }
    }

    fn rate(&self, x: usize) -> f64 {
        self.total_weight[x] / self.form.masses()[x]
    }

    /// Draws the next event from `x`: `None` means killed.
    fn next_state(&self, x: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        let u = rng.random::<f64>() * self.total_weight[x];
        let cum = &self.cumulative[x];
        let idx = cum.partition_point(|&(_, c)| c <= u);
        if idx < cum.len() {
            Some(cum[idx].0)
        } else {
            None
        }
    }
}

fn exp_sample(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    // Inverse transform; 1 - u stays in (0, 1].
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// Exact CTMC realization of the form's Hunt process from `start` up to
/// `horizon`. Holding at total rate `(sum_y c(x,y) + kappa(x)) / m(x)`; a
/// state with zero total rate holds to the horizon.
pub fn simulate_ctmc(
    form: &SymmetricForm,
    start: usize,
    horizon: f64,
    seed: u64,
) -> Result<Trace> {
    if start >= form.n() {
        return Err(FormError::StateOutOfRange {
            state: start,
            n: form.n(),
        });
    }
    if !(horizon > 0.0) {
        return Err(FormError::NonPositiveHorizon(horizon));
    }
    let sampler = CtmcSampler::new(form);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Trace {
        seed,
        steps: Vec::new(),
        killed: false,
    };
    walk(&sampler, None, start, horizon, &mut rng, &mut trace);
    Ok(trace)
}

/// Shared walker for the plain chain and the piecing construction. With
/// `piecing` set, extra kill events at the calibrated rates trigger rebirth
/// draws; rebirths landing on the current node merge into the holding time.
fn walk(
    sampler: &CtmcSampler,
    piecing: Option<(&PiecingState, &SymmetricForm)>,
    start: usize,
    horizon: f64,
    rng: &mut ChaCha8Rng,
    trace: &mut Trace,
) {
    let mut state = start;
    let mut elapsed = 0.0;
    let mut hold_acc = 0.0;
    loop {
        let base_rate = sampler.rate(state);
        let extra_rate = piecing.map_or(0.0, |(p, _)| p.kill_rate[state]);
        let total_rate = base_rate + extra_rate;
        if total_rate == 0.0 {
            trace.steps.push((state, horizon - elapsed + hold_acc));
            return;
        }
        let hold = exp_sample(total_rate, rng);
        if elapsed + hold_acc + hold >= horizon {
            trace.steps.push((state, horizon - elapsed + hold_acc));
            return;
        }
        let is_extra = extra_rate > 0.0 && rng.random::<f64>() * total_rate < extra_rate;
        if is_extra {
            let (p, _) = piecing.unwrap();
            let next = p.draw_rebirth(state, rng);
            if next == state {
                // Self-rebirth: extend the holding interval instead of
                // recording a fictitious transition.
                hold_acc += hold;
                continue;
            }
            trace.steps.push((state, hold + hold_acc));
            elapsed += hold + hold_acc;
            hold_acc = 0.0;
            state = next;
            continue;
        }
        match sampler.next_state(state, rng) {
            Some(next) => {
                trace.steps.push((state, hold + hold_acc));
                elapsed += hold + hold_acc;
                hold_acc = 0.0;
                state = next;
            }
            None => {
                trace.steps.push((state, hold + hold_acc));
                trace.killed = true;
                return;
            }
        }
    }
}

/// Rebirth tables derived from [`piecing_rates`].
struct PiecingState {
    kill_rate: Vec<f64>,
    /// Per node inside a hole: the hole's node list and rebirth cdf.
    rebirth_cdf: Vec<Option<(Vec<usize>, Vec<f64>)>>,
}

impl PiecingState {
    fn new(form: &SymmetricForm, holes: &HoleSet, rates: &PiecingRates) -> Self {
        let mut rebirth_cdf = vec![None; form.n()];
        for (j, hole) in holes.holes().iter().enumerate() {
            let mut acc = 0.0;
            let cdf: Vec<f64> = rates.rebirth[j]
                .iter()
                .map(|&p| {
                    acc += p;
                    acc
                })
                .collect();
            for &x in hole {
                rebirth_cdf[x] = Some((hole.clone(), cdf.clone()));
            }
        }
        PiecingState {
            kill_rate: rates.kill_rate.clone(),
            rebirth_cdf,
        }
    }

    fn draw_rebirth(&self, x: usize, rng: &mut ChaCha8Rng) -> usize {
        let (nodes, cdf) = self.rebirth_cdf[x]
            .as_ref()
            .expect("extra kill can only fire inside a hole");
        let u = rng.random::<f64>() * cdf.last().copied().unwrap_or(1.0);
        let idx = cdf.partition_point(|&c| c <= u).min(nodes.len() - 1);
        nodes[idx]
    }
}

/// Piecing-together realization: the base chain with calibrated extra killing
/// on the holes and instantaneous rebirth from `nu_j = mu_j / mu_j(K_j)`.
/// Genuine killing (kappa) still terminates the trace. Distributionally equal
/// to [`simulate_ctmc`] on the jump-augmented form.
pub fn simulate_piecing(
    base: &SymmetricForm,
    holes: &HoleSet,
    mu: &MeasureFamily,
    lambda: f64,
    start: usize,
    horizon: f64,
    seed: u64,
) -> Result<Trace> {
    if start >= base.n() {
        return Err(FormError::StateOutOfRange {
            state: start,
            n: base.n(),
        });
    }
    if !(horizon > 0.0) {
        return Err(FormError::NonPositiveHorizon(horizon));
    }
    let rates = piecing_rates(base, holes, mu, lambda)?;
    let piecing = PiecingState::new(base, holes, &rates);
    let sampler = CtmcSampler::new(base);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Trace {
        seed,
        steps: Vec::new(),
        killed: false,
    };
    walk(&sampler, Some((&piecing, base)), start, horizon, &mut rng, &mut trace);
    Ok(trace)
}

/// Pairwise (cascade) summation; order-independent reduction for the
/// estimators.
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Monte Carlo estimate of the finite-dimensional product expectation
/// `E_initial[ f_0(X_0) f_1(X_{t_1}) ... f_k(X_{t_k}) ]`.
///
/// `initial` is a nonnegative measure: starting states are drawn from its
/// normalization and the estimate is scaled by the total mass. Killed paths
/// contribute zero from their death time onwards, matching the sub-Markovian
/// semigroup. Paths are simulated without materializing traces.
pub fn estimate_fdd(
    form: &SymmetricForm,
    initial: &DVector<f64>,
    times: &[f64],
    functions: &[L2Vector],
    paths: usize,
    seed: u64,
) -> Result<MCEstimate> {
    if paths == 0 {
        return Err(FormError::NoPaths);
    }
    if initial.len() != form.n() {
        return Err(FormError::DimensionMismatch {
            expected: form.n(),
            got: initial.len(),
        });
    }
    validate_times(times)?;
    if functions.len() != times.len() + 1 {
        return Err(FormError::FunctionCountMismatch {
            expected: times.len() + 1,
            times: times.len(),
            got: functions.len(),
        });
    }
    for f in functions {
        if f.len() != form.n() {
            return Err(FormError::DimensionMismatch {
                expected: form.n(),
                got: f.len(),
            });
        }
    }
    let total_mass: f64 = initial.iter().sum();
    if initial.iter().any(|&w| w < 0.0) || !(total_mass > 0.0) {
        return Err(FormError::InvalidInitialMeasure);
    }
    let mut initial_cdf = Vec::with_capacity(form.n());
    let mut acc = 0.0;
    for &w in initial.iter() {
        acc += w;
        initial_cdf.push(acc);
    }
    let sampler = CtmcSampler::new(form);

    let values: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path as u64);
            let u = rng.random::<f64>() * total_mass;
            let start = initial_cdf.partition_point(|&c| c <= u).min(form.n() - 1);
            let mut product = functions[0][start];
            if times.is_empty() || product == 0.0 {
                return product;
            }
            // Walk the chain, reading off states at the observation times
            // (right-continuous: an observation at a jump instant sees the
            // post-jump state).
            let mut state = start;
            let mut elapsed = 0.0;
            let mut next_obs = 0;
            loop {
                let rate = sampler.rate(state);
                let event_at = if rate == 0.0 {
                    f64::INFINITY
                } else {
                    elapsed + exp_sample(rate, &mut rng)
                };
                while next_obs < times.len() && times[next_obs] < event_at {
                    product *= functions[next_obs + 1][state];
                    next_obs += 1;
                }
                if next_obs == times.len() || product == 0.0 {
                    return product;
                }
                elapsed = event_at;
                match sampler.next_state(state, &mut rng) {
                    Some(next) => state = next,
                    None => return 0.0,
                }
            }
        })
        .collect();

    let mean = pairwise_sum(&values) / paths as f64;
    let sq_dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let variance = if paths > 1 {
        pairwise_sum(&sq_dev) / ((paths - 1) as f64)
    } else {
        0.0
    };
    Ok(MCEstimate {
        estimate: total_mass * mean,
        std_error: total_mass * (variance / paths as f64).sqrt(),
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::augment_jump;
    use crate::convergence::fdd_exact;
    use approx::assert_relative_eq;

    #[test]
    fn same_seed_bit_identical_trace() {
        let form = SymmetricForm::new(
            vec![1.0, 2.0, 0.5],
            vec![(0, 1, 1.0), (1, 2, 0.3)],
            vec![0.0, 0.1, 0.0],
        )
        .unwrap();
        let a = simulate_ctmc(&form, 0, 25.0, 42).unwrap();
        let b = simulate_ctmc(&form, 0, 25.0, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_ctmc(&form, 0, 25.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trace_invariants_hold() {
        let form = SymmetricForm::new(
            vec![1.0, 1.0],
            vec![(0, 1, 2.0)],
            vec![0.2, 0.0],
        )
        .unwrap();
        for seed in 0..50 {
            let trace = simulate_ctmc(&form, 0, 5.0, seed).unwrap();
            assert!(trace.steps.iter().all(|&(_, h)| h > 0.0));
            let total = trace.total_time();
            if trace.killed {
                assert!(total < 5.0);
            } else {
                assert_relative_eq!(total, 5.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn absorbing_state_holds_to_horizon() {
        let form = SymmetricForm::new(vec![1.0], vec![], vec![0.0]).unwrap();
        let trace = simulate_ctmc(&form, 0, 3.0, 1).unwrap();
        assert_eq!(trace.steps, vec![(0, 3.0)]);
        assert!(!trace.killed);
    }

    #[test]
    fn pure_killing_matches_exponential_law() {
        // c = 0, kappa > 0: survival at t is exp(-kappa t / m) and every trace
        // eventually dies.
        let kappa = 0.8;
        let mass = 1.6;
        let form = SymmetricForm::new(vec![mass], vec![], vec![kappa]).unwrap();
        let t = 1.0;
        let paths = 100_000u64;
        let mut survived = 0usize;
        for path in 0..paths {
            let trace = simulate_ctmc(&form, 0, 4.0, path).unwrap();
            if trace.state_at(t).is_some() {
                survived += 1;
            }
        }
        let p_exact = (-kappa * t / mass).exp();
        let p_hat = survived as f64 / paths as f64;
        let se = (p_exact * (1.0 - p_exact) / paths as f64).sqrt();
        assert!(
            (p_hat - p_exact).abs() <= 3.0 * se,
            "survival {p_hat} vs {p_exact} (se {se})"
        );
    }

    #[test]
    fn occupation_fraction_tracks_symmetrizing_measure() {
        // Start from the symmetrizing measure; the expected occupation
        // fraction of state 0 is then m(0)/(m(0)+m(1)) exactly.
        let m = vec![1.0, 3.0];
        let form = SymmetricForm::new(m.clone(), vec![(0, 1, 1.0)], vec![0.0, 0.0]).unwrap();
        let horizon = 30.0;
        let paths = 20_000;
        let pi0 = m[0] / (m[0] + m[1]);
        let mut fractions = Vec::with_capacity(paths);
        for path in 0..paths as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            rng.set_stream(path);
            let start = if rng.random::<f64>() < pi0 { 0 } else { 1 };
            let trace = simulate_ctmc(&form, start, horizon, 1000 + path).unwrap();
            let in_zero: f64 = trace
                .steps
                .iter()
                .filter(|&&(s, _)| s == 0)
                .map(|&(_, h)| h)
                .sum();
            fractions.push(in_zero / horizon);
        }
        let mean = fractions.iter().sum::<f64>() / paths as f64;
        let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
        let se = (var / paths as f64).sqrt();
        assert!(
            (mean - pi0).abs() <= 3.0 * se,
            "occupation {mean} vs {pi0} (se {se})"
        );
    }

    #[test]
    fn piecing_lambda_zero_is_plain_chain() {
        let form = SymmetricForm::new(
            vec![1.0, 1.0, 1.0],
            vec![(0, 1, 1.0), (1, 2, 1.0)],
            vec![0.0, 0.0, 0.1],
        )
        .unwrap();
        let holes = HoleSet::new(vec![vec![1]]).unwrap();
        let mu = MeasureFamily::new(&holes, vec![vec![1.0]]).unwrap();
        let a = simulate_piecing(&form, &holes, &mu, 0.0, 0, 10.0, 5).unwrap();
        let b = simulate_ctmc(&form, 0, 10.0, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_node_hole_rebirth_is_invisible() {
        let form = SymmetricForm::new(
            vec![1.0, 1.0],
            vec![(0, 1, 1.0)],
            vec![0.0, 0.0],
        )
        .unwrap();
        let holes = HoleSet::new(vec![vec![0]]).unwrap();
        let mu = MeasureFamily::new(&holes, vec![vec![2.0]]).unwrap();
        for seed in 0..20 {
            let trace = simulate_piecing(&form, &holes, &mu, 10.0, 0, 8.0, seed).unwrap();
            assert!(!trace.killed);
            // No repeated states back to back: self-rebirths merged.
            for w in trace.steps.windows(2) {
                assert_ne!(w[0].0, w[1].0);
            }
            assert_relative_eq!(trace.total_time(), 8.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn estimate_fdd_deterministic_single_state() {
        let form = SymmetricForm::new(vec![1.0], vec![], vec![0.0]).unwrap();
        let est = estimate_fdd(
            &form,
            &DVector::from_vec(vec![1.0]),
            &[],
            &[DVector::from_vec(vec![2.0])],
            500,
            9,
        )
        .unwrap();
        assert_eq!(est.estimate, 2.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn estimate_fdd_matches_exact_on_3_state_chain() {
        let form = SymmetricForm::new(
            vec![1.0, 1.0, 2.0],
            vec![(0, 1, 1.0), (1, 2, 0.5)],
            vec![0.0, 0.2, 0.0],
        )
        .unwrap();
        let initial = DVector::from_vec(vec![0.5, 0.3, 0.2]);
        let f0 = DVector::from_vec(vec![1.0, 0.5, 2.0]);
        let f1 = DVector::from_vec(vec![0.3, 1.5, 1.0]);
        let times = [0.7];
        let exact = fdd_exact(&form, &initial, &times, &[f0.clone(), f1.clone()]).unwrap();
        let est = estimate_fdd(&form, &initial, &times, &[f0, f1], 100_000, 11).unwrap();
        assert!(
            (est.estimate - exact).abs() <= 3.0 * est.std_error,
            "estimate {} vs exact {} (se {})",
            est.estimate,
            exact,
            est.std_error
        );
    }

    #[test]
    fn estimate_fdd_same_seed_reproducible() {
        let form = SymmetricForm::new(vec![1.0, 1.0], vec![(0, 1, 1.0)], vec![0.0, 0.0]).unwrap();
        let initial = DVector::from_vec(vec![1.0, 0.0]);
        let f0 = DVector::from_vec(vec![1.0, 1.0]);
        let f1 = DVector::from_vec(vec![0.0, 1.0]);
        let a = estimate_fdd(&form, &initial, &[0.5], &[f0.clone(), f1.clone()], 2000, 3).unwrap();
        let b = estimate_fdd(&form, &initial, &[0.5], &[f0, f1], 2000, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn killed_mass_accounting() {
        let form = SymmetricForm::new(
            vec![1.0, 1.0],
            vec![(0, 1, 1.0)],
            vec![0.0, 0.7],
        )
        .unwrap();
        let t = 1.2;
        let paths = 30_000;
        let mut killed_by_t = 0usize;
        for path in 0..paths {
            let trace = simulate_ctmc(&form, 0, t + 0.5, 500_000 + path as u64).unwrap();
            if trace.state_at(t).is_none() {
                killed_by_t += 1;
            }
        }
        let ones = DVector::from_element(2, 1.0);
        let survive = form.semigroup(t, &ones).unwrap()[0];
        let frac = killed_by_t as f64 / paths as f64;
        let se = (survive * (1.0 - survive) / paths as f64).sqrt();
        assert!(
            (frac - (1.0 - survive)).abs() <= 3.0 * se,
            "killed fraction {frac} vs {} (se {se})",
            1.0 - survive
        );
    }

    #[test]
    fn piecing_marginals_match_augmented_semigroup() {
        // 5-state instance, lambda = 10: empirical P_t marginals vs the exact
        // semigroup of the augmented form.
        let form = SymmetricForm::new(
            vec![1.0, 0.5, 2.0, 1.0, 1.5],
            vec![(0, 1, 1.0), (1, 2, 0.8), (2, 3, 1.2), (3, 4, 1.0), (0, 2, 0.5)],
            vec![0.0, 0.0, 0.3, 0.0, 0.0],
        )
        .unwrap();
        let holes = HoleSet::new(vec![vec![1, 3]]).unwrap();
        let mu = MeasureFamily::new(&holes, vec![vec![0.7, 1.1]]).unwrap();
        let lambda = 10.0;
        let aug = augment_jump(&form, &holes, &mu, lambda).unwrap();
        let t = 0.6;
        let start = 0;
        let paths = 60_000;
        let mut counts = vec![0usize; 6]; // last slot: killed
        for path in 0..paths {
            let trace = simulate_piecing(&form, &holes, &mu, lambda, start, t + 0.1, path as u64)
                .unwrap();
            match trace.state_at(t) {
                Some(s) => counts[s] += 1,
                None => counts[5] += 1,
            }
        }
        for s in 0..5 {
            let mut indicator = DVector::zeros(5);
            indicator[s] = 1.0;
            let p = aug.semigroup(t, &indicator).unwrap()[start];
            let p_hat = counts[s] as f64 / paths as f64;
            let se = (p * (1.0 - p) / paths as f64).sqrt().max(1e-12);
            assert!(
                (p_hat - p).abs() <= 3.5 * se,
                "state {s}: {p_hat} vs {p} (se {se})"
            );
        }
    }
}
