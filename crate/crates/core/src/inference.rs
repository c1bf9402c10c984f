//! Exact sequential updating of finite-atom posteriors, predictive densities,
//! restricted posteriors and numerator paths.
//!
//! All masses are kept as logs. A [`PosteriorState`] holds, per atom,
//! `log pi_j + sum_i log f_j(Y_i)`, so the evidence and every restricted
//! mass are log-sum-exps of its entries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergences::{self, DivergenceError, Grid, GridDensity};
use crate::models::{AtomicPrior, Context, FamilyMember, Mixture, ModelError, Observation};
use crate::numeric::{log_sum_exp, softmax};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("restricted posterior undefined: {0}")]
    RestrictedUndefined(String),
    #[error("empty history")]
    EmptyHistory,
    #[error("predictives come from different priors")]
    MixedHistory,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// The posterior `Pi_n` after `n_observed` observations, together with the
/// evidence and the likelihood-ratio denominator.
#[derive(Debug, Clone)]
pub struct PosteriorState<'p> {
    prior: &'p AtomicPrior,
    reference: Option<&'p FamilyMember>,
    log_weights: Vec<f64>,
    n_observed: usize,
    log_evidence: f64,
    log_r_denominator: f64,
}

impl<'p> PosteriorState<'p> {
    /// A state without a likelihood-ratio reference; `log_i_n` equals the
    /// log evidence.
    pub fn new(prior: &'p AtomicPrior) -> Self {
        Self {
            prior,
            reference: None,
            log_weights: prior.weights().iter().map(|w| w.ln()).collect(),
            n_observed: 0,
            log_evidence: 0.0,
            log_r_denominator: 0.0,
        }
    }

    /// A state whose likelihood ratios are taken against `reference`
    /// (`f*`, or `f°` under misspecification).
    pub fn with_reference(prior: &'p AtomicPrior, reference: &'p FamilyMember) -> Self {
        Self {
            reference: Some(reference),
            ..Self::new(prior)
        }
    }

    pub fn prior(&self) -> &'p AtomicPrior {
        self.prior
    }

    pub fn reference(&self) -> Option<&'p FamilyMember> {
        self.reference
    }

    pub fn n_observed(&self) -> usize {
        self.n_observed
    }

    /// Unnormalized posterior log-mass per atom.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `log ∫ prod_i f(Y_i) dPi`.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    /// `log prod_i ref(Y_i)`.
    pub fn log_r_denominator(&self) -> f64 {
        self.log_r_denominator
    }

    /// `log I_n = log ∫ R_n dPi`.
    pub fn log_i_n(&self) -> f64 {
        self.log_evidence - self.log_r_denominator
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.log_weights)
    }

    /// Functional update.
    pub fn update(&self, observation: &Observation) -> Result<Self> {
        let mut next = self.clone();
        next.observe(observation)?;
        Ok(next)
    }

    /// In-place update; returns `log fhat_{i-1}(Y_i)`.
    pub fn observe(&mut self, observation: &Observation) -> Result<f64> {
        let Observation { y, context } = observation;
        let before = log_sum_exp(&self.log_weights);
        let log_liks = self
            .prior
            .family()
            .iter()
            .map(|m| m.log_likelihood(*y, context))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(r) = self.reference {
            self.log_r_denominator += r.log_likelihood(*y, context)?;
        }
        for (lw, ll) in self.log_weights.iter_mut().zip(&log_liks) {
            *lw += ll;
        }
        let increment = log_sum_exp(&self.log_weights) - before;
        self.log_evidence += increment;
        self.n_observed += 1;
        Ok(increment)
    }

    /// Posterior mass of the atoms with the given ids.
    pub fn mass_of(&self, ids: &[usize]) -> f64 {
        let total = log_sum_exp(&self.log_weights);
        self.prior
            .family()
            .iter()
            .zip(&self.log_weights)
            .filter(|(m, _)| ids.contains(&m.id))
            .map(|(_, lw)| (lw - total).exp())
            .sum()
    }

    /// Posterior mass of a single atom by position.
    pub fn weight_at(&self, index: usize) -> f64 {
        (self.log_weights[index] - log_sum_exp(&self.log_weights)).exp()
    }

    pub fn predictive(&self) -> PredictiveDensity<'p> {
        PredictiveDensity {
            mixture: Mixture::new(self.prior.family().iter().collect(), self.weights())
                .expect("posterior weights are a probability vector"),
        }
    }

    /// Normalized weights of `Pi_n` restricted to `subset_ids`, aligned
    /// with the prior's family (zero off the subset).
    pub fn restricted_weights(&self, subset_ids: &[usize]) -> Result<Vec<f64>> {
        let mask = subset_mask(self.prior, subset_ids)?;
        let masked: Vec<f64> = self
            .log_weights
            .iter()
            .zip(&mask)
            .map(|(lw, keep)| if *keep { *lw } else { f64::NEG_INFINITY })
            .collect();
        Ok(softmax(&masked))
    }

    /// `fhat^A_{i-1}`: the predictive of the posterior restricted to A.
    pub fn restricted_predictive(&self, subset_ids: &[usize]) -> Result<PredictiveDensity<'p>> {
        let weights = self.restricted_weights(subset_ids)?;
        Ok(PredictiveDensity {
            mixture: Mixture::new(self.prior.family().iter().collect(), weights)?,
        })
    }

    /// Atom ids with their unnormalized log weights.
    pub fn dump(&self) -> StateDump {
        StateDump {
            n_observed: self.n_observed,
            atoms: self
                .prior
                .family()
                .iter()
                .zip(&self.log_weights)
                .map(|(m, lw)| (m.id, *lw))
                .collect(),
            log_evidence: self.log_evidence,
            log_r_denominator: self.log_r_denominator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDump {
    pub n_observed: usize,
    pub atoms: Vec<(usize, f64)>,
    pub log_evidence: f64,
    pub log_r_denominator: f64,
}

fn subset_mask(prior: &AtomicPrior, subset_ids: &[usize]) -> Result<Vec<bool>> {
    if subset_ids.is_empty() {
        return Err(InferenceError::RestrictedUndefined("empty subset".into()));
    }
    let mask: Vec<bool> = prior
        .family()
        .iter()
        .map(|m| subset_ids.contains(&m.id))
        .collect();
    if !mask.iter().any(|k| *k) {
        return Err(InferenceError::RestrictedUndefined(
            "subset has zero prior mass".into(),
        ));
    }
    Ok(mask)
}

/// A posterior-mean density of the next observation.
#[derive(Debug, Clone)]
pub struct PredictiveDensity<'p> {
    mixture: Mixture<'p>,
}

impl<'p> PredictiveDensity<'p> {
    pub fn mixture(&self) -> &Mixture<'p> {
        &self.mixture
    }

    pub fn log_density_at(&self, y: f64, ctx: &Context) -> Result<f64> {
        Ok(self.mixture.log_density_at(y, ctx)?)
    }

    /// The iid predictive on its members' grid.
    pub fn as_grid(&self) -> Result<GridDensity> {
        let grid = *self.mixture.members()[0]
            .as_density()
            .ok_or_else(|| {
                ModelError::WrongContext(
                    self.mixture.members()[0].kind(),
                    "a grid predictive needs iid members",
                )
            })?
            .grid();
        self.materialize(&Context::default(), &grid, 0.0)
    }

    /// The predictive at a given index/state, on `grid` in coordinates
    /// `y - shift`.
    pub fn materialize(&self, ctx: &Context, grid: &Grid, shift: f64) -> Result<GridDensity> {
        Ok(self.mixture.conditional_density(ctx, grid, shift)?)
    }
}

/// `fbar_n = n^{-1} sum_i fhat_{i-1}`, merging atoms by id.
pub fn average_predictive<'p>(history: &[PredictiveDensity<'p>]) -> Result<PredictiveDensity<'p>> {
    if history.is_empty() {
        return Err(InferenceError::EmptyHistory);
    }
    let mut merged: BTreeMap<usize, (&'p FamilyMember, f64)> = BTreeMap::new();
    for p in history {
        for (m, w) in p.mixture.members().iter().zip(p.mixture.weights()) {
            let entry = merged.entry(m.id).or_insert((*m, 0.0));
            if entry.0 != *m {
                return Err(InferenceError::MixedHistory);
            }
            entry.1 += w / history.len() as f64;
        }
    }
    let (members, weights) = merged.into_values().unzip();
    Ok(PredictiveDensity {
        mixture: Mixture::new(members, weights)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationRecord {
    pub log_joint_direct: f64,
    pub log_joint_factored: f64,
    pub abs_diff: f64,
}

/// `log ∫ prod_i f(Y_i) dPi` as one log-sum-exp over atoms of full
/// products, and as `sum_i log fhat_{i-1}(Y_i)` from sequential predictives.
pub fn factorization_check(prior: &AtomicPrior, data: &[Observation]) -> Result<FactorizationRecord> {
    let mut per_atom = Vec::with_capacity(prior.len());
    for (m, w) in prior.family().iter().zip(prior.weights()) {
        let mut total = w.ln();
        for obs in data {
            total += m.log_likelihood(obs.y, &obs.context)?;
        }
        per_atom.push(total);
    }
    let log_joint_direct = log_sum_exp(&per_atom);

    let mut state = PosteriorState::new(prior);
    let mut log_joint_factored = 0.0;
    for obs in data {
        log_joint_factored += state.predictive().log_density_at(obs.y, &obs.context)?;
        state.observe(obs)?;
    }
    Ok(FactorizationRecord {
        log_joint_direct,
        log_joint_factored,
        abs_diff: (log_joint_direct - log_joint_factored).abs(),
    })
}

/// `log L_{n,i}` for `i = 0..=data.len()`, with
/// `L_{n,i} = ∫_A prod_{k<=i} f(Y_k)/ref(Y_k) dPi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedNumeratorPath {
    pub subset_ids: Vec<usize>,
    pub log_l: Vec<f64>,
}

impl RestrictedNumeratorPath {
    pub fn final_log(&self) -> f64 {
        *self.log_l.last().expect("path has the prior entry")
    }
}

pub fn restricted_path(
    prior: &AtomicPrior,
    data: &[Observation],
    subset_ids: &[usize],
    reference: &FamilyMember,
) -> Result<RestrictedNumeratorPath> {
    let mask = subset_mask(prior, subset_ids)?;
    let members: Vec<(&FamilyMember, f64)> = prior
        .family()
        .iter()
        .zip(prior.weights())
        .zip(&mask)
        .filter(|(_, keep)| **keep)
        .map(|((m, w), _)| (m, w.ln()))
        .collect();
    let mut cumulative: Vec<f64> = members.iter().map(|(_, lw)| *lw).collect();
    let mut log_l = Vec::with_capacity(data.len() + 1);
    log_l.push(log_sum_exp(&cumulative));
    for obs in data {
        let log_ref = reference.log_likelihood(obs.y, &obs.context)?;
        for (c, (m, _)) in cumulative.iter_mut().zip(&members) {
            *c += m.log_likelihood(obs.y, &obs.context)? - log_ref;
        }
        log_l.push(log_sum_exp(&cumulative));
    }
    let mut ids: Vec<usize> = members.iter().map(|(m, _)| m.id).collect();
    ids.sort_unstable();
    Ok(RestrictedNumeratorPath {
        subset_ids: ids,
        log_l,
    })
}

/// Largest deviation over the path between `log(L_{n,i}/L_{n,i-1})` and
/// `log fhat^A_{i-1}(Y_i) - log ref(Y_i)`, the latter from sequentially
/// updated restricted predictives.
pub fn check_ratio_identity(
    prior: &AtomicPrior,
    data: &[Observation],
    path: &RestrictedNumeratorPath,
    reference: &FamilyMember,
) -> Result<f64> {
    if path.log_l.len() != data.len() + 1 {
        return Err(DivergenceError::LengthMismatch(path.log_l.len(), data.len() + 1).into());
    }
    let mut state = PosteriorState::new(prior);
    let mut worst: f64 = 0.0;
    for (i, obs) in data.iter().enumerate() {
        let predictive = state.restricted_predictive(&path.subset_ids)?;
        let expected = predictive.log_density_at(obs.y, &obs.context)?
            - reference.log_likelihood(obs.y, &obs.context)?;
        let step = path.log_l[i + 1] - path.log_l[i];
        worst = worst.max((step - expected).abs());
        state.observe(obs)?;
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqrtRatioRecord {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

/// Checks `E[(fhat^A_{i-1}(Y)/ref(Y))^{1/2} | past] = 1 - gap`, with the
/// expectation under `truth` at the given context.
///
/// The left side is a quadrature of likelihood ratios evaluated by the
/// engine; the right side is `1 - h(f*, fhat^A)` (`reference = None`) or
/// `1 - h*(ref, fhat^A)` built from materialized grid densities.
pub fn conditional_sqrt_ratio_identity(
    state: &PosteriorState<'_>,
    subset_ids: &[usize],
    ctx: &Context,
    truth: &FamilyMember,
    reference: Option<&FamilyMember>,
    grid: &Grid,
    shift: f64,
) -> Result<SqrtRatioRecord> {
    let predictive = state.restricted_predictive(subset_ids)?;
    let truth_logs = truth.conditional_log_values(ctx, grid, shift)?;
    let reference_member = reference.unwrap_or(truth);
    let mut integrand = Vec::with_capacity(grid.points());
    for (z, lt) in grid.nodes().zip(&truth_logs) {
        let y = z + shift;
        let log_ratio = predictive.log_density_at(y, ctx)? - reference_member.log_likelihood(y, ctx)?;
        integrand.push((lt + 0.5 * log_ratio).exp());
    }
    let lhs = grid.integrate(&integrand);

    let f_hat = predictive.materialize(ctx, grid, shift)?;
    let f_star = truth.conditional_density(ctx, grid, shift)?;
    let rhs = match reference {
        None => 1.0 - divergences::h_affinity_gap(&f_star, &f_hat)?,
        Some(r) => {
            let f_circ = r.conditional_density(ctx, grid, shift)?;
            1.0 - divergences::h_star(&f_circ, &f_hat, &f_star)?
        }
    };
    Ok(SqrtRatioRecord {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_gaussian_location_family;

    fn grid() -> Grid {
        Grid::new(-10.0, 10.0, 801).unwrap()
    }

    fn prior(means: &[f64]) -> AtomicPrior {
        AtomicPrior::uniform(build_gaussian_location_family(grid(), means, 1.0).unwrap()).unwrap()
    }

    fn obs(ys: &[f64]) -> Vec<Observation> {
        ys.iter()
            .enumerate()
            .map(|(i, &y)| Observation {
                y,
                context: Context::at(i + 1),
            })
            .collect()
    }

    #[test]
    fn single_atom_is_unchanged() {
        let p = prior(&[0.0]);
        let mut s = PosteriorState::new(&p);
        for o in obs(&[0.3, -1.2, 2.0]) {
            s.observe(&o).unwrap();
        }
        assert_eq!(s.weights(), vec![1.0]);
        assert_eq!(s.n_observed(), 3);
    }

    #[test]
    fn two_atom_posterior_ratio_is_likelihood_ratio() {
        let p = prior(&[0.0, 1.0]);
        let s = PosteriorState::new(&p);
        let y = 0.4;
        let s = s.update(&obs(&[y])[0]).unwrap();
        let w = s.weights();
        let ctx = Context::default();
        let ratio = p.family()[0].likelihood(y, &ctx).unwrap() / p.family()[1].likelihood(y, &ctx).unwrap();
        assert!((w[0] / w[1] - ratio).abs() < 1e-12 * ratio);
    }

    #[test]
    fn out_of_grid_observation_is_rejected() {
        let p = prior(&[0.0]);
        let s = PosteriorState::new(&p);
        assert!(matches!(
            s.update(&obs(&[11.0])[0]),
            Err(InferenceError::Model(ModelError::OutsideGrid(_)))
        ));
    }

    #[test]
    fn predictive_before_data_is_prior_average() {
        let p = prior(&[0.0, 1.0]);
        let pred = PosteriorState::new(&p).predictive().as_grid().unwrap();
        let a = p.family()[0].as_density().unwrap();
        let b = p.family()[1].as_density().unwrap();
        for k in (0..801).step_by(50) {
            let avg = 0.5 * (a.values()[k] + b.values()[k]);
            assert!((pred.values()[k] - avg).abs() <= 1e-12 * avg);
        }
        let single = prior(&[0.5]);
        let pred = PosteriorState::new(&single).predictive().as_grid().unwrap();
        assert_eq!(pred.values(), single.family()[0].as_density().unwrap().values());
    }

    #[test]
    fn average_of_identical_predictives_is_itself() {
        let p = prior(&[0.0, 1.0, 2.0]);
        let s = PosteriorState::new(&p).update(&obs(&[0.9])[0]).unwrap();
        let one = s.predictive();
        let avg = average_predictive(&[one.clone(), one.clone(), one.clone()]).unwrap();
        let a = avg.as_grid().unwrap();
        let b = one.as_grid().unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * y.max(1e-300));
        }
        assert_eq!(
            average_predictive(&[]).map(|_| ()),
            Err(InferenceError::EmptyHistory)
        );
    }

    #[test]
    fn factorization_for_single_atom() {
        let p = prior(&[0.2]);
        let data = obs(&[0.1, 0.5, -0.7]);
        let rec = factorization_check(&p, &data).unwrap();
        let direct: f64 = data
            .iter()
            .map(|o| p.family()[0].log_likelihood(o.y, &o.context).unwrap())
            .sum();
        assert!((rec.log_joint_direct - direct).abs() < 1e-12);
        assert!(rec.abs_diff < 1e-12);
    }

    #[test]
    fn restricted_path_to_everything_is_the_evidence() {
        let p = prior(&[-1.0, 0.0, 1.0]);
        let truth = p.family()[1].clone();
        let data = obs(&[0.2, -0.4, 1.1, 0.0, 0.3]);
        let mut state = PosteriorState::with_reference(&p, &truth);
        for o in &data {
            state.observe(o).unwrap();
        }
        let path = restricted_path(&p, &data, &p.ids(), &truth).unwrap();
        assert!((path.log_l[0]).abs() < 1e-15);
        assert!((path.final_log() - state.log_i_n()).abs() < 1e-10);
        assert!(check_ratio_identity(&p, &data, &path, &truth).unwrap() < 1e-10);
    }

    #[test]
    fn restricted_path_errors() {
        let p = prior(&[-1.0, 0.0]);
        let truth = p.family()[1].clone();
        let data = obs(&[0.2]);
        let err = restricted_path(&p, &data, &[], &truth).unwrap_err();
        assert!(err.to_string().contains("restricted posterior undefined"));
        let err = restricted_path(&p, &data, &[42], &truth).unwrap_err();
        assert!(err.to_string().contains("restricted posterior undefined"));
    }

    #[test]
    fn sqrt_ratio_at_truth_is_one() {
        let p = prior(&[0.0, 1.0]);
        let truth = p.family()[0].clone();
        let s = PosteriorState::new(&p);
        let rec = conditional_sqrt_ratio_identity(&s, &[0], &Context::default(), &truth, None, &grid(), 0.0)
            .unwrap();
        assert!((rec.lhs - 1.0).abs() < 1e-12 && (rec.rhs - 1.0).abs() < 1e-12);
        let rec = conditional_sqrt_ratio_identity(&s, &[1], &Context::default(), &truth, None, &grid(), 0.0)
            .unwrap();
        assert!((rec.lhs - (-0.125f64).exp()).abs() < 1e-6);
        assert!(rec.abs_diff < 1e-12);
    }
}
