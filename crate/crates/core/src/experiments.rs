//! Data generation for the four regimes, the seeded replication harness and
//! the verification procedures built on them.
//!
//! A replication draws one data stream and runs one sequential posterior
//! over it, recording every selected statistic at each scheduled `n`.
//! Regression designs depend on `n`, so that regime runs each scheduled `n`
//! as its own stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergences::{self, DivergenceError, Grid, GridDensity, StateWeighting};
use crate::geometry::{
    self, certify_ball, summarize_atoms, thickness_at, AtomSummary, Ball, Certification,
    ConditionParams, CoveringAndSieve, DistanceTable, GeometryError, MarkovGeometry, RateSchedule,
    RegimeContext, RegimeKind, ThicknessRow,
};
use crate::inference::{self, FactorizationRecord, InferenceError, PosteriorState, SqrtRatioRecord};
use crate::models::{
    build_gaussian_location_family, AtomicPrior, Context, FamilyMember, MarkovParam,
    MisspecifiedSetup, ModelError, Observation, RegressionCurve, RegressionFunction,
};
use crate::numeric::{linear_fit, log_sum_exp, mean_and_se, median, quantile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("subset not admissible: {0}")]
    NotAdmissible(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Margin, in standard errors, for Monte Carlo comparisons.
pub const SE_MARGIN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FamilySpec {
    GaussianLocation { means: Vec<f64>, sd: f64 },
    RegressionCurves(Vec<RegressionCurve>),
    MarkovThetas { thetas: Vec<f64>, noise_sd: f64 },
}

impl FamilySpec {
    pub fn len(&self) -> usize {
        match self {
            FamilySpec::GaussianLocation { means, .. } => means.len(),
            FamilySpec::RegressionCurves(c) => c.len(),
            FamilySpec::MarkovThetas { thetas, .. } => thetas.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TruthSpec {
    GaussianMixture(Vec<GaussianComponent>),
    Curve(RegressionCurve),
    Markov(MarkovParam),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightingSpec {
    Stationary,
    TwoPoint { locations: (f64, f64), sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSettings {
    pub weighting: WeightingSpec,
    /// Grid for the state space (stationary and weighting densities).
    pub state_grid: Grid,
    /// Defaults to five stationary standard deviations of the truth.
    pub state_window: Option<f64>,
    pub window_points: usize,
    pub theta0_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BallPick {
    /// The covering ball whose center is closest to the reference.
    Nearest,
    /// The covering ball of largest prior mass.
    Heaviest,
}

/// How the numerator-bound subset `A_n` is chosen at each `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SubsetRecipe {
    /// A fixed set of atoms; the ball is centered at the member with the
    /// smallest maximal distance to the others.
    Atoms(Vec<usize>),
    /// One ball of the radius-`M eps_n / 2` covering of
    /// `B_n = {target distance > M eps_n}`.
    CoveringBall(BallPick),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EvidenceExpectation {
    /// Fraction non-increasing over the schedule and at most `cap` at the
    /// largest `n`; requires `c > C + 1` everywhere.
    Vanish { cap: f64 },
    /// Fraction at least `floor` at the largest `n`.
    Persist { floor: f64 },
}

/// Finite-sample pass rules for the Monte Carlo verifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRules {
    /// Accepted range of the fitted Cesaro slope, if any.
    pub cesaro_slope: Option<(f64, f64)>,
    pub evidence: EvidenceExpectation,
    /// Largest accepted median `Pi_n(B_n)` at the largest `n`.
    pub mass_cap: f64,
    /// Smallest accepted median projection weight at the largest `n`.
    pub projection_floor: Option<f64>,
    /// Largest accepted fitted constant for rate claims.
    pub constant_cap: f64,
}

impl Default for PassRules {
    fn default() -> Self {
        Self {
            cesaro_slope: None,
            evidence: EvidenceExpectation::Vanish { cap: 0.05 },
            mass_cap: 0.05,
            projection_floor: None,
            constant_cap: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub regime: RegimeKind,
    /// Quadrature grid (iid densities, or innovation coordinates).
    pub grid: Grid,
    pub family: FamilySpec,
    pub prior_weights: Option<Vec<f64>>,
    pub truth: TruthSpec,
    pub schedule: RateSchedule,
    pub params: ConditionParams,
    pub replications: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the default.
    pub jobs: usize,
    pub subset: Option<SubsetRecipe>,
    pub closure_draws: usize,
    pub markov: Option<MarkovSettings>,
    /// Atom ids of the small-prior-mass set `U_n`.
    pub small_mass_ids: Vec<usize>,
    /// Covering radius for the sieve, as a fraction of `eps_n`.
    pub sieve_radius_fraction: f64,
    pub rules: PassRules,
}

/// Everything needed to simulate one regime at one design size.
#[derive(Debug, Clone)]
pub struct Setup {
    pub prior: AtomicPrior,
    pub truth: FamilyMember,
    /// `f*`, or `f°` under misspecification.
    pub reference: FamilyMember,
    pub context: RegimeContext,
    pub projection_index: Option<usize>,
    pub source: DataSource,
    /// The truth's conditional density in its own centered coordinates.
    truth_centered: GridDensity,
}

impl Setup {
    /// Conditional mean of the truth at a context; the grid shift that
    /// centers per-observation densities.
    pub fn shift(&self, ctx: &Context) -> f64 {
        conditional_mean(&self.truth, ctx)
    }

    pub fn grid(&self) -> &Grid {
        self.context.grid()
    }
}

fn conditional_mean(member: &FamilyMember, ctx: &Context) -> f64 {
    if let Some(f) = member.as_regression() {
        return f.value(ctx.index).unwrap_or(0.0);
    }
    if let (Some(p), Some(prev)) = (member.as_markov(), ctx.prev) {
        return p.theta * prev;
    }
    0.0
}

fn truth_density(grid: Grid, components: &[GaussianComponent]) -> Result<GridDensity> {
    let parts = components
        .iter()
        .map(|c| GridDensity::gaussian(grid, c.mean, c.sd))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let refs: Vec<&GridDensity> = parts.iter().collect();
    let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
    Ok(GridDensity::mixture(&refs, &weights)?)
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::InvalidPlan(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.family.is_empty() {
            return bad("family has no atoms".into());
        }
        let consistent = matches!(
            (self.regime, &self.family, &self.truth),
            (
                RegimeKind::Iid | RegimeKind::Misspecified,
                FamilySpec::GaussianLocation { .. },
                TruthSpec::GaussianMixture(_)
            ) | (RegimeKind::Regression, FamilySpec::RegressionCurves(_), TruthSpec::Curve(_))
                | (RegimeKind::Markov, FamilySpec::MarkovThetas { .. }, TruthSpec::Markov(_))
        );
        if !consistent {
            return bad(format!(
                "family and truth do not match the {} regime",
                self.regime.name()
            ));
        }
        if self.regime == RegimeKind::Markov && self.markov.is_none() {
            return bad("markov regime needs markov settings".into());
        }
        if let Some(w) = &self.prior_weights {
            if w.len() != self.family.len() {
                return bad(format!("{} prior weights for {} atoms", w.len(), self.family.len()));
            }
        }
        if let Some(id) = self.small_mass_ids.iter().find(|id| **id >= self.family.len()) {
            return bad(format!("small-mass atom {id} is not in the family"));
        }
        if !(self.sieve_radius_fraction > 0.0 && self.sieve_radius_fraction < 1.0) {
            return bad("sieve radius fraction must lie in (0, 1)".into());
        }
        self.params.validate()?;
        Ok(())
    }

    /// Regression setups depend on `n`; the other regimes ignore it.
    pub fn setup(&self, n: usize) -> Result<Setup> {
        let weights = |k: usize| self.prior_weights.clone().unwrap_or_else(|| vec![1.0; k]);
        match (&self.family, &self.truth) {
            (FamilySpec::GaussianLocation { means, sd }, TruthSpec::GaussianMixture(components)) => {
                let family = build_gaussian_location_family(self.grid, means, *sd)?;
                let prior = AtomicPrior::new(family, weights(means.len()))?;
                let f_star = truth_density(self.grid, components)?;
                let source = DataSource::from_density(&f_star);
                let truth = FamilyMember::density(geometry::TRUTH_ID, f_star.clone());
                if self.regime == RegimeKind::Misspecified {
                    let mis = MisspecifiedSetup::new(prior, f_star.clone())?;
                    let reference = mis.prior.family()[mis.projection_index].clone();
                    let context = RegimeContext::misspecified(f_star.clone(), reference.clone())?;
                    return Ok(Setup {
                        prior: mis.prior,
                        truth,
                        reference,
                        context,
                        projection_index: Some(mis.projection_index),
                        source,
                        truth_centered: f_star,
                    });
                }
                Ok(Setup {
                    prior,
                    reference: truth.clone(),
                    truth,
                    context: RegimeContext::iid(f_star.clone()),
                    projection_index: None,
                    source,
                    truth_centered: f_star,
                })
            }
            (FamilySpec::RegressionCurves(curves), TruthSpec::Curve(curve)) => {
                let family = curves
                    .iter()
                    .enumerate()
                    .map(|(id, c)| Ok(FamilyMember::regression(id, c.materialize(n)?)))
                    .collect::<Result<Vec<_>>>()?;
                let prior = AtomicPrior::new(family, weights(curves.len()))?;
                let f = curve.materialize(n)?;
                let truth = FamilyMember::regression(geometry::TRUTH_ID, f.clone());
                let truth_centered = GridDensity::gaussian(self.grid, 0.0, 1.0)?;
                Ok(Setup {
                    prior,
                    reference: truth.clone(),
                    truth,
                    context: RegimeContext::regression(f.clone(), self.grid),
                    projection_index: None,
                    source: DataSource::Regression(f),
                    truth_centered,
                })
            }
            (FamilySpec::MarkovThetas { thetas, noise_sd }, TruthSpec::Markov(p)) => {
                let settings = self
                    .markov
                    .as_ref()
                    .ok_or_else(|| ExperimentError::InvalidPlan("missing markov settings".into()))?;
                let family = thetas
                    .iter()
                    .enumerate()
                    .map(|(id, t)| Ok(FamilyMember::markov(id, MarkovParam::with_noise(*t, *noise_sd)?)))
                    .collect::<Result<Vec<_>>>()?;
                let prior = AtomicPrior::new(family, weights(thetas.len()))?;
                let weighting = match settings.weighting {
                    WeightingSpec::Stationary => StateWeighting::stationary(p, settings.state_grid)?,
                    WeightingSpec::TwoPoint { locations, sd } => {
                        StateWeighting::two_point_mixture(settings.state_grid, locations, sd)?
                    }
                };
                let geometry = MarkovGeometry {
                    weighting,
                    state_window: settings
                        .state_window
                        .unwrap_or_else(|| MarkovGeometry::default_window(p)),
                    window_points: settings.window_points,
                    theta0_bound: settings.theta0_bound,
                };
                let truth = FamilyMember::markov(geometry::TRUTH_ID, *p);
                Ok(Setup {
                    prior,
                    reference: truth.clone(),
                    truth,
                    context: RegimeContext::markov(*p, self.grid, geometry)?,
                    projection_index: None,
                    source: DataSource::Markov(*p),
                    truth_centered: GridDensity::gaussian(self.grid, 0.0, p.noise_sd)?,
                })
            }
            _ => Err(ExperimentError::InvalidPlan("family and truth kinds differ".into())),
        }
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| ExperimentError::ThreadPool(e.to_string()))
    }

    /// Per-replication seed.
    pub fn replication_seed(&self, replication: usize) -> u64 {
        self.seed.wrapping_add(replication as u64)
    }
}

/// Sampler for the truth of one regime.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Grid nodes drawn with their trapezoid masses.
    Grid { grid: Grid, cdf: Vec<f64> },
    Regression(RegressionFunction),
    Markov(MarkovParam),
}

impl DataSource {
    pub fn from_density(density: &GridDensity) -> Self {
        let grid = *density.grid();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = density
            .values()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                acc += grid.weight(k) * v;
                acc
            })
            .collect();
        for c in cdf.iter_mut() {
            *c /= acc;
        }
        DataSource::Grid { grid, cdf }
    }
}

/// `n` observations (plus the initial state `Y_0` for Markov data, which
/// comes first) from a seeded ChaCha8 stream.
pub fn generate_data(source: &DataSource, n: usize, seed: u64) -> Result<Vec<Observation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_with(source, n, &mut rng)
}

pub fn generate_with(source: &DataSource, n: usize, rng: &mut impl Rng) -> Result<Vec<Observation>> {
    match source {
        DataSource::Grid { grid, cdf } => Ok((1..=n)
            .map(|i| {
                let u: f64 = rng.random();
                let k = cdf.partition_point(|c| *c <= u).min(grid.points() - 1);
                Observation {
                    y: grid.node(k),
                    context: Context::at(i),
                }
            })
            .collect()),
        DataSource::Regression(f) => {
            if n > f.len() {
                return Err(ExperimentError::InvalidPlan(format!(
                    "{n} observations requested from a design of size {}",
                    f.len()
                )));
            }
            Ok((1..=n)
                .map(|i| {
                    let z: f64 = rng.sample(StandardNormal);
                    Observation {
                        y: f.values()[i - 1] + z,
                        context: Context::at(i),
                    }
                })
                .collect())
        }
        DataSource::Markov(p) => {
            let sd = p
                .stationary_variance()
                .ok_or(ModelError::NoStationaryDensity(p.theta.abs()))?
                .sqrt();
            let z: f64 = rng.sample(StandardNormal);
            let mut prev = sd * z;
            let mut out = Vec::with_capacity(n + 1);
            out.push(Observation {
                y: prev,
                context: Context::at(0),
            });
            for i in 1..=n {
                let z: f64 = rng.sample(StandardNormal);
                let y = p.theta * prev + p.noise_sd * z;
                out.push(Observation {
                    y,
                    context: Context::after(i, prev),
                });
                prev = y;
            }
            Ok(out)
        }
    }
}

/// Which statistics a Monte Carlo pass records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Selection {
    pub cesaro: bool,
    pub numerator: bool,
    pub evidence: bool,
    pub mass: bool,
}

impl Selection {
    pub fn all() -> Self {
        Self {
            cesaro: true,
            numerator: true,
            evidence: true,
            mass: true,
        }
    }

    pub fn any(&self) -> bool {
        self.cesaro || self.numerator || self.evidence || self.mass
    }
}

/// A certified numerator-bound subset at one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSubset {
    pub ball: Ball,
    pub prior_mass: f64,
    pub delta: f64,
    pub certification: Certification,
    /// `Pi(A)^{1/2} exp(-d n eps²)`.
    pub bound: f64,
    /// `E sqrt(L_{n,n})` for singleton subsets, from the conditional
    /// identity applied at every index.
    pub exact_expectation: Option<f64>,
}

/// Per-`n` quantities fixed before any replication runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub n: usize,
    pub epsilon: f64,
    pub thickness: ThicknessRow,
    pub b_ids: Vec<usize>,
    pub b_prior_mass: f64,
    pub subset: Option<PreparedSubset>,
}

struct Prepared {
    setups: Vec<Setup>,
    stages: Vec<Stage>,
}

impl Prepared {
    fn setup(&self, k: usize) -> &Setup {
        &self.setups[k.min(self.setups.len() - 1)]
    }
}

fn ball_for_atoms(table: &DistanceTable, ids: &[usize]) -> Result<Ball> {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(ExperimentError::NotAdmissible("empty atom list".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for &c in &ids {
        let mut radius: f64 = 0.0;
        for &j in &ids {
            radius = radius.max(table.get(c, j)?);
        }
        if best.is_none_or(|(_, r)| radius < r) {
            best = Some((c, radius));
        }
    }
    let (center_id, radius) = best.expect("nonempty ids");
    Ok(Ball {
        center_id,
        radius,
        member_ids: ids,
    })
}

fn target_ids(summaries: &[AtomSummary], threshold: f64) -> Vec<usize> {
    summaries
        .iter()
        .filter(|s| s.reference_distance > threshold)
        .map(|s| s.id)
        .collect()
}

fn pick_ball(
    recipe: &SubsetRecipe,
    setup: &Setup,
    summaries: &[AtomSummary],
    table: &DistanceTable,
    m_eps: f64,
) -> Result<Ball> {
    match recipe {
        SubsetRecipe::Atoms(ids) => ball_for_atoms(table, ids),
        SubsetRecipe::CoveringBall(pick) => {
            let target = target_ids(summaries, m_eps);
            if target.is_empty() {
                return Err(ExperimentError::NotAdmissible(
                    "target set B_n is empty at this M".into(),
                ));
            }
            let cover = geometry::greedy_cover(table, &target, m_eps / 2.0)?;
            let score = |b: &Ball| -> f64 {
                match pick {
                    BallPick::Nearest => summaries
                        .iter()
                        .find(|s| s.id == b.center_id)
                        .map_or(f64::INFINITY, |s| s.separation_distance),
                    BallPick::Heaviest => -setup.prior.mass_of(&b.member_ids),
                }
            };
            cover
                .balls
                .into_iter()
                .min_by(|a, b| score(a).total_cmp(&score(b)).then(a.center_id.cmp(&b.center_id)))
                .ok_or_else(|| ExperimentError::NotAdmissible("empty covering".into()))
        }
    }
}

/// `E sqrt(L_{n,n})` for the singleton `{atom}`: the product over indices
/// of the engine's `E[(f_j/ref)^{1/2}]`. Markov data has no closed form.
pub fn singleton_expectation(setup: &Setup, atom_id: usize, n: usize) -> Result<Option<f64>> {
    if setup.context.kind() == RegimeKind::Markov {
        return Ok(None);
    }
    let index = setup
        .prior
        .index_of(atom_id)
        .ok_or(GeometryError::UnknownId(atom_id))?;
    let state = PosteriorState::new(&setup.prior);
    let reference = (setup.context.kind() == RegimeKind::Misspecified).then_some(&setup.reference);
    let mut log_e = 0.5 * setup.prior.weights()[index].ln();
    let per_index = |ctx: Context| -> Result<f64> {
        Ok(inference::conditional_sqrt_ratio_identity(
            &state,
            &[atom_id],
            &ctx,
            &setup.truth,
            reference,
            setup.grid(),
            setup.shift(&ctx),
        )?
        .lhs)
    };
    if setup.context.kind() == RegimeKind::Regression {
        for i in 1..=n {
            log_e += per_index(Context::at(i))?.ln();
        }
    } else {
        log_e += n as f64 * per_index(Context::default())?.ln();
    }
    Ok(Some(log_e.exp()))
}

fn prepare(plan: &ExperimentPlan, selection: Selection) -> Result<Prepared> {
    plan.validate()?;
    let ns = plan.schedule.n_values();
    let setups = if plan.regime == RegimeKind::Regression {
        ns.iter().map(|&n| plan.setup(n)).collect::<Result<Vec<_>>>()?
    } else {
        vec![plan.setup(plan.schedule.max_n())?]
    };
    let mut stages = Vec::with_capacity(ns.len());
    let mut shared: Option<(Vec<AtomSummary>, Option<DistanceTable>)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5EED_CE27_1F1C_A7E0);
    for (k, &n) in ns.iter().enumerate() {
        let setup = &setups[k.min(setups.len() - 1)];
        if plan.regime == RegimeKind::Regression || shared.is_none() {
            let summaries = summarize_atoms(&setup.prior, &setup.context)?;
            let table = if selection.numerator {
                Some(DistanceTable::new(&setup.context, &setup.prior)?)
            } else {
                None
            };
            shared = Some((summaries, table));
        }
        let (summaries, table) = shared.as_ref().expect("summaries computed");
        let epsilon = plan.schedule.epsilon(n);
        let thickness = thickness_at(summaries, n, epsilon);
        let m_eps = plan.params.m * epsilon;
        let b_ids = target_ids(summaries, m_eps);
        let b_prior_mass = setup.prior.mass_of(&b_ids);
        let subset = if selection.numerator {
            let recipe = plan.subset.as_ref().ok_or_else(|| {
                ExperimentError::InvalidPlan("numerator bound needs a subset recipe".into())
            })?;
            let d = plan.params.d;
            let c_thick = plan.params.thickness_c.unwrap_or(thickness.implied_c);
            if !(d > c_thick + 1.0) {
                return Err(ExperimentError::NotAdmissible(format!(
                    "n = {n}: d = {d} must exceed C + 1 = {:.6}",
                    c_thick + 1.0
                )));
            }
            let table = table.as_ref().expect("distance table");
            let ball = pick_ball(recipe, setup, summaries, table, m_eps)?;
            let delta = d * epsilon * epsilon;
            let certification =
                certify_ball(&setup.context, &setup.prior, &ball, delta, plan.closure_draws, &mut rng)?;
            if let Some(failure) = &certification.failure {
                return Err(ExperimentError::NotAdmissible(format!("n = {n}: {failure}")));
            }
            let prior_mass = setup.prior.mass_of(&ball.member_ids);
            let exact_expectation = if ball.member_ids.len() == 1 {
                singleton_expectation(setup, ball.member_ids[0], n)?
            } else {
                None
            };
            Some(PreparedSubset {
                bound: prior_mass.sqrt() * (-d * n as f64 * epsilon * epsilon).exp(),
                ball,
                prior_mass,
                delta,
                certification,
                exact_expectation,
            })
        } else {
            None
        };
        stages.push(Stage {
            n,
            epsilon,
            thickness,
            b_ids,
            b_prior_mass,
            subset,
        });
    }
    Ok(Prepared { setups, stages })
}

/// Statistics of one replication at one scheduled `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerN {
    pub n: usize,
    pub cesaro_kl: Option<f64>,
    pub log_i_n: Option<f64>,
    pub mass_bn: Option<f64>,
    pub mass_un: Option<f64>,
    pub projection_weight: Option<f64>,
    pub sqrt_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication_id: usize,
    pub seed: u64,
    pub per_n: Vec<PerN>,
    /// Quality markers, e.g. floored predictive tails.
    pub flags: Vec<String>,
}

/// Regime-specific KL between the truth and the current predictive at a
/// context: `K`, the contrast `K*`, the per-index `K`, or the realized-state
/// `K_y`.
fn step_kl(setup: &Setup, state: &PosteriorState<'_>, ctx: &Context, flags: &mut Vec<String>) -> Result<f64> {
    let predictive = state
        .predictive()
        .materialize(ctx, setup.grid(), setup.shift(ctx))?;
    if predictive.is_floored() && !flags.iter().any(|f| f == "tail_truncated") {
        flags.push("tail_truncated".into());
    }
    Ok(match setup.context.kind() {
        RegimeKind::Misspecified => divergences::kl_contrast(
            setup.reference.as_density().expect("iid projection"),
            &predictive,
            &setup.truth_centered,
        )?,
        _ => divergences::kl(&setup.truth_centered, &predictive)?,
    })
}

struct Recorder<'s> {
    stage: &'s Stage,
    selection: Selection,
    small_mass_ids: &'s [usize],
    projection_index: Option<usize>,
}

impl Recorder<'_> {
    fn record(&self, state: &PosteriorState<'_>, cesaro_sum: f64) -> PerN {
        let sel = self.selection;
        let sqrt_l = self.stage.subset.as_ref().filter(|_| sel.numerator).map(|s| {
            let logs: Vec<f64> = state
                .prior()
                .family()
                .iter()
                .zip(state.log_weights())
                .filter(|(m, _)| s.ball.member_ids.contains(&m.id))
                .map(|(_, lw)| *lw)
                .collect();
            (0.5 * (log_sum_exp(&logs) - state.log_r_denominator())).exp()
        });
        PerN {
            n: self.stage.n,
            cesaro_kl: sel.cesaro.then(|| cesaro_sum / self.stage.n as f64),
            log_i_n: sel.evidence.then(|| state.log_i_n()),
            mass_bn: sel.mass.then(|| state.mass_of(&self.stage.b_ids)),
            mass_un: (sel.mass && !self.small_mass_ids.is_empty())
                .then(|| state.mass_of(self.small_mass_ids)),
            projection_weight: self
                .projection_index
                .filter(|_| sel.mass)
                .map(|i| state.weight_at(i)),
            sqrt_l,
        }
    }
}

fn run_replication(
    plan: &ExperimentPlan,
    prepared: &Prepared,
    selection: Selection,
    replication: usize,
) -> Result<ReplicationRecord> {
    let seed = plan.replication_seed(replication);
    let mut flags = Vec::new();
    let mut per_n = Vec::with_capacity(prepared.stages.len());
    let recorder = |k: usize| Recorder {
        stage: &prepared.stages[k],
        selection,
        small_mass_ids: &plan.small_mass_ids,
        projection_index: prepared.setup(k).projection_index,
    };
    if plan.regime == RegimeKind::Regression {
        for (k, stage) in prepared.stages.iter().enumerate() {
            let setup = prepared.setup(k);
            let data = generate_data(&setup.source, stage.n, seed)?;
            let mut state = PosteriorState::with_reference(&setup.prior, &setup.reference);
            let mut cesaro_sum = 0.0;
            for obs in &data {
                if selection.cesaro {
                    cesaro_sum += step_kl(setup, &state, &obs.context, &mut flags)?;
                }
                state.observe(obs)?;
            }
            per_n.push(recorder(k).record(&state, cesaro_sum));
        }
    } else {
        let setup = prepared.setup(0);
        let data = generate_data(&setup.source, plan.schedule.max_n(), seed)?;
        let mut state = PosteriorState::with_reference(&setup.prior, &setup.reference);
        let mut cesaro_sum = 0.0;
        let mut next = 0;
        for obs in &data {
            let initial_state = plan.regime == RegimeKind::Markov && obs.context.prev.is_none();
            if selection.cesaro && !initial_state {
                cesaro_sum += step_kl(setup, &state, &obs.context, &mut flags)?;
            }
            state.observe(obs)?;
            let i = obs.context.index;
            if !initial_state && next < prepared.stages.len() && prepared.stages[next].n == i {
                per_n.push(recorder(next).record(&state, cesaro_sum));
                next += 1;
            }
        }
    }
    Ok(ReplicationRecord {
        replication_id: replication,
        seed,
        per_n,
        flags,
    })
}

/// All replications of a plan with their pre-computed stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub stages: Vec<Stage>,
    pub records: Vec<ReplicationRecord>,
}

/// Runs every replication (in parallel, collected in replication order).
pub fn monte_carlo(plan: &ExperimentPlan, selection: Selection) -> Result<MonteCarlo> {
    let prepared = prepare(plan, selection)?;
    let pool = plan.thread_pool()?;
    let records = pool.install(|| {
        (0..plan.replications)
            .into_par_iter()
            .map(|r| run_replication(plan, &prepared, selection, r))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(MonteCarlo {
        stages: prepared.stages,
        records,
    })
}

/// Running Cesaro means of the regime's KL for one replication, one entry
/// per scheduled `n`.
pub fn cesaro_kl_run(plan: &ExperimentPlan, replication: usize) -> Result<Vec<f64>> {
    let selection = Selection {
        cesaro: true,
        ..Selection::default()
    };
    let prepared = prepare(plan, selection)?;
    let record = run_replication(plan, &prepared, selection, replication)?;
    Ok(record.per_n.iter().map(|p| p.cesaro_kl.unwrap_or(0.0)).collect())
}

fn column(mc: &MonteCarlo, k: usize, pick: impl Fn(&PerN) -> Option<f64>) -> Vec<f64> {
    mc.records.iter().filter_map(|r| pick(&r.per_n[k])).collect()
}

/// Least-squares fit of `log statistic` on `log n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `max_n statistic / eps_n²` over the fitted points.
    pub fitted_constant: f64,
    /// Sample sizes excluded for a nonpositive statistic.
    pub excluded: Vec<usize>,
}

pub fn fit_rate(ns: &[usize], statistics: &[f64], schedule: &RateSchedule) -> RateFit {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut excluded = Vec::new();
    let mut fitted_constant: f64 = 0.0;
    for (&n, &s) in ns.iter().zip(statistics) {
        if s > 0.0 && s.is_finite() {
            x.push((n as f64).ln());
            y.push(s.ln());
            fitted_constant = fitted_constant.max(s / schedule.epsilon(n).powi(2));
        } else {
            excluded.push(n);
        }
    }
    let (slope, intercept, r_squared) = linear_fit(&x, &y).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    if x.is_empty() {
        fitted_constant = f64::NAN;
    }
    RateFit {
        slope,
        intercept,
        r_squared,
        fitted_constant,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn from_failures(failures: Vec<String>, ok: &str) -> Self {
        if failures.is_empty() {
            Verdict {
                pass: true,
                detail: ok.into(),
            }
        } else {
            Verdict {
                pass: false,
                detail: failures.join("; "),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CesaroRow {
    pub n: usize,
    pub epsilon: f64,
    pub mean: f64,
    pub se: f64,
    pub median: f64,
    pub upper_quartile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CesaroReport {
    pub rows: Vec<CesaroRow>,
    pub fit: RateFit,
    pub verdict: Verdict,
}

pub fn summarize_cesaro(plan: &ExperimentPlan, mc: &MonteCarlo) -> CesaroReport {
    let rows: Vec<CesaroRow> = mc
        .stages
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let v = column(mc, k, |p| p.cesaro_kl);
            let (mean, se) = mean_and_se(&v);
            CesaroRow {
                n: st.n,
                epsilon: st.epsilon,
                mean,
                se,
                median: median(&v),
                upper_quartile: quantile(&v, 0.75),
            }
        })
        .collect();
    let ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let fit = fit_rate(&ns, &means, &plan.schedule);
    let mut failures = Vec::new();
    let all_zero = rows.iter().all(|r| r.mean == 0.0);
    if !all_zero {
        if rows.windows(2).any(|w| w[1].median >= w[0].median) {
            failures.push("Cesaro medians are not strictly decreasing".to_string());
        }
        if let Some((lo, hi)) = plan.rules.cesaro_slope {
            if !(fit.slope >= lo && fit.slope <= hi) {
                failures.push(format!("fitted slope {:.4} outside [{lo}, {hi}]", fit.slope));
            }
        }
        if !(fit.fitted_constant.is_finite() && fit.fitted_constant <= plan.rules.constant_cap) {
            failures.push(format!(
                "fitted constant {} not finite or above cap {}",
                fit.fitted_constant, plan.rules.constant_cap
            ));
        }
    }
    CesaroReport {
        rows,
        fit,
        verdict: Verdict::from_failures(failures, "Cesaro averages shrink at the fitted rate"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumeratorRow {
    pub n: usize,
    pub epsilon: f64,
    pub subset_ids: Vec<usize>,
    pub center_id: usize,
    pub radius: f64,
    pub prior_mass: f64,
    pub thickness_c: f64,
    pub d: f64,
    pub delta: f64,
    pub min_member_gap: f64,
    pub ball_gap_bound: f64,
    pub bound: f64,
    pub mean_sqrt_l: f64,
    pub se: f64,
    pub exact_expectation: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumeratorReport {
    pub rows: Vec<NumeratorRow>,
    pub verdict: Verdict,
}

pub fn summarize_numerator(plan: &ExperimentPlan, mc: &MonteCarlo) -> NumeratorReport {
    let mut failures = Vec::new();
    let rows: Vec<NumeratorRow> = mc
        .stages
        .iter()
        .enumerate()
        .filter_map(|(k, st)| {
            let s = st.subset.as_ref()?;
            let v = column(mc, k, |p| p.sqrt_l);
            let (mean, se) = mean_and_se(&v);
            let pass = mean <= s.bound + SE_MARGIN * se;
            if !pass {
                failures.push(format!(
                    "n = {}: mean sqrt(L) {mean:.6e} > bound {:.6e} + 3 SE",
                    st.n, s.bound
                ));
            }
            Some(NumeratorRow {
                n: st.n,
                epsilon: st.epsilon,
                subset_ids: s.ball.member_ids.clone(),
                center_id: s.ball.center_id,
                radius: s.ball.radius,
                prior_mass: s.prior_mass,
                thickness_c: plan.params.thickness_c.unwrap_or(st.thickness.implied_c),
                d: plan.params.d,
                delta: s.delta,
                min_member_gap: s.certification.separation.min_gap,
                ball_gap_bound: s.certification.ball_bound,
                bound: s.bound,
                mean_sqrt_l: mean,
                se,
                exact_expectation: s.exact_expectation,
                pass,
            })
        })
        .collect();
    if rows.is_empty() {
        failures.push("no certified subset".into());
    }
    NumeratorReport {
        rows,
        verdict: Verdict::from_failures(failures, "numerator bound holds at every n"),
    }
}

pub fn verify_numerator_bound(plan: &ExperimentPlan) -> Result<NumeratorReport> {
    let selection = Selection {
        numerator: true,
        ..Selection::default()
    };
    Ok(summarize_numerator(plan, &monte_carlo(plan, selection)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub n: usize,
    pub epsilon: f64,
    /// `-c n eps²`.
    pub log_threshold: f64,
    pub fraction_below: f64,
    pub implied_c: f64,
    pub c_exceeds: bool,
    pub median_log_i_n: f64,
    pub min_log_i_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub rows: Vec<EvidenceRow>,
    /// Least-squares slope of the fraction against `n`.
    pub trend: f64,
    pub verdict: Verdict,
}

pub fn summarize_evidence(plan: &ExperimentPlan, mc: &MonteCarlo) -> EvidenceReport {
    let c = plan.params.c;
    let rows: Vec<EvidenceRow> = mc
        .stages
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let v = column(mc, k, |p| p.log_i_n);
            let log_threshold = -c * st.n as f64 * st.epsilon * st.epsilon;
            let below = v.iter().filter(|l| **l <= log_threshold).count();
            let implied_c = plan.params.thickness_c.unwrap_or(st.thickness.implied_c);
            EvidenceRow {
                n: st.n,
                epsilon: st.epsilon,
                log_threshold,
                fraction_below: below as f64 / v.len().max(1) as f64,
                implied_c,
                c_exceeds: c > implied_c + 1.0,
                median_log_i_n: median(&v),
                min_log_i_n: v.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.fraction_below).collect();
    let trend = linear_fit(&x, &y).map_or(0.0, |f| f.0);
    let last = rows.last().map_or(f64::NAN, |r| r.fraction_below);
    let mut failures = Vec::new();
    match plan.rules.evidence {
        EvidenceExpectation::Vanish { cap } => {
            if let Some(r) = rows.iter().find(|r| !r.c_exceeds) {
                failures.push(format!(
                    "n = {}: c = {c} does not exceed C + 1 = {:.6}",
                    r.n,
                    r.implied_c + 1.0
                ));
            }
            if rows.windows(2).any(|w| w[1].fraction_below > w[0].fraction_below) {
                failures.push("fraction below threshold increases along the schedule".into());
            }
            if !(last <= cap) {
                failures.push(format!("final fraction {last:.4} above cap {cap}"));
            }
        }
        EvidenceExpectation::Persist { floor } => {
            if !(last >= floor) {
                failures.push(format!("final fraction {last:.4} below floor {floor}"));
            }
        }
    }
    EvidenceReport {
        rows,
        trend,
        verdict: Verdict::from_failures(failures, "evidence behaves as expected"),
    }
}

pub fn verify_evidence_bound(plan: &ExperimentPlan) -> Result<EvidenceReport> {
    let selection = Selection {
        evidence: true,
        ..Selection::default()
    };
    Ok(summarize_evidence(plan, &monte_carlo(plan, selection)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassRow {
    pub n: usize,
    pub epsilon: f64,
    /// `M eps_n`.
    pub radius: f64,
    pub b_count: usize,
    pub b_prior_mass: f64,
    pub median: f64,
    pub upper_quartile: f64,
    pub mean: f64,
    pub fraction_above_eta: f64,
    pub projection_median: Option<f64>,
    pub small_mass_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassReport {
    pub rows: Vec<MassRow>,
    pub verdict: Verdict,
}

pub fn summarize_mass(plan: &ExperimentPlan, mc: &MonteCarlo) -> MassReport {
    let rows: Vec<MassRow> = mc
        .stages
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let v = column(mc, k, |p| p.mass_bn);
            let proj = column(mc, k, |p| p.projection_weight);
            let small = column(mc, k, |p| p.mass_un);
            MassRow {
                n: st.n,
                epsilon: st.epsilon,
                radius: plan.params.m * st.epsilon,
                b_count: st.b_ids.len(),
                b_prior_mass: st.b_prior_mass,
                median: median(&v),
                upper_quartile: quantile(&v, 0.75),
                mean: mean_and_se(&v).0,
                fraction_above_eta: v.iter().filter(|m| **m > plan.params.eta).count() as f64
                    / v.len().max(1) as f64,
                projection_median: (!proj.is_empty()).then(|| median(&proj)),
                small_mass_median: (!small.is_empty()).then(|| median(&small)),
            }
        })
        .collect();
    let mut failures = Vec::new();
    if rows.windows(2).any(|w| w[1].median > w[0].median) {
        failures.push("median Pi_n(B_n) increases along the schedule".into());
    }
    if let Some(last) = rows.last() {
        if !(last.median < plan.rules.mass_cap) {
            failures.push(format!(
                "final median {:.4e} not below cap {}",
                last.median, plan.rules.mass_cap
            ));
        }
        if let Some(floor) = plan.rules.projection_floor {
            match last.projection_median {
                Some(p) if p > floor => {}
                other => failures.push(format!(
                    "final projection weight median {other:?} not above {floor}"
                )),
            }
        }
    }
    MassReport {
        rows,
        verdict: Verdict::from_failures(failures, "posterior mass concentrates"),
    }
}

pub fn posterior_mass_path(plan: &ExperimentPlan) -> Result<MassReport> {
    let selection = Selection {
        mass: true,
        ..Selection::default()
    };
    Ok(summarize_mass(plan, &monte_carlo(plan, selection)?))
}

/// Factorization identity on `cases` seeded data sets (sizes up to 50).
pub fn factorization_cases(plan: &ExperimentPlan, cases: usize) -> Result<Vec<(usize, FactorizationRecord)>> {
    plan.validate()?;
    let max_n = plan.schedule.max_n().min(50);
    (0..cases)
        .map(|k| {
            let seed = plan.replication_seed(k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=max_n);
            let setup = plan.setup(if plan.regime == RegimeKind::Regression { n } else { max_n })?;
            let data = generate_with(&setup.source, n, &mut rng)?;
            Ok((n, inference::factorization_check(&setup.prior, &data)?))
        })
        .collect()
}

/// A conditional sqrt-ratio identity case: random nonempty subset and a
/// random step of a seeded data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCase {
    pub step: usize,
    pub subset_ids: Vec<usize>,
    pub record: SqrtRatioRecord,
}

pub fn conditional_identity_cases(plan: &ExperimentPlan, cases: usize) -> Result<Vec<IdentityCase>> {
    plan.validate()?;
    let max_n = plan.schedule.max_n().min(50);
    (0..cases)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.replication_seed(k) ^ 0xC0DE);
            let n = rng.random_range(1..=max_n);
            let setup = plan.setup(if plan.regime == RegimeKind::Regression { n } else { max_n })?;
            let data = generate_with(&setup.source, n, &mut rng)?;
            let ids = setup.prior.ids();
            let mut subset: Vec<usize> = ids.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
            if subset.is_empty() {
                subset.push(ids[rng.random_range(0..ids.len())]);
            }
            let offset = usize::from(plan.regime == RegimeKind::Markov);
            let step = rng.random_range(1..=n);
            let mut state = PosteriorState::new(&setup.prior);
            for obs in &data[..step - 1 + offset] {
                state.observe(obs)?;
            }
            let ctx = data[step - 1 + offset].context;
            let reference = (plan.regime == RegimeKind::Misspecified).then_some(&setup.reference);
            let record = inference::conditional_sqrt_ratio_identity(
                &state,
                &subset,
                &ctx,
                &setup.truth,
                reference,
                setup.grid(),
                setup.shift(&ctx),
            )?;
            Ok(IdentityCase {
                step,
                subset_ids: subset,
                record,
            })
        })
        .collect()
}

/// Per-atom divergences and distances at the largest scheduled `n`.
pub fn atom_report(plan: &ExperimentPlan) -> Result<Vec<AtomSummary>> {
    plan.validate()?;
    let setup = plan.setup(plan.schedule.max_n())?;
    Ok(summarize_atoms(&setup.prior, &setup.context)?)
}

/// Thickness rows over the schedule.
pub fn thickness_report(plan: &ExperimentPlan) -> Result<Vec<ThicknessRow>> {
    Ok(prepare(plan, Selection::default())?
        .stages
        .into_iter()
        .map(|s| s.thickness)
        .collect())
}

/// Covering of `B_n = {target distance > M eps_n}` by radius `M eps_n / 2`
/// balls, each certified at `delta = M² eps_n² / 8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverRow {
    pub n: usize,
    pub epsilon: f64,
    pub radius: f64,
    pub target_count: usize,
    pub ball_count: usize,
    /// `ln(ball count) / (n eps²)`.
    pub entropy_r: f64,
    pub thickness_c: f64,
    pub certified_balls: usize,
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverReport {
    pub rows: Vec<CoverRow>,
    /// Largest finite implied thickness constant over the schedule.
    pub fitted_c: f64,
    /// Largest entropy constant over the schedule.
    pub fitted_r: f64,
    /// Infimum of admissible `M` from the fitted constants.
    pub admissible_m: f64,
    pub verdict: Verdict,
}

pub fn cover_report(plan: &ExperimentPlan) -> Result<CoverReport> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x00C0_FE12);
    let mut rows = Vec::new();
    let mut cached: Option<(Vec<AtomSummary>, DistanceTable)> = None;
    for &n in plan.schedule.n_values() {
        let setup = plan.setup(n)?;
        if plan.regime == RegimeKind::Regression || cached.is_none() {
            cached = Some((
                summarize_atoms(&setup.prior, &setup.context)?,
                DistanceTable::new(&setup.context, &setup.prior)?,
            ));
        }
        let (summaries, table) = cached.as_ref().expect("cached geometry");
        let epsilon = plan.schedule.epsilon(n);
        let m_eps = plan.params.m * epsilon;
        let target = target_ids(summaries, m_eps);
        let cover = geometry::greedy_cover(table, &target, m_eps / 2.0)?;
        let delta = m_eps * m_eps / 8.0;
        let mut certified = 0;
        let mut first_failure = None;
        for ball in &cover.balls {
            let cert = certify_ball(&setup.context, &setup.prior, ball, delta, plan.closure_draws, &mut rng)?;
            if cert.certified {
                certified += 1;
            } else if first_failure.is_none() {
                first_failure = cert.failure.map(|f| format!("ball at {}: {f}", ball.center_id));
            }
        }
        let n_eps_sq = n as f64 * epsilon * epsilon;
        rows.push(CoverRow {
            n,
            epsilon,
            radius: m_eps / 2.0,
            target_count: target.len(),
            ball_count: cover.balls.len(),
            entropy_r: (cover.balls.len().max(1) as f64).ln() / n_eps_sq,
            thickness_c: thickness_at(summaries, n, epsilon).implied_c,
            certified_balls: certified,
            first_failure,
        });
    }
    let fitted_c = rows
        .iter()
        .map(|r| r.thickness_c)
        .filter(|c| c.is_finite())
        .fold(0.0, f64::max);
    let fitted_r = rows.iter().map(|r| r.entropy_r).fold(0.0, f64::max);
    let failures: Vec<String> = rows
        .iter()
        .filter_map(|r| r.first_failure.as_ref().map(|f| format!("n = {}: {f}", r.n)))
        .collect();
    Ok(CoverReport {
        admissible_m: geometry::admissible_m(fitted_c, fitted_r),
        fitted_c,
        fitted_r,
        rows,
        verdict: Verdict::from_failures(failures, "every covering ball is certified"),
    })
}

/// The sieve of the Condition P construction at each scheduled `n`:
/// `B_n = {target distance > eps_n}` covered by balls of radius
/// `sieve_radius_fraction * eps_n`.
pub fn sieve_report(plan: &ExperimentPlan) -> Result<(Vec<CoveringAndSieve>, Verdict)> {
    plan.validate()?;
    let mut out = Vec::new();
    let mut cached: Option<(Vec<AtomSummary>, DistanceTable)> = None;
    for &n in plan.schedule.n_values() {
        let setup = plan.setup(n)?;
        if plan.regime == RegimeKind::Regression || cached.is_none() {
            cached = Some((
                summarize_atoms(&setup.prior, &setup.context)?,
                DistanceTable::new(&setup.context, &setup.prior)?,
            ));
        }
        let (summaries, table) = cached.as_ref().expect("cached geometry");
        let epsilon = plan.schedule.epsilon(n);
        let target = target_ids(summaries, epsilon);
        let cover = geometry::greedy_cover(table, &target, plan.sieve_radius_fraction * epsilon)?;
        out.push(geometry::build_sieve_from_cover(
            &cover,
            &setup.prior,
            plan.params.beta,
            plan.params.r,
            plan.params.c,
            n,
            epsilon,
        ));
    }
    let failures: Vec<String> = out
        .iter()
        .flat_map(|s| {
            let mut f = Vec::new();
            if !s.log_cover_ok {
                f.push(format!("n = {}: log J_n above its bound", s.n));
            }
            if !s.mass_bound_ok {
                f.push(format!("n = {}: per-index mass bound violated", s.n));
            }
            if s.tail_ball_mass > s.tail_bound * (1.0 + 1e-12) {
                f.push(format!("n = {}: tail mass above the partial-sum bound", s.n));
            }
            f
        })
        .collect();
    Ok((out, Verdict::from_failures(failures, "sieve conclusions hold")))
}

/// One instance of the separation example: a ball of radius `r/2` around a
/// center whose separation distance exceeds `r`, certified at `r²/8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationCase {
    pub center_id: usize,
    pub center_distance: f64,
    pub r: f64,
    pub ball: Ball,
    pub certification: Certification,
}

pub fn separation_cases(plan: &ExperimentPlan, cases: usize) -> Result<Vec<SeparationCase>> {
    plan.validate()?;
    let setup = plan.setup(plan.schedule.max_n())?;
    let summaries = summarize_atoms(&setup.prior, &setup.context)?;
    let table = DistanceTable::new(&setup.context, &setup.prior)?;
    let far: Vec<&AtomSummary> = summaries.iter().filter(|s| s.separation_distance > 1e-6).collect();
    if far.is_empty() {
        return Err(ExperimentError::InvalidPlan(
            "no atom is separated from the reference".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5E9A);
    (0..cases)
        .map(|_| {
            let center = far[rng.random_range(0..far.len())];
            let r = center.separation_distance * rng.random_range(0.05..0.95);
            let mut member_ids = Vec::new();
            for &id in table.ids() {
                if table.get(center.id, id)? <= r / 2.0 {
                    member_ids.push(id);
                }
            }
            let ball = Ball {
                center_id: center.id,
                radius: r / 2.0,
                member_ids,
            };
            let certification =
                certify_ball(&setup.context, &setup.prior, &ball, r * r / 8.0, plan.closure_draws, &mut rng)?;
            Ok(SeparationCase {
                center_id: center.id,
                center_distance: center.separation_distance,
                r,
                ball,
                certification,
            })
        })
        .collect()
}

/// Violation counts of the divergence inequalities over random densities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InequalityCounts {
    pub cases: usize,
    pub triangle: usize,
    pub h_below_k: usize,
    pub starred_hellinger: usize,
    /// Triples where `∫ (f/f°) f* <= 1` could not be certified.
    pub uncertified_ratio_mass: usize,
    pub reduction: usize,
    pub sup_above_mean: usize,
    /// Largest excess over zero of any checked inequality.
    pub worst_excess: f64,
}

impl InequalityCounts {
    pub fn violations(&self) -> usize {
        self.triangle + self.h_below_k + self.starred_hellinger + self.reduction + self.sup_above_mean
    }
}

/// A random mixture of one to three Gaussians well inside the grid.
pub fn random_density(grid: Grid, rng: &mut impl Rng) -> Result<GridDensity> {
    let span = (grid.upper() - grid.lower()) / 2.0;
    let mid = (grid.upper() + grid.lower()) / 2.0;
    let k = rng.random_range(1..=3);
    let components: Vec<GaussianComponent> = (0..k)
        .map(|_| GaussianComponent {
            weight: rng.random_range(0.1..1.0),
            mean: mid + span * rng.random_range(-0.25..0.25),
            sd: span * rng.random_range(0.04..0.15),
        })
        .collect();
    truth_density(grid, &components)
}

/// KL projection of `f*` onto the segment between `g` and `f`; the ratio
/// mass `∫ (f/f°) f*` is then at most one. Bisects the directional
/// derivative `∫ (f - g)/m_t f*`, which is decreasing in `t`.
pub fn segment_projection(f_star: &GridDensity, g: &GridDensity, f: &GridDensity) -> Result<GridDensity> {
    // Log-odds parametrization keeps both weights accurate near the ends.
    let at = |lambda: f64| -> Result<GridDensity> {
        let w_f = 1.0 / (1.0 + (-lambda).exp());
        let w_g = 1.0 / (1.0 + lambda.exp());
        Ok(GridDensity::mixture(&[g, f], &[w_g, w_f])?)
    };
    let slope = |m: &GridDensity| -> Result<f64> {
        Ok(divergences::likelihood_ratio_mass(m, f, f_star)? - divergences::likelihood_ratio_mass(m, g, f_star)?)
    };
    if slope(g)? <= 0.0 {
        return Ok(g.clone());
    }
    if slope(f)? >= 0.0 {
        return Ok(f.clone());
    }
    let (mut lo, mut hi) = (-700.0, 700.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(&at(mid)?)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    at(0.5 * (lo + hi))
}

pub fn inequality_suite(grid: Grid, cases: usize, seed: u64, slack: f64) -> Result<InequalityCounts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = InequalityCounts {
        cases,
        ..Default::default()
    };
    let note = |excess: f64, counter: &mut usize, worst: &mut f64| {
        *worst = worst.max(excess);
        if excess > slack {
            *counter += 1;
        }
    };
    for _ in 0..cases {
        let a = random_density(grid, &mut rng)?;
        let b = random_density(grid, &mut rng)?;
        let c = random_density(grid, &mut rng)?;
        let hab = divergences::hellinger(&a, &b)?;
        let hbc = divergences::hellinger(&b, &c)?;
        let hac = divergences::hellinger(&a, &c)?;
        let mut worst = out.worst_excess;
        note(hac - hab - hbc, &mut out.triangle, &mut worst);
        note(
            divergences::h_affinity_gap(&a, &b)? - divergences::kl(&a, &b)?,
            &mut out.h_below_k,
            &mut worst,
        );
        // f* = a, f = b, f° the projection of a onto the segment [c, b].
        let f_circ = segment_projection(&a, &c, &b)?;
        if divergences::likelihood_ratio_mass(&f_circ, &b, &a)? <= 1.0 + slack {
            let hs = divergences::weighted_hellinger(&f_circ, &b, &a)?;
            note(hs * hs / 2.0 - divergences::h_star(&f_circ, &b, &a)?, &mut out.starred_hellinger, &mut worst);
        } else {
            out.uncertified_ratio_mass += 1;
        }
        let reduction = [
            (divergences::kl_contrast(&a, &b, &a)? - divergences::kl(&a, &b)?).abs(),
            (divergences::h_star(&a, &b, &a)? - divergences::h_affinity_gap(&a, &b)?).abs(),
            (divergences::weighted_hellinger(&a, &b, &a)? - hab).abs(),
            (divergences::v_star(&a, &b, &a)? - divergences::v_divergence(&a, &b)?).abs(),
        ];
        note(reduction.into_iter().fold(0.0, f64::max), &mut out.reduction, &mut worst);
        let seq_a = [a.clone(), b.clone(), c.clone()];
        let seq_b = [b.clone(), c.clone(), a.clone()];
        let sup = divergences::max_hellinger(&seq_a, &seq_b)?;
        let rms = divergences::mean_hellinger(&seq_a, &seq_b)?;
        note(rms * rms - sup * sup, &mut out.sup_above_mean, &mut worst);
        out.worst_excess = worst;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn iid_plan(means: Vec<f64>, replications: usize) -> ExperimentPlan {
        ExperimentPlan {
            name: "test".into(),
            regime: RegimeKind::Iid,
            grid: Grid::new(-10.0, 10.0, 401).unwrap(),
            family: FamilySpec::GaussianLocation { means, sd: 1.0 },
            prior_weights: None,
            truth: TruthSpec::GaussianMixture(vec![GaussianComponent {
                weight: 1.0,
                mean: 0.0,
                sd: 1.0,
            }]),
            schedule: RateSchedule::cube_root(vec![20, 40, 80], 1.0).unwrap(),
            params: ConditionParams {
                thickness_c: None,
                c: 4.0,
                d: 4.0,
                r: 4.0,
                beta: 2.0,
                m: 4.0,
                eta: 0.1,
            },
            replications,
            seed: 7,
            jobs: 1,
            subset: None,
            closure_draws: 5,
            markov: None,
            small_mass_ids: vec![],
            sieve_radius_fraction: 0.5,
            rules: PassRules::default(),
        }
    }

    #[test]
    fn data_is_deterministic() {
        let plan = iid_plan(vec![0.0], 1);
        let setup = plan.setup(10).unwrap();
        let a = generate_data(&setup.source, 50, 3).unwrap();
        let b = generate_data(&setup.source, 50, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_data(&setup.source, 50, 4).unwrap());
    }

    #[test]
    fn markov_data_starts_stationary() {
        let src = DataSource::Markov(MarkovParam::new(0.6).unwrap());
        let d = generate_data(&src, 5, 1).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d[0].context.prev, None);
        assert_eq!(d[3].context.prev, Some(d[2].y));
    }

    #[test]
    fn single_atom_truth_has_zero_cesaro() {
        let plan = iid_plan(vec![0.0], 1);
        let v = cesaro_kl_run(&plan, 0).unwrap();
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn fit_rate_recovers_schedule_exponent() {
        let s = RateSchedule::cube_root(vec![10, 100, 1000], 0.5).unwrap();
        let ns = s.n_values().to_vec();
        let stat: Vec<f64> = ns.iter().map(|n| s.epsilon(*n).powi(2)).collect();
        let fit = fit_rate(&ns, &stat, &s);
        assert!((fit.slope + 2.0 / 3.0).abs() < 1e-12);
        assert!((fit.fitted_constant - 1.0).abs() < 1e-12);
        let c_over_n: Vec<f64> = ns.iter().map(|n| 3.0 / *n as f64).collect();
        assert!((fit_rate(&ns, &c_over_n, &s).slope + 1.0).abs() < 1e-12);
        let with_zero = fit_rate(&ns, &[0.0, 0.1, 0.01], &s);
        assert_eq!(with_zero.excluded, vec![10]);
    }

    #[test]
    fn point_mass_prior_evidence_never_falls() {
        let plan = iid_plan(vec![0.0], 20);
        let rep = verify_evidence_bound(&plan).unwrap();
        for r in &rep.rows {
            assert_eq!(r.fraction_below, 0.0);
            assert!(r.min_log_i_n.abs() < 1e-12);
        }
    }

    #[test]
    fn uncertifiable_subset_is_rejected() {
        let mut plan = iid_plan(vec![0.0, 0.1, 2.0], 5);
        plan.subset = Some(SubsetRecipe::Atoms(vec![0, 1]));
        plan.params.thickness_c = Some(1.0);
        let err = verify_numerator_bound(&plan).unwrap_err();
        assert!(err.to_string().starts_with("subset not admissible"), "{err}");
    }

    #[test]
    fn empty_target_set_has_zero_mass() {
        let mut plan = iid_plan(vec![0.0, 0.5], 5);
        plan.params.m = 1e6;
        let rep = posterior_mass_path(&plan).unwrap();
        assert!(rep.rows.iter().all(|r| r.b_count == 0 && r.median == 0.0));
    }
}
