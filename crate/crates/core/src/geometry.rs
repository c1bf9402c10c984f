//! Prior thickness, separation and convexity checks, greedy coverings,
//! Condition P sums and the sieve built from a covering.
//!
//! Every regime is handled through a [`RegimeContext`], which knows the
//! truth, the quadrature grid and the list of contexts (index or previous
//! state) over which per-observation Hellinger distances are taken:
//!
//! | regime       | ball metric  | separation gap | target metric |
//! |--------------|--------------|----------------|---------------|
//! | iid          | `H`          | `h`            | `H`           |
//! | misspecified | `H*`-type    | `h*`           | `H*`          |
//! | regression   | `H_{n,inf}`  | `h_n`          | `H_n`         |
//! | markov       | `H_inf` (window) | `h_inf` (window) | `H_Q`     |

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergences::{self, DivergenceError, Grid, GridDensity, StateWeighting};
use crate::models::{
    stationary_density, AtomicPrior, Context, FamilyMember, MarkovParam, Mixture, ModelError,
    RegressionFunction,
};

/// Slack for floating-point comparisons in certifications.
pub const CERTIFY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid rate schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid condition parameters: {0}")]
    InvalidParams(String),
    #[error("empty subset")]
    EmptySubset,
    #[error("unknown atom id {0}")]
    UnknownId(usize),
    #[error("regime {0:?} needs {1}")]
    WrongKind(RegimeKind, &'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeKind {
    Iid,
    Misspecified,
    Regression,
    Markov,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 4] = [
        RegimeKind::Iid,
        RegimeKind::Misspecified,
        RegimeKind::Regression,
        RegimeKind::Markov,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RegimeKind::Iid => "iid",
            RegimeKind::Misspecified => "misspecified",
            RegimeKind::Regression => "regression",
            RegimeKind::Markov => "markov",
        }
    }
}

/// `eps_n = a * n^{-gamma} * (ln n)^kappa` over increasing sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    n_values: Vec<usize>,
    a: f64,
    gamma: f64,
    kappa: f64,
}

impl RateSchedule {
    pub fn new(n_values: Vec<usize>, a: f64, gamma: f64, kappa: f64) -> Result<Self> {
        if n_values.is_empty() {
            return Err(GeometryError::InvalidSchedule("no sample sizes".into()));
        }
        if n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GeometryError::InvalidSchedule(
                "sample sizes must be strictly increasing".into(),
            ));
        }
        if n_values[0] < 2 {
            return Err(GeometryError::InvalidSchedule("sample sizes must be at least 2".into()));
        }
        if !(a > 0.0 && a.is_finite() && gamma.is_finite() && kappa.is_finite()) {
            return Err(GeometryError::InvalidSchedule(format!(
                "need a > 0 and finite exponents, got a = {a}, gamma = {gamma}, kappa = {kappa}"
            )));
        }
        let s = Self {
            n_values,
            a,
            gamma,
            kappa,
        };
        for w in s.n_values.windows(2) {
            if s.epsilon(w[1]) >= s.epsilon(w[0]) {
                return Err(GeometryError::InvalidSchedule(format!(
                    "eps_n must decrease, but eps_{} >= eps_{}",
                    w[1], w[0]
                )));
            }
            if s.n_eps_sq(w[1]) <= s.n_eps_sq(w[0]) {
                return Err(GeometryError::InvalidSchedule(format!(
                    "n eps_n^2 must increase, but fails between n = {} and n = {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(s)
    }

    /// `a * n^{-1/3}`.
    pub fn cube_root(n_values: Vec<usize>, a: f64) -> Result<Self> {
        Self::new(n_values, a, 1.0 / 3.0, 0.0)
    }

    pub fn n_values(&self) -> &[usize] {
        &self.n_values
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn epsilon(&self, n: usize) -> f64 {
        let n = n as f64;
        self.a * n.powf(-self.gamma) * n.ln().powf(self.kappa)
    }

    pub fn n_eps_sq(&self, n: usize) -> f64 {
        n as f64 * self.epsilon(n).powi(2)
    }

    pub fn max_n(&self) -> usize {
        *self.n_values.last().expect("nonempty schedule")
    }
}

/// Constants of the thickness, separation, sieve and covering conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionParams {
    /// Thickness constant `C`, when declared rather than estimated.
    pub thickness_c: Option<f64>,
    pub c: f64,
    pub d: f64,
    pub r: f64,
    pub beta: f64,
    pub m: f64,
    pub eta: f64,
}

impl ConditionParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c", self.c), ("d", self.d), ("r", self.r), ("M", self.m)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GeometryError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(cc) = self.thickness_c {
            if !(cc > 0.0 && cc.is_finite()) {
                return Err(GeometryError::InvalidParams(format!("C must be positive, got {cc}")));
            }
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return Err(GeometryError::InvalidParams(format!(
                "Condition P requires beta > 1, got {}",
                self.beta
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(GeometryError::InvalidParams(format!(
                "eta must lie in (0, 1), got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Settings specific to the Markov regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovGeometry {
    /// `Q` for `H_Q`; its grid is also the state grid for `K` and `V`.
    pub weighting: StateWeighting,
    /// Half-width of the state window for `H_inf`.
    pub state_window: f64,
    /// Evenly spaced window states, endpoints included.
    pub window_points: usize,
    /// Bound on `K(u*, u)` and `V(u*, u)` defining `Theta_0`.
    pub theta0_bound: f64,
}

impl MarkovGeometry {
    /// Five stationary standard deviations of the truth.
    pub fn default_window(truth: &MarkovParam) -> f64 {
        5.0 * truth.stationary_variance().expect("stationary truth").sqrt()
    }

    pub fn window_states(&self) -> Vec<f64> {
        let k = self.window_points.max(2);
        (0..k)
            .map(|j| -self.state_window + 2.0 * self.state_window * j as f64 / (k - 1) as f64)
            .collect()
    }
}

/// Truth, quadrature grid and per-regime metric conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeContext {
    kind: RegimeKind,
    truth: FamilyMember,
    projection: Option<FamilyMember>,
    grid: Grid,
    markov: Option<MarkovGeometry>,
}

/// Id given to the truth when it is wrapped as a family member.
pub const TRUTH_ID: usize = usize::MAX;

impl RegimeContext {
    pub fn iid(truth: GridDensity) -> Self {
        Self {
            kind: RegimeKind::Iid,
            grid: *truth.grid(),
            truth: FamilyMember::density(TRUTH_ID, truth),
            projection: None,
            markov: None,
        }
    }

    pub fn misspecified(truth: GridDensity, projection: FamilyMember) -> Result<Self> {
        let grid = *truth.grid();
        match projection.as_density() {
            Some(d) if *d.grid() == grid => {}
            Some(_) => return Err(DivergenceError::IncompatibleGrids.into()),
            None => return Err(GeometryError::WrongKind(RegimeKind::Misspecified, "an iid projection")),
        }
        Ok(Self {
            kind: RegimeKind::Misspecified,
            grid,
            truth: FamilyMember::density(TRUTH_ID, truth),
            projection: Some(projection),
            markov: None,
        })
    }

    pub fn regression(truth: RegressionFunction, grid: Grid) -> Self {
        Self {
            kind: RegimeKind::Regression,
            grid,
            truth: FamilyMember::regression(TRUTH_ID, truth),
            projection: None,
            markov: None,
        }
    }

    pub fn markov(truth: MarkovParam, grid: Grid, geometry: MarkovGeometry) -> Result<Self> {
        if !(geometry.state_window > 0.0) {
            return Err(DivergenceError::InvalidWindow(geometry.state_window).into());
        }
        Ok(Self {
            kind: RegimeKind::Markov,
            grid,
            truth: FamilyMember::markov(TRUTH_ID, truth),
            projection: None,
            markov: Some(geometry),
        })
    }

    pub fn kind(&self) -> RegimeKind {
        self.kind
    }

    pub fn truth(&self) -> &FamilyMember {
        &self.truth
    }

    /// `f°` under misspecification, otherwise the truth.
    pub fn reference(&self) -> &FamilyMember {
        self.projection.as_ref().unwrap_or(&self.truth)
    }

    pub fn projection(&self) -> Option<&FamilyMember> {
        self.projection.as_ref()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn markov_geometry(&self) -> Option<&MarkovGeometry> {
        self.markov.as_ref()
    }

    fn truth_density(&self) -> &GridDensity {
        self.truth.as_density().expect("iid truth")
    }

    fn projection_density(&self) -> &GridDensity {
        self.reference().as_density().expect("iid projection")
    }

    /// Contexts over which per-observation distances are taken, paired with
    /// the anchor's conditional mean there (the grid shift).
    pub fn contexts(&self, anchor: &FamilyMember) -> Result<Vec<(Context, f64)>> {
        match self.kind {
            RegimeKind::Iid | RegimeKind::Misspecified => Ok(vec![(Context::default(), 0.0)]),
            RegimeKind::Regression => {
                let f = anchor
                    .as_regression()
                    .ok_or(GeometryError::WrongKind(self.kind, "regression members"))?;
                Ok((1..=f.len())
                    .map(|i| (Context::at(i), f.values()[i - 1]))
                    .collect())
            }
            RegimeKind::Markov => {
                let p = anchor
                    .as_markov()
                    .ok_or(GeometryError::WrongKind(self.kind, "markov members"))?;
                let g = self.markov.as_ref().expect("markov geometry");
                Ok(g.window_states()
                    .into_iter()
                    .map(|y| (Context::after(1, y), p.theta * y))
                    .collect())
            }
        }
    }

    fn context_distance(&self, a: &GridDensity, b: &GridDensity) -> Result<f64> {
        Ok(match self.kind {
            RegimeKind::Misspecified => divergences::weighted_root_distance(
                a,
                b,
                self.projection_density(),
                self.truth_density(),
            )?,
            _ => divergences::hellinger(a, b)?,
        })
    }

    /// Per-context distances between two members, contexts anchored at `a`.
    pub fn distance_profile(&self, a: &FamilyMember, b: &FamilyMember) -> Result<Vec<f64>> {
        self.contexts(a)?
            .iter()
            .map(|(ctx, shift)| {
                let da = a.conditional_density(ctx, &self.grid, *shift)?;
                let db = b.conditional_density(ctx, &self.grid, *shift)?;
                self.context_distance(&da, &db)
            })
            .collect()
    }

    /// Distance used for covering balls.
    pub fn ball_distance(&self, a: &FamilyMember, b: &FamilyMember) -> Result<f64> {
        Ok(self.distance_profile(a, b)?.into_iter().fold(0.0, f64::max))
    }

    /// Distance from the reference whose square halves lower-bound the
    /// separation gap; it obeys a triangle inequality with the ball metric.
    pub fn separation_distance(&self, member: &FamilyMember) -> Result<f64> {
        let profile = self.distance_profile(self.reference(), member)?;
        Ok(match self.kind {
            RegimeKind::Regression => rms(&profile),
            _ => profile.into_iter().fold(0.0, f64::max),
        })
    }

    /// Separation gap of a member: `h`, `h*`, `h_n` or windowed `h_inf`.
    pub fn gap(&self, member: &FamilyMember) -> Result<f64> {
        match self.kind {
            RegimeKind::Iid => Ok(divergences::h_affinity_gap(
                self.truth_density(),
                member_density(member)?,
            )?),
            RegimeKind::Misspecified => Ok(divergences::h_star(
                self.projection_density(),
                member_density(member)?,
                self.truth_density(),
            )?),
            _ => Ok(self.separation_distance(member)?.powi(2) / 2.0),
        }
    }

    /// Gap of a per-context mixture (`weights[k]` mixes `members` at context k).
    fn mixture_gap(&self, members: &[&FamilyMember], weights: &[Vec<f64>]) -> Result<f64> {
        let contexts = self.contexts(self.reference())?;
        let mut profile = Vec::with_capacity(contexts.len());
        for ((ctx, shift), w) in contexts.iter().zip(weights) {
            let mix = Mixture::new(members.to_vec(), w.clone())?.conditional_density(ctx, &self.grid, *shift)?;
            let reference = self.reference().conditional_density(ctx, &self.grid, *shift)?;
            match self.kind {
                RegimeKind::Iid => return Ok(divergences::h_affinity_gap(&reference, &mix)?),
                RegimeKind::Misspecified => {
                    return Ok(divergences::h_star(&reference, &mix, self.truth_density())?)
                }
                _ => profile.push(divergences::hellinger(&reference, &mix)?),
            }
        }
        Ok(match self.kind {
            RegimeKind::Regression => rms(&profile).powi(2) / 2.0,
            _ => profile.into_iter().fold(0.0, f64::max).powi(2) / 2.0,
        })
    }

    /// Distance defining the target set `B_n`: `H`, `H*`, `H_n` or `H_Q`.
    pub fn reference_distance(&self, member: &FamilyMember) -> Result<f64> {
        match self.kind {
            RegimeKind::Markov => Ok(self.markov_summary(member)?.h_q),
            _ => self.separation_distance(member),
        }
    }

    fn markov_summary(&self, member: &FamilyMember) -> Result<divergences::MarkovDivergences> {
        let g = self.markov.as_ref().expect("markov geometry");
        let truth = self.truth.as_markov().expect("markov truth");
        let theta = member
            .as_markov()
            .ok_or(GeometryError::WrongKind(self.kind, "markov members"))?;
        Ok(divergences::markov_divergences(truth, theta, &g.weighting, g.state_window)?)
    }

    /// Thickness divergences `(K, V)` of a member and its `Theta_0` status.
    pub fn kv(&self, member: &FamilyMember) -> Result<(f64, f64, bool)> {
        match self.kind {
            RegimeKind::Iid => {
                let f = member_density(member)?;
                Ok((
                    divergences::kl(self.truth_density(), f)?,
                    divergences::v_divergence(self.truth_density(), f)?,
                    true,
                ))
            }
            RegimeKind::Misspecified => {
                let f = member_density(member)?;
                Ok((
                    divergences::kl_contrast(self.projection_density(), f, self.truth_density())?,
                    divergences::v_star(self.projection_density(), f, self.truth_density())?,
                    true,
                ))
            }
            RegimeKind::Regression => {
                let contexts = self.contexts(&self.truth)?;
                let (mut k, mut v) = (0.0, 0.0);
                for (ctx, shift) in &contexts {
                    let t = self.truth.conditional_density(ctx, &self.grid, *shift)?;
                    let f = member.conditional_density(ctx, &self.grid, *shift)?;
                    k += divergences::kl(&t, &f)?;
                    v += divergences::v_divergence(&t, &f)?;
                }
                let n = contexts.len() as f64;
                Ok((k / n, v / n, true))
            }
            RegimeKind::Markov => {
                let g = self.markov.as_ref().expect("markov geometry");
                let summary = self.markov_summary(member)?;
                let grid = *g.weighting.grid();
                let u_star = stationary_density(self.truth.as_markov().expect("markov truth"), grid)?;
                let u = stationary_density(member.as_markov().expect("markov member"), grid)?;
                let in_theta0 = divergences::kl(&u_star, &u)? <= g.theta0_bound
                    && divergences::v_divergence(&u_star, &u)? <= g.theta0_bound;
                Ok((summary.k, summary.v, in_theta0))
            }
        }
    }

    /// `∫ (f/f°) f*` for misspecified members; `None` elsewhere.
    pub fn ratio_mass(&self, member: &FamilyMember) -> Result<Option<f64>> {
        if self.kind != RegimeKind::Misspecified {
            return Ok(None);
        }
        Ok(Some(divergences::likelihood_ratio_mass(
            self.projection_density(),
            member_density(member)?,
            self.truth_density(),
        )?))
    }
}

fn member_density(member: &FamilyMember) -> Result<&GridDensity> {
    member
        .as_density()
        .ok_or(GeometryError::WrongKind(RegimeKind::Iid, "iid members"))
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Per-atom divergences from the truth, computed once per prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSummary {
    pub id: usize,
    pub weight: f64,
    pub k: f64,
    pub v: f64,
    pub in_theta0: bool,
    pub gap: f64,
    pub separation_distance: f64,
    pub reference_distance: f64,
    pub ratio_mass: Option<f64>,
}

pub fn summarize_atoms(prior: &AtomicPrior, ctx: &RegimeContext) -> Result<Vec<AtomSummary>> {
    prior
        .family()
        .par_iter()
        .zip(prior.weights().par_iter())
        .map(|(m, w)| {
            let (k, v, in_theta0) = ctx.kv(m)?;
            let separation_distance = ctx.separation_distance(m)?;
            let reference_distance = match ctx.kind {
                RegimeKind::Markov => ctx.reference_distance(m)?,
                _ => separation_distance,
            };
            Ok(AtomSummary {
                id: m.id,
                weight: *w,
                k,
                v,
                in_theta0,
                gap: ctx.gap(m)?,
                separation_distance,
                reference_distance,
                ratio_mass: ctx.ratio_mass(m)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThicknessRow {
    pub n: usize,
    pub epsilon: f64,
    pub neighborhood_mass: f64,
    /// `-log(mass) / (n eps²)`, infinite for an empty neighborhood.
    pub implied_c: f64,
}

/// Prior mass of `{K <= eps², V <= eps²}` (intersected with `Theta_0`).
pub fn thickness_at(summaries: &[AtomSummary], n: usize, epsilon: f64) -> ThicknessRow {
    let eps_sq = epsilon * epsilon;
    let mass: f64 = summaries
        .iter()
        .filter(|s| s.k <= eps_sq && s.v <= eps_sq && s.in_theta0)
        .map(|s| s.weight)
        .sum();
    let implied_c = if mass > 0.0 {
        (-mass.ln() / (n as f64 * eps_sq)).max(0.0)
    } else {
        f64::INFINITY
    };
    ThicknessRow {
        n,
        epsilon,
        neighborhood_mass: mass,
        implied_c,
    }
}

/// Thickness over a schedule for one prior. Regression priors depend on
/// the design size, so for that regime call [`thickness_at`] per `n`.
pub fn thickness_profile(
    prior: &AtomicPrior,
    ctx: &RegimeContext,
    schedule: &RateSchedule,
) -> Result<Vec<ThicknessRow>> {
    let summaries = summarize_atoms(prior, ctx)?;
    Ok(schedule
        .n_values()
        .iter()
        .map(|&n| thickness_at(&summaries, n, schedule.epsilon(n)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub separated: bool,
    pub min_gap: f64,
}

/// `separated` iff every member's gap from the reference exceeds `delta`.
pub fn check_separation(
    ctx: &RegimeContext,
    subset: &[&FamilyMember],
    delta: f64,
) -> Result<SeparationReport> {
    if subset.is_empty() {
        return Err(GeometryError::EmptySubset);
    }
    let gaps = subset
        .iter()
        .map(|m| ctx.gap(m))
        .collect::<Result<Vec<_>>>()?;
    let min_gap = gaps.into_iter().fold(f64::INFINITY, f64::min);
    Ok(SeparationReport {
        separated: min_gap > delta,
        min_gap,
    })
}

/// A closed ball `{atoms: distance(center, atom) <= radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center_id: usize,
    pub radius: f64,
    pub member_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosureReport {
    pub closed: bool,
    /// Largest `distance(center, mixture) - radius` over the draws.
    pub worst_violation: f64,
    /// Smallest separation gap among the drawn mixtures.
    pub mixture_min_gap: f64,
    pub draws: usize,
}

fn dirichlet_weights(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x: f64| x / total).collect()
}

fn members_of<'a>(prior: &'a AtomicPrior, ids: &[usize]) -> Result<Vec<&'a FamilyMember>> {
    ids.iter()
        .map(|id| prior.member(*id).ok_or(GeometryError::UnknownId(*id)))
        .collect()
}

/// Draws mixtures of the ball's members (fresh uniform-Dirichlet weights at
/// every context) and checks they stay within the ball.
pub fn check_mixture_closure(
    ctx: &RegimeContext,
    prior: &AtomicPrior,
    ball: &Ball,
    n_random_mixtures: usize,
    rng: &mut impl Rng,
) -> Result<ClosureReport> {
    let members = members_of(prior, &ball.member_ids)?;
    if members.is_empty() {
        return Err(GeometryError::EmptySubset);
    }
    let center = prior.member(ball.center_id).ok_or(GeometryError::UnknownId(ball.center_id))?;
    let contexts = ctx.contexts(center)?;
    let reference_contexts = ctx.contexts(ctx.reference())?.len();
    let center_densities = contexts
        .iter()
        .map(|(c, s)| center.conditional_density(c, ctx.grid(), *s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut worst = f64::NEG_INFINITY;
    let mut mixture_min_gap = f64::INFINITY;
    for _ in 0..n_random_mixtures {
        let weights: Vec<Vec<f64>> = (0..contexts.len().max(reference_contexts))
            .map(|_| dirichlet_weights(rng, members.len()))
            .collect();
        let mut distance: f64 = 0.0;
        for (((c, s), cd), w) in contexts.iter().zip(&center_densities).zip(&weights) {
            let mix = Mixture::new(members.clone(), w.clone())?.conditional_density(c, ctx.grid(), *s)?;
            distance = distance.max(ctx.context_distance(cd, &mix)?);
        }
        worst = worst.max(distance - ball.radius);
        mixture_min_gap = mixture_min_gap.min(ctx.mixture_gap(&members, &weights)?);
    }
    if n_random_mixtures == 0 {
        worst = 0.0;
    }
    Ok(ClosureReport {
        closed: worst <= CERTIFY_SLACK,
        worst_violation: worst,
        mixture_min_gap,
        draws: n_random_mixtures,
    })
}

/// Joint certificate that a ball may serve as a numerator-bound subset at
/// separation level `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub closure: ClosureReport,
    pub separation: SeparationReport,
    /// `(separation_distance(center) - radius)_+² / 2`, a lower bound on
    /// the gap of everything in the ball.
    pub ball_bound: f64,
    /// Misspecified regime: `∫ (f/f°) f* <= 1` on every member.
    pub ratio_mass_ok: bool,
    pub certified: bool,
    pub failure: Option<String>,
}

pub fn certify_ball(
    ctx: &RegimeContext,
    prior: &AtomicPrior,
    ball: &Ball,
    delta: f64,
    n_random_mixtures: usize,
    rng: &mut impl Rng,
) -> Result<Certification> {
    let members = members_of(prior, &ball.member_ids)?;
    let separation = check_separation(ctx, &members, delta)?;
    let closure = check_mixture_closure(ctx, prior, ball, n_random_mixtures, rng)?;
    let center = prior.member(ball.center_id).ok_or(GeometryError::UnknownId(ball.center_id))?;
    let slack = (ctx.separation_distance(center)? - ball.radius).max(0.0);
    let ball_bound = slack * slack / 2.0;
    let mut ratio_mass_ok = true;
    for m in &members {
        if let Some(mass) = ctx.ratio_mass(m)? {
            ratio_mass_ok &= mass <= 1.0 + CERTIFY_SLACK;
        }
    }
    let failure = if !closure.closed {
        Some(format!(
            "mixture closure failed (worst violation {:.3e})",
            closure.worst_violation
        ))
    } else if !separation.separated {
        Some(format!(
            "separation failed: min member gap {:.6e} <= {delta:.6e}",
            separation.min_gap
        ))
    } else if ball_bound <= delta {
        Some(format!(
            "separation failed: ball-level gap bound {ball_bound:.6e} <= {delta:.6e}"
        ))
    } else if !ratio_mass_ok {
        Some("likelihood-ratio mass exceeds one on a member".into())
    } else {
        None
    };
    Ok(Certification {
        closure,
        separation,
        ball_bound,
        ratio_mass_ok,
        certified: failure.is_none(),
        failure,
    })
}

/// Symmetric table of ball-metric distances between all atoms of a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceTable {
    ids: Vec<usize>,
    distances: Vec<f64>,
}

impl DistanceTable {
    pub fn new(ctx: &RegimeContext, prior: &AtomicPrior) -> Result<Self> {
        let family = prior.family();
        let n = family.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..n)
                    .map(|j| ctx.ball_distance(&family[i], &family[j]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut distances = vec![0.0; n * n];
        for (i, row) in rows.iter().enumerate() {
            for (off, d) in row.iter().enumerate() {
                let j = i + 1 + off;
                distances[i * n + j] = *d;
                distances[j * n + i] = *d;
            }
        }
        Ok(Self {
            ids: family.iter().map(|m| m.id).collect(),
            distances,
        })
    }

    /// Builds a table from explicit distances (row-major, symmetric).
    pub fn from_matrix(ids: Vec<usize>, distances: Vec<f64>) -> Self {
        assert_eq!(ids.len() * ids.len(), distances.len());
        Self { ids, distances }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    fn position(&self, id: usize) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| *x == id)
            .ok_or(GeometryError::UnknownId(id))
    }

    pub fn get(&self, a: usize, b: usize) -> Result<f64> {
        let (i, j) = (self.position(a)?, self.position(b)?);
        Ok(self.distances[i * self.ids.len() + j])
    }
}

/// Farthest-point order of the target atoms: the first center is the
/// smallest id, each next center the atom farthest from all chosen centers
/// (ties to the smallest id). Also returns, for each prefix length `k`, the
/// covering radius of the target by the first `k` centers.
pub fn farthest_point_order(table: &DistanceTable, target_ids: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut remaining: Vec<usize> = target_ids.to_vec();
    remaining.sort_unstable();
    remaining.dedup();
    if remaining.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut nearest: Vec<f64> = vec![f64::INFINITY; remaining.len()];
    let mut order = Vec::with_capacity(remaining.len());
    let mut radii = Vec::with_capacity(remaining.len());
    let mut next = 0;
    loop {
        let center = remaining[next];
        order.push(center);
        for (k, id) in remaining.iter().enumerate() {
            nearest[k] = nearest[k].min(table.get(center, *id)?);
        }
        let (far, far_d) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, d)| if *d > best.1 { (k, *d) } else { best });
        radii.push(far_d);
        if far_d <= 0.0 || order.len() == remaining.len() {
            break;
        }
        next = far;
    }
    Ok((order, radii))
}

/// Greedy farthest-point covering of `target_ids` by closed balls of the
/// given radius; ball members are all atoms of the table within radius.
pub fn greedy_cover(table: &DistanceTable, target_ids: &[usize], radius: f64) -> Result<Cover> {
    let (order, radii) = farthest_point_order(table, target_ids)?;
    let count = radii
        .iter()
        .position(|r| *r <= radius)
        .map_or(order.len(), |k| k + 1);
    let balls = order[..count]
        .iter()
        .map(|&center| {
            let mut member_ids = Vec::new();
            for &id in table.ids() {
                if table.get(center, id)? <= radius {
                    member_ids.push(id);
                }
            }
            member_ids.sort_unstable();
            Ok(Ball {
                center_id: center,
                radius,
                member_ids,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut target_ids = target_ids.to_vec();
    target_ids.sort_unstable();
    target_ids.dedup();
    Ok(Cover {
        target_ids,
        radius,
        balls,
    })
}

/// A covering of a target set by balls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cover {
    pub target_ids: Vec<usize>,
    pub radius: f64,
    pub balls: Vec<Ball>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionPSum {
    /// `sum_j Pi(A_j)^{1/beta}`.
    pub s_n: f64,
    /// `exp(-c n eps²) * S_n`.
    pub discounted: f64,
}

pub fn condition_p_sum(
    cover: &Cover,
    prior: &AtomicPrior,
    beta: f64,
    c_const: f64,
    n: usize,
    epsilon: f64,
) -> ConditionPSum {
    let s_n: f64 = cover
        .balls
        .iter()
        .map(|b| prior.mass_of(&b.member_ids).powf(1.0 / beta))
        .sum();
    ConditionPSum {
        s_n,
        discounted: (-c_const * n as f64 * epsilon * epsilon).exp() * s_n,
    }
}

/// Largest exactly representable sieve index.
const MAX_LOG_INDEX: f64 = 40.0;

/// `J_n = min{j >= 1: j^{beta-1} >= S^beta e^{r n eps²}}`, as `(J_n, ln J_n)`.
/// Saturates at `u64::MAX` when `ln J_n` exceeds 40.
pub fn sieve_index(s_n: f64, beta: f64, r_const: f64, n_eps_sq: f64) -> (u64, f64) {
    let target = beta * s_n.ln() + r_const * n_eps_sq;
    let log_j = target / (beta - 1.0);
    if log_j > MAX_LOG_INDEX {
        return (u64::MAX, log_j);
    }
    let holds = |j: u64| (beta - 1.0) * (j as f64).ln() >= target;
    let mut j = log_j.exp().ceil().max(1.0) as u64;
    while j > 1 && holds(j - 1) {
        j -= 1;
    }
    while !holds(j) {
        j += 1;
    }
    (j, (j as f64).ln())
}

/// The sieve `F_n` (union of the `J_n` heaviest balls) and the numerical
/// conclusions of its construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveringAndSieve {
    pub n: usize,
    pub epsilon: f64,
    pub target_ids: Vec<usize>,
    /// Balls by decreasing prior mass, ties by center id.
    pub balls: Vec<Ball>,
    pub ball_masses: Vec<f64>,
    pub j_n: u64,
    pub s_n: f64,
    pub sieve_ids: Vec<usize>,
    /// Mass of the covered atoms outside the sieve.
    pub complement_mass: f64,
    /// `ln J_n`.
    pub log_cover_count: f64,
    pub covering_exhausted: bool,
    /// `sum_{j > J_n} Pi(A_j)`.
    pub tail_ball_mass: f64,
    /// `sum_{j > J_n} S_n^beta / j^beta` over the available balls.
    pub tail_bound: f64,
    /// `((r + beta c)/(beta - 1)) n eps²`.
    pub log_cover_bound: f64,
    pub log_cover_ok: bool,
    /// `Pi(A_J) <= S_n^beta / J^beta` for every `J`.
    pub mass_bound_ok: bool,
    /// `complement_mass * exp(r n eps²)`.
    pub complement_constant: f64,
}

pub fn build_sieve_from_cover(
    cover: &Cover,
    prior: &AtomicPrior,
    beta: f64,
    r_const: f64,
    c_const: f64,
    n: usize,
    epsilon: f64,
) -> CoveringAndSieve {
    let mut balls: Vec<(f64, Ball)> = cover
        .balls
        .iter()
        .map(|b| (prior.mass_of(&b.member_ids), b.clone()))
        .collect();
    balls.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.center_id.cmp(&b.1.center_id)));
    let s_n: f64 = balls.iter().map(|(m, _)| m.powf(1.0 / beta)).sum();
    let n_eps_sq = n as f64 * epsilon * epsilon;
    let (j_n, log_j) = sieve_index(s_n, beta, r_const, n_eps_sq);
    let covering_exhausted = j_n > balls.len() as u64;
    let used = (j_n.min(balls.len() as u64)) as usize;

    let mut sieve_ids: Vec<usize> = balls[..used]
        .iter()
        .flat_map(|(_, b)| b.member_ids.iter().copied())
        .collect();
    sieve_ids.sort_unstable();
    sieve_ids.dedup();
    let mut covered: Vec<usize> = balls
        .iter()
        .flat_map(|(_, b)| b.member_ids.iter().copied())
        .collect();
    covered.sort_unstable();
    covered.dedup();
    let outside: Vec<usize> = covered
        .into_iter()
        .filter(|id| sieve_ids.binary_search(id).is_err())
        .collect();
    let complement_mass = prior.mass_of(&outside);

    let s_beta = s_n.powf(beta);
    let tail_ball_mass = balls[used..].iter().map(|(m, _)| m).sum();
    let tail_bound = (used + 1..=balls.len())
        .map(|j| s_beta / (j as f64).powf(beta))
        .sum();
    let mass_bound_ok = balls
        .iter()
        .enumerate()
        .all(|(k, (m, _))| *m <= s_beta / ((k + 1) as f64).powf(beta) * (1.0 + 1e-12));
    let log_cover_bound = (r_const + beta * c_const) / (beta - 1.0) * n_eps_sq;
    let ball_masses = balls.iter().map(|(m, _)| *m).collect();
    CoveringAndSieve {
        n,
        epsilon,
        target_ids: cover.target_ids.clone(),
        balls: balls.into_iter().map(|(_, b)| b).collect(),
        ball_masses,
        j_n,
        s_n,
        sieve_ids,
        complement_mass,
        log_cover_count: log_j,
        covering_exhausted,
        tail_ball_mass,
        tail_bound,
        log_cover_bound,
        log_cover_ok: log_j <= log_cover_bound,
        mass_bound_ok,
        complement_constant: complement_mass * (r_const * n_eps_sq).exp(),
    }
}

/// Infimum of admissible `M`: any `M` with `M² > 4[(C + 1) + 2R]`.
pub fn admissible_m(thickness_c: f64, entropy_r: f64) -> f64 {
    (4.0 * ((thickness_c + 1.0) + 2.0 * entropy_r)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_gaussian_location_family;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(-10.0, 10.0, 801).unwrap()
    }

    fn iid_setup(means: &[f64], weights: Vec<f64>) -> (AtomicPrior, RegimeContext) {
        let fam = build_gaussian_location_family(grid(), means, 1.0).unwrap();
        let prior = AtomicPrior::new(fam, weights).unwrap();
        let ctx = RegimeContext::iid(GridDensity::gaussian(grid(), 0.0, 1.0).unwrap());
        (prior, ctx)
    }

    #[test]
    fn schedule_validation() {
        let s = RateSchedule::cube_root(vec![50, 100, 200], 1.0).unwrap();
        assert!((s.epsilon(1000) - 0.1).abs() < 1e-12);
        assert!(RateSchedule::cube_root(vec![100, 50], 1.0).is_err());
        // gamma = 1/2 keeps n eps² constant
        assert!(RateSchedule::new(vec![10, 20], 1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn params_reject_beta_one() {
        let p = ConditionParams {
            thickness_c: None,
            c: 2.0,
            d: 2.0,
            r: 2.0,
            beta: 1.0,
            m: 2.0,
            eta: 0.1,
        };
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("beta > 1"), "{err}");
    }

    #[test]
    fn thickness_with_truth_atom() {
        let (prior, ctx) = iid_setup(&[0.0, 2.0, 3.0], vec![0.2, 0.4, 0.4]);
        let rows = thickness_profile(&prior, &ctx, &RateSchedule::cube_root(vec![100, 1000], 1.0).unwrap())
            .unwrap();
        for row in rows {
            assert!((row.neighborhood_mass - 0.2).abs() < 1e-12);
            let expected = -(0.2f64).ln() / (row.n as f64 * row.epsilon.powi(2));
            assert!((row.implied_c - expected).abs() < 1e-12);
        }
        let (far, ctx) = iid_setup(&[2.0, 3.0], vec![0.5, 0.5]);
        let s = summarize_atoms(&far, &ctx).unwrap();
        assert_eq!(thickness_at(&s, 100, 0.3).implied_c, f64::INFINITY);
    }

    #[test]
    fn separation_of_reference_itself() {
        let (prior, ctx) = iid_setup(&[0.0, 1.0], vec![0.5, 0.5]);
        let rep = check_separation(&ctx, &[&prior.family()[0]], 1e-6).unwrap();
        assert!(!rep.separated);
        assert!(rep.min_gap.abs() < 1e-12);
        assert_eq!(check_separation(&ctx, &[], 0.1), Err(GeometryError::EmptySubset));
    }

    #[test]
    fn cover_extremes() {
        let (prior, ctx) = iid_setup(&[0.0, 0.1, 0.2], vec![1.0; 3]);
        let table = DistanceTable::new(&ctx, &prior).unwrap();
        assert_eq!(greedy_cover(&table, &prior.ids(), 1.0).unwrap().balls.len(), 1);
        assert_eq!(greedy_cover(&table, &prior.ids(), 0.01).unwrap().balls.len(), 3);
    }

    #[test]
    fn condition_p_sum_arithmetic() {
        let (prior, _) = iid_setup(&[0.0, 1.0, 2.0], vec![0.5, 0.25, 0.25]);
        let cover = Cover {
            target_ids: vec![0, 1, 2],
            radius: 0.1,
            balls: (0..3)
                .map(|j| Ball {
                    center_id: j,
                    radius: 0.1,
                    member_ids: vec![j],
                })
                .collect(),
        };
        let p = condition_p_sum(&cover, &prior, 2.0, 1.0, 10, 0.1);
        assert!((p.s_n - (0.5f64.sqrt() + 1.0)).abs() < 1e-12);
        assert!((p.discounted - p.s_n * (-0.1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn single_full_ball_sieve() {
        let (prior, _) = iid_setup(&[0.0], vec![1.0]);
        let cover = Cover {
            target_ids: vec![0],
            radius: 1.0,
            balls: vec![Ball {
                center_id: 0,
                radius: 1.0,
                member_ids: vec![0],
            }],
        };
        // S = 1, so J_n = 1 exactly when r n eps² = 0
        let s = build_sieve_from_cover(&cover, &prior, 2.0, 0.0, 1.0, 1, 1e-3);
        assert_eq!(s.j_n, 1);
        assert_eq!(s.complement_mass, 0.0);
        assert!(!s.covering_exhausted);
    }

    #[test]
    fn sieve_index_matches_scan() {
        for (s, beta, r, nes) in [(1.3, 2.0, 1.5, 2.0), (0.2, 1.5, 3.0, 1.0), (5.0, 3.0, 0.5, 0.1)] {
            let (j, _) = sieve_index(s, beta, r, nes);
            let rhs = f64::powf(s, beta) * f64::exp(r * nes);
            let scan = (1u64..).find(|j| (*j as f64).powf(beta - 1.0) >= rhs).unwrap();
            assert_eq!(j, scan);
        }
    }

    #[test]
    fn ball_certification_far_from_truth() {
        let means: Vec<f64> = (0..11).map(|k| k as f64 * 0.2).collect();
        let (prior, ctx) = iid_setup(&means, vec![1.0; 11]);
        let ball = Ball {
            center_id: 9,
            radius: 0.1,
            member_ids: vec![8, 9, 10],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cert = certify_ball(&ctx, &prior, &ball, 0.05, 20, &mut rng).unwrap();
        assert!(cert.certified, "{:?}", cert.failure);
        assert!(cert.closure.mixture_min_gap > 0.05);
        let near = Ball {
            center_id: 1,
            radius: 0.3,
            member_ids: vec![0, 1, 2],
        };
        let cert = certify_ball(&ctx, &prior, &near, 0.05, 5, &mut rng).unwrap();
        assert!(!cert.certified);
        assert!(cert.failure.unwrap().contains("separation"));
    }
}
