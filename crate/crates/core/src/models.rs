//! Model families for the four data regimes, finite-atom priors and the
//! KL projection onto a family.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergences::{self, gaussian_log_pdf, DivergenceError, Grid, GridDensity};
use crate::numeric::log_sum_exp;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("empty family")]
    EmptyFamily,
    #[error("duplicate member id {0}")]
    DuplicateId(usize),
    #[error("family mixes member kinds ({0:?} and {1:?})")]
    MixedKinds(FamilyKind, FamilyKind),
    #[error("family members disagree on {0}")]
    InconsistentMembers(&'static str),
    #[error("invalid prior weights: {0}")]
    InvalidWeights(String),
    #[error("grid clips density: mean {mean} is within {sds} sd of the grid edge")]
    GridClipsDensity { mean: f64, sds: f64 },
    #[error("no stationary density: |theta| = {0} is not below 1")]
    NoStationaryDensity(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("index {index} out of design range 1..={len}")]
    IndexOutOfDesign { index: usize, len: usize },
    #[error("observation {0} outside grid")]
    OutsideGrid(f64),
    #[error("{0:?} member cannot be evaluated in this context: {1}")]
    WrongContext(FamilyKind, &'static str),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Gaussian AR(1) kernel `y' | y ~ N(theta * y, noise_sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovParam {
    pub theta: f64,
    pub noise_sd: f64,
}

impl MarkovParam {
    /// Unit innovation variance.
    pub fn new(theta: f64) -> Result<Self> {
        Self::with_noise(theta, 1.0)
    }

    pub fn with_noise(theta: f64, noise_sd: f64) -> Result<Self> {
        if !theta.is_finite() || theta.abs() >= 1.0 {
            return Err(ModelError::NoStationaryDensity(theta.abs()));
        }
        if !(noise_sd > 0.0 && noise_sd.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "noise_sd must be positive, got {noise_sd}"
            )));
        }
        Ok(Self { theta, noise_sd })
    }

    /// `noise_sd² / (1 - theta²)`, or `None` off the stationary region.
    pub fn stationary_variance(&self) -> Option<f64> {
        (self.theta.abs() < 1.0).then(|| self.noise_sd.powi(2) / (1.0 - self.theta.powi(2)))
    }

    pub fn transition_log_pdf(&self, y: f64, prev: f64) -> f64 {
        gaussian_log_pdf(y, self.theta * prev, self.noise_sd)
    }

    pub fn stationary_log_pdf(&self, y: f64) -> Option<f64> {
        self.stationary_variance()
            .map(|v| gaussian_log_pdf(y, 0.0, v.sqrt()))
    }
}

/// Values of a regression function at the design points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFunction {
    values_at_design: Vec<f64>,
    design_points: Vec<f64>,
}

impl RegressionFunction {
    pub fn new(values_at_design: Vec<f64>, design_points: Vec<f64>) -> Result<Self> {
        if values_at_design.is_empty() {
            return Err(ModelError::InvalidParameter("empty design".into()));
        }
        if values_at_design.len() != design_points.len() {
            return Err(ModelError::InvalidParameter(format!(
                "{} values for {} design points",
                values_at_design.len(),
                design_points.len()
            )));
        }
        Ok(Self {
            values_at_design,
            design_points,
        })
    }

    pub fn len(&self) -> usize {
        self.values_at_design.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_at_design.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values_at_design
    }

    pub fn design_points(&self) -> &[f64] {
        &self.design_points
    }

    /// `theta(x_i)` for the 1-based observation index `i`.
    pub fn value(&self, index: usize) -> Result<f64> {
        if index == 0 || index > self.len() {
            return Err(ModelError::IndexOutOfDesign {
                index,
                len: self.len(),
            });
        }
        Ok(self.values_at_design[index - 1])
    }
}

/// Equally spaced design `x_i = i/n`, `i = 1..=n`.
pub fn uniform_design(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

/// `theta(x) = intercept + slope * x + amplitude * sin(2 pi x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionCurve {
    pub intercept: f64,
    pub slope: f64,
    pub amplitude: f64,
}

impl RegressionCurve {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept
            + self.slope * x
            + self.amplitude * (2.0 * std::f64::consts::PI * x).sin()
    }

    pub fn materialize(&self, n: usize) -> Result<RegressionFunction> {
        let design = uniform_design(n);
        let values = design.iter().map(|x| self.eval(*x)).collect();
        RegressionFunction::new(values, design)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyKind {
    IidDensity,
    RegressionFunction,
    MarkovParam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Density(GridDensity),
    Regression(RegressionFunction),
    Markov(MarkovParam),
}

/// Where an observation sits: its 1-based index and, for Markov data, the
/// previous state (`None` for the initial draw from the stationary law).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Context {
    pub index: usize,
    pub prev: Option<f64>,
}

impl Context {
    pub fn at(index: usize) -> Self {
        Self { index, prev: None }
    }

    pub fn after(index: usize, prev: f64) -> Self {
        Self {
            index,
            prev: Some(prev),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub context: Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    pub id: usize,
    pub payload: Payload,
}

impl FamilyMember {
    pub fn density(id: usize, density: GridDensity) -> Self {
        Self {
            id,
            payload: Payload::Density(density),
        }
    }

    pub fn regression(id: usize, function: RegressionFunction) -> Self {
        Self {
            id,
            payload: Payload::Regression(function),
        }
    }

    pub fn markov(id: usize, param: MarkovParam) -> Self {
        Self {
            id,
            payload: Payload::Markov(param),
        }
    }

    pub fn kind(&self) -> FamilyKind {
        match self.payload {
            Payload::Density(_) => FamilyKind::IidDensity,
            Payload::Regression(_) => FamilyKind::RegressionFunction,
            Payload::Markov(_) => FamilyKind::MarkovParam,
        }
    }

    pub fn as_density(&self) -> Option<&GridDensity> {
        match &self.payload {
            Payload::Density(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_markov(&self) -> Option<&MarkovParam> {
        match &self.payload {
            Payload::Markov(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_regression(&self) -> Option<&RegressionFunction> {
        match &self.payload {
            Payload::Regression(r) => Some(r),
            _ => None,
        }
    }

    /// Log-density of `y` given the context.
    pub fn log_likelihood(&self, y: f64, ctx: &Context) -> Result<f64> {
        match &self.payload {
            Payload::Density(d) => d.log_value_at(y).ok_or(ModelError::OutsideGrid(y)),
            Payload::Regression(r) => Ok(gaussian_log_pdf(y, r.value(ctx.index)?, 1.0)),
            Payload::Markov(p) => match ctx.prev {
                Some(prev) => Ok(p.transition_log_pdf(y, prev)),
                None => p
                    .stationary_log_pdf(y)
                    .ok_or(ModelError::NoStationaryDensity(p.theta.abs())),
            },
        }
    }

    pub fn likelihood(&self, y: f64, ctx: &Context) -> Result<f64> {
        self.log_likelihood(y, ctx).map(f64::exp)
    }

    /// Normalized log-density of the next observation at the nodes of
    /// `grid`, read in coordinates `z = y - shift`.
    ///
    /// Iid members ignore the context and require their own grid with zero
    /// shift.
    pub fn conditional_log_values(&self, ctx: &Context, grid: &Grid, shift: f64) -> Result<Vec<f64>> {
        let gaussian = |mean: f64, sd: f64| -> Vec<f64> {
            grid.nodes()
                .map(|z| gaussian_log_pdf(z, mean - shift, sd))
                .collect()
        };
        match &self.payload {
            Payload::Density(d) => {
                if d.grid() != grid {
                    return Err(DivergenceError::IncompatibleGrids.into());
                }
                if shift != 0.0 {
                    return Err(ModelError::WrongContext(
                        FamilyKind::IidDensity,
                        "iid densities cannot be shifted",
                    ));
                }
                Ok(d.log_values().to_vec())
            }
            Payload::Regression(r) => Ok(gaussian(r.value(ctx.index)?, 1.0)),
            Payload::Markov(p) => match ctx.prev {
                Some(prev) => Ok(gaussian(p.theta * prev, p.noise_sd)),
                None => {
                    let var = p
                        .stationary_variance()
                        .ok_or(ModelError::NoStationaryDensity(p.theta.abs()))?;
                    Ok(gaussian(0.0, var.sqrt()))
                }
            },
        }
    }

    /// The next-observation density as a [`GridDensity`]; see
    /// [`FamilyMember::conditional_log_values`].
    pub fn conditional_density(&self, ctx: &Context, grid: &Grid, shift: f64) -> Result<GridDensity> {
        if let Payload::Density(d) = &self.payload {
            self.conditional_log_values(ctx, grid, shift)?;
            return Ok(d.clone());
        }
        Ok(GridDensity::from_log_values(
            *grid,
            self.conditional_log_values(ctx, grid, shift)?,
        )?)
    }
}

/// A finite mixture of family members, borrowed from a prior.
#[derive(Debug, Clone)]
pub struct Mixture<'a> {
    members: Vec<&'a FamilyMember>,
    weights: Vec<f64>,
}

impl<'a> Mixture<'a> {
    /// Zero-weight members are dropped; the rest are normalized.
    pub fn new(members: Vec<&'a FamilyMember>, weights: Vec<f64>) -> Result<Self> {
        if members.len() != weights.len() {
            return Err(ModelError::InvalidWeights(format!(
                "{} members but {} weights",
                members.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ModelError::InvalidWeights(
                "mixture weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(ModelError::InvalidWeights("mixture weights sum to zero".into()));
        }
        let (members, weights) = members
            .into_iter()
            .zip(weights)
            .filter(|(_, w)| *w > 0.0)
            .map(|(m, w)| (m, w / total))
            .unzip();
        Ok(Self { members, weights })
    }

    pub fn members(&self) -> &[&'a FamilyMember] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_density_at(&self, y: f64, ctx: &Context) -> Result<f64> {
        let terms = self
            .members
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| m.log_likelihood(y, ctx).map(|l| l + w.ln()))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&terms))
    }

    pub fn conditional_density(&self, ctx: &Context, grid: &Grid, shift: f64) -> Result<GridDensity> {
        if self.members.len() == 1 {
            return self.members[0].conditional_density(ctx, grid, shift);
        }
        let densities: Option<Vec<&GridDensity>> = self.members.iter().map(|m| m.as_density()).collect();
        if let Some(densities) = densities {
            if densities.iter().any(|d| d.grid() != grid) {
                return Err(DivergenceError::IncompatibleGrids.into());
            }
            if shift != 0.0 {
                return Err(ModelError::WrongContext(
                    FamilyKind::IidDensity,
                    "iid densities cannot be shifted",
                ));
            }
            return Ok(GridDensity::mixture(&densities, &self.weights)?);
        }
        let per_member = self
            .members
            .iter()
            .map(|m| m.conditional_log_values(ctx, grid, shift))
            .collect::<Result<Vec<_>>>()?;
        let log_weights: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let mut terms = vec![0.0; per_member.len()];
        let logs = (0..grid.points())
            .map(|k| {
                for (t, (lv, lw)) in terms.iter_mut().zip(per_member.iter().zip(&log_weights)) {
                    *t = lv[k] + lw;
                }
                log_sum_exp(&terms)
            })
            .collect();
        Ok(GridDensity::from_log_values(*grid, logs)?)
    }
}

/// A finite-support prior over family members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicPrior {
    family: Vec<FamilyMember>,
    weights: Vec<f64>,
}

impl AtomicPrior {
    /// Weights must be positive; they are normalized to sum to one.
    pub fn new(family: Vec<FamilyMember>, weights: Vec<f64>) -> Result<Self> {
        validate_family(&family)?;
        if family.len() != weights.len() {
            return Err(ModelError::InvalidWeights(format!(
                "{} members but {} weights",
                family.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(ModelError::InvalidWeights(format!(
                "weights must be positive and finite, found {w}"
            )));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { family, weights })
    }

    pub fn uniform(family: Vec<FamilyMember>) -> Result<Self> {
        let n = family.len();
        Self::new(family, vec![1.0; n])
    }

    pub fn family(&self) -> &[FamilyMember] {
        &self.family
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.family.len()
    }

    pub fn is_empty(&self) -> bool {
        self.family.is_empty()
    }

    pub fn kind(&self) -> FamilyKind {
        self.family[0].kind()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.family.iter().position(|m| m.id == id)
    }

    pub fn member(&self, id: usize) -> Option<&FamilyMember> {
        self.family.iter().find(|m| m.id == id)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.family.iter().map(|m| m.id).collect()
    }

    /// Prior mass of the atoms with the given ids (unknown ids contribute 0).
    pub fn mass_of(&self, ids: &[usize]) -> f64 {
        self.family
            .iter()
            .zip(&self.weights)
            .filter(|(m, _)| ids.contains(&m.id))
            .map(|(_, w)| w)
            .sum()
    }

    /// Mixture with the prior weights.
    pub fn as_mixture(&self) -> Mixture<'_> {
        Mixture {
            members: self.family.iter().collect(),
            weights: self.weights.clone(),
        }
    }
}

fn validate_family(family: &[FamilyMember]) -> Result<()> {
    let first = family.first().ok_or(ModelError::EmptyFamily)?;
    let kind = first.kind();
    let mut ids = std::collections::BTreeSet::new();
    for m in family {
        if m.kind() != kind {
            return Err(ModelError::MixedKinds(kind, m.kind()));
        }
        if !ids.insert(m.id) {
            return Err(ModelError::DuplicateId(m.id));
        }
        match (&first.payload, &m.payload) {
            (Payload::Density(a), Payload::Density(b)) if a.grid() != b.grid() => {
                return Err(ModelError::InconsistentMembers("grid"));
            }
            (Payload::Regression(a), Payload::Regression(b))
                if a.design_points() != b.design_points() =>
            {
                return Err(ModelError::InconsistentMembers("design points"));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Number of standard deviations a location-family mean must keep from the
/// grid edges.
pub const CLIP_SDS: f64 = 6.0;

/// `N(mean, sd²)` members with ids `0..means.len()`.
pub fn build_gaussian_location_family(grid: Grid, means: &[f64], sd: f64) -> Result<Vec<FamilyMember>> {
    if means.is_empty() {
        return Err(ModelError::EmptyFamily);
    }
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(ModelError::InvalidParameter(format!("sd must be positive, got {sd}")));
    }
    means
        .iter()
        .enumerate()
        .map(|(id, &mean)| {
            if mean - CLIP_SDS * sd < grid.lower() || mean + CLIP_SDS * sd > grid.upper() {
                return Err(ModelError::GridClipsDensity {
                    mean,
                    sds: CLIP_SDS,
                });
            }
            Ok(FamilyMember::density(id, GridDensity::gaussian(grid, mean, sd)?))
        })
        .collect()
}

/// Index and value of `min_j K(f*, f_j)`; ties go to the smallest index.
pub fn kl_projection(f_star: &GridDensity, family: &[FamilyMember]) -> Result<(usize, f64)> {
    if family.is_empty() {
        return Err(ModelError::EmptyFamily);
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, m) in family.iter().enumerate() {
        let d = m.as_density().ok_or(ModelError::WrongContext(
            m.kind(),
            "KL projection needs iid densities",
        ))?;
        let k = divergences::kl(f_star, d)?;
        if best.is_none_or(|(_, b)| k < b) {
            best = Some((j, k));
        }
    }
    Ok(best.expect("nonempty family"))
}

/// Continuous KL projection over `N(m, sd²)`, `m ∈ [lo, hi]`: a scan at
/// step 1e-2 followed by golden-section refinement to 1e-6. Returns
/// `(m°, K_min)`.
pub fn kl_projection_continuous(
    f_star: &GridDensity,
    lo: f64,
    hi: f64,
    sd: f64,
) -> Result<(f64, f64)> {
    if !(lo <= hi) {
        return Err(ModelError::InvalidParameter(format!("empty range [{lo}, {hi}]")));
    }
    let grid = *f_star.grid();
    let objective = |m: f64| -> Result<f64> {
        Ok(divergences::kl(f_star, &GridDensity::gaussian(grid, m, sd)?)?)
    };
    const SCAN_STEP: f64 = 1e-2;
    const TOLERANCE: f64 = 1e-6;
    let steps = ((hi - lo) / SCAN_STEP).ceil() as usize;
    let mut best = (lo, objective(lo)?);
    for s in 1..=steps {
        let m = (lo + s as f64 * SCAN_STEP).min(hi);
        let k = objective(m)?;
        if k < best.1 {
            best = (m, k);
        }
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = ((best.0 - SCAN_STEP).max(lo), (best.0 + SCAN_STEP).min(hi));
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c)?, objective(d)?);
    while b - a > TOLERANCE {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d)?;
        }
    }
    let m = 0.5 * (a + b);
    let k = objective(m)?;
    Ok(if k <= best.1 { (m, k) } else { best })
}

/// `N(0, noise_sd² / (1 - theta²))` on the grid.
pub fn stationary_density(param: &MarkovParam, grid: Grid) -> Result<GridDensity> {
    Ok(divergences::stationary_grid_density(param, grid)?)
}

/// A prior whose family excludes the sampling density, with the KL
/// projection located.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecifiedSetup {
    pub prior: AtomicPrior,
    pub true_density: GridDensity,
    pub projection_index: usize,
    pub projection_id: usize,
    pub k_min: f64,
}

impl MisspecifiedSetup {
    pub fn new(prior: AtomicPrior, true_density: GridDensity) -> Result<Self> {
        let (projection_index, k_min) = kl_projection(&true_density, prior.family())?;
        let projection_id = prior.family()[projection_index].id;
        Ok(Self {
            prior,
            true_density,
            projection_index,
            projection_id,
            k_min,
        })
    }

    pub fn projection(&self) -> &GridDensity {
        self.prior.family()[self.projection_index]
            .as_density()
            .expect("projection of an iid family")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(-10.0, 10.0, 2001).unwrap()
    }

    #[test]
    fn location_family_normalizes_and_clips() {
        let means: Vec<f64> = (0..21).map(|k| -2.0 + 0.2 * k as f64).collect();
        let fam = build_gaussian_location_family(grid(), &means, 1.0).unwrap();
        assert_eq!(fam.len(), 21);
        for m in &fam {
            assert!((m.as_density().unwrap().integral() - 1.0).abs() < 1e-8);
        }
        let err = build_gaussian_location_family(grid(), &[5.0], 1.0).unwrap_err();
        assert!(err.to_string().contains("grid clips density"));
        let pair = build_gaussian_location_family(grid(), &[0.0, 1.0], 1.0).unwrap();
        let h = divergences::hellinger(pair[0].as_density().unwrap(), pair[1].as_density().unwrap())
            .unwrap();
        assert!((h - 0.48478).abs() < 1e-5);
    }

    #[test]
    fn projection_picks_nearest_mean() {
        let star = GridDensity::gaussian(grid(), 0.0, 1.0).unwrap();
        let fam = build_gaussian_location_family(grid(), &[0.5, 1.0, 1.5], 1.0).unwrap();
        let (idx, k) = kl_projection(&star, &fam).unwrap();
        assert_eq!(idx, 0);
        assert!((k - 0.125).abs() < 1e-4);
        assert_eq!(kl_projection(&star, &[]), Err(ModelError::EmptyFamily));
    }

    #[test]
    fn projection_ties_go_to_smallest_index() {
        let star = GridDensity::gaussian(grid(), 0.0, 1.0).unwrap();
        let fam = build_gaussian_location_family(grid(), &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(kl_projection(&star, &fam).unwrap().0, 0);
    }

    #[test]
    fn continuous_projection_refines() {
        let star = GridDensity::gaussian(grid(), 0.3137, 1.0).unwrap();
        let (m, k) = kl_projection_continuous(&star, -1.0, 1.0, 1.0).unwrap();
        assert!((m - 0.3137).abs() < 1e-5, "{m}");
        assert!(k < 1e-9);
    }

    #[test]
    fn likelihood_contracts() {
        let p0 = FamilyMember::markov(0, MarkovParam::new(0.0).unwrap());
        let y: f64 = 0.7;
        let std_normal = (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((p0.likelihood(y, &Context::at(0)).unwrap() - std_normal).abs() < 1e-15);

        let reg = FamilyMember::regression(
            1,
            RegressionFunction::new(vec![0.1, 0.4], uniform_design(2)).unwrap(),
        );
        let mode = reg.likelihood(0.4, &Context::at(2)).unwrap();
        assert!((mode - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!(matches!(
            reg.likelihood(0.4, &Context::at(3)),
            Err(ModelError::IndexOutOfDesign { .. })
        ));

        let d = GridDensity::gaussian(grid(), 0.0, 1.0).unwrap();
        let iid = FamilyMember::density(2, d.clone());
        for k in [0, 400, 1000, 2000] {
            let x = grid().node(k);
            assert_eq!(iid.likelihood(x, &Context::default()).unwrap(), d.values()[k]);
        }
        assert_eq!(
            iid.likelihood(10.5, &Context::default()),
            Err(ModelError::OutsideGrid(10.5))
        );
    }

    #[test]
    fn stationary_density_is_a_fixed_point() {
        let g = Grid::new(-12.0, 12.0, 1201).unwrap();
        let p = MarkovParam::new(0.6).unwrap();
        let u = stationary_density(&p, g).unwrap();
        assert!((u.variance() - 1.5625).abs() < 1e-3);
        let std_normal = stationary_density(&MarkovParam::new(0.0).unwrap(), g).unwrap();
        assert!((std_normal.variance() - 1.0).abs() < 1e-9);
        // one transition step by quadrature
        let next: Vec<f64> = g
            .nodes()
            .map(|y2| {
                let integrand: Vec<f64> = g
                    .nodes()
                    .zip(u.values())
                    .map(|(y1, w)| w * p.transition_log_pdf(y2, y1).exp())
                    .collect();
                g.integrate(&integrand)
            })
            .collect();
        let max_err = next
            .iter()
            .zip(u.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-4, "{max_err}");
        assert!(matches!(
            MarkovParam::new(1.0),
            Err(ModelError::NoStationaryDensity(_))
        ));
    }

    #[test]
    fn priors_validate_and_normalize() {
        let fam = build_gaussian_location_family(grid(), &[0.0, 1.0, 2.0], 1.0).unwrap();
        let prior = AtomicPrior::new(fam.clone(), vec![1.0, 2.0, 7.0]).unwrap();
        assert!((prior.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((prior.mass_of(&[1, 2]) - 0.9).abs() < 1e-12);
        assert!(AtomicPrior::new(fam.clone(), vec![1.0, 0.0, 1.0]).is_err());
        let mut dup = fam.clone();
        dup[2].id = 0;
        assert_eq!(AtomicPrior::uniform(dup), Err(ModelError::DuplicateId(0)));
        let mut mixed = fam;
        mixed.push(FamilyMember::markov(9, MarkovParam::new(0.1).unwrap()));
        assert!(matches!(
            AtomicPrior::uniform(mixed),
            Err(ModelError::MixedKinds(..))
        ));
    }

    #[test]
    fn mixture_density_matches_pointwise_average() {
        let fam = build_gaussian_location_family(grid(), &[0.0, 1.0], 1.0).unwrap();
        let prior = AtomicPrior::uniform(fam).unwrap();
        let mix = prior
            .as_mixture()
            .conditional_density(&Context::default(), &grid(), 0.0)
            .unwrap();
        let a = prior.family()[0].as_density().unwrap();
        let b = prior.family()[1].as_density().unwrap();
        for k in (0..2001).step_by(97) {
            let avg = 0.5 * (a.values()[k] + b.values()[k]);
            assert!((mix.values()[k] - avg).abs() <= 1e-12 * avg.max(1e-300));
        }
    }

    #[test]
    fn misspecified_setup_locates_projection() {
        let star = GridDensity::gaussian(grid(), 0.0, 1.0).unwrap();
        let fam = build_gaussian_location_family(grid(), &[1.5, 0.5, 1.0], 1.0).unwrap();
        let setup = MisspecifiedSetup::new(AtomicPrior::uniform(fam).unwrap(), star).unwrap();
        assert_eq!(setup.projection_index, 1);
        for m in setup.prior.family() {
            let kc = divergences::kl_contrast(
                setup.projection(),
                m.as_density().unwrap(),
                &setup.true_density,
            )
            .unwrap();
            assert!(kc >= -1e-9);
        }
    }
}
