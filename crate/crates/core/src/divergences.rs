//! Densities on a uniform quadrature grid and the divergence functionals
//! between them.
//!
//! A [`Grid`] discretizes the dominating measure; integrals are trapezoidal
//! sums over its nodes. A [`GridDensity`] stores values and their logs,
//! floored at [`POSITIVITY_FLOOR`] and renormalized so the trapezoidal mass
//! is one.
//!
//! Conventions for the three-argument functionals: `f_circ` is the reference
//! (KL-projection) density, `f` the candidate, `f_star` the sampling density.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::MarkovParam;

/// Smallest density value admitted before taking logs.
pub const POSITIVITY_FLOOR: f64 = 1e-300;

/// `ln(POSITIVITY_FLOOR)`.
pub const LOG_POSITIVITY_FLOOR: f64 = -690.775_527_898_213_7;

/// Negative KL values at or above this are rounding and clamp to zero.
const NEGATIVE_TOLERANCE: f64 = -1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DivergenceError {
    #[error("incompatible grids")]
    IncompatibleGrids,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("sequence length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty sequence")]
    Empty,
    #[error("no stationary density: |theta| = {0} is not below 1")]
    NoStationaryDensity(f64),
    #[error("invalid state window {0}: must be positive")]
    InvalidWindow(f64),
    #[error("density text parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, DivergenceError>;

/// Uniform grid on `[lower, upper]` with `points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: f64,
    upper: f64,
    points: usize,
}

impl Grid {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(DivergenceError::InvalidGrid(format!(
                "need finite lower < upper, got [{lower}, {upper}]"
            )));
        }
        if points < 3 {
            return Err(DivergenceError::InvalidGrid(format!(
                "need at least 3 points, got {points}"
            )));
        }
        Ok(Self {
            lower,
            upper,
            points,
        })
    }

    /// Default grid for unit-scale Gaussian work.
    pub fn standard() -> Self {
        Self {
            lower: -12.0,
            upper: 12.0,
            points: 4001,
        }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k + 1 == self.points {
            self.upper
        } else {
            self.lower + k as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.points).map(move |k| self.node(k))
    }

    /// Trapezoid weight of node `k`.
    pub fn weight(&self, k: usize) -> f64 {
        let h = self.spacing();
        if k == 0 || k + 1 == self.points {
            0.5 * h
        } else {
            h
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    /// Cell index `k` and fraction `t` such that `x = node(k) + t * spacing`.
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !self.contains(x) {
            return None;
        }
        let pos = (x - self.lower) / self.spacing();
        let k = (pos.floor() as usize).min(self.points - 2);
        Some((k, (pos - k as f64).clamp(0.0, 1.0)))
    }

    /// Trapezoidal integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.points);
        let interior: f64 = values[1..self.points - 1].iter().sum();
        self.spacing() * (interior + 0.5 * (values[0] + values[self.points - 1]))
    }

    /// Same interval at twice the resolution (every old node is kept).
    pub fn refined(&self) -> Self {
        Self {
            points: 2 * (self.points - 1) + 1,
            ..*self
        }
    }
}

/// A probability density sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    grid: Grid,
    values: Vec<f64>,
    log_values: Vec<f64>,
    floored: bool,
    raw_mass: f64,
}

impl GridDensity {
    /// Builds a density from a (possibly unnormalized) log-density.
    pub fn from_log_fn(grid: Grid, log_density: impl Fn(f64) -> f64) -> Result<Self> {
        let logs: Vec<f64> = grid.nodes().map(log_density).collect();
        Self::from_log_values(grid, logs)
    }

    /// Builds a density from a (possibly unnormalized) density function.
    pub fn from_fn(grid: Grid, density: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = grid.nodes().map(density).collect();
        Self::from_values(grid, values)
    }

    pub fn gaussian(grid: Grid, mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(DivergenceError::InvalidDensity(format!(
                "gaussian needs finite mean and positive sd, got ({mean}, {sd})"
            )));
        }
        Self::from_log_fn(grid, |x| gaussian_log_pdf(x, mean, sd))
    }

    pub fn from_log_values(grid: Grid, mut logs: Vec<f64>) -> Result<Self> {
        if logs.len() != grid.points() {
            return Err(DivergenceError::LengthMismatch(logs.len(), grid.points()));
        }
        if logs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(DivergenceError::InvalidDensity(
                "log-density must not be NaN or +inf".into(),
            ));
        }
        let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(DivergenceError::InvalidDensity(
                "density is zero everywhere on the grid".into(),
            ));
        }
        let shifted: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
        let log_mass = grid.integrate(&shifted).ln() + peak;
        for l in logs.iter_mut() {
            *l -= log_mass;
        }
        Ok(Self::assemble(grid, logs, log_mass.exp()))
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.points() {
            return Err(DivergenceError::LengthMismatch(values.len(), grid.points()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(DivergenceError::InvalidDensity(format!(
                "density values must be finite and nonnegative, found {v}"
            )));
        }
        let mass = grid.integrate(&values);
        if !(mass > 0.0) {
            return Err(DivergenceError::InvalidDensity(
                "density has zero mass on the grid".into(),
            ));
        }
        let log_mass = mass.ln();
        let logs = values
            .iter()
            .map(|v| if *v > 0.0 { v.ln() - log_mass } else { f64::NEG_INFINITY })
            .collect();
        Ok(Self::assemble(grid, logs, mass))
    }

    fn assemble(grid: Grid, normalized_logs: Vec<f64>, raw_mass: f64) -> Self {
        let mut floored = false;
        let mut values = Vec::with_capacity(normalized_logs.len());
        let mut log_values = Vec::with_capacity(normalized_logs.len());
        for l in normalized_logs {
            if l < LOG_POSITIVITY_FLOOR {
                floored = true;
                values.push(POSITIVITY_FLOOR);
                log_values.push(LOG_POSITIVITY_FLOOR);
            } else {
                values.push(l.exp());
                log_values.push(l);
            }
        }
        Self {
            grid,
            values,
            log_values,
            floored,
            raw_mass,
        }
    }

    /// Pointwise mixture `sum_j w_j f_j`; weights are normalized first.
    pub fn mixture(components: &[&GridDensity], weights: &[f64]) -> Result<Self> {
        if components.is_empty() {
            return Err(DivergenceError::Empty);
        }
        if components.len() != weights.len() {
            return Err(DivergenceError::LengthMismatch(components.len(), weights.len()));
        }
        let grid = components[0].grid;
        if components.iter().any(|c| c.grid != grid) {
            return Err(DivergenceError::IncompatibleGrids);
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return Err(DivergenceError::InvalidDensity(
                "mixture weights must be nonnegative with positive sum".into(),
            ));
        }
        let mut values = vec![0.0; grid.points()];
        for (c, w) in components.iter().zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let w = w / total;
            for (acc, v) in values.iter_mut().zip(&c.values) {
                *acc += w * v;
            }
        }
        Self::from_values(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    /// True when any node sits at the positivity floor.
    pub fn is_floored(&self) -> bool {
        self.floored
    }

    /// Trapezoidal mass of the input before renormalization.
    pub fn raw_mass(&self) -> f64 {
        self.raw_mass
    }

    /// Log-density at `x`, linearly interpolating the log between nodes.
    pub fn log_value_at(&self, x: f64) -> Option<f64> {
        let (k, t) = self.grid.locate(x)?;
        if t == 0.0 {
            return Some(self.log_values[k]);
        }
        Some((1.0 - t) * self.log_values[k] + t * self.log_values[k + 1])
    }

    pub fn value_at(&self, x: f64) -> Option<f64> {
        self.log_value_at(x).map(f64::exp)
    }

    pub fn integral(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn mean(&self) -> f64 {
        let xv: Vec<f64> = self
            .grid
            .nodes()
            .zip(&self.values)
            .map(|(x, v)| x * v)
            .collect();
        self.grid.integrate(&xv)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let sq: Vec<f64> = self
            .grid
            .nodes()
            .zip(&self.values)
            .map(|(x, v)| (x - m).powi(2) * v)
            .collect();
        self.grid.integrate(&sq)
    }

    /// Plain-text dump: one header line, then one value per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# grid {:e} {:e} {}\n",
            self.grid.lower, self.grid.upper, self.grid.points
        );
        for v in &self.values {
            out.push_str(&format!("{v:.16e}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| DivergenceError::Parse("missing header line".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "#" || fields[1] != "grid" {
            return Err(DivergenceError::Parse(format!("bad header: {header:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| DivergenceError::Parse(format!("{s:?}: {e}")))
        };
        let points = fields[4]
            .parse::<usize>()
            .map_err(|e| DivergenceError::Parse(format!("{:?}: {e}", fields[4])))?;
        let grid = Grid::new(num(fields[2])?, num(fields[3])?, points)?;
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| num(l.trim()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(grid, values)
    }
}

pub fn gaussian_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// A divergence value together with its tail-truncation quality flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    /// Set when either density hit the positivity floor somewhere.
    pub tail_truncated: bool,
}

fn same_grid(a: &GridDensity, b: &GridDensity) -> Result<Grid> {
    if a.grid != b.grid {
        return Err(DivergenceError::IncompatibleGrids);
    }
    Ok(a.grid)
}

fn weighted_sum(grid: &Grid, term: impl Fn(usize) -> f64) -> f64 {
    let n = grid.points();
    let mut interior = 0.0;
    for k in 1..n - 1 {
        interior += term(k);
    }
    grid.spacing() * (interior + 0.5 * (term(0) + term(n - 1)))
}

fn clamp_nonnegative(x: f64) -> f64 {
    if (NEGATIVE_TOLERANCE..0.0).contains(&x) {
        0.0
    } else {
        x
    }
}

/// `K(f, g) = ∫ log(f/g) f`, with the quality flag.
pub fn kl_measured(f: &GridDensity, g: &GridDensity) -> Result<Measured> {
    let grid = same_grid(f, g)?;
    let value = weighted_sum(&grid, |k| f.values[k] * (f.log_values[k] - g.log_values[k]));
    Ok(Measured {
        value: clamp_nonnegative(value),
        tail_truncated: f.floored || g.floored,
    })
}

/// Kullback–Leibler divergence of `g` from `f`; `f` is the weighting density.
pub fn kl(f: &GridDensity, g: &GridDensity) -> Result<f64> {
    kl_measured(f, g).map(|m| m.value)
}

/// `V(f, g) = ∫ {log(f/g)}² f` (uncentered), with the quality flag.
pub fn v_divergence_measured(f: &GridDensity, g: &GridDensity) -> Result<Measured> {
    let grid = same_grid(f, g)?;
    let value = weighted_sum(&grid, |k| {
        let d = f.log_values[k] - g.log_values[k];
        f.values[k] * d * d
    });
    Ok(Measured {
        value: value.max(0.0),
        tail_truncated: f.floored || g.floored,
    })
}

pub fn v_divergence(f: &GridDensity, g: &GridDensity) -> Result<f64> {
    v_divergence_measured(f, g).map(|m| m.value)
}

/// Hellinger distance, clamped to `[0, √2]`.
pub fn hellinger(f: &GridDensity, g: &GridDensity) -> Result<f64> {
    let grid = same_grid(f, g)?;
    let sq = weighted_sum(&grid, |k| {
        let d = f.values[k].sqrt() - g.values[k].sqrt();
        d * d
    });
    Ok(sq.max(0.0).sqrt().min(std::f64::consts::SQRT_2))
}

/// Affinity gap `h = 1 - ∫ √(fg)`, which equals `H²/2` for normalized inputs.
pub fn h_affinity_gap(f: &GridDensity, g: &GridDensity) -> Result<f64> {
    let grid = same_grid(f, g)?;
    let affinity = weighted_sum(&grid, |k| {
        (0.5 * (f.log_values[k] + g.log_values[k])).exp()
    });
    Ok((1.0 - affinity).clamp(0.0, 1.0))
}

/// KL contrast `K*(f°, f) = ∫ log(f°/f) f*`, computed directly.
pub fn kl_contrast(f_circ: &GridDensity, f: &GridDensity, f_star: &GridDensity) -> Result<f64> {
    let grid = same_grid(f_circ, f)?;
    same_grid(f_circ, f_star)?;
    Ok(weighted_sum(&grid, |k| {
        f_star.values[k] * (f_circ.log_values[k] - f.log_values[k])
    }))
}

/// `V*(f°, f) = ∫ {log(f°/f)}² f*`.
pub fn v_star(f_circ: &GridDensity, f: &GridDensity, f_star: &GridDensity) -> Result<f64> {
    let grid = same_grid(f_circ, f)?;
    same_grid(f_circ, f_star)?;
    Ok(weighted_sum(&grid, |k| {
        let d = f_circ.log_values[k] - f.log_values[k];
        f_star.values[k] * d * d
    })
    .max(0.0))
}

/// Weighted Hellinger distance `H*(f°, f)`, weights `f*/f°`.
pub fn weighted_hellinger(
    f_circ: &GridDensity,
    f: &GridDensity,
    f_star: &GridDensity,
) -> Result<f64> {
    let grid = same_grid(f_circ, f)?;
    same_grid(f_circ, f_star)?;
    let sq = weighted_sum(&grid, |k| {
        let d = f.values[k].sqrt() - f_circ.values[k].sqrt();
        d * d * (f_star.log_values[k] - f_circ.log_values[k]).exp()
    });
    Ok(sq.max(0.0).sqrt())
}

/// `h*(f°, f) = 1 - ∫ (f/f°)^{1/2} f*`.
pub fn h_star(f_circ: &GridDensity, f: &GridDensity, f_star: &GridDensity) -> Result<f64> {
    let grid = same_grid(f_circ, f)?;
    same_grid(f_circ, f_star)?;
    let affinity = weighted_sum(&grid, |k| {
        (0.5 * (f.log_values[k] - f_circ.log_values[k]) + f_star.log_values[k]).exp()
    });
    Ok(1.0 - affinity)
}

/// `(∫ (√a - √b)² f*/f°)^{1/2}`: the root-density distance under which
/// `H*(f°, ·)` is the distance to `f°`. Satisfies the triangle inequality.
pub fn weighted_root_distance(
    a: &GridDensity,
    b: &GridDensity,
    f_circ: &GridDensity,
    f_star: &GridDensity,
) -> Result<f64> {
    let grid = same_grid(a, b)?;
    same_grid(a, f_circ)?;
    same_grid(a, f_star)?;
    let sq = weighted_sum(&grid, |k| {
        let d = a.values[k].sqrt() - b.values[k].sqrt();
        d * d * (f_star.log_values[k] - f_circ.log_values[k]).exp()
    });
    Ok(sq.max(0.0).sqrt())
}

/// `∫ (f/f°) f*`; at most one whenever `f°` is the KL projection onto a
/// convex family containing `f`.
pub fn likelihood_ratio_mass(
    f_circ: &GridDensity,
    f: &GridDensity,
    f_star: &GridDensity,
) -> Result<f64> {
    let grid = same_grid(f_circ, f)?;
    same_grid(f_circ, f_star)?;
    Ok(weighted_sum(&grid, |k| {
        (f.log_values[k] - f_circ.log_values[k] + f_star.log_values[k]).exp()
    }))
}

fn check_probability_vectors(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(DivergenceError::LengthMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(DivergenceError::Empty);
    }
    if p.iter().chain(q).any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(DivergenceError::InvalidDensity(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

/// KL divergence between probability vectors on a common finite support.
pub fn kl_atomic(p: &[f64], q: &[f64]) -> Result<f64> {
    check_probability_vectors(p, q)?;
    let value: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(POSITIVITY_FLOOR).ln()))
        .sum();
    Ok(clamp_nonnegative(value))
}

/// Uncentered second log-ratio moment between probability vectors.
pub fn v_atomic(p: &[f64], q: &[f64]) -> Result<f64> {
    check_probability_vectors(p, q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(POSITIVITY_FLOOR).ln()).powi(2))
        .sum())
}

fn paired_squared_hellinger(seq_a: &[GridDensity], seq_b: &[GridDensity]) -> Result<Vec<f64>> {
    if seq_a.len() != seq_b.len() {
        return Err(DivergenceError::LengthMismatch(seq_a.len(), seq_b.len()));
    }
    if seq_a.is_empty() {
        return Err(DivergenceError::Empty);
    }
    seq_a
        .iter()
        .zip(seq_b)
        .map(|(a, b)| hellinger(a, b).map(|h| h * h))
        .collect()
}

/// Root-mean-square of per-index Hellinger distances.
pub fn mean_hellinger(seq_a: &[GridDensity], seq_b: &[GridDensity]) -> Result<f64> {
    let sq = paired_squared_hellinger(seq_a, seq_b)?;
    Ok((sq.iter().sum::<f64>() / sq.len() as f64).sqrt())
}

/// Maximum of per-index Hellinger distances.
pub fn max_hellinger(seq_a: &[GridDensity], seq_b: &[GridDensity]) -> Result<f64> {
    let sq = paired_squared_hellinger(seq_a, seq_b)?;
    Ok(sq.iter().copied().fold(0.0, f64::max).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightingKind {
    StationaryDensity,
    ExplicitDensity,
    TwoPointMixture,
}

/// The state-space measure `Q` (or `u_{θ*}`) as a density on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateWeighting {
    pub kind: WeightingKind,
    pub density: GridDensity,
}

impl StateWeighting {
    pub fn stationary(param: &MarkovParam, grid: Grid) -> Result<Self> {
        Ok(Self {
            kind: WeightingKind::StationaryDensity,
            density: stationary_grid_density(param, grid)?,
        })
    }

    pub fn explicit(density: GridDensity) -> Self {
        Self {
            kind: WeightingKind::ExplicitDensity,
            density,
        }
    }

    /// Equal-weight mixture of `N(locations.0, sd²)` and `N(locations.1, sd²)`.
    pub fn two_point_mixture(grid: Grid, locations: (f64, f64), sd: f64) -> Result<Self> {
        let a = GridDensity::gaussian(grid, locations.0, sd)?;
        let b = GridDensity::gaussian(grid, locations.1, sd)?;
        Ok(Self {
            kind: WeightingKind::TwoPointMixture,
            density: GridDensity::mixture(&[&a, &b], &[0.5, 0.5])?,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.density.grid()
    }
}

pub(crate) fn stationary_grid_density(param: &MarkovParam, grid: Grid) -> Result<GridDensity> {
    let var = param
        .stationary_variance()
        .ok_or(DivergenceError::NoStationaryDensity(param.theta.abs()))?;
    GridDensity::gaussian(grid, 0.0, var.sqrt())
}

/// Stationary-averaged and state-wise divergences between two AR(1) kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovDivergences {
    /// `∫ K_y u_{θ*}(y) dy`.
    pub k: f64,
    /// `∫ V_y u_{θ*}(y) dy`.
    pub v: f64,
    /// `∫ H_y Q(dy)`.
    pub h_q: f64,
    /// `sup_{|y| <= window} H_y`.
    pub h_inf_truncated: f64,
}

/// Per-state transition divergences at previous state `y`. Densities live on
/// `grid` in innovation coordinates `y' - θ*·y`, which leaves every
/// divergence unchanged.
pub fn transition_divergences(
    theta_star: &MarkovParam,
    theta: &MarkovParam,
    y: f64,
    grid: Grid,
) -> Result<(f64, f64, f64)> {
    let truth = GridDensity::gaussian(grid, 0.0, theta_star.noise_sd)?;
    let other = GridDensity::gaussian(grid, (theta.theta - theta_star.theta) * y, theta.noise_sd)?;
    Ok((kl(&truth, &other)?, v_divergence(&truth, &other)?, hellinger(&truth, &other)?))
}

/// Markov divergences by nested quadrature. The outer integrals use the
/// weighting grid as the state grid; transition densities use the same grid
/// in innovation coordinates.
pub fn markov_divergences(
    theta_star: &MarkovParam,
    theta: &MarkovParam,
    weighting: &StateWeighting,
    state_window: f64,
) -> Result<MarkovDivergences> {
    if !(state_window > 0.0) {
        return Err(DivergenceError::InvalidWindow(state_window));
    }
    for p in [theta_star, theta] {
        if p.stationary_variance().is_none() {
            return Err(DivergenceError::NoStationaryDensity(p.theta.abs()));
        }
    }
    let grid = *weighting.grid();
    let stationary = stationary_grid_density(theta_star, grid)?;
    let n = grid.points();
    let mut k_y = Vec::with_capacity(n);
    let mut v_y = Vec::with_capacity(n);
    let mut h_y = Vec::with_capacity(n);
    let mut sup: f64 = 0.0;
    for y in grid.nodes() {
        let (k, v, h) = transition_divergences(theta_star, theta, y, grid)?;
        k_y.push(k);
        v_y.push(v);
        h_y.push(h);
        if y.abs() <= state_window {
            sup = sup.max(h);
        }
    }
    for y in [-state_window, state_window] {
        sup = sup.max(transition_divergences(theta_star, theta, y, grid)?.2);
    }
    let weighted = |per_state: &[f64], w: &GridDensity| -> f64 {
        let prod: Vec<f64> = per_state.iter().zip(w.values()).map(|(a, b)| a * b).collect();
        grid.integrate(&prod)
    };
    Ok(MarkovDivergences {
        k: weighted(&k_y, &stationary),
        v: weighted(&v_y, &stationary),
        h_q: weighted(&h_y, &weighting.density),
        h_inf_truncated: sup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_pair() -> (GridDensity, GridDensity) {
        let g = Grid::new(-10.0, 10.0, 4001).unwrap();
        (
            GridDensity::gaussian(g, 0.0, 1.0).unwrap(),
            GridDensity::gaussian(g, 1.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn grid_rejects_degenerate_inputs() {
        assert!(Grid::new(1.0, 1.0, 10).is_err());
        assert!(Grid::new(0.0, 1.0, 2).is_err());
        let g = Grid::new(-3.0, 5.0, 9).unwrap();
        assert_eq!(g.spacing() * 8.0, 8.0);
        assert_eq!(g.node(8), 5.0);
    }

    #[test]
    fn construction_normalizes() {
        let g = Grid::new(-4.0, 4.0, 81).unwrap();
        let d = GridDensity::from_fn(g, |x| 3.0 * (-x * x).exp()).unwrap();
        assert!((d.integral() - 1.0).abs() < 1e-12);
        assert!(GridDensity::from_values(g, vec![0.0; 81]).is_err());
        assert!(GridDensity::from_values(g, vec![-1.0; 81]).is_err());
    }

    #[test]
    fn kl_identity_and_gaussian_closed_form() {
        let (f, g) = std_pair();
        assert_eq!(kl(&f, &f).unwrap(), 0.0);
        assert!((kl(&f, &g).unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn two_point_hand_computation() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let k = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let v = 0.5 * 2f64.ln().powi(2) + 0.5 * (2.0f64 / 3.0).ln().powi(2);
        assert!((kl_atomic(&p, &q).unwrap() - k).abs() < 1e-15);
        assert!((kl_atomic(&p, &q).unwrap() - 0.1438).abs() < 1e-4);
        assert!((v_atomic(&p, &q).unwrap() - v).abs() < 1e-15);
        assert!((v_atomic(&p, &q).unwrap() - 0.3224).abs() < 1e-4);
        assert_eq!(kl_atomic(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn incompatible_grids_are_rejected() {
        let a = GridDensity::gaussian(Grid::new(-5.0, 5.0, 101).unwrap(), 0.0, 1.0).unwrap();
        let b = GridDensity::gaussian(Grid::new(-5.0, 5.0, 103).unwrap(), 0.0, 1.0).unwrap();
        assert_eq!(kl(&a, &b), Err(DivergenceError::IncompatibleGrids));
        assert_eq!(hellinger(&a, &b), Err(DivergenceError::IncompatibleGrids));
    }

    #[test]
    fn hellinger_of_unit_gaussians() {
        let (f, g) = std_pair();
        let expected = (2.0 * (1.0 - (-1.0f64 / 8.0).exp())).sqrt();
        assert!((hellinger(&f, &g).unwrap() - expected).abs() < 1e-5);
        assert!((expected - 0.48478).abs() < 1e-5);
        assert!((h_affinity_gap(&f, &g).unwrap() - (1.0 - (-0.125f64).exp())).abs() < 1e-5);
        assert_eq!(hellinger(&f, &f).unwrap(), 0.0);
        assert!(h_affinity_gap(&f, &f).unwrap() < 1e-12);
    }

    #[test]
    fn disjoint_supports_reach_sqrt_two() {
        let g = Grid::new(-60.0, 60.0, 2401).unwrap();
        let a = GridDensity::gaussian(g, -40.0, 0.5).unwrap();
        let b = GridDensity::gaussian(g, 40.0, 0.5).unwrap();
        assert!((hellinger(&a, &b).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-6);
        // far tails underflow past the floor and get flagged
        assert!(kl_measured(&a, &b).unwrap().tail_truncated);
    }

    #[test]
    fn starred_functionals_vanish_at_reference() {
        let (f, g) = std_pair();
        assert_eq!(kl_contrast(&g, &g, &f).unwrap(), 0.0);
        assert_eq!(v_star(&g, &g, &f).unwrap(), 0.0);
        assert_eq!(weighted_hellinger(&g, &g, &f).unwrap(), 0.0);
        assert!(h_star(&g, &g, &f).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_contrast_gaussian_family() {
        let grid = Grid::standard();
        let star = GridDensity::gaussian(grid, 0.0, 1.0).unwrap();
        let circ = GridDensity::gaussian(grid, 0.5, 1.0).unwrap();
        let far = GridDensity::gaussian(grid, 1.5, 1.0).unwrap();
        let got = kl_contrast(&circ, &far, &star).unwrap();
        assert!((got - 1.0).abs() < 1e-4, "{got}");
    }

    #[test]
    fn sequence_functionals_validate_lengths() {
        let (f, g) = std_pair();
        assert_eq!(
            mean_hellinger(std::slice::from_ref(&f), &[]),
            Err(DivergenceError::LengthMismatch(1, 0))
        );
        assert_eq!(mean_hellinger(&[], &[]), Err(DivergenceError::Empty));
        let h = hellinger(&f, &g).unwrap();
        let m = mean_hellinger(&[f.clone(), f.clone()], &[g.clone(), g.clone()]).unwrap();
        assert!((m - h).abs() < 1e-12);
        let mx = max_hellinger(&[f.clone(), f.clone()], &[f.clone(), g.clone()]).unwrap();
        assert!((mx - h).abs() < 1e-12);
    }

    #[test]
    fn text_dump_roundtrips() {
        let g = Grid::new(-5.0, 5.0, 51).unwrap();
        let d = GridDensity::gaussian(g, 0.3, 1.2).unwrap();
        let back = GridDensity::from_text(&d.to_text()).unwrap();
        assert_eq!(back.grid(), d.grid());
        for (a, b) in back.values().iter().zip(d.values()) {
            assert!((a - b).abs() <= 1e-15 * a.max(1e-300));
        }
        assert!(GridDensity::from_text("nonsense").is_err());
    }

    #[test]
    fn log_interpolation_hits_nodes_exactly() {
        let g = Grid::new(-5.0, 5.0, 101).unwrap();
        let d = GridDensity::gaussian(g, 0.0, 1.0).unwrap();
        for k in [0, 17, 50, 100] {
            assert_eq!(d.log_value_at(g.node(k)).unwrap(), d.log_values()[k]);
        }
        assert!(d.value_at(5.5).is_none());
    }

    #[test]
    fn markov_divergences_reject_bad_inputs() {
        let grid = Grid::new(-12.0, 12.0, 241).unwrap();
        let star = MarkovParam::new(0.5).unwrap();
        let w = StateWeighting::stationary(&star, grid).unwrap();
        let bad = MarkovParam {
            theta: 1.2,
            noise_sd: 1.0,
        };
        assert!(matches!(
            markov_divergences(&star, &bad, &w, 5.0),
            Err(DivergenceError::NoStationaryDensity(_))
        ));
        assert!(matches!(
            markov_divergences(&star, &star, &w, 0.0),
            Err(DivergenceError::InvalidWindow(_))
        ));
    }
}
