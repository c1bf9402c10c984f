//! TOML run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use postrate::divergences::Grid;
use postrate::experiments::{
    BallPick, EvidenceExpectation, ExperimentPlan, FamilySpec, GaussianComponent, MarkovSettings,
    PassRules, SubsetRecipe, TruthSpec, WeightingSpec,
};
use postrate::geometry::{ConditionParams, RateSchedule, RegimeKind};
use postrate::models::{MarkovParam, RegressionCurve};
use serde::Deserialize;

/// Known verification names, grouped by the subcommand that runs them.
pub const CHECKS: [&str; 6] = [
    "factorization",
    "conditional-identity",
    "inequalities",
    "thickness",
    "separation",
    "cover",
];
pub const SIMULATIONS: [&str; 4] = ["cesaro", "numerator-bound", "evidence-bound", "posterior-mass"];
pub const SIEVE: [&str; 1] = ["sieve"];

pub fn is_known(name: &str) -> bool {
    CHECKS.contains(&name) || SIMULATIONS.contains(&name) || SIEVE.contains(&name)
}

/// One configuration problem, with the 1-based line it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    pub path: PathBuf,
    pub issues: Vec<ConfigIssue>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.path.display())?;
        for issue in &self.issues {
            write!(f, "\n  {issue}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    plan: RawPlan,
    grid: Option<RawGrid>,
    family: RawFamily,
    prior: Option<RawPrior>,
    truth: RawTruth,
    schedule: RawSchedule,
    params: RawParams,
    subset: Option<RawSubset>,
    markov: Option<RawMarkov>,
    rules: Option<RawRules>,
    sieve: Option<RawSieve>,
    checks: Option<RawChecks>,
    output: Option<RawOutput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    name: String,
    regime: RegimeKind,
    replications: usize,
    seed: u64,
    #[serde(default)]
    jobs: usize,
    verify: Vec<String>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    lower: f64,
    upper: f64,
    points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawFamily {
    GaussianLocation { means: Vec<f64>, sd: f64 },
    RegressionCurves { curves: Vec<RegressionCurve> },
    Markov {
        thetas: Vec<f64>,
        #[serde(default = "one")]
        noise_sd: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    weights: Option<Vec<f64>>,
    /// Atoms of the small-prior-mass set tracked by `posterior-mass`.
    #[serde(default)]
    small_mass_ids: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawTruth {
    Gaussian { mean: f64, sd: f64 },
    GaussianMixture { components: Vec<GaussianComponent> },
    Curve { intercept: f64, slope: f64, amplitude: f64 },
    Markov {
        theta: f64,
        #[serde(default = "one")]
        noise_sd: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    n: Vec<usize>,
    a: f64,
    #[serde(default = "third")]
    gamma: f64,
    #[serde(default)]
    kappa: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    c: f64,
    d: f64,
    r: f64,
    beta: f64,
    #[serde(rename = "M")]
    m: f64,
    eta: f64,
    #[serde(rename = "C")]
    thickness_c: Option<f64>,
    #[serde(default)]
    allow_small_c: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSubset {
    atoms: Option<Vec<usize>>,
    ball: Option<BallPickName>,
    #[serde(default = "twenty")]
    closure_draws: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BallPickName {
    Nearest,
    Heaviest,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WeightingName {
    Stationary,
    TwoPoint,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMarkov {
    weighting: WeightingName,
    locations: Option<[f64; 2]>,
    sd: Option<f64>,
    state_grid: RawGrid,
    state_window: Option<f64>,
    #[serde(default = "forty_one")]
    window_points: usize,
    #[serde(default = "one")]
    theta0_bound: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EvidenceName {
    Vanish,
    Persist,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRules {
    cesaro_slope: Option<[f64; 2]>,
    evidence: Option<EvidenceName>,
    evidence_cap: Option<f64>,
    evidence_floor: Option<f64>,
    mass_cap: Option<f64>,
    projection_floor: Option<f64>,
    constant_cap: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSieve {
    radius_fraction: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChecks {
    factorization_cases: Option<usize>,
    identity_cases: Option<usize>,
    separation_cases: Option<usize>,
    inequality_cases: Option<usize>,
    identity_tolerance: Option<f64>,
    factorization_tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    verbosity: Option<u8>,
}

fn one() -> f64 {
    1.0
}

fn third() -> f64 {
    1.0 / 3.0
}

fn twenty() -> usize {
    20
}

fn forty_one() -> usize {
    41
}

/// Case counts and tolerances for the static checks.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    pub factorization_cases: usize,
    pub identity_cases: usize,
    pub separation_cases: usize,
    pub inequality_cases: usize,
    pub factorization_tolerance: f64,
    pub identity_tolerance: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            factorization_cases: 20,
            identity_cases: 100,
            separation_cases: 50,
            inequality_cases: 500,
            factorization_tolerance: 1e-9,
            identity_tolerance: 1e-9,
        }
    }
}

/// A fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: PathBuf,
    pub plan: ExperimentPlan,
    pub verify: Vec<String>,
    pub checks: CheckSettings,
    pub out_dir: PathBuf,
    pub verbosity: u8,
}

/// Every `[section]` header with its line; repeated headers are reported
/// with both locations (the TOML parser names only one of them).
fn duplicate_sections(text: &str) -> Vec<ConfigIssue> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut issues = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let t = line.trim();
        if !(t.starts_with('[') && !t.starts_with("[[")) {
            continue;
        }
        let Some(end) = t.find(']') else { continue };
        let name = t[1..end].trim().to_string();
        if let Some(first) = seen.get(&name) {
            issues.push(ConfigIssue {
                line: Some(k + 1),
                message: format!("duplicate section [{name}] (first defined on line {first})"),
            });
        } else {
            seen.insert(name, k + 1);
        }
    }
    issues
}

/// Line of `key = ...` inside `[section]`, or of the section header.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (k, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                header = Some(k + 1);
            }
            continue;
        }
        if current == section {
            if let Some((lhs, _)) = t.split_once('=') {
                if lhs.trim() == key {
                    return Some(k + 1);
                }
            }
        }
    }
    header
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let fail = |issues: Vec<ConfigIssue>| ConfigError {
        path: path.to_path_buf(),
        issues,
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        fail(vec![ConfigIssue {
            line: None,
            message: format!("cannot read config: {e}"),
        }])
    })?;
    parse_config_str(&text).map_err(fail)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, Vec<ConfigIssue>> {
    let dups = duplicate_sections(text);
    if !dups.is_empty() {
        return Err(dups);
    }
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        vec![ConfigIssue {
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        }]
    })?;
    build(raw, text)
}

fn build(raw: RawConfig, text: &str) -> Result<RunConfig, Vec<ConfigIssue>> {
    let mut issues = Vec::new();
    let mut issue = |section: &str, key: &str, message: String| {
        issues.push(ConfigIssue {
            line: locate(text, section, key),
            message,
        })
    };

    for name in &raw.plan.verify {
        if !is_known(name) {
            issue("plan", "verify", format!("unknown verification \"{name}\""));
        }
    }

    let grid = match raw.grid {
        Some(g) => Grid::new(g.lower, g.upper, g.points).map_err(|e| issue("grid", "points", e.to_string())).ok(),
        None => Some(Grid::standard()),
    };

    let family = match raw.family {
        RawFamily::GaussianLocation { means, sd } => FamilySpec::GaussianLocation { means, sd },
        RawFamily::RegressionCurves { curves } => FamilySpec::RegressionCurves(curves),
        RawFamily::Markov { thetas, noise_sd } => FamilySpec::MarkovThetas { thetas, noise_sd },
    };
    let truth = match raw.truth {
        RawTruth::Gaussian { mean, sd } => TruthSpec::GaussianMixture(vec![GaussianComponent {
            weight: 1.0,
            mean,
            sd,
        }]),
        RawTruth::GaussianMixture { components } => TruthSpec::GaussianMixture(components),
        RawTruth::Curve {
            intercept,
            slope,
            amplitude,
        } => TruthSpec::Curve(RegressionCurve {
            intercept,
            slope,
            amplitude,
        }),
        RawTruth::Markov { theta, noise_sd } => match MarkovParam::with_noise(theta, noise_sd) {
            Ok(p) => TruthSpec::Markov(p),
            Err(e) => {
                issue("truth", "theta", e.to_string());
                TruthSpec::Markov(MarkovParam::new(0.0).expect("zero is stationary"))
            }
        },
    };

    let schedule = RateSchedule::new(raw.schedule.n, raw.schedule.a, raw.schedule.gamma, raw.schedule.kappa)
        .map_err(|e| issue("schedule", "n", e.to_string()))
        .ok();

    let p = &raw.params;
    let params = ConditionParams {
        thickness_c: p.thickness_c,
        c: p.c,
        d: p.d,
        r: p.r,
        beta: p.beta,
        m: p.m,
        eta: p.eta,
    };
    if let Err(e) = params.validate() {
        let key = if e.to_string().contains("beta") { "beta" } else { "c" };
        issue("params", key, e.to_string());
    }
    if let Some(cc) = p.thickness_c {
        if !p.allow_small_c {
            if p.c <= cc + 1.0 {
                issue(
                    "params",
                    "c",
                    format!("c = {} must exceed C + 1 = {} (set allow_small_c = true to override)", p.c, cc + 1.0),
                );
            }
            if p.d <= cc + 1.0 {
                issue(
                    "params",
                    "d",
                    format!("d = {} must exceed C + 1 = {} (set allow_small_c = true to override)", p.d, cc + 1.0),
                );
            }
        }
    }

    let (subset, closure_draws) = match raw.subset {
        Some(s) => {
            let recipe = match (s.atoms, s.ball) {
                (Some(a), None) => Some(SubsetRecipe::Atoms(a)),
                (None, Some(b)) => Some(SubsetRecipe::CoveringBall(match b {
                    BallPickName::Nearest => BallPick::Nearest,
                    BallPickName::Heaviest => BallPick::Heaviest,
                })),
                (None, None) => {
                    issue("subset", "atoms", "subset needs `atoms` or `ball`".into());
                    None
                }
                (Some(_), Some(_)) => {
                    issue("subset", "ball", "subset takes `atoms` or `ball`, not both".into());
                    None
                }
            };
            (recipe, s.closure_draws)
        }
        None => (None, twenty()),
    };

    let markov = match raw.markov {
        Some(m) => {
            let weighting = match (m.weighting, m.locations, m.sd) {
                (WeightingName::Stationary, None, None) => Some(WeightingSpec::Stationary),
                (WeightingName::TwoPoint, Some([a, b]), Some(sd)) => Some(WeightingSpec::TwoPoint {
                    locations: (a, b),
                    sd,
                }),
                (WeightingName::Stationary, _, _) => {
                    issue("markov", "weighting", "stationary weighting takes no locations or sd".into());
                    None
                }
                (WeightingName::TwoPoint, _, _) => {
                    issue("markov", "weighting", "two_point weighting needs locations and sd".into());
                    None
                }
            };
            let state_grid = Grid::new(m.state_grid.lower, m.state_grid.upper, m.state_grid.points)
                .map_err(|e| issue("markov", "state_grid", e.to_string()))
                .ok();
            match (weighting, state_grid) {
                (Some(weighting), Some(state_grid)) => Some(MarkovSettings {
                    weighting,
                    state_grid,
                    state_window: m.state_window,
                    window_points: m.window_points,
                    theta0_bound: m.theta0_bound,
                }),
                _ => None,
            }
        }
        None => None,
    };

    let defaults = PassRules::default();
    let rules = match raw.rules {
        Some(r) => PassRules {
            cesaro_slope: r.cesaro_slope.map(|[lo, hi]| (lo, hi)),
            evidence: match r.evidence.unwrap_or(EvidenceName::Vanish) {
                EvidenceName::Vanish => EvidenceExpectation::Vanish {
                    cap: r.evidence_cap.unwrap_or(0.05),
                },
                EvidenceName::Persist => EvidenceExpectation::Persist {
                    floor: r.evidence_floor.unwrap_or(0.9),
                },
            },
            mass_cap: r.mass_cap.unwrap_or(defaults.mass_cap),
            projection_floor: r.projection_floor,
            constant_cap: r.constant_cap.unwrap_or(defaults.constant_cap),
        },
        None => defaults,
    };

    let mut checks = CheckSettings::default();
    if let Some(c) = raw.checks {
        checks.factorization_cases = c.factorization_cases.unwrap_or(checks.factorization_cases);
        checks.identity_cases = c.identity_cases.unwrap_or(checks.identity_cases);
        checks.separation_cases = c.separation_cases.unwrap_or(checks.separation_cases);
        checks.inequality_cases = c.inequality_cases.unwrap_or(checks.inequality_cases);
        checks.identity_tolerance = c.identity_tolerance.unwrap_or(checks.identity_tolerance);
        checks.factorization_tolerance = c.factorization_tolerance.unwrap_or(checks.factorization_tolerance);
    }

    let (Some(grid), Some(schedule)) = (grid, schedule) else {
        return Err(issues);
    };
    let plan = ExperimentPlan {
        name: raw.plan.name,
        regime: raw.plan.regime,
        grid,
        family,
        prior_weights: raw.prior.as_ref().and_then(|p| p.weights.clone()),
        truth,
        schedule,
        params,
        replications: raw.plan.replications,
        seed: raw.plan.seed,
        jobs: raw.plan.jobs,
        subset,
        closure_draws,
        markov,
        small_mass_ids: raw.prior.map(|p| p.small_mass_ids).unwrap_or_default(),
        sieve_radius_fraction: raw.sieve.map_or(0.5, |s| s.radius_fraction),
        rules,
    };
    if let Err(e) = plan.validate() {
        issue("plan", "regime", e.to_string());
    }
    if !issues.is_empty() {
        return Err(issues);
    }
    let output = raw.output.unwrap_or(RawOutput {
        dir: None,
        verbosity: None,
    });
    Ok(RunConfig {
        source: PathBuf::new(),
        plan,
        verify: raw.plan.verify,
        checks,
        out_dir: output.dir.unwrap_or_else(|| PathBuf::from("out")),
        verbosity: output.verbosity.unwrap_or(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[plan]
name = "minimal"
regime = "iid"
replications = 1
seed = 1
verify = ["factorization"]

[grid]
lower = -8.0
upper = 8.0
points = 201

[family]
kind = "gaussian_location"
means = [0.0, 1.0]
sd = 1.0

[truth]
kind = "gaussian"
mean = 0.0
sd = 1.0

[schedule]
n = [10, 20]
a = 1.0

[params]
c = 3.0
d = 3.0
r = 1.0
beta = 2.0
M = 4.0
eta = 0.1
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.plan.regime, RegimeKind::Iid);
        assert_eq!(cfg.verify, vec!["factorization"]);
        assert_eq!(cfg.plan.family.len(), 2);
    }

    #[test]
    fn beta_one_names_condition_p() {
        let text = MINIMAL.replace("beta = 2.0", "beta = 1.0");
        let issues = parse_config_str(&text).unwrap_err();
        assert!(issues[0].message.contains("beta > 1"), "{issues:?}");
        assert_eq!(issues[0].line, locate(&text, "params", "beta"));
    }

    #[test]
    fn duplicate_section_cites_both_lines() {
        let text = format!("{MINIMAL}\n[grid]\nlower = 0.0\n");
        let issues = parse_config_str(&text).unwrap_err();
        let msg = issues[0].to_string();
        assert!(msg.contains("duplicate section [grid]"), "{msg}");
        assert!(msg.contains("line 9"), "{msg}");
    }

    #[test]
    fn unknown_key_has_a_line() {
        let text = MINIMAL.replace("eta = 0.1", "eta = 0.1\nzeta = 2.0");
        let issues = parse_config_str(&text).unwrap_err();
        assert!(issues[0].message.contains("zeta"), "{issues:?}");
        assert_eq!(issues[0].line, Some(locate(&text, "params", "zeta").unwrap()));
    }

    #[test]
    fn declared_thickness_needs_margin() {
        let text = MINIMAL.replace("eta = 0.1", "eta = 0.1\nC = 2.5");
        let issues = parse_config_str(&text).unwrap_err();
        assert!(issues.iter().any(|i| i.message.contains("must exceed C + 1")));
        let overridden = text.replace("C = 2.5", "C = 2.5\nallow_small_c = true");
        assert!(parse_config_str(&overridden).is_ok());
    }

    #[test]
    fn unknown_verification_is_rejected() {
        let text = MINIMAL.replace("[\"factorization\"]", "[\"factorisation\"]");
        let issues = parse_config_str(&text).unwrap_err();
        assert!(issues[0].message.contains("unknown verification"));
    }
}
