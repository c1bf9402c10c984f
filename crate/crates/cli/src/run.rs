//! Dispatch of verifications and emission of their tables.

use std::path::{Path, PathBuf};
use std::time::Instant;

use postrate::experiments::{
    self, ExperimentError, ExperimentPlan, MonteCarlo, Selection, Verdict,
};
use postrate::geometry::RegimeKind;
use thiserror::Error;

use crate::config::{self, ConfigError, ConfigIssue, RunConfig};
use crate::report::{col, num, opt, CriterionResult, Failure, Summary, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Identities, inequalities and geometry certifications.
    Check,
    /// Monte Carlo verifications.
    Simulate,
    /// Covering and sieve construction report.
    Sieve,
    /// Aggregate the summaries in an output directory.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Simulate => "simulate",
            Command::Sieve => "sieve",
            Command::Report => "report",
        }
    }

    fn verifications(&self) -> &'static [&'static str] {
        match self {
            Command::Check => &config::CHECKS,
            Command::Simulate => &config::SIMULATIONS,
            Command::Sieve => &config::SIEVE,
            Command::Report => &[],
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("runtime error: {0}")]
    Runtime(#[from] ExperimentError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 3,
            _ => 4,
        }
    }
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 2;

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub verify: Option<Vec<String>>,
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> Result<(), ConfigError> {
    if let Some(seed) = o.seed {
        cfg.plan.seed = seed;
    }
    if let Some(jobs) = o.jobs {
        cfg.plan.jobs = jobs;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if let Some(v) = &o.verify {
        let unknown: Vec<ConfigIssue> = v
            .iter()
            .filter(|n| !config::is_known(n))
            .map(|n| ConfigIssue {
                line: None,
                message: format!("--verify: unknown verification \"{n}\""),
            })
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigError {
                path: cfg.source.clone(),
                issues: unknown,
            });
        }
        cfg.verify = v.clone();
    }
    Ok(())
}

/// Verifications of `cfg` that `command` runs, in canonical order.
pub fn selected(cfg: &RunConfig, command: Command) -> Vec<&'static str> {
    command
        .verifications()
        .iter()
        .copied()
        .filter(|n| cfg.verify.iter().any(|v| v == n))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Emitter<'a> {
    cfg: &'a RunConfig,
    criteria: Vec<CriterionResult>,
}

impl Emitter<'_> {
    fn plan(&self) -> &ExperimentPlan {
        &self.cfg.plan
    }

    fn table(&self, file: &str, table: &Table) -> Result<String, RunError> {
        let path = self.cfg.out_dir.join(file);
        table
            .write(&path, &self.plan().name, self.plan().seed)
            .map_err(io_err(&path))?;
        Ok(file.to_string())
    }

    fn push(&mut self, name: &str, verdict: Verdict, values: Vec<(&str, f64)>, csv: Option<String>, started: Instant) {
        if self.cfg.verbosity > 0 {
            eprintln!(
                "{} {name} ({:.2} s): {}",
                if verdict.pass { "PASS" } else { "FAIL" },
                started.elapsed().as_secs_f64(),
                verdict.detail
            );
        }
        self.criteria.push(CriterionResult {
            name: name.to_string(),
            pass: verdict.pass,
            detail: verdict.detail,
            values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            csv,
        });
    }
}

fn verdict(pass: bool, ok: &str, fail: String) -> Verdict {
    Verdict {
        pass,
        detail: if pass { ok.to_string() } else { fail },
    }
}

fn run_check(em: &mut Emitter<'_>, name: &str) -> Result<(), RunError> {
    let started = Instant::now();
    let plan = em.plan().clone();
    let checks = em.cfg.checks.clone();
    match name {
        "factorization" => {
            let cases = experiments::factorization_cases(&plan, checks.factorization_cases)?;
            let mut t = Table::new(
                "factorization identity",
                "log int prod_i f(Y_i) dPi = sum_i log fhat_{i-1}(Y_i)",
                vec![
                    col("case", "index"),
                    col("n", "observations"),
                    col("log_joint_direct", "nats"),
                    col("log_joint_factored", "nats"),
                    col("abs_diff", "nats"),
                ],
            );
            let mut worst: f64 = 0.0;
            for (k, (n, r)) in cases.iter().enumerate() {
                worst = worst.max(r.abs_diff);
                t.push(vec![
                    k.to_string(),
                    n.to_string(),
                    num(r.log_joint_direct),
                    num(r.log_joint_factored),
                    num(r.abs_diff),
                ]);
            }
            let csv = em.table("factorization.csv", &t)?;
            let tol = checks.factorization_tolerance;
            let v = verdict(
                worst < tol,
                "direct and factored log joints agree",
                format!("max |direct - factored| = {worst:.3e} >= {tol:e}"),
            );
            em.push(name, v, vec![("max_abs_diff", worst)], Some(csv), started);
        }
        "conditional-identity" => {
            let cases = experiments::conditional_identity_cases(&plan, checks.identity_cases)?;
            let mut t = Table::new(
                "conditional square-root ratio identity",
                "E[(fhat^A_{i-1}(Y_i)/ref(Y_i))^{1/2} | past] = 1 - h(ref, fhat^A_{i-1})",
                vec![
                    col("case", "index"),
                    col("step", "observation index"),
                    col("subset_size", "atoms"),
                    col("lhs", "dimensionless"),
                    col("rhs", "dimensionless"),
                    col("abs_diff", "dimensionless"),
                ],
            );
            let mut worst: f64 = 0.0;
            for (k, c) in cases.iter().enumerate() {
                worst = worst.max(c.record.abs_diff);
                t.push(vec![
                    k.to_string(),
                    c.step.to_string(),
                    c.subset_ids.len().to_string(),
                    num(c.record.lhs),
                    num(c.record.rhs),
                    num(c.record.abs_diff),
                ]);
            }
            let csv = em.table("conditional_identity.csv", &t)?;
            let tol = checks.identity_tolerance;
            let v = verdict(
                worst < tol,
                "both sides agree",
                format!("max |lhs - rhs| = {worst:.3e} >= {tol:e}"),
            );
            em.push(name, v, vec![("max_abs_diff", worst)], Some(csv), started);
        }
        "inequalities" => {
            let r = experiments::inequality_suite(plan.grid, checks.inequality_cases, plan.seed, 1e-9)?;
            let mut t = Table::new(
                "divergence inequality violations",
                "H triangle; h <= K; H*^2/2 <= h*; starred = unstarred at f° = f*; H_inf^2 >= H_n^2",
                vec![
                    col("cases", "count"),
                    col("triangle", "violations"),
                    col("h_below_k", "violations"),
                    col("starred_hellinger", "violations"),
                    col("uncertified_ratio_mass", "count"),
                    col("reduction", "violations"),
                    col("sup_above_mean", "violations"),
                    col("worst_excess", "dimensionless"),
                ],
            );
            t.push(vec![
                r.cases.to_string(),
                r.triangle.to_string(),
                r.h_below_k.to_string(),
                r.starred_hellinger.to_string(),
                r.uncertified_ratio_mass.to_string(),
                r.reduction.to_string(),
                r.sup_above_mean.to_string(),
                num(r.worst_excess),
            ]);
            let csv = em.table("inequalities.csv", &t)?;
            let v = verdict(
                r.violations() == 0,
                "no violations beyond 1e-9",
                format!("{} violations (worst excess {:.3e})", r.violations(), r.worst_excess),
            );
            em.push(name, v, vec![("worst_excess", r.worst_excess)], Some(csv), started);
        }
        "thickness" => {
            let rows = experiments::thickness_report(&plan)?;
            let mut t = Table::new(
                "prior thickness",
                "Pi(K <= eps_n^2, V <= eps_n^2) >= exp(-C n eps_n^2)",
                vec![
                    col("n", "observations"),
                    col("epsilon", "distance"),
                    col("neighborhood_mass", "probability"),
                    col("implied_c", "dimensionless"),
                ],
            );
            for r in &rows {
                t.push(vec![r.n.to_string(), num(r.epsilon), num(r.neighborhood_mass), num(r.implied_c)]);
            }
            let csv = em.table("thickness.csv", &t)?;
            let mut atoms = Table::new(
                "atom divergences at the largest n",
                "K, V and gap against the reference; distances in the regime's ball metric",
                vec![
                    col("id", "atom"),
                    col("weight", "probability"),
                    col("k", "nats"),
                    col("v", "nats^2"),
                    col("in_theta0", "bool"),
                    col("gap", "dimensionless"),
                    col("separation_distance", "distance"),
                    col("reference_distance", "distance"),
                    col("ratio_mass", "dimensionless"),
                ],
            );
            for a in experiments::atom_report(&plan)? {
                atoms.push(vec![
                    a.id.to_string(),
                    num(a.weight),
                    num(a.k),
                    num(a.v),
                    a.in_theta0.to_string(),
                    num(a.gap),
                    num(a.separation_distance),
                    num(a.reference_distance),
                    opt(a.ratio_mass),
                ]);
            }
            em.table("atoms.csv", &atoms)?;
            let fitted = rows.iter().map(|r| r.implied_c).fold(0.0, f64::max);
            let v = verdict(
                fitted.is_finite(),
                "neighborhoods have positive mass at every n",
                "an empty Kullback-Leibler neighborhood".into(),
            );
            em.push(name, v, vec![("fitted_c", fitted)], Some(csv), started);
        }
        "separation" => {
            let cases = experiments::separation_cases(&plan, checks.separation_cases)?;
            let mut t = Table::new(
                "separation of balls around separated centers",
                "distance(ref, f0) > r => ball(f0, r/2) is (r^2/8)-separated",
                vec![
                    col("case", "index"),
                    col("center_id", "atom"),
                    col("center_distance", "distance"),
                    col("r", "distance"),
                    col("members", "atoms"),
                    col("delta", "dimensionless"),
                    col("min_member_gap", "dimensionless"),
                    col("ball_gap_bound", "dimensionless"),
                    col("certified", "bool"),
                ],
            );
            let mut failed = Vec::new();
            for (k, c) in cases.iter().enumerate() {
                if let Some(f) = &c.certification.failure {
                    failed.push(format!("case {k}: {f}"));
                }
                t.push(vec![
                    k.to_string(),
                    c.center_id.to_string(),
                    num(c.center_distance),
                    num(c.r),
                    c.ball.member_ids.len().to_string(),
                    num(c.r * c.r / 8.0),
                    num(c.certification.separation.min_gap),
                    num(c.certification.ball_bound),
                    c.certification.certified.to_string(),
                ]);
            }
            let csv = em.table("separation.csv", &t)?;
            let v = verdict(failed.is_empty(), "every ball certified", failed.join("; "));
            em.push(name, v, vec![], Some(csv), started);
        }
        "cover" => {
            let r = experiments::cover_report(&plan)?;
            let mut t = Table::new(
                "covering of the target set",
                "B_n = {distance > M eps_n} covered by balls of radius M eps_n/2, each (M^2 eps_n^2/8)-separated",
                vec![
                    col("n", "observations"),
                    col("epsilon", "distance"),
                    col("radius", "distance"),
                    col("target_count", "atoms"),
                    col("ball_count", "balls"),
                    col("entropy_r", "dimensionless"),
                    col("thickness_c", "dimensionless"),
                    col("certified_balls", "balls"),
                ],
            );
            for row in &r.rows {
                t.push(vec![
                    row.n.to_string(),
                    num(row.epsilon),
                    num(row.radius),
                    row.target_count.to_string(),
                    row.ball_count.to_string(),
                    num(row.entropy_r),
                    num(row.thickness_c),
                    row.certified_balls.to_string(),
                ]);
            }
            let csv = em.table("cover.csv", &t)?;
            em.push(
                name,
                r.verdict,
                vec![
                    ("fitted_c", r.fitted_c),
                    ("fitted_r", r.fitted_r),
                    ("admissible_m", r.admissible_m),
                ],
                Some(csv),
                started,
            );
        }
        other => return Err(RunError::Other(format!("{other} is not a check"))),
    }
    Ok(())
}

fn run_sieve(em: &mut Emitter<'_>) -> Result<(), RunError> {
    let started = Instant::now();
    let plan = em.plan().clone();
    let (rows, v) = experiments::sieve_report(&plan)?;
    let mut t = Table::new(
        "sieve from a covering",
        "J_n = min{J: (beta-1) ln J >= beta ln S_n + r n eps_n^2}; sieve = union of the J_n heaviest balls",
        vec![
            col("n", "observations"),
            col("epsilon", "distance"),
            col("radius", "distance"),
            col("balls", "count"),
            col("j_n", "balls"),
            col("s_n", "dimensionless"),
            col("complement_mass", "probability"),
            col("log_cover_count", "nats"),
            col("log_cover_bound", "nats"),
            col("tail_ball_mass", "probability"),
            col("tail_bound", "probability"),
            col("complement_constant", "dimensionless"),
        ],
    );
    for s in &rows {
        t.push(vec![
            s.n.to_string(),
            num(s.epsilon),
            num(plan.sieve_radius_fraction * s.epsilon),
            s.balls.len().to_string(),
            s.j_n.to_string(),
            num(s.s_n),
            num(s.complement_mass),
            num(s.log_cover_count),
            num(s.log_cover_bound),
            num(s.tail_ball_mass),
            num(s.tail_bound),
            num(s.complement_constant),
        ]);
    }
    let csv = em.table("sieve.csv", &t)?;
    let max_s = rows.iter().map(|s| s.s_n).fold(0.0, f64::max);
    em.push("sieve", v, vec![("max_s_n", max_s)], Some(csv), started);
    Ok(())
}

fn write_replications(em: &Emitter<'_>, mc: &MonteCarlo) -> Result<String, RunError> {
    let mut t = Table::new(
        "per-replication statistics",
        "one row per (replication, n); empty cells were not selected",
        vec![
            col("replication", "index"),
            col("seed", "u64"),
            col("n", "observations"),
            col("cesaro_kl", "nats"),
            col("log_i_n", "nats"),
            col("mass_bn", "probability"),
            col("mass_un", "probability"),
            col("projection_weight", "probability"),
            col("sqrt_l", "dimensionless"),
        ],
    );
    for r in &mc.records {
        for p in &r.per_n {
            t.push(vec![
                r.replication_id.to_string(),
                r.seed.to_string(),
                p.n.to_string(),
                opt(p.cesaro_kl),
                opt(p.log_i_n),
                opt(p.mass_bn),
                opt(p.mass_un),
                opt(p.projection_weight),
                opt(p.sqrt_l),
            ]);
        }
    }
    em.table("replications.csv", &t)
}

fn run_simulations(em: &mut Emitter<'_>, names: &[&str]) -> Result<(), RunError> {
    let plan = em.plan().clone();
    let mut selection = Selection {
        cesaro: names.contains(&"cesaro"),
        numerator: names.contains(&"numerator-bound"),
        evidence: names.contains(&"evidence-bound"),
        mass: names.contains(&"posterior-mass"),
    };
    let started = Instant::now();
    let mc = match experiments::monte_carlo(&plan, selection) {
        Ok(mc) => mc,
        Err(e @ ExperimentError::NotAdmissible(_)) if selection.numerator => {
            let v = Verdict {
                pass: false,
                detail: e.to_string(),
            };
            em.push("numerator-bound", v, vec![], None, started);
            selection.numerator = false;
            if !selection.any() {
                return Ok(());
            }
            experiments::monte_carlo(&plan, selection)?
        }
        Err(e) => return Err(e.into()),
    };
    write_replications(em, &mc)?;
    if selection.cesaro {
        let r = experiments::summarize_cesaro(&plan, &mc);
        let mut t = Table::new(
            "Cesaro-averaged Kullback-Leibler risk of the predictive",
            match plan.regime {
                RegimeKind::Misspecified => "n^-1 sum_{i=1}^n K*(f°, fhat_{i-1})",
                RegimeKind::Markov => "n^-1 sum_{i=1}^n K_{Y_{i-1}}(theta*, fhat_{i-1})",
                RegimeKind::Regression => "n^-1 sum_{i=1}^n K(f*_i, fhat_{i-1,i})",
                RegimeKind::Iid => "n^-1 sum_{i=1}^n K(f*, fhat_{i-1})",
            },
            vec![
                col("n", "observations"),
                col("epsilon", "distance"),
                col("mean", "nats"),
                col("se", "nats"),
                col("median", "nats"),
                col("upper_quartile", "nats"),
            ],
        );
        for row in &r.rows {
            t.push(vec![
                row.n.to_string(),
                num(row.epsilon),
                num(row.mean),
                num(row.se),
                num(row.median),
                num(row.upper_quartile),
            ]);
        }
        let csv = em.table("cesaro.csv", &t)?;
        em.push(
            "cesaro",
            r.verdict,
            vec![
                ("slope", r.fit.slope),
                ("intercept", r.fit.intercept),
                ("r_squared", r.fit.r_squared),
                ("fitted_constant", r.fit.fitted_constant),
            ],
            Some(csv),
            started,
        );
    }
    if selection.numerator {
        let r = experiments::summarize_numerator(&plan, &mc);
        let mut t = Table::new(
            "restricted likelihood-ratio numerator",
            "E sqrt(L_{n,n}(A)) <= Pi(A)^{1/2} exp(-d n eps_n^2)",
            vec![
                col("n", "observations"),
                col("epsilon", "distance"),
                col("subset_size", "atoms"),
                col("center_id", "atom"),
                col("radius", "distance"),
                col("prior_mass", "probability"),
                col("thickness_c", "dimensionless"),
                col("d", "dimensionless"),
                col("delta", "dimensionless"),
                col("min_member_gap", "dimensionless"),
                col("ball_gap_bound", "dimensionless"),
                col("bound", "dimensionless"),
                col("mean_sqrt_l", "dimensionless"),
                col("se", "dimensionless"),
                col("exact_expectation", "dimensionless"),
                col("pass", "bool"),
            ],
        );
        for row in &r.rows {
            t.push(vec![
                row.n.to_string(),
                num(row.epsilon),
                row.subset_ids.len().to_string(),
                row.center_id.to_string(),
                num(row.radius),
                num(row.prior_mass),
                num(row.thickness_c),
                num(row.d),
                num(row.delta),
                num(row.min_member_gap),
                num(row.ball_gap_bound),
                num(row.bound),
                num(row.mean_sqrt_l),
                num(row.se),
                opt(row.exact_expectation),
                row.pass.to_string(),
            ]);
        }
        let csv = em.table("numerator_bound.csv", &t)?;
        em.push("numerator-bound", r.verdict, vec![], Some(csv), started);
    }
    if selection.evidence {
        let r = experiments::summarize_evidence(&plan, &mc);
        let mut t = Table::new(
            "evidence ratio lower tail",
            "fraction of replications with I_n <= exp(-c n eps_n^2)",
            vec![
                col("n", "observations"),
                col("epsilon", "distance"),
                col("log_threshold", "nats"),
                col("fraction_below", "fraction"),
                col("implied_c", "dimensionless"),
                col("c_exceeds", "bool"),
                col("median_log_i_n", "nats"),
                col("min_log_i_n", "nats"),
            ],
        );
        for row in &r.rows {
            t.push(vec![
                row.n.to_string(),
                num(row.epsilon),
                num(row.log_threshold),
                num(row.fraction_below),
                num(row.implied_c),
                row.c_exceeds.to_string(),
                num(row.median_log_i_n),
                num(row.min_log_i_n),
            ]);
        }
        let csv = em.table("evidence_bound.csv", &t)?;
        em.push("evidence-bound", r.verdict, vec![("trend", r.trend)], Some(csv), started);
    }
    if selection.mass {
        let r = experiments::summarize_mass(&plan, &mc);
        let mut t = Table::new(
            "posterior mass outside a shrinking ball",
            "Pi_n(B_n), B_n = {distance(ref, f) > M eps_n}",
            vec![
                col("n", "observations"),
                col("epsilon", "distance"),
                col("radius", "distance"),
                col("b_count", "atoms"),
                col("b_prior_mass", "probability"),
                col("median", "probability"),
                col("upper_quartile", "probability"),
                col("mean", "probability"),
                col("fraction_above_eta", "fraction"),
                col("projection_median", "probability"),
                col("small_mass_median", "probability"),
            ],
        );
        for row in &r.rows {
            t.push(vec![
                row.n.to_string(),
                num(row.epsilon),
                num(row.radius),
                row.b_count.to_string(),
                num(row.b_prior_mass),
                num(row.median),
                num(row.upper_quartile),
                num(row.mean),
                num(row.fraction_above_eta),
                opt(row.projection_median),
                opt(row.small_mass_median),
            ]);
        }
        let csv = em.table("posterior_mass.csv", &t)?;
        em.push("posterior-mass", r.verdict, vec![], Some(csv), started);
    }
    Ok(())
}

pub fn summary_path(out_dir: &Path, command: Command) -> PathBuf {
    out_dir.join(format!("summary_{}.json", command.name()))
}

/// Runs the selected verifications of one subcommand, writing one CSV per
/// verification and `summary_<command>.json`.
pub fn execute(cfg: &RunConfig, command: Command) -> Result<Summary, RunError> {
    if command == Command::Report {
        return aggregate(&cfg.out_dir);
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let names = selected(cfg, command);
    let mut em = Emitter {
        cfg,
        criteria: Vec::new(),
    };
    match command {
        Command::Check => {
            for name in &names {
                run_check(&mut em, name)?;
            }
        }
        Command::Simulate if !names.is_empty() => run_simulations(&mut em, &names)?,
        Command::Sieve if !names.is_empty() => run_sieve(&mut em)?,
        _ => {}
    }
    let failures = em
        .criteria
        .iter()
        .filter(|c| !c.pass)
        .map(|c| Failure {
            criterion: c.name.clone(),
            detail: c.detail.clone(),
        })
        .collect();
    let admissible_m = em
        .criteria
        .iter()
        .flat_map(|c| &c.values)
        .find(|(k, _)| k == "admissible_m")
        .map(|(_, v)| *v);
    let summary = Summary {
        plan: cfg.plan.name.clone(),
        regime: cfg.plan.regime.name().into(),
        command: command.name().into(),
        seed: cfg.plan.seed,
        replications: cfg.plan.replications,
        criteria: em.criteria,
        failures,
        admissible_m,
    };
    let path = summary_path(&cfg.out_dir, command);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| RunError::Other(e.to_string()))?;
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(summary)
}

/// Reads every `summary_*.json` under `out_dir` and writes `report.csv`.
pub fn aggregate(out_dir: &Path) -> Result<Summary, RunError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(out_dir)
        .map_err(io_err(out_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("summary_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(RunError::Other(format!("no summaries in {}", out_dir.display())));
    }
    let mut t = Table::new(
        "verification summary",
        "pass/fail per verification",
        vec![
            col("command", "name"),
            col("criterion", "name"),
            col("pass", "bool"),
            col("detail", "text"),
        ],
    );
    let mut merged: Option<Summary> = None;
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        let s: Summary = serde_json::from_str(&text).map_err(|e| RunError::Other(format!("{}: {e}", p.display())))?;
        for c in &s.criteria {
            t.push(vec![s.command.clone(), c.name.clone(), c.pass.to_string(), c.detail.clone()]);
        }
        match &mut merged {
            None => merged = Some(s),
            Some(m) => {
                m.criteria.extend(s.criteria);
                m.failures.extend(s.failures);
                m.admissible_m = m.admissible_m.or(s.admissible_m);
            }
        }
    }
    let mut merged = merged.expect("at least one summary");
    merged.command = "report".into();
    let path = out_dir.join("report.csv");
    t.write(&path, &merged.plan, merged.seed).map_err(io_err(&path))?;
    Ok(merged)
}

/// Runs a subcommand end to end and returns the process exit code.
pub fn run(command: Command, config_path: Option<&Path>, overrides: &Overrides) -> i32 {
    let result = (|| -> Result<Summary, RunError> {
        if command == Command::Report {
            let out = match (&overrides.out, config_path) {
                (Some(o), _) => o.clone(),
                (None, Some(p)) => config::parse_config(p)?.out_dir,
                (None, None) => return Err(RunError::Other("report needs --out or --config".into())),
            };
            return aggregate(&out);
        }
        let path = config_path.ok_or_else(|| RunError::Other("--config is required".into()))?;
        let mut cfg = config::parse_config(path)?;
        cfg.source = path.to_path_buf();
        apply_overrides(&mut cfg, overrides)?;
        execute(&cfg, command)
    })();
    match result {
        Ok(summary) => {
            let failures = serde_json::to_string(&summary.failures).unwrap_or_default();
            if summary.all_pass() {
                println!("{}: {} criteria passed", summary.plan, summary.criteria.len());
                EXIT_PASS
            } else {
                println!("{failures}");
                EXIT_FAIL
            }
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
