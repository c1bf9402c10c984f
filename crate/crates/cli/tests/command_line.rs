use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
[plan]
name = "small"
regime = "iid"
replications = 20
seed = 7
verify = ["factorization"]

[grid]
lower = -10.0
upper = 12.0
points = 441

[family]
kind = "gaussian_location"
means = [0.0, 1.0, 2.0, 3.0]
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

[subset]
atoms = [3]
closure_draws = 5

[checks]
factorization_cases = 4
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("plan.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn postrate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_postrate")).args(args).output().unwrap()
}

fn run_with(config: &Path, out: &Path, command: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        command,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    postrate(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn factorization_only_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("out");
    let o = run_with(&cfg, &out, "check", &[]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let csv = std::fs::read_to_string(out.join("factorization.csv")).unwrap();
    assert!(csv.starts_with("# plan: small\n"));
    assert!(csv.contains("# seed: 7"));
    assert!(out.join("summary_check.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace(
        "verify = [\"factorization\"]",
        "verify = [\"factorization\", \"inequalities\", \"thickness\", \"cesaro\"]",
    ).replace("[checks]", "[checks]\ninequality_cases = 20");
    let cfg = write_config(dir.path(), &text);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        for cmd in ["check", "simulate"] {
            let o = run_with(&cfg, out, cmd, &[]);
            assert!(matches!(o.status.code(), Some(0 | 2)), "{}", stderr(&o));
        }
    }
    for name in ["factorization.csv", "inequalities.csv", "thickness.csv", "cesaro.csv", "replications.csv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between reruns");
    }
}

#[test]
fn seed_override_changes_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BASE.replace("[\"factorization\"]", "[\"cesaro\"]"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_with(&cfg, &a, "simulate", &[]);
    run_with(&cfg, &b, "simulate", &["--seed", "8"]);
    let x = std::fs::read_to_string(a.join("replications.csv")).unwrap();
    let y = std::fs::read_to_string(b.join("replications.csv")).unwrap();
    assert!(y.contains("# seed: 8"));
    assert_ne!(x.lines().skip(6).collect::<Vec<_>>(), y.lines().skip(6).collect::<Vec<_>>());
}

#[test]
fn beta_at_most_one_is_a_config_error_with_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BASE.replace("beta = 2.0", "beta = 1.0"));
    let o = run_with(&cfg, &dir.path().join("out"), "check", &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("beta > 1"), "{err}");
    assert!(err.contains("line 32"), "{err}");
}

#[test]
fn unknown_verification_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let o = run_with(&cfg, &dir.path().join("out"), "check", &["--verify", "factorization,bogus"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(postrate(&["frobnicate"]).status.code(), Some(3));
}

#[test]
fn uncertifiable_subset_fails_by_name() {
    let dir = tempfile::tempdir().unwrap();
    // Atom 0 is the truth itself, so its gap is zero.
    let text = BASE
        .replace("[\"factorization\"]", "[\"numerator-bound\"]")
        .replace("atoms = [3]", "atoms = [0, 1]");
    let cfg = write_config(dir.path(), &text);
    let o = run_with(&cfg, &dir.path().join("out"), "simulate", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stdout(&o).contains("subset not admissible"), "{}", stdout(&o));
}

#[test]
fn report_merges_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace("[\"factorization\"]", "[\"factorization\", \"thickness\"]");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    assert_eq!(run_with(&cfg, &out, "check", &[]).status.code(), Some(0));
    let o = postrate(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.contains("check,factorization,true"), "{report}");
    assert!(report.contains("check,thickness,"), "{report}");
}

#[test]
fn report_without_summaries_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = postrate(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}
