use std::path::Path;
use std::process::{Command, Output};

const ORACLE_FIXTURE: &str = r#"
model = "missing-data"
f = [0.5, 0.5]
a = [2.0, 4.0]
b = [0.3, 0.7]

[fit]
a_hat = [2.5, 3.5]
b_hat = [0.4, 0.6]
"#;

const CONFIG: &str = r#"
model = "missing-data"
n = [80]
replications = 4
seed = 5
estimators = ["plugin", "first"]
output = "table.csv"

[k_schedule]
type = "fixed"
values = [2]

[truth]
type = "discrete"
f = [0.5, 0.5]
a = [2.0, 4.0]
b = [0.3, 0.7]
"#;

fn hoif(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoif"))
        .args(args)
        .current_dir(dir)
        .env_remove("HOIF_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn oracle_prints_fixture_bias() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("fx.toml"), ORACLE_FIXTURE).unwrap();
    let o = hoif(dir.path(), &["oracle", "--file", "fx.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("first_order_bias_formula")).unwrap().to_string();
    let value: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!((value + 0.01875).abs() < 1e-12, "{line}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hoif(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(hoif(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(hoif(dir.path(), &["oracle", "--file", "missing.toml"]).status.code(), Some(1));
    assert_eq!(hoif(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(hoif(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), CONFIG.replace("seed = 5", "sed = 5")).unwrap();
    let o = hoif(dir.path(), &["simulate", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`sed`"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), CONFIG.replace("b = [0.3, 0.7]", "b = [0.3, 1.7]")).unwrap();
    let o = hoif(dir.path(), &["simulate", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`truth`"), "{}", stderr(&o));
}

#[test]
fn simulate_respects_output_directory_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("results");
    std::fs::create_dir(&out_dir).unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hoif"))
        .args(["simulate", "--config", "cfg.toml"])
        .current_dir(dir.path())
        .env("HOIF_OUTPUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let via_env = std::fs::read_to_string(out_dir.join("table.csv")).unwrap();
    assert!(via_env.contains("estimator,n,k,mean,bias,variance,rmse,replications,failures,seed"));

    let o = Command::new(env!("CARGO_BIN_EXE_hoif"))
        .args(["simulate", "--config", "cfg.toml", "--out", "explicit.csv"])
        .current_dir(dir.path())
        .env("HOIF_OUTPUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(dir.path().join("explicit.csv")).unwrap(), via_env);
}

#[test]
fn generate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let o = hoif(dir.path(), &["generate", "--config", "cfg.toml", "--n", "3000", "--seed", "2", "--out", "d.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = hoif(dir.path(), &["estimate", "--data", "d.csv", "--second-order", "--k", "1", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // chi = (0.3 + 0.7) / 2
    let first = report["chi_first"].as_f64().unwrap();
    assert!((first - 0.5).abs() < 0.1, "{report}");
    assert!(report["chi_second"].as_f64().is_some());
    assert_eq!(report["k_used"], 1);
}

#[test]
fn malformed_dataset_exits_one_and_runtime_failure_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "# hoif dataset model=covariance domain=atoms:2\ny1,y2,a,z1\n1,,x,0\n").unwrap();
    let o = hoif(dir.path(), &["estimate", "--data", "bad.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("a (row 1)"), "{}", stderr(&o));

    std::fs::write(dir.path().join("tiny.csv"), "# hoif dataset model=covariance domain=atoms:2\ny1,y2,a,z1\n1,,1,0\n").unwrap();
    let o = hoif(dir.path(), &["estimate", "--data", "tiny.csv"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hoif(dir.path(), &["selftest", "--cases", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed = if text.contains("[fit]") && !text.contains("mode =") {
            hoif_core::simulate::run_oracle(&text).map(|_| ())
        } else {
            hoif_core::simulate::parse_experiment_config(&text).map(|_| ())
        };
        assert!(parsed.is_ok(), "{}: {parsed:?}", path.display());
        seen += 1;
    }
    assert!(seen >= 3);
}
