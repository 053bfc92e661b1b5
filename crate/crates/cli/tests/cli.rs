use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedstream"))
}

fn quick_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.cfg")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--set", "dataset=/no/such/place.fedds", "--out"])
        .arg(dir.path())
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/place.fedds"));
}

#[test]
fn bad_flags_and_configs_fail() {
    assert!(!bin()
        .args(["run", "--frobnicate"])
        .output()
        .unwrap()
        .status
        .success());
    let out = bin()
        .args(["run", "--set", "colour=red"])
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn run_writes_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    ok(bin()
        .args(["run", "--config"])
        .arg(quick_cfg())
        .args(["--strategies", "ode_est"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap());
    let csv = std::fs::read_to_string(dir.path().join("ode_est_seed0.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,train_loss,test_acc,est_cosine,grad_evals,buffer_util"
    );
    // probes off: est_cosine stays empty
    assert!(lines.all(|l| l.split(',').nth(3) == Some("")));

    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let row = &json.as_array().unwrap()[0];
    for key in [
        "strategy",
        "seed",
        "final_acc",
        "rounds_to_target",
        "speedup_vs_rs",
        "total_grad_evals",
    ] {
        assert!(row.get(key).is_some(), "summary lacks {key}");
    }
}

#[test]
fn compare_reports_every_strategy_against_reservoir() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(bin()
        .args(["compare", "--config"])
        .arg(quick_cfg())
        .args(["--strategies", "rs,ode_exact,ode_est,full_data", "--out"])
        .arg(dir.path())
        .output()
        .unwrap());
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["reservoir", "ode_exact", "ode_est", "full_data"]);
    assert_eq!(rows[0][4], "1");
    assert!(stdout.contains("ode_exact"));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, out: &Path| {
        ok(bin()
            .args(["run", "--config"])
            .arg(quick_cfg())
            .args([
                "--strategies",
                "ode_exact,grad_norm",
                "--seed",
                "3",
                "--probes",
                "--out",
            ])
            .arg(out)
            .env("FEDSTREAM_THREADS", threads)
            .output()
            .unwrap());
    };
    let (a, b) = (dir.path().join("one"), dir.path().join("four"));
    run("1", &a);
    run("4", &b);
    for name in ["ode_exact_seed3.csv", "grad_norm_seed3.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn gen_plan_and_probe_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.fedds");
    ok(bin()
        .args(["gen", "--config"])
        .arg(quick_cfg())
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap());
    let plan = dir.path().join("plan.csv");
    ok(bin()
        .args(["plan", "--config"])
        .arg(quick_cfg())
        .arg("--out")
        .arg(&plan)
        .output()
        .unwrap());
    let text = std::fs::read_to_string(&plan).unwrap();
    assert!(text.starts_with("client,label,velocity,quota,gamma"));

    // the saved file reproduces the synthetic run
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(bin()
        .args(["run", "--config"])
        .arg(quick_cfg())
        .arg("--out")
        .arg(&a)
        .output()
        .unwrap());
    let set = format!("dataset={}", data.display());
    ok(bin()
        .args(["run", "--config"])
        .arg(quick_cfg())
        .args(["--set", &set, "--out"])
        .arg(&b)
        .output()
        .unwrap());
    assert_eq!(
        std::fs::read(a.join("reservoir_seed0.csv")).unwrap(),
        std::fs::read(b.join("reservoir_seed0.csv")).unwrap()
    );

    let stdout = ok(bin().args(["probe", "--instances", "5"]).output().unwrap());
    assert_eq!(
        stdout.lines().filter(|l| l.contains("min slack")).count(),
        3
    );
}
