use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsscheck::dss::datasafety_url;
use dsscheck::fetch::CapturedPayload;

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn dsscheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsscheck"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Captures for the shared fixture apps, plus an apps list without policy URLs.
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let captures = root.join("captures");
    let mut apps = String::from("package_name,store_category\n");
    let list = std::fs::read_to_string(core_fixtures().join("apps.csv")).unwrap();
    for line in list.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (pkg, category, dss_file, policy_url) = (cols[0], cols[1], cols[2], cols[3]);
        let dir = core_fixtures().join("apps").join(pkg);
        let dss_type = match dss_file.rsplit('.').next() {
            Some("json") => "application/json",
            Some("html") => "text/html",
            _ => "text/plain",
        };
        CapturedPayload::new(datasafety_url(pkg), dss_type, std::fs::read(dir.join(dss_file)).unwrap())
            .save(&captures.join(pkg), "dss")
            .unwrap();
        CapturedPayload::new(policy_url, "text/html", std::fs::read(dir.join("policy.html")).unwrap())
            .save(&captures.join(pkg), "policy")
            .unwrap();
        apps.push_str(&format!("{pkg},{category}\n"));
    }
    let apps_csv = root.join("apps.csv");
    std::fs::write(&apps_csv, apps).unwrap();
    (captures, apps_csv)
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&dsscheck(&[])), 1);
    assert_eq!(code(&dsscheck(&["scrape", "--bogus-flag"])), 1);
    assert_eq!(code(&dsscheck(&["--strategy", "7", "scrape", "com.example.a"])), 1);
    // no packages at all
    assert_eq!(code(&dsscheck(&["--transcript-mode", "replay", "scrape"])), 1);
    assert_eq!(code(&dsscheck(&["--help"])), 0);
}

#[test]
fn bad_config_file_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("dsscheck.toml");
    std::fs::write(&cfg, "runs = 0\n").unwrap();
    let out = dsscheck(&["--config", cfg.to_str().unwrap(), "scrape", "com.example.a"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(&cfg, "not_a_setting = true\n").unwrap();
    assert_eq!(code(&dsscheck(&["--config", cfg.to_str().unwrap(), "scrape", "com.example.a"])), 1);
    // record mode needs a provider
    let out = dsscheck(&["--transcript-mode", "record", "--provider", "none", "scrape", "com.example.a"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn full_cycle_with_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let (captures, apps) = setup(tmp.path());
    let workdir = tmp.path().join("work");
    let common = [
        "--workdir",
        workdir.to_str().unwrap(),
        "--fixtures",
        captures.to_str().unwrap(),
    ];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = common.to_vec();
        args.extend_from_slice(extra);
        dsscheck(&args)
    };

    let out = run(&[
        "--transcript-mode",
        "record",
        "--provider",
        "heuristic",
        "run-all",
        "--apps",
        apps.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for pkg in ["com.example.weather", "com.example.notes", "com.example.fitness"] {
        let run1 = workdir.join(pkg).join("run-1");
        assert!(run1.join("report_collection.json").exists());
        assert!(run1.join("report_sharing.json").exists());
    }

    // replay: everything is resumed, still exit 0
    let out = run(&["--transcript-mode", "replay", "run-all", "--apps", apps.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("0 ran"));

    let truth = core_fixtures().join("truth.csv");
    let out = run(&["evaluate", "--truth", truth.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Pooled"));
    assert!(workdir.join("metrics.json").exists());

    let out = run(&["report"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("across 3 apps"));
    assert!(workdir.join("summary/summary.json").exists());

    let out = run(&[
        "--transcript-mode",
        "record",
        "--provider",
        "heuristic",
        "sweep",
        "--truth",
        truth.to_str().unwrap(),
        "--strategies",
        "1,3",
        "--apps",
        apps.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(workdir.join("sweep.json").exists());
}

#[test]
fn partial_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (captures, _) = setup(tmp.path());
    let workdir = tmp.path().join("work");
    let out = dsscheck(&[
        "--workdir",
        workdir.to_str().unwrap(),
        "--fixtures",
        captures.to_str().unwrap(),
        "--transcript-mode",
        "replay",
        "scrape",
        "com.example.weather",
        "com.example.missing",
    ]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ok      com.example.weather"), "{stderr}");
    assert!(stderr.contains("FAILED  com.example.missing"), "{stderr}");
    assert!(workdir.join("com.example.weather/dss.json").exists());
}

#[test]
fn report_on_empty_workdir_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dsscheck(&["--workdir", tmp.path().to_str().unwrap(), "report"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("total 0"));
}
