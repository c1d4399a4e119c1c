use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tokscope::language::TeacherProcess;
use tokscope::measures::{directed_information, SequenceEnsemble};
use tokscope::model::TransformerParams;

fn tokscope(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokscope"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("TOKSCOPE_SEED")
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Writes a seed-0 transformer teacher and returns its directory.
fn teacher(root: &Path) -> std::path::PathBuf {
    let dir = root.join("teacher");
    assert!(tokscope(&["gen-teacher", "--seed", "0"], &dir).status.success());
    dir
}

#[test]
fn di_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let t = teacher(tmp.path());
    let (tp, mp) = (t.join("teacher.json"), t.join("model.json"));
    let o = tokscope(
        &[
            "di",
            "--teacher",
            tp.to_str().unwrap(),
            "--model",
            mp.to_str().unwrap(),
            "--n",
            "2",
            "--T",
            "5",
        ],
        &tmp.path().join("di"),
    );
    assert!(o.status.success());
    let got = stdout_json(&o)["directed_information"].as_f64().unwrap();
    let teacher = TeacherProcess::load(&tp).unwrap();
    let model = TransformerParams::load(&mp).unwrap();
    let ens = SequenceEnsemble::build(&model, teacher.prompt_prior(), 2, 5).unwrap();
    assert_eq!(got, directed_information(&ens));
    let result = read_json(&tmp.path().join("di/result.json"));
    assert_eq!(result["summary"]["directed_information"].as_f64(), Some(got));
    assert_eq!(result["config"]["T"], 5);
}

#[test]
fn missing_file_exits_2_and_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tokscope(&["di", "--teacher", "does/not/exist.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert_eq!(e["error"]["path"], "does/not/exist.json");
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"trials": 2, "tirals": 3}"#).unwrap();
    let o = tokscope(&["jl", "--config", cfg.to_str().unwrap()], &tmp.path().join("jl"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["error"]["message"].as_str().unwrap().contains("tirals"));
}

#[test]
fn flags_override_config_and_seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 11, "N": 64, "M": 10, "trials": 2, "kinds": ["gaussian"]}"#,
    )
    .unwrap();
    let out = tmp.path().join("a");
    let o = tokscope(&["jl", "--config", cfg.to_str().unwrap(), "--trials", "3"], &out);
    assert!(o.status.success());
    let r = read_json(&out.join("result.json"));
    assert_eq!(r["seed"], 11);
    assert_eq!(r["config"]["trials"], 3);
    assert_eq!(r["config"]["N"], 64);
    assert_eq!(r["points"].as_array().unwrap().len(), 3);

    let out = tmp.path().join("b");
    let o = Command::new(env!("CARGO_BIN_EXE_tokscope"))
        .args(["jl", "--N", "64", "--M", "10", "--trials", "1", "--out"])
        .arg(&out)
        .env("TOKSCOPE_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read_json(&out.join("result.json"))["seed"], 5);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let t = teacher(tmp.path());
    let tp = t.join("teacher.json");
    let args = [
        "flow",
        "--teacher",
        tp.to_str().unwrap(),
        "--paths",
        "100",
        "--freedman-paths",
        "500",
    ];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(tokscope(&args, &a).status.success());
    assert!(tokscope(&args, &b).status.success());
    for f in ["flow.csv", "freedman.csv", "result.json", "config.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = std::fs::read_to_string(a.join("flow.csv")).unwrap();
    assert!(csv.starts_with("step,density,cumulative,M,A,V\n"));
    let meta = read_json(&a.join("meta.json"));
    assert!(meta["threads"].as_u64().unwrap() >= 1);
}

#[test]
fn failed_invariant_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gw");
    let o = tokscope(&["gw", "--restarts", "2", "--seed", "7"], &out);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"]["invariant"], "entropic_within_oracle");
    // Artifacts are still written.
    let r = read_json(&out.join("result.json"));
    let failed: Vec<&Value> = r["assertions"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["passed"] == false)
        .collect();
    assert_eq!(failed.len(), 1);
}

#[test]
fn report_draws_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let t = teacher(tmp.path());
    let tp = t.join("teacher.json");
    let rd = tmp.path().join("rd");
    let o = tokscope(
        &[
            "rd-sweep",
            "--teacher",
            tp.to_str().unwrap(),
            "--steps",
            "20",
            "--lambdas",
            "0.5,2,inf",
        ],
        &rd,
    );
    assert!(o.status.success());
    let o = tokscope(&["report", rd.to_str().unwrap()], &rd);
    assert!(o.status.success());
    let svg = std::fs::read_to_string(rd.join("rate_distortion.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    let summary = std::fs::read_to_string(rd.join("summary.md")).unwrap();
    assert!(summary.contains("| pareto_monotone | pass |"));

    let flow = tmp.path().join("flow");
    assert!(tokscope(
        &["flow", "--teacher", tp.to_str().unwrap(), "--freedman-paths", "0"],
        &flow
    )
    .status
    .success());
    let o = tokscope(&["report", flow.to_str().unwrap()], &flow);
    assert_eq!(stdout_json(&o)["svgs"][0], "flow.svg");
    let svg = std::fs::read_to_string(flow.join("flow.svg")).unwrap();
    assert!(svg.contains("<title>cumulative</title>") && svg.contains("<title>A</title>"));
}

#[test]
fn report_without_points_is_summary_only() {
    let tmp = tempfile::tempdir().unwrap();
    let t = teacher(tmp.path());
    let o = tokscope(&["report", t.to_str().unwrap()], &t);
    assert!(o.status.success());
    assert_eq!(stdout_json(&o)["svgs"].as_array().unwrap().len(), 0);
    assert!(t.join("summary.md").exists());
    assert!(!std::fs::read_dir(&t)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}

#[test]
fn malformed_report_json_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("result.json"), "{\"points\": [").unwrap();
    let o = tokscope(&["report", tmp.path().to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["error"]["path"]
        .as_str()
        .unwrap()
        .ends_with("result.json"));
}

#[test]
fn infeasible_capacity_is_a_result() {
    let tmp = tempfile::tempdir().unwrap();
    let t = teacher(tmp.path());
    let tp = t.join("teacher.json");
    let o = tokscope(
        &[
            "capacity",
            "--teacher",
            tp.to_str().unwrap(),
            "--reward",
            "constant:1",
            "--threshold",
            "1.5",
        ],
        &tmp.path().join("cap"),
    );
    assert!(o.status.success());
    assert_eq!(stdout_json(&o)["infeasible"], true);
}
