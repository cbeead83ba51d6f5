use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn openfsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openfsp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const ALARM_SPEC: &str = r#"{
  "name": "alarm",
  "intents": [
    {
      "name": "IN:CREATE_ALARM",
      "examples": ["set an alarm for 6 am", "wake me up tomorrow"],
      "slots": [
        {"name": "SL:DATE_TIME", "agnostic_type": "SL:SCOPE_TEMPORAL",
         "examples": ["at 6 am", "tomorrow morning"], "required": true},
        {"name": "SL:ALARM_NAME", "agnostic_type": "SL:DELIVERABLE",
         "examples": ["gym", "wake up"], "required": false}
      ]
    },
    {"name": "IN:DELETE_ALARM", "examples": ["delete my alarm", "cancel the alarm"], "slots": []}
  ]
}"#;

fn onboard(dir: &Path) -> String {
    let reg = dir.join("reg");
    let spec = dir.join("alarm.json");
    fs::write(&spec, ALARM_SPEC).unwrap();
    let reg_s = reg.to_str().unwrap().to_string();
    let o = openfsp(&["train-dap", "--synthetic", "--registry", &reg_s, "--exclude", "alarm"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = openfsp(&["register", "--spec", spec.to_str().unwrap(), "--registry", &reg_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("3 templates"));
    let o = openfsp(&["finalize", "--domain", "alarm", "--registry", &reg_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    reg_s
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = openfsp(&["parse", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(openfsp(&[]).status.code(), Some(2));
}

#[test]
fn parse_json_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let reg = onboard(dir.path());
    let args = ["--json", "parse", "--text", "wake me up at 6 am", "--registry", &reg, "--k", "3"];
    let a = openfsp(&args);
    let b = openfsp(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["ranked"][0]["template"]["intent"], "IN:CREATE_ALARM");
    assert_eq!(v["ranked"][0]["assignment"][0]["label"], "SL:DATE_TIME");
}

#[test]
fn golden_parse_bypasses_the_tagger() {
    let dir = tempfile::tempdir().unwrap();
    let reg = onboard(dir.path());
    let o = openfsp(&[
        "--json",
        "parse",
        "--golden-parse",
        "[IN:X wake me [SL:SCOPE_TEMPORAL at 6 am ] [SL:ALARM_NAME gym ] ]",
        "--registry",
        &reg,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let slots = &v["ranked"][0]["template"]["slots"];
    assert_eq!(slots, &serde_json::json!(["SL:ALARM_NAME", "SL:DATE_TIME"]));
}

#[test]
fn domain_errors_exit_one_with_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, r#"{"name": "x", "intents": [], "extra": 1}"#).unwrap();
    let reg = dir.path().join("reg");
    let o = openfsp(&["--json", "register", "--spec", spec.to_str().unwrap(), "--registry", reg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "SchemaError");
    assert!(!reg.join("manifest.json").exists());
}

#[test]
fn no_eligible_frame_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let reg = onboard(dir.path());
    // three temporal spans fit no alarm template
    let o = openfsp(&[
        "--json",
        "parse",
        "--golden-parse",
        "[IN:X [SL:DATE_TIME today ] [SL:DATE_TIME now ] [SL:DATE_TIME later ] ]",
        "--registry",
        &reg,
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "NoEligibleFrame");
}

#[test]
fn evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let args = [
        "--json",
        "evaluate",
        "--synthetic",
        "--examples-per-label",
        "5",
        "--seeds",
        "1,2",
        "--out",
        out.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ];
    let a = openfsp(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = openfsp(&args);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read(&out).unwrap(), a.stdout);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("baseline,setting,"));

    let table = openfsp(&["report", "--input", out.to_str().unwrap()]);
    assert!(table.status.success());
    let text = stdout(&table);
    assert!(text.contains("alarm") && text.contains("reminder") && text.contains("avg"));
}

#[test]
fn ingest_writes_canonical_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = openfsp(&["--json", "ingest", "--synthetic", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let total = ["train", "eval", "test"]
        .iter()
        .map(|s| stats[s].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(total, 2000);
    for s in ["train", "eval", "test"] {
        let n = fs::read_to_string(out.join(format!("{s}.jsonl"))).unwrap().lines().count() as u64;
        assert_eq!(n, stats[s].as_u64().unwrap());
    }
}
