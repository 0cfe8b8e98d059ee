use std::process::{Command, Output};

fn vov3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vov3d")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_subcommands() {
    let o = vov3d(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for sub in ["summary", "analyze", "trf", "gradcheck", "train-demo", "robustness", "export-config"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(vov3d(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(vov3d(&["summary", "--variant", "nope"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1() {
    let o = vov3d(&["gradcheck", "--ops", "no_such_check", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = vov3d(&["summary", "--config", "/nonexistent/arch.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_reports_budget_and_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vov3d(&["analyze", "--spatial", "224", "--report", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("526848/301056 = 1.75"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("cost_224.json")).unwrap()).unwrap();
    let params = json["total_params"].as_u64().unwrap();
    assert!((3_000_000..3_400_000).contains(&params), "{params}");
}

#[test]
fn structured_output_parses() {
    let o = vov3d(&["--format", "structured", "trf", "--tiny"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["rows"].as_array().is_some_and(|r| !r.is_empty()));
}

#[test]
fn exported_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("arch.toml");
    let o = vov3d(&["export-config", "arch", "--out", path.to_str().unwrap()]);
    assert!(o.status.success());
    let a = vov3d(&["summary", "--config", path.to_str().unwrap()]);
    let b = vov3d(&["summary"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn single_gradcheck_passes() {
    let o = vov3d(&["gradcheck", "--ops", "conv_depthwise", "--seeds", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("pass"));
}
