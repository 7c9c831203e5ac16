use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

const PLATE: &str = r#"{"schema":"dnpsi-experiment/1","command":"plate-demo",
  "system":{"kind":"plate","params":{"eta":2,"alpha":0.9,"beta":0.75}},"seed":7}"#;

fn run(config: &str, extra: &[&str]) -> (i32, TempDir, Value) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_dnpsi"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    (status.status.code().unwrap(), dir, report)
}

fn out(dir: &TempDir) -> std::path::PathBuf {
    dir.path().join("out")
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn plate_demo_passes_and_writes_tables() {
    let (code, dir, report) = run(PLATE, &[]);
    assert_eq!(code, 0, "{report}");
    assert_eq!(report["status"], "pass");
    assert_eq!(report["schema"], "dnpsi-report/1");
    assert!(report.get("generated_at").is_none());
    for f in ["report.json", "minors.csv", "sweep.csv", "trajectory.csv"] {
        assert!(out(&dir).join(f).exists(), "{f} missing");
    }
    assert!(report["result"]["max_minor_error"].as_f64().unwrap() < 1e-12);
    assert_eq!(report["result"]["evolution"]["monotone"], true);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (_, a, _) = run(PLATE, &["--seed", "11"]);
    let (_, b, _) = run(PLATE, &["--seed", "11"]);
    for f in ["minors.csv", "sweep.csv", "trajectory.csv", "report.json"] {
        assert_eq!(read(&out(&a), f), read(&out(&b), f), "{f} differs");
    }
    let (_, c, _) = run(PLATE, &["--seed", "12"]);
    assert_ne!(
        read(&out(&a), "trajectory.csv"),
        read(&out(&c), "trajectory.csv")
    );
}

#[test]
fn stamp_only_touches_headers() {
    let (_, plain, _) = run(PLATE, &[]);
    let (code, stamped, report) = run(PLATE, &["--stamp"]);
    assert_eq!(code, 0);
    assert!(report["generated_at"].is_string());
    let body = read(&out(&stamped), "sweep.csv");
    let (first, rest) = body.split_once('\n').unwrap();
    assert!(first.starts_with("# generated_at "));
    assert_eq!(rest, read(&out(&plain), "sweep.csv"));
}

#[test]
fn non_strict_orders_are_an_input_error() {
    let cfg = r#"{"schema":"dnpsi-experiment/1","command":"check-ellipticity",
      "system":{"kind":"matrix","dim":1,"l":[1,1],"m":[0,0],
      "entries":[[{"expr":{"op":"bracket","p":1}},null],[null,{"expr":{"op":"bracket","p":1}}]]}}"#;
    let (code, _dir, report) = run(cfg, &[]);
    assert_eq!(code, 2);
    assert_eq!(report["status"], "input_error");
    assert!(report["diagnostic"]
        .as_str()
        .unwrap()
        .contains("orders not strictly decreasing"));
}

#[test]
fn negative_symbol_fails_with_witness() {
    let cfg = r#"{"schema":"dnpsi-experiment/1","command":"check-ellipticity",
      "system":{"kind":"matrix","dim":1,"l":[2],"m":[0],
      "entries":[[{"expr":{"op":"scale","re":-1,"im":0,"a":{"op":"bracket","p":2}}}]]},
      "sector":{"theta":1.5707963267948966}}"#;
    let (code, dir, report) = run(cfg, &[]);
    assert_eq!(code, 1);
    assert_eq!(report["status"], "check_failed");
    for r in report["result"]["reports"].as_array().unwrap() {
        assert_eq!(r["passed"], false);
        let w = &r["witness"];
        assert!(w["lambda_re"].as_f64().unwrap() < 0.0);
        assert_eq!(w["xi"].as_array().unwrap().len(), 1);
    }
    assert!(read(&out(&dir), "ellipticity.csv").lines().count() == 3);
}

#[test]
fn malformed_configs_exit_2() {
    for cfg in [
        "not json",
        r#"{"schema":"other","command":"plate-demo"}"#,
        r#"{"schema":"dnpsi-experiment/1","command":"plate-demo","sector":{"theta":0}}"#,
        r#"{"schema":"dnpsi-experiment/1","command":"check-ellipticity"}"#,
        r#"{"schema":"dnpsi-experiment/1","command":"plate-demo","numeric":{"bogus":1}}"#,
    ] {
        let (code, _dir, report) = run(cfg, &[]);
        assert_eq!(code, 2, "{cfg}");
        assert!(report["diagnostic"].is_string());
    }
}

#[test]
fn find_shift_reports_alpha0() {
    let cfg = r#"{"schema":"dnpsi-experiment/1","command":"find-shift",
      "system":{"kind":"matrix","dim":1,"l":[2],"m":[0],
      "entries":[[{"expr":{"op":"add","a":{"op":"bracket","p":2},"b":{"op":"const","re":-5,"im":0}}}]]}}"#;
    let (code, _dir, report) = run(cfg, &[]);
    assert_eq!(code, 0);
    let a0 = report["result"]["shift"]["alpha0"].as_f64().unwrap();
    assert!((a0 - 4.0).abs() < 1e-3, "{a0}");
}

#[test]
fn parametrix_probe_on_variable_scalar() {
    let cfg = r#"{"schema":"dnpsi-experiment/1","command":"parametrix-probe",
      "system":{"kind":"matrix","dim":1,"l":[2],"m":[0],
      "entries":[[{"expr":{"op":"mul","a":{"op":"add","a":{"op":"const","re":2,"im":0},"b":{"op":"sin","k":[1],"phase":0}},"b":{"op":"bracket","p":2}}}]]},
      "grid":{"n":1,"N":32,"L":6.283185307179586}}"#;
    let (code, dir, report) = run(cfg, &[]);
    assert_eq!(code, 0, "{report}");
    let slope = report["result"]["fitted_slope"].as_f64().unwrap();
    assert!((slope + 2.0).abs() < 0.3);
    assert!(out(&dir).join("probe.csv").exists());
    assert!(out(&dir).join("comparison.csv").exists());
}

#[test]
fn sweep_diagonalize_and_hinfty_run() {
    let q2 = r#"{"kind":"matrix","dim":1,"l":[1,0],"m":[0,0],
      "entries":[[{"expr":{"op":"bracket","p":1}},{"expr":{"op":"const","re":0.5,"im":0}}],
                 [{"expr":{"op":"const","re":0.3,"im":0}},{"expr":{"op":"const","re":2,"im":0}}]]}"#;
    let grid = r#"{"n":1,"N":16,"L":6.283185307179586}"#;
    let cases = [
        ("resolvent-sweep", "sweep.csv"),
        ("diagonalize", "diagonalization.csv"),
        ("hinfty", "hinfty.csv"),
    ];
    for (cmd, file) in cases {
        let cfg = format!(
            r#"{{"schema":"dnpsi-experiment/1","command":"{cmd}","system":{q2},"grid":{grid}}}"#
        );
        let (code, dir, report) = run(&cfg, &[]);
        assert_eq!(code, 0, "{cmd}: {report}");
        assert_eq!(report["command"], cmd);
        assert!(out(&dir).join(file).exists(), "{cmd}");
    }
}

#[test]
fn perturbed_sweep_is_seeded() {
    let cfg = r#"{"schema":"dnpsi-experiment/1","command":"resolvent-sweep",
      "system":{"kind":"matrix","dim":1,"l":[2],"m":[0],"entries":[[{"expr":{"op":"bracket","p":2}}]]},
      "grid":{"n":1,"N":16,"L":6.283185307179586},"numeric":{"perturbation":{"epsilon":0.5}}}"#;
    let (_, a, ra) = run(cfg, &["--seed", "5"]);
    let (_, b, _) = run(cfg, &["--seed", "5"]);
    assert_eq!(read(&out(&a), "sweep.csv"), read(&out(&b), "sweep.csv"));
    let slope = ra["result"]["ray_slope"].as_f64().unwrap();
    assert!((slope + 1.0).abs() < 0.1);
}
