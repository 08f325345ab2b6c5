use std::path::Path;
use std::process::{Command, Output};

fn pimsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimsim")).args(args).output().expect("spawn pimsim")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_report_with_every_field() {
    let d = tempfile::tempdir().unwrap();
    let o = pimsim(&["run", "--layers", "1", "--gen", "4", "--out-dir", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(d.path());
    for k in ["model", "arch_variant", "phase", "batch", "total_cycles", "tokens_per_second", "energy", "energy_per_token_pj", "bank_utilization", "phases"] {
        assert!(r.get(k).is_some(), "missing {k}");
    }
    assert_eq!(r["model"], "llama2-7b");
    let csv = std::fs::read_to_string(d.path().join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), pimsim::engine::CSV_HEADER.join(","));
    assert_eq!(lines.count(), 1);
}

#[test]
fn ablation_reports_are_comparable() {
    let mut cycles = Vec::new();
    for v in ["DRAM_ONLY", "HYBRID_OPT"] {
        let d = tempfile::tempdir().unwrap();
        let o = pimsim(&["run", "--layers", "1", "--gen", "2", "--batch", "16", "--arch-variant", v, "--out-dir", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        cycles.push(report(d.path())["total_cycles"].as_f64().unwrap());
    }
    assert!(cycles[0] / cycles[1] > 1.0, "{cycles:?}");
}

#[test]
fn bad_config_path_exits_2_naming_it() {
    let o = pimsim(&["run", "--config", "/does/not/exist.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/does/not/exist.toml"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.toml");
    std::fs::write(&p, "[run]\nbatch = 0\n").unwrap();
    let o = pimsim(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch"), "{}", stderr(&o));
}

#[test]
fn unknown_variant_fails() {
    let o = pimsim(&["run", "--arch-variant", "GPU"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("HYBRID_OPT"));
}

#[test]
fn reproduce_writes_csv_and_lists_options() {
    let d = tempfile::tempdir().unwrap();
    let o = pimsim(&["reproduce", "fig19", "--out-dir", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("fig19.csv")).unwrap();
    assert!(csv.starts_with("kernel,elements,unfused_cycles,fused_cycles,reduction\n"));

    let o = pimsim(&["reproduce", "fig99"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("fig8") && stderr(&o).contains("fig20"));
}

#[test]
fn reproduce_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = pimsim(&["reproduce", "fig18", "--seed", "7", "--out-dir", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("fig18.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn kernel_test_passes_all() {
    let o = pimsim(&["kernel-test", "all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.ends_with("pass") || l.contains("pass (limit")).count(), 6, "{out}");
    let o = pimsim(&["kernel-test", "gelu"]);
    assert!(!o.status.success());
}

#[test]
fn trace_lines_have_four_fields() {
    let d = tempfile::tempdir().unwrap();
    let o = pimsim(&["trace", "softmax", "--out-dir", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.path().join("trace_softmax.txt")).unwrap();
    let body: Vec<&str> = text.lines().skip(1).collect();
    assert!(!body.is_empty());
    assert!(body.iter().all(|l| l.split(' ').count() == 4), "{:?}", &body[..3]);
}

#[test]
fn run_trace_writes_schedule() {
    let d = tempfile::tempdir().unwrap();
    let o = pimsim(&["run", "--layers", "1", "--gen", "1", "--trace", "--out-dir", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.path().join("trace.txt")).unwrap();
    for l in text.lines().skip(1) {
        let f: Vec<&str> = l.split(' ').collect();
        let (s, e): (u64, u64) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        assert!(e >= s, "{l}");
    }
    assert!(text.lines().any(|l| l.contains(" q Fc ")));
}
