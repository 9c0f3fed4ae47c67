use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparse-pi"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &str = r#"
schema_version = 1
name = "small"
seed = 3
[model]
hidden = 32
heads = 4
head_dim = 8
ffn = 64
layers = 1
vocab = 16
max_positions = 32
ffn_predictor_rank = 8
mha_predictor_rank = 2
[run]
prompt_len = 4
gen = 2
"#;

fn write_small(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("small.cfg");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

#[test]
fn bundled_ffn_scenario_reports_the_somm_gemm_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", scenarios().join("toy-ffn-90pct.cfg").to_str().unwrap(), "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(stdout.contains("toy-ffn-90pct"));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let ratio: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("# somm_gemm_ratio="))
        .expect("ratio field")
        .parse()
        .unwrap();
    assert!(ratio > 5.0, "{ratio}");
    assert!(report.contains("phase,party,elements,bytes,rounds,wall_time_s"));
    assert!(dir.path().join("trace.csv").exists());
}

#[test]
fn malformed_and_unknown_keys_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    for extra in ["bogus = 1\n", "prefetch = [\n"] {
        let p = write_small(dir.path(), extra);
        let out = bin().args(["run", p.to_str().unwrap()]).output().unwrap();
        assert_eq!(out.status.code(), Some(2));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("line"), "{err}");
    }
    let p = write_small(dir.path(), "");
    let out = bin().args(["run", p.to_str().unwrap(), "--bandwidth", "3Gbps"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["run", "/nonexistent.cfg"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failure_during_a_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_small(dir.path(), "");
    let text = std::fs::read_to_string(&p).unwrap().replace("[run]", "ffn_bias_shift = 1e15\n[run]");
    std::fs::write(&p, text).unwrap();
    let out = bin().args(["run", p.to_str().unwrap(), "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_identical_reports_is_all_ones_and_seed_keeps_structure() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_small(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&bin().args(["run", p.to_str().unwrap(), "--out"]).arg(&a).output().unwrap());
    ok(&bin().args(["run", p.to_str().unwrap(), "--seed", "99", "--out"]).arg(&b).output().unwrap());
    let ra = a.join("report.csv");
    let table = ok(&bin().arg("compare").arg(&ra).arg(&ra).output().unwrap());
    for line in table.lines().skip(1) {
        assert!(line.ends_with(",1.000000"), "{line}");
    }
    let phases = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(phases(&ra), phases(&b.join("report.csv")));
    assert_ne!(std::fs::read(&ra).unwrap(), std::fs::read(b.join("report.csv")).unwrap());
}

#[test]
fn compare_rejects_different_workloads() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_small(dir.path(), "");
    let a = dir.path().join("a");
    ok(&bin().args(["run", p.to_str().unwrap(), "--out"]).arg(&a).output().unwrap());
    let text = std::fs::read_to_string(&p).unwrap().replace("gen = 2", "gen = 3");
    std::fs::write(&p, text).unwrap();
    let b = dir.path().join("b");
    ok(&bin().args(["run", p.to_str().unwrap(), "--out"]).arg(&b).output().unwrap());
    let out = bin().arg("compare").arg(a.join("report.csv")).arg(b.join("report.csv")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_small(dir.path(), "");
    let out = bin()
        .args(["sweep", p.to_str().unwrap(), "--axis", "sparsity=0.0:0.9:4", "--cache", "mr", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    ok(&out);
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let fc1: Vec<u64> = rows.iter().map(|r| r.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(fc1.windows(2).all(|w| w[1] <= w[0]), "{fc1:?}");
    let bad = bin().args(["sweep", p.to_str().unwrap(), "--axis", "speed=0:1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
