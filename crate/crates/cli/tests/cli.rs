use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ehmac::model::{EnergyConfig, Protocol, SystemConfig};
use ehmac_cli::{read_rows, Axes, Manifest, SweepSpec, CSV_COLUMNS};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ehmac"))
}

/// A scaled-down reference point that analyzes in a fraction of a second.
fn small_base(protocol: Protocol) -> SystemConfig {
    let mut c = SystemConfig::reference(protocol, 0.15, 1.0);
    c.energy = EnergyConfig { unit: 0.1, levels: 100, tx_cost_units: 10 };
    c.tolerances.capture_samples = 5_000;
    c.tolerances.particles = 5_000;
    c
}

fn write_spec(dir: &Path, name: &str, spec: &SweepSpec) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn rows(path: &Path) -> Vec<ehmac_cli::Row> {
    read_rows(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn single_point_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tdma.json");
    std::fs::write(&cfg, serde_json::to_string(&small_base(Protocol::Tdma)).unwrap()).unwrap();
    let out = run(bin().args(["analyze", "--config"]).arg(&cfg));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], CSV_COLUMNS.join(","));
    assert!(lines[1].starts_with("TDMA,1.0,"), "{}", lines[1]);
    assert!(lines[1].contains(",analysis,"));
}

#[test]
fn rho_axis_times_protocols_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SweepSpec::single(small_base(Protocol::Fa));
    spec.axes = Axes {
        rho: (0..26).map(|i| 0.5 + 0.1 * f64::from(i)).collect(),
        protocol: Protocol::ALL.to_vec(),
        ..Default::default()
    };
    let cfg = write_spec(dir.path(), "sweep.json", &spec);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    run(bin().args(["analyze", "--config"]).arg(&cfg).arg("--out").arg(&a));
    run(bin()
        .env("EHMAC_THREADS", "3")
        .args(["analyze", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b));
    assert_eq!(rows(&a).len(), 78);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(Manifest::path_for(&a)).unwrap()).unwrap();
    assert_eq!(manifest.rows, 78);
    assert_eq!(manifest.config_hash, spec.hash());
    assert_eq!(manifest.config_hash.len(), 64);
}

#[test]
fn simulate_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SweepSpec::single(small_base(Protocol::Dfa));
    spec.axes.rho = vec![1.0, 2.0];
    spec.axes.protocol = vec![Protocol::Fa, Protocol::Dfa];
    let cfg = write_spec(dir.path(), "sweep.json", &spec);
    let analysis = dir.path().join("analysis.csv");
    let sim = dir.path().join("sim.csv");
    let sim2 = dir.path().join("sim2.csv");
    let trace = dir.path().join("trace.csv");
    run(bin().args(["analyze", "--config"]).arg(&cfg).arg("--out").arg(&analysis));
    let sim_args = |out: &Path| {
        let mut c = bin();
        c.args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .args(["--seed", "5", "--irs", "3000", "--warmup", "500", "--replicas", "2"]);
        c
    };
    run(sim_args(&sim).arg("--trace").arg(&trace));
    run(sim_args(&sim2).env("EHMAC_THREADS", "1"));
    assert_eq!(std::fs::read(&sim).unwrap(), std::fs::read(&sim2).unwrap());

    let sim_rows = rows(&sim);
    assert_eq!(sim_rows.len(), 4);
    assert!(sim_rows.iter().all(|r| r.source == "sim-known" && r.se_p_t.is_some() && r.seed == 5));
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    // Header plus every round of both replicas at all four points.
    assert_eq!(trace_text.lines().count(), 1 + 4 * 2 * 3500);

    let out = run(bin().arg("compare").arg(&analysis).arg(&sim));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.trim_end().ends_with("PASS"), "{report}");

    let same = run(bin().arg("compare").arg(&analysis).arg(&analysis));
    assert!(String::from_utf8(same.stdout).unwrap().contains("max |dp_d| 0.0000, max |dp_t| 0.0000"));
}

#[test]
fn compare_reports_missing_points() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SweepSpec::single(small_base(Protocol::Fa));
    spec.axes.rho = vec![1.0];
    let cfg = write_spec(dir.path(), "one.json", &spec);
    spec.axes.rho = vec![1.0, 1.5];
    let cfg2 = write_spec(dir.path(), "two.json", &spec);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    run(bin().args(["analyze", "--config"]).arg(&cfg).arg("--out").arg(&a));
    run(bin().args(["analyze", "--config"]).arg(&cfg2).arg("--out").arg(&b));
    let out = bin().arg("compare").arg(&a).arg(&b).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("protocol=FA rho=1.5"), "{err}");
}

#[test]
fn compare_fails_beyond_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec::single(small_base(Protocol::Fa));
    let cfg = write_spec(dir.path(), "s.json", &spec);
    let a = dir.path().join("a.csv");
    run(bin().args(["analyze", "--config"]).arg(&cfg).arg("--out").arg(&a));
    let mut shifted = rows(&a);
    shifted[0].p_t += 0.05;
    let b = dir.path().join("b.csv");
    ehmac_cli::write_rows(std::fs::File::create(&b).unwrap(), &shifted).unwrap();
    let out = bin().arg("compare").arg(&a).arg(&b).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tradeoff_envelopes() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SweepSpec::single(small_base(Protocol::Fa));
    spec.axes.rho = (1..=20).map(|i| 0.25 * f64::from(i)).collect();
    spec.axes.protocol = Protocol::ALL.to_vec();
    let cfg = write_spec(dir.path(), "t.json", &spec);
    let out = dir.path().join("t.csv");
    run(bin().args(["tradeoff", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let all = rows(&out);
    let tdma: Vec<_> = all.iter().filter(|r| r.protocol == "TDMA").collect();
    assert_eq!(tdma.len(), 1);
    for p in ["FA", "DFA"] {
        let curve: Vec<_> = all.iter().filter(|r| r.protocol == p).collect();
        assert!(curve.len() > 1);
        for w in curve.windows(2) {
            assert!(w[1].p_t > w[0].p_t && w[1].p_d < w[0].p_d);
        }
    }

    spec.axes.rho.clear();
    let empty = write_spec(dir.path(), "e.json", &spec);
    let res = bin().args(["tradeoff", "--config"]).arg(&empty).output().unwrap();
    assert!(!res.status.success());
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_base(Protocol::Fa);
    c.alpha = 1.5;
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, serde_json::to_string(&c).unwrap()).unwrap();
    let out = bin().args(["analyze", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("alpha"));
}
