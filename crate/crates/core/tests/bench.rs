use fhesql::bench::{run_benchmarks, stress_run, Engine, Scenario, StressConfig, WorkloadSpec};

#[test]
fn stress_run_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = StressConfig::default();
    assert!(cfg.total_ops() >= 10_000);
    let r = stress_run(dir.path(), &cfg).unwrap();
    println!("{r:?}");
    assert!(r.is_clean(), "{r:?}");
    assert_eq!(r.writes, (cfg.writers * cfg.writes_per_writer) as u64);
    assert_eq!(r.reads, (cfg.readers * cfg.reads_per_reader) as u64);
    assert!(r.reclaimed_bytes > 0);
}

#[test]
fn harness_runs_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let spec = WorkloadSpec::quick();
    let t = std::time::Instant::now();
    let report = run_benchmarks(dir.path(), &Scenario::ALL, &[Engine::Blob, Engine::Kv], &spec).unwrap();
    println!("{}\n{:?}", report.to_table(), t.elapsed());
    assert!(report.rows.iter().all(|r| r.error.is_none() && r.errors == 0));
    for c in report.directional_checks() {
        println!("{c:?}");
    }
}
