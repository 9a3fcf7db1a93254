use std::collections::HashSet;

use iovstore_core::query::ConditionsRead;
use iovstore_harness::experiments::{self, DedupParams, RobustnessParams, SpeedupParams};
use iovstore_harness::gen::{gen_store, StorePreset, StoreSpec};
use iovstore_harness::scenario::ScenarioConfig;
use iovstore_harness::workload::{dedup_trace, gen_workload, WorkloadProfile};
use iovstore_harness::{
    bundled_scenario, bundled_scenarios, fluctuation_ratio, run_scenario, ArrivalModel, HarnessError,
    ScenarioReport,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn generated_stores_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let spec = StoreSpec::scaled(StorePreset::Reco, 0.01);
    let ga = gen_store(a.path(), &spec, 7).unwrap();
    let gb = gen_store(b.path(), &spec, 7).unwrap();
    let gc = gen_store(c.path(), &spec, 8).unwrap();
    assert_eq!(ga.store.state_digest().unwrap(), gb.store.state_digest().unwrap());
    assert_ne!(ga.store.state_digest().unwrap(), gc.store.state_digest().unwrap());
    assert_eq!(ga.report, gb.report);
}

#[test]
fn preset_counts() {
    let d = tempfile::tempdir().unwrap();
    let m = gen_store(&d.path().join("m"), &StoreSpec::new(StorePreset::Minimal), 1).unwrap();
    assert_eq!((m.report.folders, m.report.records), (1, 1));

    let g = gen_store(&d.path().join("g"), &StoreSpec::scaled(StorePreset::Geometry, 0.01), 1).unwrap();
    assert_eq!(g.report.folders, 872);
    assert_eq!(g.report.records, 872 + 872usize.div_ceil(7));
    let folders = g.store.with_state(|s| s.folders.len());
    assert_eq!(folders, 872);

    let r = gen_store(&d.path().join("r"), &StoreSpec::scaled(StorePreset::Reco, 0.01), 1).unwrap();
    assert_eq!(r.report.partitions, 30);
    assert_eq!(r.report.folders, 210);

    let mc = gen_store(&d.path().join("mc"), &StoreSpec::scaled(StorePreset::Mc, 0.01), 1).unwrap();
    assert_eq!(mc.report.externals, 25);
    let dump = mc.store.dump().unwrap();
    let external_rows = dump.rows.iter().filter(|r| !r.record.payload.is_inline()).count();
    assert_eq!(external_rows, 25);
}

#[test]
fn payload_bytes_match_store_contents() {
    let d = tempfile::tempdir().unwrap();
    let g = gen_store(d.path(), &StoreSpec::scaled(StorePreset::Geometry, 0.01), 3).unwrap();
    let dump = g.store.dump().unwrap();
    let stored: u64 = dump.rows.iter().map(|r| r.record.payload.size).sum();
    assert_eq!(stored, g.report.payload_bytes);
    let target = (33_000_000.0f64 * 0.01) as u64;
    let err = stored.abs_diff(target);
    assert!(err < 2000, "{stored} vs {target}");
}

#[test]
fn workload_hits_byte_target_and_oracle_digests() {
    let d = tempfile::tempdir().unwrap();
    let scale = 0.05;
    let g = gen_store(d.path(), &StoreSpec::scaled(StorePreset::Reco, scale), 11).unwrap();
    let profile = WorkloadProfile::preset("lhcb-job").unwrap().scaled(scale);
    let trace = gen_workload(&g, &profile, &ArrivalModel::Poisson { rate: 2.0 }, 3, 5).unwrap();
    assert_eq!(trace.len(), 3 * 2500);
    let target = profile.target_bytes.unwrap() as f64;
    for (job, bytes) in trace.job_bytes().into_iter().enumerate() {
        let err = (bytes as f64 - target).abs() / target;
        assert!(err <= 0.02 + 1e-9, "job {job}: {bytes} vs {target}");
    }
    // Oracle digests are reproducible from the store.
    for case in trace.cases.iter().take(200) {
        let rs = g.store.read_query(&case.query).unwrap();
        assert_eq!(iovstore_core::integrity::ContentDigest::of(&rs.encode()), case.digest);
        assert_eq!(rs.payload_bytes(), case.bytes);
    }
    let times: Vec<f64> = trace.events.iter().map(|e| e.t).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn unreachable_byte_target_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let g = gen_store(d.path(), &StoreSpec::scaled(StorePreset::Reco, 0.01), 11).unwrap();
    let mut profile = WorkloadProfile::preset("lhcb-job").unwrap();
    profile.queries = 10;
    let err = gen_workload(&g, &profile, &ArrivalModel::Poisson { rate: 1.0 }, 1, 1).unwrap_err();
    assert!(matches!(err, HarnessError::UnreachableByteTarget { .. }), "{err}");
}

#[test]
fn dedup_trace_uses_every_distinct_query() {
    let d = tempfile::tempdir().unwrap();
    let g = gen_store(d.path(), &StoreSpec::scaled(StorePreset::Reco, 0.01), 2).unwrap();
    let trace = dedup_trace(&g, 120, 3000, 7, 9).unwrap();
    assert_eq!(trace.cases.len(), 120);
    assert_eq!(trace.len(), 3000);
    let used: HashSet<u32> = trace.events.iter().map(|e| e.case).collect();
    assert_eq!(used.len(), 120);
    let paths: HashSet<&str> = trace.cases.iter().map(|c| c.path.as_str()).collect();
    assert_eq!(paths.len(), 120);
    assert!(dedup_trace(&g, 10, 5, 1, 1).is_err());
}

fn oracle_ratio(counts: &[u64]) -> f64 {
    let n = counts.len() as f64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let x = c as f64;
        let delta = x - mean;
        mean += delta / (i as f64 + 1.0);
        m2 += delta * (x - mean);
    }
    if mean == 0.0 {
        return 0.0;
    }
    (m2 / (n - 1.0)).sqrt() / mean.sqrt()
}

#[test]
fn fluctuation_ratio_edges() {
    assert!(matches!(
        fluctuation_ratio(&[1; 29]),
        Err(HarnessError::InsufficientData { bins: 29, .. })
    ));
    assert_eq!(fluctuation_ratio(&[0; 40]).unwrap(), 0.0);
    assert_eq!(fluctuation_ratio(&[5; 40]).unwrap(), 0.0);
}

#[test]
fn arrival_models_have_calibrated_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = ArrivalModel::Poisson { rate: 50.0 }.bin_counts(3000, 1.0, &mut rng).unwrap();
    let r = fluctuation_ratio(&p).unwrap();
    assert!((r - 1.0).abs() < 0.1, "{r}");
    let o = ArrivalModel::Overdispersed { rate: 500.0, k: 5.0 }.bin_counts(3000, 1.0, &mut rng).unwrap();
    let r = fluctuation_ratio(&o).unwrap();
    assert!((r - 5.0).abs() < 0.5, "{r}");
    let times = ArrivalModel::Poisson { rate: 3.0 }.arrival_times(100, 1.0, &mut rng).unwrap();
    assert_eq!(times.len(), 100);
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
    assert!(ArrivalModel::Overdispersed { rate: 1.0, k: 0.5 }.validate().is_err());
    assert!(ArrivalModel::Poisson { rate: 0.0 }.validate().is_err());
}

proptest! {
    #[test]
    fn ratio_matches_streaming_oracle(counts in proptest::collection::vec(0u64..10_000, 30..300)) {
        let a = fluctuation_ratio(&counts).unwrap();
        let b = oracle_ratio(&counts);
        prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn bin_counts_are_seed_deterministic(seed in any::<u64>(), k in 1.0f64..20.0) {
        let m = ArrivalModel::Overdispersed { rate: 200.0, k };
        let a = m.bin_counts(50, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = m.bin_counts(50, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn bundled_scenarios_parse() {
    let names = bundled_scenarios();
    for required in ["frontier-speedup", "slice-attach", "empty"] {
        assert!(names.contains(&required));
    }
    for name in names {
        let c = bundled_scenario(name).unwrap();
        assert_eq!(c.name, name);
        assert_eq!(c.experiment.kind(), name);
    }
    assert!(bundled_scenario("nope").is_err());
}

#[test]
fn scenario_validation_precedes_side_effects() {
    let unknown = "version = 1\nname = \"x\"\nseed = 1\ncolour = 2\n[experiment]\nkind = \"empty\"\n";
    assert!(matches!(ScenarioConfig::parse(unknown), Err(HarnessError::InvalidConfig(_))));
    let unknown_param = "version = 1\nname = \"x\"\nseed = 1\n[experiment]\nkind = \"dedup\"\nwarp = 9\n";
    assert!(matches!(ScenarioConfig::parse(unknown_param), Err(HarnessError::InvalidConfig(_))));
    let version = "version = 2\nname = \"x\"\nseed = 1\n[experiment]\nkind = \"empty\"\n";
    assert!(matches!(ScenarioConfig::parse(version), Err(HarnessError::InvalidConfig(_))));

    let mut bad = bundled_scenario("dedup").unwrap();
    if let iovstore_harness::scenario::Experiment::Dedup(p) = &mut bad.experiment {
        p.total = 1;
    }
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    assert!(run_scenario(&bad, Some(&work)).is_err());
    assert!(!work.exists());
}

#[test]
fn empty_scenario_report() {
    let config = bundled_scenario("empty").unwrap();
    let report = run_scenario(&config, None).unwrap();
    assert!(report.passed());
    assert_eq!(report.get("replay.queries"), Some("0"));
    let machine = report.to_machine();
    let keys: Vec<&str> = machine.lines().map(|l| l.split_once('=').unwrap().0).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(machine.contains("result=pass\n"));
    assert!(report.to_text().contains("result: PASS"));
}

#[test]
fn small_speedup_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = SpeedupParams {
        store_scale: 0.02,
        profile: "lhcb-job".into(),
        ..SpeedupParams::default()
    };
    let mut report = ScenarioReport::new("t", "frontier-speedup", 4);
    experiments::frontier_speedup(&p, dir.path(), 4, &mut report).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert_eq!(report.get("warm.origin-requests"), Some("0"));
    assert_eq!(report.get("warm.hit-ratio"), Some("1.0000"));
}

#[test]
fn small_dedup_and_robustness_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut report = ScenarioReport::new("d", "dedup", 5);
    let p = DedupParams {
        store_scale: 0.01,
        distinct: 60,
        total: 3000,
        jobs: 12,
        parallelism: 6,
    };
    experiments::dedup(&p, &dir.path().join("d"), 5, &mut report).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert_eq!(report.get("origin.requests"), Some("60"));

    let mut report = ScenarioReport::new("r", "robustness", 6);
    let p = RobustnessParams {
        queries: 20_000,
        distinct: 500,
        jobs: 40,
        ..RobustnessParams::default()
    };
    experiments::robustness(&p, &dir.path().join("r"), 6, &mut report).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert_eq!(report.get("client.wrong-results"), Some("0"));
}
