use gmmdo_core::io::{
    config_to_toml, inventory, parse_config, read_manifest, read_report, read_snapshot, sha256_hex, write_manifest,
    write_report, write_snapshot, RunManifest, SnapshotMeta, KDE_FILE, METRICS_FILE, SCHEMA_VERSION,
};
use gmmdo_core::twin::KdeRecord;
use gmmdo_core::{Error, ExperimentConfig, MetricsReport};
use proptest::prelude::*;
use std::fs;

fn sample_report() -> MetricsReport {
    let mut rep = MetricsReport {
        experiment: 2,
        seed: 41,
        ..MetricsReport::default()
    };
    rep.push(5.0, "rmse:N", 0.1 + 0.2);
    rep.push(5.0, "rmse_norm:gamma0", f64::NAN);
    rep.push(7.0, "rmse:N", 1e-300);
    rep.push(7.0, "mean:Lambda", -3.6e12);
    rep.push(9.0, "k", 3.0);
    rep.kde.push(KdeRecord {
        time: 5.0,
        stage: "posterior".into(),
        param: "Lambda".into(),
        x: 1.0 / 3.0,
        density: 0.123456789012345678,
    });
    rep
}

fn same_bits(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn assert_same(a: &MetricsReport, b: &MetricsReport) {
    assert_eq!((a.experiment, a.seed), (b.experiment, b.seed));
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.series, y.series);
        assert!(same_bits(x.time, y.time) && same_bits(x.value, y.value), "{x:?} vs {y:?}");
    }
    assert_eq!(a.kde.len(), b.kde.len());
    for (x, y) in a.kde.iter().zip(&b.kde) {
        assert_eq!((&x.stage, &x.param), (&y.stage, &y.param));
        assert!(same_bits(x.time, y.time) && same_bits(x.x, y.x) && same_bits(x.density, y.density));
    }
}

#[test]
fn report_round_trips_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let rep = sample_report();
    write_report(&rep, dir.path()).unwrap();
    assert_same(&rep, &read_report(dir.path()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_values_round_trip(values in prop::collection::vec(any::<f64>(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let mut rep = MetricsReport::default();
        for (i, v) in values.iter().enumerate() {
            rep.push(i as f64 * 0.1, format!("s{}", i % 3), *v);
        }
        write_report(&rep, dir.path()).unwrap();
        let back = read_report(dir.path()).unwrap();
        for (x, y) in rep.records.iter().zip(&back.records) {
            prop_assert!(same_bits(x.value, y.value) || (x.value.is_nan() && y.value.is_nan()));
        }
    }
}

#[test]
fn truncated_report_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    write_report(&sample_report(), dir.path()).unwrap();
    let path = dir.path().join(METRICS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Drop the trailer and cut the last data row in half.
    let mut cut = lines[..lines.len() - 2].join("\n");
    cut.push('\n');
    cut.push_str(&lines[lines.len() - 2][..3]);
    fs::write(&path, cut).unwrap();
    match read_report(dir.path()) {
        Err(Error::Parse { record, message, .. }) => {
            assert_eq!(record, 5, "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }

    // Dropping only the trailer is also detected.
    write_report(&sample_report(), dir.path()).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let without: Vec<&str> = text.lines().filter(|l| !l.starts_with("# end")).collect();
    fs::write(&path, without.join("\n")).unwrap();
    assert!(matches!(read_report(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn schema_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_report(&sample_report(), dir.path()).unwrap();
    for file in [METRICS_FILE, KDE_FILE] {
        let path = dir.path().join(file);
        let text = fs::read_to_string(&path).unwrap();
        let bumped = text.replacen(&format!("schema={SCHEMA_VERSION}"), &format!("schema={}", SCHEMA_VERSION + 1), 1);
        assert_ne!(text, bumped);
        fs::write(&path, bumped).unwrap();
        assert!(matches!(read_report(dir.path()), Err(Error::Schema { .. })));
        fs::write(&path, text).unwrap();
    }
}

#[test]
fn snapshot_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(1).unwrap();
    cfg.domain.nx = 6;
    cfg.domain.nz = 4;
    let meta = SnapshotMeta::new("truth_003", 7.0, &["N", "P", "Z"], &cfg);
    let data: Vec<f64> = (0..72).map(|i| (i as f64).sin() / 7.0).collect();
    write_snapshot(dir.path(), "truth_003", &meta, &data).unwrap();
    let (m, d) = read_snapshot(dir.path(), "truth_003").unwrap();
    assert_eq!(m, meta);
    assert!(d.iter().zip(&data).all(|(a, b)| same_bits(*a, *b)));

    assert!(write_snapshot(dir.path(), "short", &meta, &data[..10]).is_err());
    let bin = dir.path().join("truth_003.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(read_snapshot(dir.path(), "truth_003"), Err(Error::Parse { .. })));
}

#[test]
fn manifest_round_trips_with_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_report(&sample_report(), dir.path()).unwrap();
    let inv = inventory(dir.path(), &files).unwrap();
    assert_eq!(inv[0].path, METRICS_FILE);
    assert_eq!(inv[0].sha256, sha256_hex(&fs::read(&files[0]).unwrap()));
    let manifest = RunManifest {
        schema: SCHEMA_VERSION,
        code_version: "0.1.0".into(),
        command: "run".into(),
        seed: 41,
        scale: 0.5,
        threads: 1,
        wall_seconds: 1.25,
        status: "completed".into(),
        files: inv,
        config: ExperimentConfig::preset(3).unwrap(),
    };
    write_manifest(dir.path(), &manifest).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
}

#[test]
fn checksum_matches_known_digest() {
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

#[test]
fn every_preset_config_round_trips_through_toml() {
    for id in 1..=4 {
        let cfg = ExperimentConfig::preset(id).unwrap();
        let text = config_to_toml(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}

#[test]
fn malformed_config_is_a_config_error() {
    let text = config_to_toml(&ExperimentConfig::preset(1).unwrap()).unwrap();
    let broken = text.replacen("nx = 300", "nx = \"wide\"", 1);
    assert_ne!(text, broken);
    assert!(parse_config(&broken).is_err());
}
