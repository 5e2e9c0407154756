use gmmdo_core::io::{read_manifest, MANIFEST_FILE, METRICS_FILE};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gmmdo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmmdo"))
        .args(args)
        .env_remove("GMMDO_THREADS")
        .output()
        .expect("binary runs")
}

fn small_run(out: &Path, seed: &str) -> Output {
    gmmdo(&[
        "run",
        "--experiment",
        "1",
        "--scale",
        "0.2",
        "--n-r",
        "60",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn runs_are_reproducible_and_manifested() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = small_run(d, "5");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [METRICS_FILE, "kde.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = read_manifest(&a).unwrap();
    assert_eq!(m.status, "completed");
    assert_eq!(m.seed, 5);
    assert_eq!((m.config.domain.nx, m.config.domain.nz), (60, 6));
    assert_eq!(m.config.stochastic.n_r, 60);
    for entry in &m.files {
        assert!(a.join(&entry.path).exists(), "{}", entry.path);
    }

    let c = tmp.path().join("c");
    assert!(small_run(&c, "6").status.success());
    assert_ne!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(c.join(METRICS_FILE)).unwrap());
}

#[test]
fn scale_shrinks_grid_and_ensemble() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let o = gmmdo(&["truth", "--experiment", "2", "--scale", "0.5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_manifest(&out).unwrap();
    assert_eq!((m.config.domain.nx, m.config.domain.nz), (150, 15));
    assert_eq!(m.config.stochastic.n_r, 5000);
    assert_eq!(m.scale, 0.5);
    assert!(m.files.iter().any(|f| f.path.starts_with("truth_")));
}

#[test]
fn configuration_errors_exit_one_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--experiment", "9", "--out"],
        vec!["run", "--config", "/nonexistent/cfg.toml", "--out"],
        vec!["run", "--threads", "0", "--out"],
        vec!["run", "--bogus", "--out"],
    ];
    for mut args in cases {
        args.push(out.to_str().unwrap());
        let o = gmmdo(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.join(MANIFEST_FILE).exists());
    }

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "this is = = not toml").unwrap();
    let o = gmmdo(&["run", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn self_checks_pass() {
    let o = gmmdo(&["verify", "--seed", "3"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(text.lines().filter(|l| !l.is_empty()).all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn plot_emits_tables_and_script() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(small_run(&run, "2").status.success());
    let plots = tmp.path().join("plots");
    let o = gmmdo(&["plot", "--report", run.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = fs::read_dir(&plots)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.ends_with(".py")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("rmse_norm")), "{names:?}");
}
