use gmmdo_core::verify::run_all;

#[test]
fn every_self_check_passes() {
    let results = run_all(7).unwrap();
    for r in &results {
        println!("{} {} {}", r.name, if r.passed { "ok" } else { "FAILED" }, r.detail);
    }
    assert!(results.iter().all(|r| r.passed));
}
