use itn_core::gradcheck::{registry, run_all};

#[test]
fn every_case_passes() {
    let reports = run_all(7, None).unwrap();
    assert_eq!(reports.len(), registry().len());
    for r in &reports {
        println!("{:<32} rel {:.3e} abs {:.3e} coords {}", r.name, r.worst_rel, r.worst_abs, r.coords);
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failed: {:?}", failed);
}
