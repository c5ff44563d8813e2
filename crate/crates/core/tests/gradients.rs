mod common;

use common::{grad_suite, GRAD_TOL};

#[test]
fn every_case_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, run) in grad_suite() {
        let r = run().unwrap_or_else(|e| panic!("{name}: {e}"));
        println!("{name:40} checked {:5} max rel err {:.2e}", r.checked, r.max_rel_error);
        if r.max_rel_error >= GRAD_TOL {
            failures.push(format!("{name}: {:.3e} at {:?}", r.max_rel_error, r.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
