mod support;

use support::gradcheck::{run_suite, REL_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let results = run_suite(0x5eed, 12);
    let mut failures = Vec::new();
    for r in &results {
        if r.worst_rel_err >= REL_TOL {
            failures.push(format!("{:?} {:?}: {:.3e}", r.kind, r.shapes, r.worst_rel_err));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
}
