mod common;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in common::prims::cases() {
        let err = common::prims::check_case(&case, 10).unwrap();
        if err > 1e-4 {
            failures.push(format!("{}: {err:.3e}", case.name));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
