mod common;

#[test]
fn kernels_match_brute_force_oracles() {
    let results = common::oracle_suite(1000, 42);
    for o in &results {
        assert!(o.ok, "{}: {}", o.name, o.detail);
    }
    assert_eq!(results.len(), 6);
}
