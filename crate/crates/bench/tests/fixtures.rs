use qtnn_bench::{gmrf_case, rbm_case};

#[test]
fn fixtures_are_seeded_and_well_formed() {
    let (a, x, q) = rbm_case(10, 5, 1);
    let (b, y, _) = rbm_case(10, 5, 1);
    assert_eq!(a, b);
    assert_eq!(x, y);
    assert_eq!((a.visible(), a.hidden(), q.len()), (10, 5, 10));

    let (params, pair) = gmrf_case(12, 8, 2);
    assert_eq!(params.n_states(), 10);
    assert_eq!(pair.image.len(), 144);
    assert!(pair.labels_valid());
}
