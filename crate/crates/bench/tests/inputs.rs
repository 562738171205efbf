use std::collections::HashSet;

use span_bench::random_map;

#[test]
fn random_map_hits_the_requested_occupancy_on_the_grid() {
    for (side, occ, want) in [(16, 0.25, 64), (16, 1.0, 256), (8, 0.0, 1)] {
        let m = random_map(side, occ, 3, 7);
        assert_eq!(m.len(), want);
        assert_eq!(m.feature_dim(), 3);
        let distinct: HashSet<_> = m.coords().iter().collect();
        assert_eq!(distinct.len(), want);
        assert!(m.coords().iter().all(|c| (c.x as usize) < side && (c.y as usize) < side));
    }
}

#[test]
fn random_map_is_seeded() {
    assert_eq!(random_map(32, 0.1, 4, 1), random_map(32, 0.1, 4, 1));
    assert_ne!(random_map(32, 0.1, 4, 1), random_map(32, 0.1, 4, 2));
}
