//! Seeded fixtures shared by the benchmarks in `benches/`.

use qtnn_core::binary::RbmParams;
use qtnn_core::datasets::{gen_border_ownership, BorderConfig, BorderOwnershipPair, ShapeKind};
use qtnn_core::grid::{estimate_noise, GmrfParams};
use qtnn_core::QueryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rbm_case(visible: usize, hidden: usize, seed: u64) -> (RbmParams, Vec<u8>, QueryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = RbmParams::init(visible, hidden, &mut rng);
    let v = (0..visible).map(|_| rng.random_range(0..2)).collect();
    let q = QueryMask::new((0..visible).map(|_| rng.random_bool(0.5)).collect());
    (params, v, q)
}

pub fn gmrf_case(side: usize, n_clones: usize, seed: u64) -> (GmrfParams, BorderOwnershipPair) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = gen_border_ownership(8, &BorderConfig::new(side, side, ShapeKind::Rectangle), &mut rng).expect("valid generator settings");
    let noise = estimate_noise(&pairs).expect("rectangles contain every label");
    let params = GmrfParams::init(n_clones, noise, &mut rng);
    (params, pairs[0].clone())
}
