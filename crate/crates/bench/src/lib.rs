//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uavckm::ckm::{collect_dataset, train, CkmHyper, CollectConfig};
use uavckm::geometry::generate_world;
use uavckm::{CkmModel, LinkBudgetParams, Vec3, World, WorldConfig};

pub fn desk_world() -> Arc<World> {
    Arc::new(generate_world(1, &WorldConfig::desk()).expect("desk world"))
}

/// Random UAV/user segment pairs inside the world.
pub fn segments(world: &World, n: usize, seed: u64) -> Vec<(Vec3, Vec3)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (world.uav_min(), world.uav_max());
    (0..n)
        .map(|_| {
            let a = Vec3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            );
            let b = Vec3::new(
                rng.random_range(0.0..=world.bounds.x),
                rng.random_range(0.0..=world.bounds.y),
                rng.random_range(0.0..=20.0),
            );
            (a, b)
        })
        .collect()
}

/// A quickly trained desk CKM; accuracy is irrelevant for timing.
pub fn small_ckm(world: &World) -> CkmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = CollectConfig {
        samples: 512,
        ..CollectConfig::desk()
    };
    let data = collect_dataset(world, &LinkBudgetParams::desk(), &cfg, &mut rng).expect("collect");
    let hyper = CkmHyper {
        epochs: 1,
        ..CkmHyper::desk()
    };
    train(&data, &hyper).expect("train").0
}
