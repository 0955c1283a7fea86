use crate::data::{generate_synthetic_world, Dataset, DatasetConfig, World, WorldConfig};

pub fn small_world(segments: usize, dynamic: bool) -> (World, Dataset) {
    let cfg = WorldConfig {
        num_segments: segments,
        num_trajectories: 30,
        min_trajectory_len: 4,
        max_trajectory_len: 8,
        num_users: 2,
        days: 1,
        dynamic_features: dynamic,
        ..WorldConfig::default()
    };
    let world = generate_synthetic_world(&cfg, 5).unwrap();
    let ds = Dataset::build(&world, &DatasetConfig::default()).unwrap();
    (world, ds)
}
