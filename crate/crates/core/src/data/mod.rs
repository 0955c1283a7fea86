//! Road networks, ST-units, synthetic worlds and dataset plumbing.

pub mod dataset;
pub mod io;
pub mod network;
pub mod split;
pub mod store;
pub mod synth;
pub mod units;

pub use dataset::{Dataset, DatasetConfig, Standardizer, TripSummary, WorldStats};
pub use network::{load_road_network, RoadNetwork, RoadSegment, STATIC_DIM};
pub use split::{split_dataset, DatasetSplit, SplitName, SplitRatios};
pub use store::{TrafficState, TrafficStateStore, DYNAMIC_DIM};
pub use synth::{generate_synthetic_world, World, WorldConfig};
pub use units::{
    build_st_unit, compute_intervals, SequenceKind, StUnit, StUnitSequence, TemporalFeatures,
    Trajectory, TrajectoryPoint,
};
