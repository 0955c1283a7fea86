//! Seeded synthetic road-network worlds.
//!
//! Segments sit on a ring (which keeps the graph strongly connected) with
//! extra edges to nearby segments. Users own contiguous home regions of the
//! ring and start their walks there. Travel times follow segment length over
//! speed limit scaled by a sinusoidal daily congestion profile, and traffic
//! states are aggregated from the resulting traversals.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{RoadNetwork, RoadSegment};
use super::store::{TrafficState, TrafficStateStore, DEFAULT_SLICE_SECONDS};
use super::units::{Trajectory, TrajectoryPoint};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_segments: usize,
    pub extra_edges_per_segment: usize,
    pub num_trajectories: usize,
    pub min_trajectory_len: usize,
    pub max_trajectory_len: usize,
    pub num_users: usize,
    /// 2024-01-01T00:00:00Z by default.
    pub start_epoch_s: i64,
    pub days: usize,
    pub slice_length_s: i64,
    /// Leading slices in which no trip departs; they give the dynamic
    /// encoder a full history window.
    pub warmup_slices: usize,
    pub dynamic_features: bool,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_segments: 50,
            extra_edges_per_segment: 2,
            num_trajectories: 2000,
            min_trajectory_len: 10,
            max_trajectory_len: 30,
            num_users: 10,
            start_epoch_s: 1_704_067_200,
            days: 3,
            slice_length_s: DEFAULT_SLICE_SECONDS,
            warmup_slices: 6,
            dynamic_features: true,
            max_retries: 100,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_segments == 0 {
            return bad("num_segments must be positive");
        }
        if self.min_trajectory_len < 2 || self.min_trajectory_len > self.max_trajectory_len {
            return bad("trajectory length range must satisfy 2 <= min <= max");
        }
        if self.num_users == 0 || self.num_users > self.num_segments {
            return bad("num_users must be in [1, num_segments]");
        }
        if self.slice_length_s <= 0 || 86_400 % self.slice_length_s != 0 {
            return bad("slice_length_s must divide a day");
        }
        if self.days == 0 {
            return bad("days must be positive");
        }
        if self.start_epoch_s < 0 || self.start_epoch_s % self.slice_length_s != 0 {
            return bad("start_epoch_s must be a non-negative slice boundary");
        }
        Ok(())
    }

    pub fn slices_per_day(&self) -> i64 {
        86_400 / self.slice_length_s
    }

    pub fn first_slice(&self) -> i64 {
        self.start_epoch_s / self.slice_length_s
    }

    pub fn num_slices(&self) -> i64 {
        self.days as i64 * self.slices_per_day()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub network: RoadNetwork,
    pub trajectories: Vec<Trajectory>,
    pub store: TrafficStateStore,
}

impl World {
    pub fn user_of_segment(&self, segment: usize) -> usize {
        home_user(segment, self.network.num_segments(), self.config.num_users)
    }
}

fn home_user(segment: usize, n: usize, users: usize) -> usize {
    segment * users / n
}

/// Daily congestion multiplier in `[0.45, 0.95]`.
pub fn congestion_factor(phase: f64, timestamp_s: i64) -> f64 {
    let day_frac = timestamp_s.rem_euclid(86_400) as f64 / 86_400.0;
    0.7 + 0.25 * (2.0 * std::f64::consts::PI * 2.0 * day_frac + phase).sin()
}

/// Traversal speed in km/h from a segment length and integer travel time.
pub fn traversal_speed_kmh(length_m: f64, travel_s: i64) -> f64 {
    length_m / travel_s as f64 * 3.6
}

pub fn generate_synthetic_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = generate_network(config, &mut rng)?;
    let n = network.num_segments();
    let phases: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    let first_slice = config.first_slice();
    let depart_lo = config.start_epoch_s + config.warmup_slices as i64 * config.slice_length_s;
    // Trips take at most a few hours; keep departures clear of the horizon.
    let depart_hi = config.start_epoch_s + config.num_slices() * config.slice_length_s - 4 * 3600;
    if depart_hi <= depart_lo {
        return Err(Error::Config("time span too short for warm-up and trip margin".into()));
    }

    let mut trajectories = Vec::with_capacity(config.num_trajectories);
    for traj_id in 0..config.num_trajectories {
        let user = traj_id % config.num_users;
        let home: Vec<usize> = (0..n)
            .filter(|&s| home_user(s, n, config.num_users) == user)
            .collect();
        let target_len = rng.random_range(config.min_trajectory_len..=config.max_trajectory_len);
        let path = random_walk(&network, &home, target_len, config.max_retries, &mut rng)?;
        let mut t = rng.random_range(depart_lo..depart_hi);
        let mut points = Vec::with_capacity(path.len());
        for &seg in &path {
            points.push(TrajectoryPoint {
                segment_id: seg,
                timestamp_s: t,
            });
            let s = &network.segments()[seg];
            let speed_ms = s.speed_limit_kmh / 3.6
                * congestion_factor(phases[seg], t)
                * rng.random_range(0.85..1.15);
            t += ((s.length_m / speed_ms).round() as i64).max(1);
        }
        trajectories.push(Trajectory {
            traj_id,
            user_id: user,
            label: Some(user),
            points,
        });
    }

    let store = if config.dynamic_features {
        aggregate_traffic(&network, &trajectories, config.slice_length_s, first_slice, config.num_slices())?
    } else {
        TrafficStateStore::absent(config.slice_length_s)
    };
    Ok(World {
        config: WorldConfig {
            seed,
            ..config.clone()
        },
        network,
        trajectories,
        store,
    })
}

fn generate_network(config: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<RoadNetwork> {
    let n = config.num_segments;
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    if n > 1 {
        for (i, nbrs) in out.iter_mut().enumerate() {
            nbrs.push((i + 1) % n);
        }
    }
    // Extra edges reach a short distance along the ring in either direction.
    let reach = 4.min(n.saturating_sub(1));
    for i in 0..n {
        let mut attempts = 0;
        let mut added = 0;
        while added < config.extra_edges_per_segment && attempts < 20 && reach > 1 {
            attempts += 1;
            let offset = rng.random_range(1..=reach) as isize * if rng.random_bool(0.5) { 1 } else { -1 };
            let j = (i as isize + offset).rem_euclid(n as isize) as usize;
            if j != i && !out[i].contains(&j) {
                out[i].push(j);
                added += 1;
            }
        }
        out[i].sort_unstable();
    }
    let segments = out
        .into_iter()
        .enumerate()
        .map(|(i, out_neighbors)| {
            let road_type = rng.random_range(0..4u32);
            RoadSegment {
                segment_id: i,
                road_type,
                length_m: rng.random_range(100.0..1000.0f64).round(),
                lanes: rng.random_range(1..=4),
                speed_limit_kmh: [30.0, 50.0, 70.0, 90.0][road_type as usize],
                out_neighbors,
                in_degree: 0,
            }
        })
        .collect();
    RoadNetwork::from_segments(segments, false)
}

fn random_walk(
    net: &RoadNetwork,
    starts: &[usize],
    len: usize,
    max_retries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    for _ in 0..=max_retries {
        let mut path = vec![starts[rng.random_range(0..starts.len())]];
        while path.len() < len {
            let nbrs = &net.segments()[*path.last().unwrap()].out_neighbors;
            if nbrs.is_empty() {
                break;
            }
            path.push(nbrs[rng.random_range(0..nbrs.len())]);
        }
        if path.len() == len {
            return Ok(path);
        }
    }
    Err(Error::Generation(format!(
        "no walk of length {len} found after {max_retries} retries"
    )))
}

/// Dense store over `[first_slice, first_slice + num_slices)`. A traversal
/// of point `l` (entry `tau_l`, exit `tau_{l+1}`) contributes its speed and
/// one inflow to its entry slice and one outflow to its exit slice. Cells
/// without traversals hold zeros.
pub fn aggregate_traffic(
    net: &RoadNetwork,
    trajectories: &[Trajectory],
    slice_length_s: i64,
    first_slice: i64,
    num_slices: i64,
) -> Result<TrafficStateStore> {
    #[derive(Default)]
    struct Acc {
        speed_sum: f64,
        inflow: u32,
        outflow: u32,
    }
    let mut acc: BTreeMap<(usize, i64), Acc> = BTreeMap::new();
    for traj in trajectories {
        for w in traj.points.windows(2) {
            let seg = net.segment(w[0].segment_id)?;
            let travel = w[1].timestamp_s - w[0].timestamp_s;
            let entry_slice = w[0].timestamp_s.div_euclid(slice_length_s);
            let exit_slice = w[1].timestamp_s.div_euclid(slice_length_s);
            let e = acc.entry((seg.segment_id, entry_slice)).or_default();
            e.speed_sum += traversal_speed_kmh(seg.length_m, travel);
            e.inflow += 1;
            acc.entry((seg.segment_id, exit_slice)).or_default().outflow += 1;
        }
    }
    let mut store = TrafficStateStore::new(slice_length_s);
    for seg in 0..net.num_segments() {
        for slice in first_slice..first_slice + num_slices {
            let state = match acc.get(&(seg, slice)) {
                Some(a) => TrafficState {
                    avg_speed: if a.inflow > 0 {
                        a.speed_sum / f64::from(a.inflow)
                    } else {
                        0.0
                    },
                    inflow: a.inflow,
                    outflow: a.outflow,
                },
                None => TrafficState {
                    avg_speed: 0.0,
                    inflow: 0,
                    outflow: 0,
                },
            };
            store.insert(seg, slice, state)?;
        }
    }
    if let Some((&(seg, slice), _)) = acc
        .iter()
        .find(|(&(_, s), _)| s < first_slice || s >= first_slice + num_slices)
    {
        return Err(Error::Generation(format!(
            "traversal on segment {seg} falls outside the world horizon (slice {slice})"
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            num_segments: 20,
            num_trajectories: 60,
            num_users: 4,
            days: 1,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn default_world_walks_respect_adjacency() {
        let cfg = WorldConfig {
            num_trajectories: 500,
            ..WorldConfig::default()
        };
        let world = generate_synthetic_world(&cfg, 3).unwrap();
        assert_eq!(world.trajectories.len(), 500);
        for t in &world.trajectories {
            assert!((10..=30).contains(&t.points.len()));
            for w in t.points.windows(2) {
                assert!(world.network.is_adjacent(w[0].segment_id, w[1].segment_id));
                assert!(w[1].timestamp_s > w[0].timestamp_s);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic_world(&small(), 11).unwrap();
        let b = generate_synthetic_world(&small(), 11).unwrap();
        let c = generate_synthetic_world(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.trajectories, c.trajectories);
    }

    #[test]
    fn absent_dynamic_modality() {
        let cfg = WorldConfig {
            dynamic_features: false,
            ..small()
        };
        let w = generate_synthetic_world(&cfg, 1).unwrap();
        assert!(w.store.is_absent());
    }

    #[test]
    fn users_start_in_home_region() {
        let w = generate_synthetic_world(&small(), 5).unwrap();
        for t in &w.trajectories {
            assert_eq!(w.user_of_segment(t.points[0].segment_id), t.user_id);
        }
    }

    #[test]
    fn dead_end_graph_fails_after_retries() {
        let segs = vec![
            RoadSegment {
                segment_id: 0,
                road_type: 0,
                length_m: 100.0,
                lanes: 1,
                speed_limit_kmh: 30.0,
                out_neighbors: vec![1],
                in_degree: 0,
            },
            RoadSegment {
                segment_id: 1,
                road_type: 0,
                length_m: 100.0,
                lanes: 1,
                speed_limit_kmh: 30.0,
                out_neighbors: vec![],
                in_degree: 0,
            },
        ];
        let net = RoadNetwork::from_segments(segs, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_walk(&net, &[0], 5, 10, &mut rng),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn congestion_range() {
        for t in (0..86_400).step_by(300) {
            let c = congestion_factor(1.3, t);
            assert!((0.45..=0.95).contains(&c));
        }
    }
}
