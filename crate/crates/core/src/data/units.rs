//! ST-units and the two sequence modalities built from them.

use serde::{Deserialize, Serialize};

use super::network::{RoadNetwork, STATIC_DIM};
use super::store::{TrafficStateStore, DYNAMIC_DIM};
use crate::error::{Error, Result};

/// Timestamp features `iota`: day of week (Monday = 0), minute of day,
/// second of minute, plus the slice containing the instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalFeatures {
    pub timestamp_s: i64,
    pub slice_index: i64,
    pub day_of_week: u8,
    pub minute_of_day: u16,
    pub second_of_minute: u8,
}

impl TemporalFeatures {
    pub fn from_timestamp(timestamp_s: i64, slice_length_s: i64) -> Self {
        let days = timestamp_s.div_euclid(86_400);
        let second_of_day = timestamp_s.rem_euclid(86_400);
        Self {
            timestamp_s,
            slice_index: timestamp_s.div_euclid(slice_length_s),
            // 1970-01-01 was a Thursday.
            day_of_week: (days + 3).rem_euclid(7) as u8,
            minute_of_day: (second_of_day / 60) as u16,
            second_of_minute: (second_of_day % 60) as u8,
        }
    }

    pub fn as_vector(&self) -> [f64; 3] {
        [
            f64::from(self.day_of_week),
            f64::from(self.minute_of_day),
            f64::from(self.second_of_minute),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StUnit {
    pub segment_id: usize,
    pub static_features: [f64; STATIC_DIM],
    pub dynamic: Option<[f64; DYNAMIC_DIM]>,
    pub temporal: TemporalFeatures,
}

pub fn build_st_unit(
    net: &RoadNetwork,
    store: &TrafficStateStore,
    segment_id: usize,
    timestamp_s: i64,
) -> Result<StUnit> {
    if timestamp_s < 0 {
        return Err(Error::Input(format!("negative timestamp {timestamp_s}")));
    }
    let segment = net.segment(segment_id)?;
    let temporal = TemporalFeatures::from_timestamp(timestamp_s, store.slice_length_s());
    let dynamic = store
        .lookup(segment_id, temporal.slice_index)?
        .map(|s| s.to_vector());
    Ok(StUnit {
        segment_id,
        static_features: segment.static_features(),
        dynamic,
        temporal,
    })
}

/// `delta[0] = 0`, `delta[l] = tau_l - tau_{l-1}`.
pub fn compute_intervals(timestamps: &[i64]) -> Result<Vec<i64>> {
    if timestamps.is_empty() {
        return Err(Error::Input("cannot compute intervals of an empty sequence".into()));
    }
    let mut out = Vec::with_capacity(timestamps.len());
    out.push(0);
    for (idx, w) in timestamps.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(Error::Ordering {
                index: idx + 1,
                previous: w[0],
                next: w[1],
            });
        }
        out.push(w[1] - w[0]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Trajectory,
    TrafficSeries,
}

impl std::fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SequenceKind::Trajectory => "trajectory",
            SequenceKind::TrafficSeries => "traffic_series",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StUnitSequence {
    pub id: usize,
    pub kind: SequenceKind,
    pub units: Vec<StUnit>,
    pub segment_ids: Vec<usize>,
    pub label: Option<usize>,
    pub intervals: Vec<i64>,
}

impl StUnitSequence {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.units.iter().map(|u| u.temporal.timestamp_s).collect()
    }

    /// Subsequence over `positions` (in order); intervals are recomputed.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let units: Vec<StUnit> = positions
            .iter()
            .map(|&p| {
                self.units
                    .get(p)
                    .cloned()
                    .ok_or_else(|| Error::Index(format!("position {p} out of range")))
            })
            .collect::<Result<_>>()?;
        let ts: Vec<i64> = units.iter().map(|u| u.temporal.timestamp_s).collect();
        Ok(Self {
            id: self.id,
            kind: self.kind,
            segment_ids: units.iter().map(|u| u.segment_id).collect(),
            intervals: compute_intervals(&ts)?,
            units,
            label: self.label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub segment_id: usize,
    pub timestamp_s: i64,
}

/// One line of `trajectories.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub traj_id: usize,
    pub user_id: usize,
    pub label: Option<usize>,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn to_sequence(&self, net: &RoadNetwork, store: &TrafficStateStore) -> Result<StUnitSequence> {
        let ts: Vec<i64> = self.points.iter().map(|p| p.timestamp_s).collect();
        let intervals = compute_intervals(&ts)?;
        if let Some(pos) = intervals.iter().skip(1).position(|&d| d == 0) {
            return Err(Error::Ordering {
                index: pos + 1,
                previous: ts[pos],
                next: ts[pos + 1],
            });
        }
        let units = self
            .points
            .iter()
            .map(|p| build_st_unit(net, store, p.segment_id, p.timestamp_s))
            .collect::<Result<Vec<_>>>()?;
        Ok(StUnitSequence {
            id: self.traj_id,
            kind: SequenceKind::Trajectory,
            segment_ids: self.points.iter().map(|p| p.segment_id).collect(),
            units,
            label: self.label,
            intervals,
        })
    }

    /// Travelled distance in meters over segments with a recorded exit.
    pub fn distance_m(&self, net: &RoadNetwork) -> f64 {
        let n = self.points.len().saturating_sub(1);
        self.points[..n]
            .iter()
            .filter_map(|p| net.segment(p.segment_id).ok())
            .map(|s| s.length_m)
            .sum()
    }

    pub fn duration_s(&self) -> i64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.timestamp_s - a.timestamp_s,
            _ => 0,
        }
    }
}

/// Traffic state series of one segment over consecutive slices starting at
/// `first_slice`; each unit is stamped with its slice start time.
pub fn traffic_series(
    id: usize,
    net: &RoadNetwork,
    store: &TrafficStateStore,
    segment_id: usize,
    first_slice: i64,
    len: usize,
) -> Result<StUnitSequence> {
    let ts: Vec<i64> = (0..len as i64)
        .map(|k| (first_slice + k) * store.slice_length_s())
        .collect();
    let units = ts
        .iter()
        .map(|&t| build_st_unit(net, store, segment_id, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(StUnitSequence {
        id,
        kind: SequenceKind::TrafficSeries,
        segment_ids: vec![segment_id; len],
        units,
        label: None,
        intervals: compute_intervals(&ts)?,
    })
}
