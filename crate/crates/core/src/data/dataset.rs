//! Sequences, splits and training-split statistics derived from a world.

use serde::{Deserialize, Serialize};

use super::network::STATIC_DIM;
use super::split::{split_dataset, DatasetSplit, SplitName, SplitRatios};
use super::store::DYNAMIC_DIM;
use super::synth::World;
use super::units::{traffic_series, StUnitSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub series_len: usize,
    pub series_stride: usize,
    pub split: SplitRatios,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            series_len: 12,
            series_stride: 6,
            split: SplitRatios::SIX_TWO_TWO,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-9 { std } else { 1.0 },
        }
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Normalization constants and supplement bucket edges. Everything except
/// the static scalers (which describe the network itself) comes from the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldStats {
    pub num_segments: usize,
    pub num_classes: usize,
    pub slice_length_s: i64,
    pub static_scalers: Vec<Standardizer>,
    pub dynamic_scalers: Vec<Standardizer>,
    pub interval: Standardizer,
    pub distance_edges_km: Vec<f64>,
    pub velocity_edges_kmh: Vec<f64>,
}

impl WorldStats {
    pub fn standardize_dynamic(&self, v: [f64; DYNAMIC_DIM]) -> [f64; DYNAMIC_DIM] {
        std::array::from_fn(|k| self.dynamic_scalers[k].forward(v[k]))
    }

    pub fn destandardize_dynamic(&self, z: &[f64]) -> [f64; DYNAMIC_DIM] {
        std::array::from_fn(|k| self.dynamic_scalers[k].inverse(z[k]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripSummary {
    pub distance_km: f64,
    pub velocity_kmh: f64,
    pub departure_minute_of_day: u16,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<StUnitSequence>,
    pub trips: Vec<TripSummary>,
    pub series: Vec<StUnitSequence>,
    pub trajectory_split: DatasetSplit,
    pub series_split: Option<DatasetSplit>,
    pub stats: WorldStats,
    pub config: DatasetConfig,
}

impl Dataset {
    pub fn build(world: &World, config: &DatasetConfig) -> Result<Self> {
        let net = &world.network;
        let store = &world.store;
        let trajectories = world
            .trajectories
            .iter()
            .map(|t| t.to_sequence(net, store))
            .collect::<Result<Vec<_>>>()?;
        let trips = world
            .trajectories
            .iter()
            .zip(&trajectories)
            .map(|(t, seq)| {
                let distance_km = t.distance_m(net) / 1000.0;
                let hours = t.duration_s() as f64 / 3600.0;
                TripSummary {
                    distance_km,
                    velocity_kmh: if hours > 0.0 { distance_km / hours } else { 0.0 },
                    departure_minute_of_day: seq.units[0].temporal.minute_of_day,
                }
            })
            .collect::<Vec<_>>();

        let mut series = Vec::new();
        if !store.is_absent() {
            if config.series_len < 2 || config.series_stride == 0 {
                return Err(Error::Config("series_len >= 2 and series_stride >= 1 required".into()));
            }
            let first = world.config.first_slice() + world.config.warmup_slices as i64;
            let end = world.config.first_slice() + world.config.num_slices();
            for seg in 0..net.num_segments() {
                let mut start = first;
                while start + config.series_len as i64 <= end {
                    let id = series.len();
                    series.push(traffic_series(id, net, store, seg, start, config.series_len)?);
                    start += config.series_stride as i64;
                }
            }
        }

        let trajectory_split = split_dataset(trajectories.len(), config.split, config.split_seed)?;
        let series_split = if series.is_empty() {
            None
        } else {
            Some(split_dataset(
                series.len(),
                config.split,
                config.split_seed.wrapping_add(1),
            )?)
        };

        let static_rows = net.static_matrix();
        let static_scalers = (0..STATIC_DIM)
            .map(|k| Standardizer::fit(static_rows.iter().map(|r| r[k])))
            .collect();
        let dynamic_scalers = (0..DYNAMIC_DIM)
            .map(|k| Standardizer::fit(store.iter().map(|(_, s)| s.to_vector()[k])))
            .collect();
        let train = &trajectory_split.train;
        let interval = Standardizer::fit(
            train
                .iter()
                .flat_map(|&i| trajectories[i].intervals.iter().skip(1).map(|&d| d as f64)),
        );
        let distance_edges_km = quantile_edges(train.iter().map(|&i| trips[i].distance_km), 5);
        let velocity_edges_kmh = quantile_edges(train.iter().map(|&i| trips[i].velocity_kmh), 5);
        let num_classes = world
            .trajectories
            .iter()
            .filter_map(|t| t.label)
            .max()
            .map_or(0, |m| m + 1);

        Ok(Self {
            trajectories,
            trips,
            series,
            trajectory_split,
            series_split,
            stats: WorldStats {
                num_segments: net.num_segments(),
                num_classes,
                slice_length_s: store.slice_length_s(),
                static_scalers,
                dynamic_scalers,
                interval,
                distance_edges_km,
                velocity_edges_kmh,
            },
            config: config.clone(),
        })
    }

    pub fn trajectory_part(&self, split: SplitName) -> Vec<&StUnitSequence> {
        self.trajectory_split
            .part(split)
            .iter()
            .map(|&i| &self.trajectories[i])
            .collect()
    }

    pub fn series_part(&self, split: SplitName) -> Vec<&StUnitSequence> {
        match &self.series_split {
            Some(s) => s.part(split).iter().map(|&i| &self.series[i]).collect(),
            None => Vec::new(),
        }
    }
}

/// `buckets + 1` edges at evenly spaced empirical quantiles, rounded to one
/// decimal.
pub fn quantile_edges(values: impl IntoIterator<Item = f64>, buckets: usize) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return vec![0.0, 0.0];
    }
    v.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (0..=buckets)
        .map(|b| {
            let pos = (b as f64 / buckets as f64 * (v.len() - 1) as f64).round() as usize;
            (v[pos] * 10.0).round() / 10.0
        })
        .collect();
    edges.dedup();
    if edges.len() < 2 {
        edges.push(edges[0]);
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_world, WorldConfig};

    #[test]
    fn builds_both_modalities() {
        let cfg = WorldConfig {
            num_segments: 10,
            num_trajectories: 40,
            num_users: 2,
            days: 1,
            ..WorldConfig::default()
        };
        let world = generate_synthetic_world(&cfg, 2).unwrap();
        let ds = Dataset::build(&world, &DatasetConfig::default()).unwrap();
        assert_eq!(ds.trajectories.len(), 40);
        // (48 - 6 - 12) / 6 + 1 windows per segment
        assert_eq!(ds.series.len(), 10 * 6);
        for s in &ds.series {
            assert!(s.intervals.iter().skip(1).all(|&d| d == 1800));
        }
        assert_eq!(ds.stats.num_classes, 2);
        assert!(ds.stats.interval.mean > 0.0);
    }

    #[test]
    fn quantile_edges_monotone() {
        let e = quantile_edges((0..100).map(f64::from), 4);
        assert_eq!(e, vec![0.0, 25.0, 50.0, 74.0, 99.0]);
    }
}
