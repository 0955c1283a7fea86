//! Per-segment, per-slice traffic states.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of a dynamic feature vector: average speed, inflow, outflow.
pub const DYNAMIC_DIM: usize = 3;

pub const DEFAULT_SLICE_SECONDS: i64 = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub avg_speed: f64,
    pub inflow: u32,
    pub outflow: u32,
}

impl TrafficState {
    pub fn to_vector(self) -> [f64; DYNAMIC_DIM] {
        [self.avg_speed, f64::from(self.inflow), f64::from(self.outflow)]
    }
}

/// Table `(segment_id, slice_index) -> e^(d)`. When `absent` is set the
/// dataset carries no dynamic modality and every lookup yields `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficStateStore {
    slice_length_s: i64,
    absent: bool,
    cells: BTreeMap<(usize, i64), TrafficState>,
}

impl TrafficStateStore {
    pub fn new(slice_length_s: i64) -> Self {
        Self {
            slice_length_s,
            absent: false,
            cells: BTreeMap::new(),
        }
    }

    pub fn absent(slice_length_s: i64) -> Self {
        Self {
            slice_length_s,
            absent: true,
            cells: BTreeMap::new(),
        }
    }

    pub fn is_absent(&self) -> bool {
        self.absent
    }

    pub fn slice_length_s(&self) -> i64 {
        self.slice_length_s
    }

    pub fn slice_of(&self, timestamp_s: i64) -> i64 {
        timestamp_s.div_euclid(self.slice_length_s)
    }

    pub fn insert(&mut self, segment: usize, slice: i64, state: TrafficState) -> Result<()> {
        if self.absent {
            return Err(Error::Input("cannot insert into an absent traffic store".into()));
        }
        if !(state.avg_speed >= 0.0) {
            return Err(Error::Input(format!(
                "negative speed at segment {segment}, slice {slice}"
            )));
        }
        self.cells.insert((segment, slice), state);
        Ok(())
    }

    /// `Ok(None)` for an absent store, `Err` when a present store lacks the cell.
    pub fn lookup(&self, segment: usize, slice: i64) -> Result<Option<TrafficState>> {
        if self.absent {
            return Ok(None);
        }
        self.cells
            .get(&(segment, slice))
            .copied()
            .map(Some)
            .ok_or(Error::MissingState { segment, slice })
    }

    pub fn get(&self, segment: usize, slice: i64) -> Option<TrafficState> {
        self.cells.get(&(segment, slice)).copied()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, i64), &TrafficState)> {
        self.cells.iter()
    }

    /// Inclusive slice range covered by any cell.
    pub fn slice_range(&self) -> Option<(i64, i64)> {
        let lo = self.cells.keys().map(|k| k.1).min()?;
        let hi = self.cells.keys().map(|k| k.1).max()?;
        Some((lo, hi))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    segment_id: usize,
    slice_index: i64,
    avg_speed: f64,
    inflow: u32,
    outflow: u32,
}

pub fn write_traffic_state(store: &TrafficStateStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    writer
        .write_record(["segment_id", "slice_index", "avg_speed", "inflow", "outflow"])
        .map_err(|e| Error::io(path, e.into()))?;
    for (&(segment_id, slice_index), st) in &store.cells {
        writer
            .serialize(StateRow {
                segment_id,
                slice_index,
                avg_speed: st.avg_speed,
                inflow: st.inflow,
                outflow: st.outflow,
            })
            .map_err(|e| Error::io(path, e.into()))?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn load_traffic_state(path: &Path, slice_length_s: i64) -> Result<TrafficStateStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_reader(file);
    let mut store = TrafficStateStore::new(slice_length_s);
    for (idx, rec) in reader.deserialize::<StateRow>().enumerate() {
        let line = idx as u64 + 2;
        let row = rec.map_err(|e| Error::Parse {
            file: name.clone(),
            line,
            message: e.to_string(),
        })?;
        store
            .insert(
                row.segment_id,
                row.slice_index,
                TrafficState {
                    avg_speed: row.avg_speed,
                    inflow: row.inflow,
                    outflow: row.outflow,
                },
            )
            .map_err(|e| Error::Parse {
                file: name.clone(),
                line,
                message: e.to_string(),
            })?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_store_yields_none() {
        let store = TrafficStateStore::absent(1800);
        assert_eq!(store.lookup(3, 7).unwrap(), None);
    }

    #[test]
    fn missing_cell_is_lookup_error() {
        let store = TrafficStateStore::new(1800);
        assert!(matches!(
            store.lookup(1, 2),
            Err(Error::MissingState { segment: 1, slice: 2 })
        ));
    }

    #[test]
    fn rejects_negative_speed() {
        let mut store = TrafficStateStore::new(1800);
        let bad = TrafficState {
            avg_speed: -1.0,
            inflow: 0,
            outflow: 0,
        };
        assert!(store.insert(0, 0, bad).is_err());
    }

    #[test]
    fn slice_of_floors() {
        let store = TrafficStateStore::new(1800);
        assert_eq!(store.slice_of(0), 0);
        assert_eq!(store.slice_of(1799), 0);
        assert_eq!(store.slice_of(3600), 2);
    }
}
