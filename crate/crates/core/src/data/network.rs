//! Directed road-segment graph with static per-segment features.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of a static feature row: road id, road type, length, lanes,
/// in-degree, out-degree, speed limit.
pub const STATIC_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub segment_id: usize,
    pub road_type: u32,
    pub length_m: f64,
    pub lanes: u32,
    pub speed_limit_kmh: f64,
    pub out_neighbors: Vec<usize>,
    pub in_degree: usize,
}

impl RoadSegment {
    pub fn out_degree(&self) -> usize {
        self.out_neighbors.len()
    }

    pub fn static_features(&self) -> [f64; STATIC_DIM] {
        [
            self.segment_id as f64,
            f64::from(self.road_type),
            self.length_m,
            f64::from(self.lanes),
            self.in_degree as f64,
            self.out_degree() as f64,
            self.speed_limit_kmh,
        ]
    }
}

/// Road network `G = {R, A, E^(s)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    adjacency: Vec<u8>,
}

impl RoadNetwork {
    /// Builds a network from segments listed in any order. In-degrees are
    /// recomputed from the out-neighbor lists.
    pub fn from_segments(mut segments: Vec<RoadSegment>, allow_self_loops: bool) -> Result<Self> {
        segments.sort_by_key(|s| s.segment_id);
        let n = segments.len();
        if n == 0 {
            return Err(Error::Network("network has no segments".into()));
        }
        for (idx, seg) in segments.iter().enumerate() {
            if seg.segment_id != idx {
                return Err(Error::Network(format!(
                    "segment ids must be dense in [0, {n}); found {} at position {idx}",
                    seg.segment_id
                )));
            }
            if !(seg.length_m > 0.0) {
                return Err(Error::Network(format!("segment {idx} has non-positive length")));
            }
            if seg.lanes < 1 {
                return Err(Error::Network(format!("segment {idx} has no lanes")));
            }
        }
        let mut adjacency = vec![0u8; n * n];
        for seg in &segments {
            for &nb in &seg.out_neighbors {
                if nb >= n {
                    return Err(Error::Referential {
                        segment: seg.segment_id,
                        neighbor: nb,
                    });
                }
                if nb == seg.segment_id && !allow_self_loops {
                    return Err(Error::Network(format!("self-loop on segment {nb}")));
                }
                let cell = &mut adjacency[seg.segment_id * n + nb];
                if *cell == 1 {
                    return Err(Error::Network(format!(
                        "duplicate edge {} -> {nb}",
                        seg.segment_id
                    )));
                }
                *cell = 1;
            }
        }
        for j in 0..n {
            segments[j].in_degree = (0..n).filter(|&i| adjacency[i * n + j] == 1).count();
        }
        Ok(Self {
            segments,
            adjacency,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn segment(&self, id: usize) -> Result<&RoadSegment> {
        self.segments.get(id).ok_or(Error::UnknownSegment(id))
    }

    pub fn is_adjacent(&self, from: usize, to: usize) -> bool {
        let n = self.num_segments();
        from < n && to < n && self.adjacency[from * n + to] == 1
    }

    /// Row-major `I x I` binary adjacency.
    pub fn adjacency(&self) -> &[u8] {
        &self.adjacency
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|&a| a as usize).sum()
    }

    /// `E^(s)`: one static feature row per segment.
    pub fn static_matrix(&self) -> Vec<[f64; STATIC_DIM]> {
        self.segments.iter().map(RoadSegment::static_features).collect()
    }

    /// Attention neighborhood used by the graph encoders: either edge
    /// direction, plus the segment itself.
    pub fn attention_neighborhood(&self) -> Vec<u8> {
        let n = self.num_segments();
        let mut mask = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j || self.adjacency[i * n + j] == 1 || self.adjacency[j * n + i] == 1 {
                    mask[i * n + j] = 1;
                }
            }
        }
        mask
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkRow {
    segment_id: usize,
    out_neighbors: String,
    road_type: u32,
    length_m: f64,
    lanes: u32,
    in_degree: usize,
    out_degree: usize,
    speed_limit: f64,
}

pub fn load_road_network(path: &Path) -> Result<RoadNetwork> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut segments = Vec::new();
    let mut declared = Vec::new();
    for (row_idx, record) in reader.deserialize::<NetworkRow>().enumerate() {
        // header is line 1
        let line = row_idx as u64 + 2;
        let row = record.map_err(|e| Error::Parse {
            file: name.clone(),
            line,
            message: e.to_string(),
        })?;
        let out_neighbors = parse_neighbor_list(&row.out_neighbors).map_err(|message| {
            Error::Parse {
                file: name.clone(),
                line,
                message,
            }
        })?;
        if out_neighbors.len() != row.out_degree {
            return Err(Error::Parse {
                file: name.clone(),
                line,
                message: format!(
                    "out_degree {} disagrees with {} listed neighbors",
                    row.out_degree,
                    out_neighbors.len()
                ),
            });
        }
        declared.push((row.segment_id, row.in_degree, line));
        segments.push(RoadSegment {
            segment_id: row.segment_id,
            road_type: row.road_type,
            length_m: row.length_m,
            lanes: row.lanes,
            speed_limit_kmh: row.speed_limit,
            out_neighbors,
            in_degree: row.in_degree,
        });
    }
    let net = RoadNetwork::from_segments(segments, false)?;
    for (id, in_degree, line) in declared {
        let actual = net.segments[id].in_degree;
        if actual != in_degree {
            return Err(Error::Parse {
                file: name,
                line,
                message: format!("in_degree {in_degree} disagrees with adjacency ({actual})"),
            });
        }
    }
    Ok(net)
}

fn parse_neighbor_list(field: &str) -> std::result::Result<Vec<usize>, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad neighbor id `{tok}`: {e}"))
        })
        .collect()
}

pub fn write_road_network(net: &RoadNetwork, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    for seg in &net.segments {
        let out_neighbors = seg
            .out_neighbors
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";");
        writer
            .serialize(NetworkRow {
                segment_id: seg.segment_id,
                out_neighbors,
                road_type: seg.road_type,
                length_m: seg.length_m,
                lanes: seg.lanes,
                in_degree: seg.in_degree,
                out_degree: seg.out_degree(),
                speed_limit: seg.speed_limit_kmh,
            })
            .map_err(|e| Error::io(path, e.into()))?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}
