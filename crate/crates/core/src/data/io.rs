//! World directory layout:
//!
//! ```text
//! network.csv         segment_id,out_neighbors,road_type,length_m,lanes,in_degree,out_degree,speed_limit
//! trajectories.jsonl  {"traj_id":..,"user_id":..,"label":..,"points":[{"segment_id":..,"timestamp_s":..}]}
//! traffic_state.csv   segment_id,slice_index,avg_speed,inflow,outflow   (omitted when the modality is absent)
//! world_config.json   generation parameters including "seed"
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::network::{load_road_network, write_road_network};
use super::store::{load_traffic_state, write_traffic_state, TrafficStateStore};
use super::synth::{World, WorldConfig};
use super::units::Trajectory;
use crate::error::{Error, Result};

pub const NETWORK_FILE: &str = "network.csv";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const TRAFFIC_FILE: &str = "traffic_state.csv";
pub const WORLD_CONFIG_FILE: &str = "world_config.json";

pub fn write_trajectories(trajs: &[Trajectory], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: idx as u64 + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&body).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

pub fn write_world(world: &World, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_road_network(&world.network, &dir.join(NETWORK_FILE))?;
    write_trajectories(&world.trajectories, &dir.join(TRAJECTORY_FILE))?;
    if !world.store.is_absent() {
        write_traffic_state(&world.store, &dir.join(TRAFFIC_FILE))?;
    }
    write_json(&world.config, &dir.join(WORLD_CONFIG_FILE))
}

pub fn read_world(dir: &Path) -> Result<World> {
    let config: WorldConfig = read_json(&dir.join(WORLD_CONFIG_FILE))?;
    let network = load_road_network(&dir.join(NETWORK_FILE))?;
    let trajectories = load_trajectories(&dir.join(TRAJECTORY_FILE))?;
    let traffic = dir.join(TRAFFIC_FILE);
    let store = if config.dynamic_features {
        if !traffic.exists() {
            return Err(Error::Dependency(traffic));
        }
        load_traffic_state(&traffic, config.slice_length_s)?
    } else {
        TrafficStateStore::absent(config.slice_length_s)
    };
    for t in &trajectories {
        for p in &t.points {
            network.segment(p.segment_id)?;
        }
    }
    Ok(World {
        config,
        network,
        trajectories,
        store,
    })
}
