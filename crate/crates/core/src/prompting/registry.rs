//! Task catalog, instruction vocabulary and supplement rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::io::{read_json, write_json};
use crate::data::{SequenceKind, TripSummary, WorldStats};
use crate::error::{Error, Result};

pub const REGISTRY_FILE: &str = "instruction_registry.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    NextHop,
    Classification,
    Tte,
    OneStep,
    MultiStep,
    Imputation,
    Recovery,
    SimilarSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    Classification,
    Regression,
    Generation,
    Comparison,
}

impl TaskId {
    pub const ALL: [TaskId; 8] = [
        TaskId::NextHop,
        TaskId::Classification,
        TaskId::Tte,
        TaskId::OneStep,
        TaskId::MultiStep,
        TaskId::Imputation,
        TaskId::Recovery,
        TaskId::SimilarSearch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::NextHop => "next_hop",
            TaskId::Classification => "classification",
            TaskId::Tte => "tte",
            TaskId::OneStep => "one_step",
            TaskId::MultiStep => "multi_step",
            TaskId::Imputation => "imputation",
            TaskId::Recovery => "recovery",
            TaskId::SimilarSearch => "similar_search",
        }
    }

    pub fn modality(self) -> SequenceKind {
        match self {
            TaskId::OneStep | TaskId::MultiStep | TaskId::Imputation => SequenceKind::TrafficSeries,
            _ => SequenceKind::Trajectory,
        }
    }

    pub fn family(self) -> TaskFamily {
        match self {
            TaskId::NextHop | TaskId::Classification => TaskFamily::Classification,
            TaskId::Tte | TaskId::OneStep | TaskId::MultiStep | TaskId::Imputation => TaskFamily::Regression,
            TaskId::Recovery => TaskFamily::Generation,
            TaskId::SimilarSearch => TaskFamily::Comparison,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Registry(format!("unregistered task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupplementField {
    DepartureTime,
    Distance,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionEntry {
    pub instruction: String,
    pub supplement_fields: Vec<SupplementField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionRegistry {
    tasks: BTreeMap<String, InstructionEntry>,
}

impl Default for InstructionRegistry {
    /// Fixed catalog. TTE omits departure time and velocity: velocity
    /// together with distance determines the travel time.
    fn default() -> Self {
        use SupplementField::*;
        let entries: [(TaskId, &str, Vec<SupplementField>); 8] = [
            (
                TaskId::NextHop,
                "where is the next hop position of the input trajectory ?",
                vec![DepartureTime],
            ),
            (
                TaskId::Classification,
                "which user does the input trajectory belong to ?",
                vec![DepartureTime, Distance, Velocity],
            ),
            (
                TaskId::Tte,
                "generate a time interval on reg based on supplementary data and input",
                vec![Distance],
            ),
            (
                TaskId::OneStep,
                "predict the traffic state of the next time slice on reg",
                vec![],
            ),
            (
                TaskId::MultiStep,
                "predict the traffic states of the next six time slices on reg",
                vec![],
            ),
            (
                TaskId::Imputation,
                "fill in the masked traffic states of the input series on reg",
                vec![],
            ),
            (
                TaskId::Recovery,
                "recover the masked road segments of the low sampling rate trajectory on cls",
                vec![DepartureTime, Distance],
            ),
            (
                TaskId::SimilarSearch,
                "encode the input trajectory for most similar trajectory search",
                vec![],
            ),
        ];
        Self {
            tasks: entries
                .into_iter()
                .map(|(t, text, fields)| {
                    (
                        t.as_str().to_string(),
                        InstructionEntry {
                            instruction: text.to_string(),
                            supplement_fields: fields,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl InstructionRegistry {
    pub fn get(&self, task: TaskId) -> Result<&InstructionEntry> {
        self.tasks
            .get(task.as_str())
            .ok_or_else(|| Error::Registry(format!("task `{task}` has no instruction")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &InstructionEntry)> {
        self.tasks.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    /// Loads a catalog; every key must name a known task.
    pub fn load(path: &Path) -> Result<Self> {
        let reg: Self = read_json(path)?;
        for key in reg.tasks.keys() {
            key.parse::<TaskId>()?;
        }
        Ok(reg)
    }
}

/// Fixed words of the supplement template.
const SUPPLEMENT_WORDS: &str = "departure hour distance km velocity km/h to .";

/// Word-level vocabulary over the instruction and supplement corpus. Numbers
/// are spelled digit by digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;

    pub fn from_registry(registry: &InstructionRegistry) -> Self {
        let mut corpus: Vec<String> = registry.entries().map(|(_, e)| e.instruction.clone()).collect();
        corpus.push(SUPPLEMENT_WORDS.to_string());
        corpus.push("0 1 2 3 4 5 6 7 8 9".to_string());
        let mut words = BTreeMap::new();
        let mut sorted: Vec<String> = corpus.iter().flat_map(|t| split_words(t)).collect();
        sorted.sort();
        sorted.dedup();
        for (k, w) in sorted.into_iter().enumerate() {
            words.insert(w, k as u32 + 2);
        }
        Self { words }
    }

    /// Number of ids including PAD and UNK.
    pub fn len(&self) -> usize {
        self.words.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        if text.trim().is_empty() {
            return Err(Error::Input("instruction text is empty".into()));
        }
        Ok(split_words(text)
            .iter()
            .map(|w| self.words.get(w).copied().unwrap_or(Self::UNK))
            .collect())
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let w = raw.to_lowercase();
        if w.chars().any(|c| c.is_ascii_digit()) {
            out.extend(w.chars().map(String::from));
        } else {
            out.push(w);
        }
    }
    out
}

/// Bucket `[lo, hi]` of `edges` containing `value`; values outside the
/// range fall into the first or last bucket.
pub fn coarse_range(edges: &[f64], value: f64) -> (f64, f64) {
    let k = edges.len();
    if k < 2 {
        return (value, value);
    }
    let b = edges[1..k - 1].iter().take_while(|&&e| value >= e).count();
    (edges[b], edges[b + 1])
}

/// Supplement text for the fields the task allows. Values are coarse ranges
/// over training-split quantiles.
pub fn render_supplement(fields: &[SupplementField], trip: Option<&TripSummary>, stats: &WorldStats) -> String {
    let Some(trip) = trip else {
        return String::new();
    };
    let mut parts = Vec::new();
    for field in fields {
        match field {
            SupplementField::DepartureTime => {
                let hour = trip.departure_minute_of_day / 60;
                parts.push(format!("departure hour {hour} to {} .", (hour + 1) % 24));
            }
            SupplementField::Distance => {
                let (lo, hi) = coarse_range(&stats.distance_edges_km, trip.distance_km);
                parts.push(format!("distance {lo:.1} to {hi:.1} km ."));
            }
            SupplementField::Velocity => {
                let (lo, hi) = coarse_range(&stats.velocity_edges_kmh, trip.velocity_kmh);
                parts.push(format!("velocity {lo:.1} to {hi:.1} km/h ."));
            }
        }
    }
    parts.join(" ")
}
