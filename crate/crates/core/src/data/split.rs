use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const SIX_TWO_TWO: Self = Self {
        train: 0.6,
        valid: 0.2,
        test: 0.2,
    };
    pub const EIGHT_ONE_ONE: Self = Self {
        train: 0.8,
        valid: 0.1,
        test: 0.1,
    };

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.valid, self.test]
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::SIX_TWO_TWO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: SplitRatios,
}

impl DatasetSplit {
    pub fn part(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

/// Part sizes: floor each share, give every empty part one item, then hand
/// out what is left in declaration order.
pub fn part_sizes(n: usize, ratios: SplitRatios) -> Result<[usize; 3]> {
    let r = ratios.as_array();
    if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {r:?}"
        )));
    }
    if n < r.len() {
        return Err(Error::SplitSize { n, parts: r.len() });
    }
    let mut sizes = r.map(|x| (n as f64 * x + 1e-9).floor() as usize);
    let mut remaining = n - sizes.iter().sum::<usize>();
    for size in sizes.iter_mut() {
        if *size == 0 && remaining > 0 {
            *size = 1;
            remaining -= 1;
        }
    }
    // Still-empty parts borrow from the largest one.
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).unwrap();
        sizes[largest] -= 1;
        sizes[empty] = 1;
    }
    let mut k = 0;
    while remaining > 0 {
        sizes[k % sizes.len()] += 1;
        remaining -= 1;
        k += 1;
    }
    Ok(sizes)
}

/// Seeded shuffle of `0..n`, then contiguous train/valid/test slices.
pub fn split_dataset(n: usize, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let sizes = part_sizes(n, ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = idx.split_at(sizes[0]);
    let (valid, test) = rest.split_at(sizes[1]);
    Ok(DatasetSplit {
        train: train.to_vec(),
        valid: valid.to_vec(),
        test: test.to_vec(),
        ratios,
    })
}
