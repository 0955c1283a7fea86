//! Non-trainable tokenizer inputs: standardized static rows, the attention
//! neighborhood and per-slice dynamic history windows.

use candle_core::{DType, Device, Tensor};

use crate::data::{RoadNetwork, StUnitSequence, TrafficStateStore, WorldStats, DYNAMIC_DIM, STATIC_DIM};
use crate::error::{Error, Result};
use crate::nn::mask_bias;

/// Number of temporal input channels: three timestamp features plus the
/// interval.
pub const TIME_DIM: usize = 4;
/// Index of the interval channel within the temporal input.
pub const DELTA_CHANNEL: usize = 3;

/// One position of an ST-token sequence as the tokenizer sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenUnit {
    pub segment: usize,
    pub slice: i64,
    pub time: [f64; TIME_DIM],
}

/// Scaled `(iota, delta)`: day of week, minute of day and second of minute
/// mapped to `[0, 1]`, and `ln(1 + delta / 60)`.
pub fn temporal_input(day_of_week: u8, minute_of_day: u16, second_of_minute: u8, delta_s: i64) -> [f64; TIME_DIM] {
    [
        f64::from(day_of_week) / 6.0,
        f64::from(minute_of_day) / 1439.0,
        f64::from(second_of_minute) / 59.0,
        (delta_s.max(0) as f64 / 60.0).ln_1p(),
    ]
}

/// How timestamps enter the tokens of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeView {
    Visible,
    /// All timestamps hidden: temporal channels are zero and every unit reads
    /// the spatial table of the departure slice.
    Masked,
}

pub fn token_units(seq: &StUnitSequence, view: TimeView) -> Vec<TokenUnit> {
    let departure = seq.units.first().map(|u| u.temporal.slice_index).unwrap_or(0);
    seq.units
        .iter()
        .zip(&seq.intervals)
        .map(|(u, &delta)| match view {
            TimeView::Visible => TokenUnit {
                segment: u.segment_id,
                slice: u.temporal.slice_index,
                time: temporal_input(
                    u.temporal.day_of_week,
                    u.temporal.minute_of_day,
                    u.temporal.second_of_minute,
                    delta,
                ),
            },
            TimeView::Masked => TokenUnit {
                segment: u.segment_id,
                slice: departure,
                time: [0.0; TIME_DIM],
            },
        })
        .collect()
}

#[derive(Debug, Clone)]
struct DynamicBank {
    first_slice: i64,
    num_slices: i64,
    /// `[(slice - first) * I + segment]`, standardized.
    values: Vec<[f64; DYNAMIC_DIM]>,
}

#[derive(Debug, Clone)]
pub struct FeatureBank {
    num_segments: usize,
    window: usize,
    static_rows: Tensor,
    neighborhood: Vec<u8>,
    neighbor_bias: Tensor,
    dynamic: Option<DynamicBank>,
    dtype: DType,
    device: Device,
}

impl FeatureBank {
    pub fn new(
        net: &RoadNetwork,
        store: &TrafficStateStore,
        stats: &WorldStats,
        window: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let n = net.num_segments();
        let rows: Vec<f64> = net
            .static_matrix()
            .iter()
            .flat_map(|r| (0..STATIC_DIM).map(move |k| stats.static_scalers[k].forward(r[k])))
            .collect();
        let static_rows = Tensor::from_vec(rows, (n, STATIC_DIM), device)?.to_dtype(dtype)?;
        let neighborhood = net.attention_neighborhood();
        let neighbor_bias = mask_bias(&neighborhood, n, n, dtype, device)?;
        let dynamic = match store.slice_range() {
            Some((lo, hi)) if !store.is_absent() => {
                let num_slices = hi - lo + 1;
                let mut values = Vec::with_capacity(num_slices as usize * n);
                for slice in lo..=hi {
                    for seg in 0..n {
                        let st = store
                            .lookup(seg, slice)?
                            .ok_or(Error::MissingState { segment: seg, slice })?;
                        values.push(stats.standardize_dynamic(st.to_vector()));
                    }
                }
                Some(DynamicBank {
                    first_slice: lo,
                    num_slices,
                    values,
                })
            }
            _ => None,
        };
        Ok(Self {
            num_segments: n,
            window,
            static_rows,
            neighborhood,
            neighbor_bias,
            dynamic,
            dtype,
            device: device.clone(),
        })
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn static_rows(&self) -> &Tensor {
        &self.static_rows
    }

    pub fn neighborhood(&self) -> &[u8] {
        &self.neighborhood
    }

    pub fn neighbor_bias(&self) -> &Tensor {
        &self.neighbor_bias
    }

    pub fn has_dynamic(&self) -> bool {
        self.dynamic.is_some()
    }

    /// Width of a concatenated history window `e_{t-T'} || ... || e_t`.
    pub fn window_width(&self) -> usize {
        DYNAMIC_DIM * (self.window + 1)
    }

    /// `(S, I, 3 (T'+1))` history windows, oldest slice first.
    pub fn window_features(&self, slices: &[i64]) -> Result<Tensor> {
        let bank = self
            .dynamic
            .as_ref()
            .ok_or_else(|| Error::Input("dynamic modality is absent".into()))?;
        let n = self.num_segments;
        let width = self.window_width();
        let mut out = Vec::with_capacity(slices.len() * n * width);
        for &t in slices {
            for s in t - self.window as i64..=t {
                if s < bank.first_slice || s >= bank.first_slice + bank.num_slices {
                    return Err(Error::Window { slice: s });
                }
            }
            for seg in 0..n {
                for s in t - self.window as i64..=t {
                    let idx = (s - bank.first_slice) as usize * n + seg;
                    out.extend_from_slice(&bank.values[idx]);
                }
            }
        }
        Ok(Tensor::from_vec(out, (slices.len(), n, width), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Slices whose window fits inside the stored range.
    pub fn covered_slices(&self) -> Option<(i64, i64)> {
        self.dynamic.as_ref().map(|b| {
            (
                b.first_slice + self.window as i64,
                b.first_slice + b.num_slices - 1,
            )
        })
    }

    /// Replaces the standardized dynamic vector of one cell; used by
    /// perturbation tests.
    pub fn perturb(&mut self, segment: usize, slice: i64, value: [f64; DYNAMIC_DIM]) -> Result<()> {
        let n = self.num_segments;
        let bank = self
            .dynamic
            .as_mut()
            .ok_or_else(|| Error::Input("dynamic modality is absent".into()))?;
        if slice < bank.first_slice || slice >= bank.first_slice + bank.num_slices || segment >= n {
            return Err(Error::Window { slice });
        }
        bank.values[(slice - bank.first_slice) as usize * n + segment] = value;
        Ok(())
    }
}
