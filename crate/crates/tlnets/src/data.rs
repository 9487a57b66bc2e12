//! CSV ingestion, normalization and chronological windowing.
//!
//! Series are split train/val/test by simple chronological ratio (default
//! 7:1:2), z-scored per channel with statistics from the train split only,
//! and sliced into stride-1 `(input, target)` window pairs that never cross a
//! split boundary.

use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parsed CSV series: strictly increasing timestamps, `(n_steps, d)` values.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub timestamps: Vec<String>,
    /// Row-major `(n_steps, d)`.
    pub values: Tensor,
    pub columns: Vec<String>,
}

impl RawSeries {
    pub fn n_steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

const DATE_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y/%m/%d %H:%M",
    "%Y-%m-%d",
];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    for fmt in DATE_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Reads a comma-separated file with a header row; every column except the
/// named date column must parse as a float. Timestamps must strictly
/// increase.
pub fn ingest_csv(path: impl AsRef<Path>, date_column: &str) -> Result<RawSeries> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .clone();
    let date_idx = headers
        .iter()
        .position(|h| h == date_column)
        .ok_or_else(|| {
            Error::invalid(format!(
                "date column `{date_column}` not found in header {:?}",
                headers.iter().collect::<Vec<_>>()
            ))
        })?;
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != date_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let d = columns.len();
    if d == 0 {
        return Err(Error::invalid("file has no value columns"));
    }

    let mut timestamps = Vec::new();
    let mut parsed_times: Vec<NaiveDateTime> = Vec::new();
    let mut values = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1; // header is row 0
        let record = record.map_err(|e| Error::Parse {
            row,
            col: 0,
            message: e.to_string(),
        })?;
        let ts_raw = record.get(date_idx).unwrap_or("");
        let ts = parse_timestamp(ts_raw).ok_or_else(|| Error::Parse {
            row,
            col: date_idx,
            message: format!("unparsable timestamp `{ts_raw}`"),
        })?;
        if let Some(prev) = parsed_times.last() {
            if ts <= *prev {
                return Err(Error::invalid(format!(
                    "timestamps not strictly increasing at data row {row_idx}: `{ts_raw}`"
                )));
            }
        }
        for (col, field) in record.iter().enumerate() {
            if col == date_idx {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                col,
                message: format!("unparsable cell `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col,
                    message: format!("non-finite cell `{field}`"),
                });
            }
            values.push(v);
        }
        parsed_times.push(ts);
        timestamps.push(ts_raw.to_string());
    }
    let n = timestamps.len();
    Ok(RawSeries {
        timestamps,
        values: Tensor::new(vec![n, d], values)?,
        columns,
    })
}

/// Per-channel z-score statistics, always from the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1.0 where the channel was constant.
    pub std: Vec<f64>,
    /// Channels that fell back to std = 1.
    pub constant_channels: Vec<usize>,
}

/// Z-scores every channel using statistics from rows `[0, train_len)`.
pub fn normalize(values: &Tensor, train_len: usize) -> Result<(Tensor, NormStats)> {
    let (n, d) = (values.shape()[0], values.shape()[1]);
    if train_len == 0 || train_len > n {
        return Err(Error::invalid(format!(
            "train range [0, {train_len}) invalid for {n} rows"
        )));
    }
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    let mut constant_channels = Vec::new();
    for c in 0..d {
        let mut m = 0.0;
        for r in 0..train_len {
            m += values.at2(r, c);
        }
        m /= train_len as f64;
        let mut var = 0.0;
        for r in 0..train_len {
            let dv = values.at2(r, c) - m;
            var += dv * dv;
        }
        var /= train_len as f64;
        mean[c] = m;
        std[c] = var.sqrt();
        if std[c] == 0.0 {
            std[c] = 1.0;
            constant_channels.push(c);
        }
    }
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            out[r * d + c] = (values.at2(r, c) - mean[c]) / std[c];
        }
    }
    Ok((
        Tensor::new(vec![n, d], out)?,
        NormStats {
            mean,
            std,
            constant_channels,
        },
    ))
}

pub fn denormalize(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (n, d) = (values.shape()[0], values.shape()[1]);
    if d != stats.mean.len() {
        return Err(Error::dim("stats channel count mismatch"));
    }
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            out[r * d + c] = values.at2(r, c) * stats.std[c] + stats.mean[c];
        }
    }
    Tensor::new(vec![n, d], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Chronological split fractions; test takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
        }
    }
}

impl SplitRatios {
    /// `(train, val, test)` boundaries: `floor(train*n)`, `floor(val*n)`,
    /// remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train * n as f64).floor() as usize;
        let val = (self.val * n as f64).floor() as usize;
        (train, val, n - train - val)
    }
}

/// Normalized series plus per-split stride-1 window indexing.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    /// Normalized `(n, d)` series, shared.
    data: Arc<Tensor>,
    pub stats: NormStats,
    pub input_len: usize,
    pub pred_len: usize,
    /// Row ranges of the three splits, in order train/val/test.
    ranges: [(usize, usize); 3],
}

impl WindowedDataset {
    /// Splits chronologically, checks every split can hold at least one
    /// window, and indexes windows within each split independently.
    pub fn new(
        normalized: Tensor,
        stats: NormStats,
        input_len: usize,
        pred_len: usize,
        ratios: SplitRatios,
    ) -> Result<WindowedDataset> {
        let n = normalized.shape()[0];
        let (tr, va, te) = ratios.sizes(n);
        let need = input_len + pred_len;
        for (name, len) in [("train", tr), ("val", va), ("test", te)] {
            if len < need {
                return Err(Error::invalid(format!(
                    "{name} split has {len} rows; windows need at least {need} (input {input_len} + target {pred_len})"
                )));
            }
        }
        Ok(WindowedDataset {
            data: Arc::new(normalized),
            stats,
            input_len,
            pred_len,
            ranges: [(0, tr), (tr, tr + va), (tr + va, n)],
        })
    }

    /// Ingest + normalize + window in one step.
    pub fn from_csv(
        path: impl AsRef<Path>,
        date_column: &str,
        input_len: usize,
        pred_len: usize,
        ratios: SplitRatios,
    ) -> Result<(WindowedDataset, RawSeries)> {
        let raw = ingest_csv(path, date_column)?;
        let (train_len, _, _) = ratios.sizes(raw.n_steps());
        let (normalized, stats) = normalize(&raw.values, train_len)?;
        let ds = WindowedDataset::new(normalized, stats, input_len, pred_len, ratios)?;
        Ok((ds, raw))
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn split_range(&self, split: Split) -> (usize, usize) {
        self.ranges[split as usize]
    }

    /// `n_s - T - tau + 1` stride-1 windows fit in a split of length `n_s`.
    pub fn window_count(&self, split: Split) -> usize {
        let (lo, hi) = self.split_range(split);
        (hi - lo).saturating_sub(self.input_len + self.pred_len - 1)
    }

    /// The `idx`-th window pair of a split: input `(d, T)` and target
    /// `(d, tau)`, both column-per-time-step copies of the series rows.
    pub fn pair(&self, split: Split, idx: usize) -> Result<(Tensor, Tensor)> {
        let count = self.window_count(split);
        if idx >= count {
            return Err(Error::invalid(format!(
                "window {idx} out of {count} in {} split",
                split.name()
            )));
        }
        let (lo, _) = self.split_range(split);
        let start = lo + idx;
        Ok((
            self.window(start, self.input_len),
            self.window(start + self.input_len, self.pred_len),
        ))
    }

    /// Rows `[start, start+len)` transposed to `(d, len)`.
    fn window(&self, start: usize, len: usize) -> Tensor {
        let d = self.channels();
        let mut out = vec![0.0; d * len];
        for (j, r) in (start..start + len).enumerate() {
            for c in 0..d {
                out[c * len + j] = self.data.at2(r, c);
            }
        }
        Tensor::new(vec![d, len], out).unwrap()
    }

    /// Batch of window pairs stacked to `(B, d, T)` / `(B, d, tau)`.
    pub fn batch(&self, split: Split, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let d = self.channels();
        let (t, tau) = (self.input_len, self.pred_len);
        let b = indices.len();
        let mut xs = vec![0.0; b * d * t];
        let mut ys = vec![0.0; b * d * tau];
        for (i, &idx) in indices.iter().enumerate() {
            let (x, y) = self.pair(split, idx)?;
            xs[i * d * t..(i + 1) * d * t].copy_from_slice(x.data());
            ys[i * d * tau..(i + 1) * d * tau].copy_from_slice(y.data());
        }
        Ok((Tensor::new(vec![b, d, t], xs)?, Tensor::new(vec![b, d, tau], ys)?))
    }
}

/// Deterministic shuffle of `0..count` for one epoch.
pub fn shuffled_indices(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng);
    idx
}
