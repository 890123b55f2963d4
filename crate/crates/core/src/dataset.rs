//! Long-format multi-block longitudinal data.
//!
//! Records are grouped into one series per (subject, block). Blocks and
//! subjects keep the order in which they first appear. Standardization is per
//! block (pooled over subjects) and time is mapped onto a single `[0, 1]`
//! clock shared by all blocks.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no observations")]
    EmptyInput,
    #[error("duplicate observation for subject {subject}, block {block} at time {time}")]
    DuplicateObservation { subject: String, block: String, time: f64 },
    #[error("non-finite time or value for subject {subject}, block {block}")]
    NonFiniteValue { subject: String, block: String },
    #[error("block {0} has zero variance")]
    ZeroVariance(String),
    #[error("time range is degenerate (min = max = {0})")]
    DegenerateTimeRange(f64),
    #[error("dataset is already standardized")]
    AlreadyStandardized,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One row of the long-format input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub subject_id: String,
    pub block_id: String,
    pub time: f64,
    pub value: f64,
}

impl ObservationRecord {
    pub fn new(subject_id: impl Into<String>, block_id: impl Into<String>, time: f64, value: f64) -> Self {
        Self { subject_id: subject_id.into(), block_id: block_id.into(), time, value }
    }
}

/// Time-sorted observations of one subject in one block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Series {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockScale {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiBlockDataset {
    blocks: Vec<String>,
    subjects: Vec<String>,
    /// Indexed `[subject][block]`.
    series: Vec<Vec<Series>>,
    standardization: Option<Vec<BlockScale>>,
    time_range: (f64, f64),
    rescaled: bool,
}

/// Groups long-format rows into per-subject, per-block series.
pub fn load_long_records(rows: &[ObservationRecord]) -> Result<MultiBlockDataset, DatasetError> {
    if rows.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let mut blocks: Vec<String> = Vec::new();
    let mut block_index: HashMap<&str, usize> = HashMap::new();
    let mut subjects: Vec<String> = Vec::new();
    let mut subject_index: HashMap<&str, usize> = HashMap::new();
    for r in rows {
        if !r.time.is_finite() || !r.value.is_finite() {
            return Err(DatasetError::NonFiniteValue { subject: r.subject_id.clone(), block: r.block_id.clone() });
        }
        if !block_index.contains_key(r.block_id.as_str()) {
            block_index.insert(&r.block_id, blocks.len());
            blocks.push(r.block_id.clone());
        }
        if !subject_index.contains_key(r.subject_id.as_str()) {
            subject_index.insert(&r.subject_id, subjects.len());
            subjects.push(r.subject_id.clone());
        }
    }
    let mut pairs: Vec<Vec<Vec<(f64, f64)>>> = vec![vec![Vec::new(); blocks.len()]; subjects.len()];
    for r in rows {
        pairs[subject_index[r.subject_id.as_str()]][block_index[r.block_id.as_str()]].push((r.time, r.value));
    }
    let mut series = Vec::with_capacity(subjects.len());
    for (s, per_block) in pairs.into_iter().enumerate() {
        let mut row = Vec::with_capacity(blocks.len());
        for (b, mut obs) in per_block.into_iter().enumerate() {
            obs.sort_by(|x, y| x.0.total_cmp(&y.0));
            if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(DatasetError::DuplicateObservation {
                    subject: subjects[s].clone(),
                    block: blocks[b].clone(),
                    time: w[0].0,
                });
            }
            row.push(Series { times: obs.iter().map(|o| o.0).collect(), values: obs.iter().map(|o| o.1).collect() });
        }
        series.push(row);
    }
    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.time), hi.max(r.time)));
    Ok(MultiBlockDataset { blocks, subjects, series, standardization: None, time_range: (lo, hi), rescaled: false })
}

impl MultiBlockDataset {
    /// Assembles a dataset directly from series already on the `[0, 1]` clock,
    /// with an explicit original time range. Values are taken as raw (unstandardized).
    pub fn from_rescaled_series(
        blocks: Vec<String>,
        subjects: Vec<String>,
        series: Vec<Vec<Series>>,
        time_range: (f64, f64),
    ) -> Self {
        assert_eq!(series.len(), subjects.len());
        assert!(series.iter().all(|r| r.len() == blocks.len()));
        Self { blocks, subjects, series, standardization: None, time_range, rescaled: true }
    }

    pub fn blocks(&self) -> &[String] {
        &self.blocks
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn series(&self, subject: usize, block: usize) -> &Series {
        &self.series[subject][block]
    }

    pub fn subject_series(&self, subject: usize) -> &[Series] {
        &self.series[subject]
    }

    pub fn standardization(&self) -> Option<&[BlockScale]> {
        self.standardization.as_deref()
    }

    pub fn time_range(&self) -> (f64, f64) {
        self.time_range
    }

    pub fn is_rescaled(&self) -> bool {
        self.rescaled
    }

    /// Total number of observations.
    pub fn n_observations(&self) -> usize {
        self.series.iter().flatten().map(Series::len).sum()
    }

    /// Pooled values of one block in subject order.
    pub fn block_values(&self, block: usize) -> impl Iterator<Item = f64> + '_ {
        self.series.iter().flat_map(move |row| row[block].values.iter().copied())
    }

    /// Per-block centring and scaling (sample sd, `n − 1` denominator) plus an
    /// affine map of all times onto `[0, 1]` using the global time range.
    pub fn standardize_and_rescale(&self) -> Result<Self, DatasetError> {
        if self.standardization.is_some() {
            return Err(DatasetError::AlreadyStandardized);
        }
        let mut scales = Vec::with_capacity(self.blocks.len());
        for (b, name) in self.blocks.iter().enumerate() {
            let vals: Vec<f64> = self.block_values(b).collect();
            let n = vals.len() as f64;
            if vals.len() < 2 {
                return Err(DatasetError::ZeroVariance(name.clone()));
            }
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if !(var > 0.0) {
                return Err(DatasetError::ZeroVariance(name.clone()));
            }
            scales.push(BlockScale { mean, sd: var.sqrt() });
        }
        let (lo, hi) = self.time_range;
        if !self.rescaled && !(hi > lo) {
            return Err(DatasetError::DegenerateTimeRange(lo));
        }
        let series = self
            .series
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&scales)
                    .map(|(s, sc)| Series {
                        times: if self.rescaled {
                            s.times.clone()
                        } else {
                            s.times.iter().map(|t| ((t - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
                        },
                        values: s.values.iter().map(|v| (v - sc.mean) / sc.sd).collect(),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            blocks: self.blocks.clone(),
            subjects: self.subjects.clone(),
            series,
            standardization: Some(scales),
            time_range: self.time_range,
            rescaled: true,
        })
    }

    /// Maps a standardized value of `block` back to original units.
    pub fn unstandardize_value(&self, block: usize, v: f64) -> f64 {
        match &self.standardization {
            Some(sc) => v * sc[block].sd + sc[block].mean,
            None => v,
        }
    }

    /// Maps a time on the internal clock back to original units.
    pub fn original_time(&self, t: f64) -> f64 {
        if self.rescaled {
            self.time_range.0 + t * (self.time_range.1 - self.time_range.0)
        } else {
            t
        }
    }

    /// Rows in original units, ordered by subject, block, then time.
    pub fn to_records(&self) -> Vec<ObservationRecord> {
        let mut out = Vec::with_capacity(self.n_observations());
        for (s, row) in self.series.iter().enumerate() {
            for (b, series) in row.iter().enumerate() {
                for (&t, &v) in series.times.iter().zip(&series.values) {
                    out.push(ObservationRecord::new(
                        self.subjects[s].clone(),
                        self.blocks[b].clone(),
                        self.original_time(t),
                        self.unstandardize_value(b, v),
                    ));
                }
            }
        }
        out
    }

    /// Restricts the dataset to a subset of subjects, preserving their order.
    pub fn select_subjects(&self, keep: &[usize]) -> Self {
        Self {
            blocks: self.blocks.clone(),
            subjects: keep.iter().map(|&i| self.subjects[i].clone()).collect(),
            series: keep.iter().map(|&i| self.series[i].clone()).collect(),
            standardization: self.standardization.clone(),
            time_range: self.time_range,
            rescaled: self.rescaled,
        }
    }
}

/// Reads `subject_id,block_id,time,value` rows.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<ObservationRecord>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Vec<ObservationRecord>, DatasetError> {
    read_csv(std::fs::File::open(path)?)
}

pub fn write_csv<W: Write>(writer: W, rows: &[ObservationRecord]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: &str, b: &str, t: f64, v: f64) -> ObservationRecord {
        ObservationRecord::new(s, b, t, v)
    }

    #[test]
    fn single_record() {
        let d = load_long_records(&[rec("s1", "b1", 0.0, 2.0)]).unwrap();
        assert_eq!((d.n_subjects(), d.n_blocks(), d.series(0, 0).len()), (1, 1, 1));
    }

    #[test]
    fn duplicate_is_rejected() {
        let rows = [rec("s1", "b1", 0.5, 1.0), rec("s1", "b1", 0.5, 2.0)];
        assert!(matches!(load_long_records(&rows), Err(DatasetError::DuplicateObservation { .. })));
    }

    #[test]
    fn empty_and_non_finite() {
        assert!(matches!(load_long_records(&[]), Err(DatasetError::EmptyInput)));
        assert!(matches!(
            load_long_records(&[rec("s", "b", f64::NAN, 1.0)]),
            Err(DatasetError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn grouping_counts() {
        let mut rows = Vec::new();
        for s in 0..100 {
            for b in 0..3 {
                rows.push(rec(&format!("s{s}"), &format!("b{b}"), (s * 7 % 11) as f64, (s + b) as f64));
            }
        }
        let d = load_long_records(&rows).unwrap();
        // Oracle: count distinct ids by hashing.
        let subj: std::collections::HashSet<_> = rows.iter().map(|r| &r.subject_id).collect();
        let blk: std::collections::HashSet<_> = rows.iter().map(|r| &r.block_id).collect();
        assert_eq!(d.n_subjects(), subj.len());
        assert_eq!(d.n_blocks(), blk.len());
        assert_eq!(d.n_observations(), 300);
    }

    #[test]
    fn series_sorted_and_blocks_in_first_appearance_order() {
        let rows = [rec("a", "y", 3.0, 1.0), rec("a", "x", 1.0, 1.0), rec("a", "y", 1.0, 2.0)];
        let d = load_long_records(&rows).unwrap();
        assert_eq!(d.blocks(), ["y", "x"]);
        assert_eq!(d.series(0, 0).times, vec![1.0, 3.0]);
        assert_eq!(d.series(0, 0).values, vec![2.0, 1.0]);
    }

    #[test]
    fn two_point_standardization() {
        let d = load_long_records(&[rec("s1", "b", 10.0, 1.0), rec("s2", "b", 30.0, 3.0)]).unwrap();
        let z = d.standardize_and_rescale().unwrap();
        // sd of {1, 3} with the n - 1 denominator is sqrt(2).
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((z.series(0, 0).values[0] + h).abs() < 1e-12);
        assert!((z.series(1, 0).values[0] - h).abs() < 1e-12);
        assert!(matches!(z.standardize_and_rescale(), Err(DatasetError::AlreadyStandardized)));
    }

    #[test]
    fn constant_block_has_zero_variance() {
        let rows = [rec("a", "b", 0.0, 2.0), rec("a", "b", 1.0, 2.0), rec("c", "b", 1.0, 2.0)];
        let d = load_long_records(&rows).unwrap();
        assert!(matches!(d.standardize_and_rescale(), Err(DatasetError::ZeroVariance(_))));
    }

    #[test]
    fn degenerate_time_range() {
        let rows = [rec("a", "b", 5.0, 1.0), rec("c", "b", 5.0, 2.0)];
        let d = load_long_records(&rows).unwrap();
        assert!(matches!(d.standardize_and_rescale(), Err(DatasetError::DegenerateTimeRange(_))));
    }

    #[test]
    fn times_affinely_rescaled_on_global_range() {
        let rows = [rec("a", "b1", 10.0, 1.0), rec("a", "b1", 20.0, 2.0), rec("a", "b2", 30.0, 0.0), rec("b", "b2", 20.0, 5.0)];
        let z = load_long_records(&rows).unwrap().standardize_and_rescale().unwrap();
        assert_eq!(z.series(0, 0).times, vec![0.0, 0.5]);
        assert_eq!(z.series(0, 1).times, vec![1.0]);
        assert!(z.series(1, 0).is_empty());
    }

    #[test]
    fn csv_roundtrip_with_blank_lines() {
        let text = "subject_id,block_id,time,value\ns1,b1,0.0,2.5\n\ns2,b1,1.0,-1.25\n";
        let rows = read_csv(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
        assert!(String::from_utf8(buf).unwrap().starts_with("subject_id,block_id,time,value\n"));
    }
}
