//! Sliding-window dynamic functional connectivity.
//!
//! A scan's ROI time series is cut into overlapping windows; each window
//! yields one Pearson correlation matrix. Each matrix is then reduced to one
//! node-strength value per ROI, giving the temporal (windows × ROIs) and
//! spatial (ROIs × windows) feature matrices fed to the two model streams.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Diagnosis label. MCI is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NC")]
    Nc = 0,
    #[serde(rename = "MCI")]
    Mci = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Label::Mci
        } else {
            Label::Nc
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Nc => "NC",
            Label::Mci => "MCI",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "NC" => Ok(Label::Nc),
            "MCI" => Ok(Label::Mci),
            other => Err(Error::data(format!("unknown label {other:?} (expected NC or MCI)"))),
        }
    }
}

/// One scan's ROI-averaged BOLD series, `samples` is time × ROIs.
#[derive(Clone, Debug, PartialEq)]
pub struct BoldSeries {
    pub subject_id: String,
    pub scan_id: String,
    pub label: Label,
    pub samples: Tensor,
}

impl BoldSeries {
    pub fn new(subject_id: impl Into<String>, scan_id: impl Into<String>, label: Label, samples: Tensor) -> Result<Self> {
        if samples.cols() < 2 {
            return Err(Error::data(format!("a scan needs at least 2 ROIs, got {}", samples.cols())));
        }
        if !samples.is_finite() {
            return Err(Error::data("scan contains non-finite samples"));
        }
        Ok(BoldSeries { subject_id: subject_id.into(), scan_id: scan_id.into(), label, samples })
    }

    pub fn n_rois(&self) -> usize {
        self.samples.cols()
    }

    pub fn n_timepoints(&self) -> usize {
        self.samples.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    /// Window length in time points.
    pub length: usize,
    /// Step between consecutive window starts.
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { length: 70, stride: 2 }
    }
}

impl WindowSpec {
    pub fn new(length: usize, stride: usize) -> Result<Self> {
        let spec = WindowSpec { length, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.stride > self.length {
            return Err(Error::config(format!(
                "window stride must satisfy 1 <= stride <= length, got stride {} with length {}",
                self.stride, self.length
            )));
        }
        if self.length < 2 {
            return Err(Error::config("window length must be at least 2 samples"));
        }
        Ok(())
    }
}

/// Number of full windows: `floor((total − L) / S) + 1`.
pub fn window_count(total: usize, spec: WindowSpec) -> Result<usize> {
    spec.validate()?;
    if total < spec.length {
        return Err(Error::data(format!("series of {total} samples is shorter than the window length {}", spec.length)));
    }
    Ok((total - spec.length) / spec.stride + 1)
}

/// Sample Pearson correlation between every pair of columns.
pub fn pearson_matrix(window: &Tensor) -> Result<Tensor> {
    pearson_at(window, 0)
}

fn pearson_at(window: &Tensor, window_start: usize) -> Result<Tensor> {
    let (len, n) = window.shape();
    if len < 2 {
        return Err(Error::data(format!("correlation needs at least 2 samples, got {len}")));
    }
    let mut centered = Tensor::zeros(n, len);
    for c in 0..n {
        let col = window.column(c);
        let mean = col.iter().sum::<f64>() / len as f64;
        let dev = centered.row_mut(c);
        for (d, v) in dev.iter_mut().zip(&col) {
            *d = v - mean;
        }
        let ss: f64 = dev.iter().map(|d| d * d).sum();
        if ss == 0.0 {
            return Err(Error::DegenerateColumn { roi: c, window_start });
        }
        let norm = ss.sqrt();
        for d in dev.iter_mut() {
            *d /= norm;
        }
    }
    let mut out = Tensor::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r: f64 = centered.row(i).iter().zip(centered.row(j)).map(|(a, b)| a * b).sum();
            let r = r.clamp(-1.0, 1.0);
            out.set(i, j, r);
            out.set(j, i, r);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfcSequence {
    pub matrices: Vec<Tensor>,
    pub window_starts: Vec<usize>,
}

impl DfcSequence {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

fn rows_slice(samples: &Tensor, start: usize, len: usize) -> Tensor {
    let n = samples.cols();
    Tensor::from_vec(len, n, samples.values()[start * n..(start + len) * n].to_vec())
        .expect("slice of a well-formed tensor")
}

pub fn build_dfc(series: &BoldSeries, spec: WindowSpec) -> Result<DfcSequence> {
    let count = window_count(series.n_timepoints(), spec)?;
    let mut matrices = Vec::with_capacity(count);
    let mut window_starts = Vec::with_capacity(count);
    for t in 0..count {
        let start = t * spec.stride;
        matrices.push(pearson_at(&rows_slice(&series.samples, start, spec.length), start)?);
        window_starts.push(start);
    }
    Ok(DfcSequence { matrices, window_starts })
}

/// Mean absolute off-diagonal correlation of each ROI.
pub fn node_strength(fc: &Tensor) -> Vec<f64> {
    let n = fc.rows();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            let row = fc.row(i);
            row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.abs()).sum::<f64>() / (n - 1) as f64
        })
        .collect()
}

/// Paired model inputs; `spatial` is exactly `temporal` transposed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrices {
    /// windows × ROIs
    pub temporal: Tensor,
    /// ROIs × windows
    pub spatial: Tensor,
}

impl FeatureMatrices {
    pub fn n_windows(&self) -> usize {
        self.temporal.rows()
    }

    pub fn n_rois(&self) -> usize {
        self.temporal.cols()
    }
}

pub fn build_features(dfc: &DfcSequence) -> Result<FeatureMatrices> {
    let first = dfc.matrices.first().ok_or_else(|| Error::contract("dFC sequence is empty"))?;
    let n = first.rows();
    let mut rows = Vec::with_capacity(dfc.len());
    for m in &dfc.matrices {
        if m.shape() != (n, n) {
            return Err(Error::Shape { op: "build_features", lhs: first.shape(), rhs: m.shape() });
        }
        rows.push(node_strength(m));
    }
    let temporal = Tensor::from_rows(&rows)?;
    let spatial = temporal.transpose();
    Ok(FeatureMatrices { temporal, spatial })
}

/// Correlation over the whole series.
pub fn static_fc(series: &BoldSeries) -> Result<Tensor> {
    pearson_matrix(&series.samples)
}
