//! Synthetic BOLD-like cohorts with group-dependent connectivity dynamics.
//!
//! Every scan alternates between two latent connectivity states. Both groups
//! share the same state templates and differ only in how long they dwell in
//! each state, so whole-scan correlation carries little group information
//! while the sequence of windowed correlations carries a lot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dfc::{build_dfc, build_features, BoldSeries, Label, WindowSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects_per_group: usize,
    pub scans_per_subject: usize,
    pub n_rois: usize,
    pub n_timepoints: usize,
    /// Within-block correlation of the block a state emphasises.
    pub strong_correlation: f64,
    /// Within-block correlation of the other block.
    pub weak_correlation: f64,
    /// Mean dwell time (samples) in state 0 and state 1 for NC scans.
    pub dwell_mean_nc: [f64; 2],
    /// Mean dwell time (samples) in state 0 and state 1 for MCI scans.
    pub dwell_mean_mci: [f64; 2],
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects_per_group: 30,
            scans_per_subject: 1,
            n_rois: 12,
            n_timepoints: 200,
            strong_correlation: 0.9,
            weak_correlation: 0.0,
            dwell_mean_nc: [60.0, 60.0],
            dwell_mean_mci: [4.0, 4.0],
            noise_std: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects_per_group < 1 || self.scans_per_subject < 1 {
            return Err(Error::config("synth: need at least one subject per group and one scan per subject"));
        }
        if self.n_rois < 2 {
            return Err(Error::config("synth.n_rois must be at least 2"));
        }
        if self.n_timepoints < 2 {
            return Err(Error::config("synth.n_timepoints must be at least 2"));
        }
        if self.dwell_mean_nc.iter().chain(&self.dwell_mean_mci).any(|&d| !(d >= 2.0 && d.is_finite())) {
            return Err(Error::config("synth dwell means must be at least 2 samples"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("synth.noise_std must be positive"));
        }
        for t in self.templates() {
            cholesky(&t).map_err(|e| Error::config(format!("synth state template is not a valid correlation matrix: {e}")))?;
        }
        Ok(())
    }

    pub fn dwell_means(&self, label: Label) -> [f64; 2] {
        match label {
            Label::Nc => self.dwell_mean_nc,
            Label::Mci => self.dwell_mean_mci,
        }
    }

    /// Two block-structured correlation templates: state 0 couples the first
    /// half of the ROIs strongly, state 1 the second half.
    pub fn templates(&self) -> [Tensor; 2] {
        let n = self.n_rois;
        let half = n / 2;
        let make = |first_strong: bool| {
            let mut t = Tensor::identity(n);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let (bi, bj) = (i < half, j < half);
                    if bi == bj {
                        let strong = bi == first_strong;
                        t.set(i, j, if strong { self.strong_correlation } else { self.weak_correlation });
                    }
                }
            }
            t
        };
        [make(true), make(false)]
    }
}

/// Lower-triangular `C` with `C Cᵀ = a`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape { op: "cholesky", lhs: a.shape(), rhs: (n, n) });
    }
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-12 {
                return Err(Error::Factorization(format!("matrix is not symmetric at ({i}, {j})")));
            }
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if !(d > 0.0) {
                    return Err(Error::Factorization(format!("matrix is not positive definite (pivot {i})")));
                }
                l.set(i, i, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// `len` i.i.d. rows with population correlation `template`.
pub fn correlated_noise<R: Rng>(template: &Tensor, len: usize, rng: &mut R) -> Result<Tensor> {
    let chol = cholesky(template)?;
    Ok(correlated_rows(&chol, len, rng))
}

fn correlated_rows<R: Rng>(chol: &Tensor, len: usize, rng: &mut R) -> Tensor {
    let n = chol.rows();
    let mut out = Tensor::zeros(len, n);
    let mut z = vec![0.0; n];
    for t in 0..len {
        for zi in &mut z {
            *zi = rng.sample(StandardNormal);
        }
        let row = out.row_mut(t);
        for i in 0..n {
            row[i] = (0..=i).map(|k| chol.get(i, k) * z[k]).sum();
        }
    }
    out
}

/// A run of consecutive samples spent in one latent state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSegment {
    pub start: usize,
    pub len: usize,
    pub state: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub scan_id: String,
    pub segments: Vec<StateSegment>,
}

/// Generates one scan: geometric dwell times per state, correlated signal
/// from the active template plus white observation noise.
pub fn generate_scan<R: Rng>(
    label: Label,
    subject_id: &str,
    scan_id: &str,
    config: &SynthConfig,
    rng: &mut R,
) -> Result<(BoldSeries, GenerationRecord)> {
    let templates = config.templates();
    let factors = [cholesky(&templates[0])?, cholesky(&templates[1])?];
    let dwell = config.dwell_means(label);
    let geometric = [
        Geometric::new(1.0 / dwell[0]).map_err(|e| Error::config(format!("dwell mean: {e}")))?,
        Geometric::new(1.0 / dwell[1]).map_err(|e| Error::config(format!("dwell mean: {e}")))?,
    ];

    let total = config.n_timepoints;
    let n = config.n_rois;
    let mut values = Vec::with_capacity(total * n);
    let mut segments = Vec::new();
    let mut state = rng.random_range(0..2usize);
    let mut t = 0;
    while t < total {
        // Geometric counts failures before the first success, so +1 gives mean `dwell`.
        let len = ((geometric[state].sample(rng) + 1) as usize).min(total - t);
        let block = correlated_rows(&factors[state], len, rng);
        values.extend(block.values().iter().map(|&v| v + config.noise_std * rng.sample::<f64, _>(StandardNormal)));
        segments.push(StateSegment { start: t, len, state });
        t += len;
        state = 1 - state;
    }
    let samples = Tensor::from_vec(total, n, values)?;
    ensure_no_flat_runs(&samples, scan_id)?;
    let series = BoldSeries::new(subject_id, scan_id, label, samples)?;
    Ok((series, GenerationRecord { scan_id: scan_id.to_string(), segments }))
}

/// No column repeats a value on consecutive samples, so every window of two
/// or more samples has non-zero variance.
fn ensure_no_flat_runs(samples: &Tensor, scan_id: &str) -> Result<()> {
    for t in 1..samples.rows() {
        for (c, (a, b)) in samples.row(t - 1).iter().zip(samples.row(t)).enumerate() {
            if a == b {
                return Err(Error::data(format!("generated scan {scan_id} has a flat run in ROI {c} at sample {t}")));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub series: Vec<BoldSeries>,
    pub log: Vec<GenerationRecord>,
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:03}")
}

/// NC subjects first, then MCI; each scan draws from its own seed stream.
pub fn generate_cohort(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut series = Vec::new();
    let mut log = Vec::new();
    let groups = [Label::Nc, Label::Mci];
    let mut scan_index = 0u64;
    for (g, &label) in groups.iter().enumerate() {
        for s in 0..config.n_subjects_per_group {
            let subject = subject_id(g * config.n_subjects_per_group + s + 1);
            for k in 0..config.scans_per_subject {
                let scan_id = format!("{subject}_scan-{}", k + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, scan_index));
                let (bold, record) = generate_scan(label, &subject, &scan_id, config, &mut rng)?;
                series.push(bold);
                log.push(record);
                scan_index += 1;
            }
        }
    }
    Ok(SynthDataset { series, log })
}

/// Mean over ROIs of the across-window variance of node strength.
pub fn dynamics_score(series: &BoldSeries, spec: WindowSpec) -> Result<f64> {
    let feats = build_features(&build_dfc(series, spec)?)?;
    let t = feats.temporal;
    let windows = t.rows() as f64;
    let total: f64 = (0..t.cols())
        .map(|c| {
            let col = t.column(c);
            let mean = col.iter().sum::<f64>() / windows;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / windows
        })
        .sum();
    Ok(total / t.cols() as f64)
}

/// Accuracy of a median-split threshold on [`dynamics_score`], predicting the
/// group with the longer mean dwell for scores above the median.
pub fn oracle_accuracy(dataset: &SynthDataset, config: &SynthConfig, spec: WindowSpec) -> Result<f64> {
    let scores: Vec<f64> = dataset.series.iter().map(|s| dynamics_score(s, spec)).collect::<Result<_>>()?;
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    let slow = if config.dwell_mean_nc.iter().sum::<f64>() >= config.dwell_mean_mci.iter().sum::<f64>() {
        Label::Nc
    } else {
        Label::Mci
    };
    let correct = dataset
        .series
        .iter()
        .zip(&scores)
        .filter(|(s, &score)| (score > median) == (s.label == slow))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}
