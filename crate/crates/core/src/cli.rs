//! Command-line front end: cohort synthesis, cross-validation, ablation, and
//! gradient verification.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dfc::{BoldSeries, Label, WindowSpec};
use crate::error::{Error, Result};
use crate::evaluation::{kfold_split, run_ablation, run_cv, subjects_of, CvResult, MetricValues};
use crate::gradcheck::{self, Corruption, GradcheckReport};
use crate::model::{ModelConfig, Variant};
use crate::numerics::Tensor;
use crate::synthcohort::{generate_cohort, SynthConfig};
use crate::training::{Sample, TrainConfig};

pub const RESULTS_FORMAT: &str = "dfcformer-results/1";
pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    /// Seed of the subject-level fold assignment.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { folds: 5, seed: 0 }
    }
}

/// Everything a run depends on. Every section and key is optional; unknown
/// keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub window: WindowSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => Self::from_toml(&read_text(p)?),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.window.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.folds < 2 {
            return Err(Error::config("eval.folds must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dfcformer", version, about = "Spatio-temporal transformer over dynamic functional connectivity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort: one CSV per scan plus a manifest.
    Synth(SynthArgs),
    /// Cross-validate a model (or every ablation variant) on a manifest.
    Cv(CvArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Manifest CSV with columns subject_id, scan_id, label, path.
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Results JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides both the fold-assignment seed and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Run all four variants on shared folds.
    #[arg(long)]
    pub ablate: bool,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub window_length: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturb the analytic gradient of one group before comparison.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn roi_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("roi_{i:03}")).collect()
}

pub fn scan_to_csv(samples: &Tensor) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::data(e.to_string());
    w.write_record(roi_names(samples.cols())).map_err(csv_err)?;
    for r in 0..samples.rows() {
        w.write_record(samples.row(r).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::data(e.to_string()))
}

pub fn read_scan(path: &Path) -> Result<Tensor> {
    let text = read_text(path)?;
    let bad = |msg: String| Error::data(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let cols = reader.headers().map_err(|e| bad(e.to_string()))?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| bad(format!("row {}: not a number: {field:?}", i + 1)))?;
            if !v.is_finite() {
                return Err(bad(format!("row {}: non-finite value", i + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    Tensor::from_vec(rows, cols, values).map_err(|_| bad("inconsistent row lengths".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub scan_id: String,
    pub label: Label,
    /// Scan file, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let entries = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(Error::data(format!("{}: manifest lists no scans", path.display())));
    }
    Ok(entries)
}

/// Loads every scan listed in a manifest, checking that all share one ROI count.
pub fn load_cohort(manifest: &Path) -> Result<Vec<BoldSeries>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out: Vec<BoldSeries> = Vec::new();
    for entry in read_manifest(manifest)? {
        let path = base.join(&entry.path);
        let samples = read_scan(&path)?;
        let series = BoldSeries::new(&entry.subject_id, &entry.scan_id, entry.label, samples)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if let Some(first) = out.first() {
            if first.n_rois() != series.n_rois() {
                return Err(Error::data(format!(
                    "{}: {} ROIs, expected {} as in {}",
                    path.display(),
                    series.n_rois(),
                    first.n_rois(),
                    first.scan_id
                )));
            }
        }
        out.push(series);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub subjects: usize,
    pub scans: usize,
    pub n_rois: usize,
    pub n_timepoints: usize,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<SynthSummary> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    cfg.validate()?;
    let data = generate_cohort(&cfg.synth)?;
    fs::create_dir_all(&args.out).map_err(|source| Error::Io { path: args.out.clone(), source })?;

    let mut manifest = csv::Writer::from_writer(Vec::new());
    for s in &data.series {
        let file = format!("{}.csv", s.scan_id);
        write_atomic(&args.out.join(&file), &scan_to_csv(&s.samples)?)?;
        manifest
            .serialize(ManifestEntry {
                subject_id: s.subject_id.clone(),
                scan_id: s.scan_id.clone(),
                label: s.label,
                path: PathBuf::from(file),
            })
            .map_err(|e| Error::data(e.to_string()))?;
    }
    let bytes = manifest.into_inner().map_err(|e| Error::data(e.to_string()))?;
    write_atomic(&args.out.join(MANIFEST_NAME), &bytes)?;

    Ok(SynthSummary {
        subjects: 2 * cfg.synth.n_subjects_per_group,
        scans: data.series.len(),
        n_rois: cfg.synth.n_rois,
        n_timepoints: cfg.synth.n_timepoints,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSummary {
    pub subjects: usize,
    pub scans: usize,
    pub n_rois: usize,
    pub n_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultsFile {
    pub format: &'static str,
    pub config: RunConfig,
    pub ablate: bool,
    pub data: DataSummary,
    pub results: Vec<CvResult>,
}

impl ResultsFile {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }
}

/// Applies command-line overrides to a loaded config.
pub fn resolve_cv_config(args: &CvArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.eval.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(k) = args.folds {
        cfg.eval.folds = k;
    }
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(l) = args.window_length {
        cfg.window.length = l;
    }
    if let Some(s) = args.stride {
        cfg.window.stride = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_cv(args: &CvArgs) -> Result<ResultsFile> {
    let cfg = resolve_cv_config(args)?;
    let series = load_cohort(&args.manifest)?;
    let samples: Vec<Sample> = series
        .iter()
        .map(|s| Sample::from_series(s, cfg.window))
        .collect::<Result<_>>()?;
    let subjects = subjects_of(&samples)?;
    // Fails early, before any training, if the cohort cannot be split.
    kfold_split(&subjects, cfg.eval.folds, cfg.eval.seed)?;
    let dims = samples[0].dims();
    let results = if args.ablate {
        run_ablation(&samples, &cfg.model, &cfg.train, cfg.eval.folds, cfg.eval.seed, &Variant::ALL)?.rows
    } else {
        vec![run_cv(&samples, &cfg.model, &cfg.train, cfg.eval.folds, cfg.eval.seed)?]
    };
    let file = ResultsFile {
        format: RESULTS_FORMAT,
        config: cfg,
        ablate: args.ablate,
        data: DataSummary { subjects: subjects.len(), scans: samples.len(), n_rois: dims.n_rois, n_windows: dims.n_windows },
        results,
    };
    write_atomic(&args.out, file.to_json()?.as_bytes())?;
    Ok(file)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport> {
    let report = gradcheck::run(args.seed, &Corruption { group: args.corrupt.clone() })?;
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::data(e.to_string()))?;
        write_atomic(out, json.as_bytes())?;
    }
    Ok(report)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

pub fn format_table(results: &[CvResult]) -> String {
    let mut s = format!("{:<8} {:>6} {:>6} {:>6} {:>6} {:>6}\n", "Method", "ACC", "SEN", "SPE", "AUC", "F1");
    for r in results {
        let MetricValues { acc, sen, spe, auc, f1 } = r.mean;
        s.push_str(&format!(
            "{:<8} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            r.variant.name(),
            pct(acc),
            pct(sen),
            pct(spe),
            pct(auc),
            pct(f1)
        ));
    }
    s
}

/// Runs a parsed command, printing its human-readable output. Returns the
/// process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(&args).map(|s| {
            println!(
                "wrote {} scans for {} subjects ({} ROIs x {} time points) to {}",
                s.scans,
                s.subjects,
                s.n_rois,
                s.n_timepoints,
                args.out.display()
            );
            0
        }),
        Command::Cv(args) => cmd_cv(&args).map(|r| {
            print!("{}", format_table(&r.results));
            println!("results written to {}", args.out.display());
            0
        }),
        Command::Gradcheck(args) => cmd_gradcheck(&args).map(|report| {
            for g in &report.groups {
                println!(
                    "{:<32} {:>6} coords  worst rel err {:.3e}  {}",
                    g.group,
                    g.coordinates,
                    g.worst_relative_error,
                    if g.passed() { "ok" } else { "FAIL" }
                );
            }
            let failed: Vec<&str> = report.failures().map(|g| g.group.as_str()).collect();
            if failed.is_empty() {
                0
            } else {
                eprintln!("gradient check failed for: {}", failed.join(", "));
                3
            }
        }),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    })
}
