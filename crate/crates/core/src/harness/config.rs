use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CohortSpec;
use crate::ensemble::{AggregationMode, SmoothingKernel, DEFAULT_GAP_LIMIT};
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::signal::NoMotionPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExperimentKind {
    /// One network per patient subset, scored individually and averaged.
    CnnSingle,
    /// One network per left-out patient, trained on everyone else.
    CnnLoso,
    /// Window-level k-fold cross-validation over the pooled corpus.
    Kfold10,
    /// Weight-dropout copies of each leave-one-out network.
    EsbDropout,
    /// Several initializations per patient subset.
    EsbDiffinit,
    /// One network per patient subset, aggregated over eligible subsets.
    EsbDiffpat,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::CnnSingle => "CNN_SINGLE",
            ExperimentKind::CnnLoso => "CNN_LOSO",
            ExperimentKind::Kfold10 => "KFOLD10",
            ExperimentKind::EsbDropout => "ESB_DROPOUT",
            ExperimentKind::EsbDiffinit => "ESB_DIFFINIT",
            ExperimentKind::EsbDiffpat => "ESB_DIFFPAT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(CohortSpec),
    /// Directory of `patient_<id>_raw.csv` / `patient_<id>_labels.csv` pairs.
    CsvDir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetSource,
    pub net: NetConfig,
    pub no_motion: NoMotionPolicy,
    pub subset_size: usize,
    pub subset_count: usize,
    /// Members per dropout or initialization ensemble.
    pub ensemble_size: usize,
    pub drop_fraction: f64,
    pub kfold: usize,
    pub aggregation: AggregationMode,
    pub smoothing: Vec<SmoothingKernel>,
    pub gap_limit: u32,
    /// Kernel used for the `smoothed_pred` column of the aggregated dump.
    pub dump_kernel: SmoothingKernel,
    pub confidence_fraction: f64,
    /// Minimum top-set share for a patient to count in interpolation accuracy.
    pub coverage_threshold: f64,
    /// Draw fresh subsets for every left-out patient instead of sharing one pool.
    pub retrain_per_fold: bool,
    /// Seeds subset sampling, fold assignment and dropout masks.
    /// Network initialization and shuffling use `net.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::EsbDiffpat,
            dataset: DatasetSource::Synthetic(CohortSpec::default()),
            net: NetConfig::default(),
            no_motion: NoMotionPolicy::default(),
            subset_size: 15,
            subset_count: 100,
            ensemble_size: 50,
            drop_fraction: 0.3,
            kfold: 10,
            aggregation: AggregationMode::Majority,
            smoothing: SmoothingKernel::SWEEP.to_vec(),
            gap_limit: DEFAULT_GAP_LIMIT,
            dump_kernel: SmoothingKernel::Minutes(11),
            confidence_fraction: 0.2,
            coverage_threshold: 0.3,
            retrain_per_fold: false,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let uses_subsets = matches!(
            self.kind,
            ExperimentKind::CnnSingle | ExperimentKind::EsbDiffinit | ExperimentKind::EsbDiffpat
        );
        if uses_subsets && (self.subset_size == 0 || self.subset_count == 0) {
            return bad("subset_size and subset_count must be positive".into());
        }
        if matches!(self.kind, ExperimentKind::EsbDropout | ExperimentKind::EsbDiffinit) && self.ensemble_size == 0 {
            return bad("ensemble_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.drop_fraction) {
            return bad(format!("drop_fraction {} outside [0, 1]", self.drop_fraction));
        }
        if self.kind == ExperimentKind::Kfold10 && self.kfold < 2 {
            return bad("kfold must be at least 2".into());
        }
        if !(self.confidence_fraction > 0.0 && self.confidence_fraction <= 1.0) {
            return bad(format!(
                "confidence_fraction {} outside (0, 1]",
                self.confidence_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.coverage_threshold) {
            return bad(format!("coverage_threshold {} outside [0, 1]", self.coverage_threshold));
        }
        for k in self.smoothing.iter().chain([&self.dump_kernel]) {
            k.validate()?;
        }
        if let DatasetSource::Synthetic(c) = &self.dataset {
            c.profiles()?;
        }
        Ok(())
    }

    /// Digest of everything that influences trained weights apart from what
    /// member names already encode (fold, initialization, pool). Members
    /// cached under it are shared by runs that differ only in kind,
    /// ensemble size, aggregation or reporting.
    pub fn training_hash(&self) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "net": self.net,
            "no_motion": self.no_motion,
            "subset_size": self.subset_size,
            "subset_count": self.subset_count,
            "seed": self.seed,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
