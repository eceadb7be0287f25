//! Pipeline configuration, read from a TOML file with one table per stage.
//!
//! Every section is optional and falls back to its defaults, except the keys
//! a full run cannot do without (`output.dir`, `seeds.master`,
//! `labeling.delta`), which [`PipelineConfig::require_complete`] checks.
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::labeling::{PseudoLabelConfig, Weighting, DEFAULT_EPS_W};
use crate::localization::LocConfig;
use crate::mobility::{FeatureConfig, MobilityConfig};
use crate::model::ArchConfig;
use crate::neural::{AdamConfig, LrSchedule, SgdConfig};
use crate::radio_sim::PropagationParams;
use crate::ssl::StageConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output: OutputSection,
    pub seeds: SeedSection,
    pub field: FieldSection,
    pub mobility: MobilityConfig,
    pub features: FeatureConfig,
    pub data: DataSection,
    pub arch: ArchConfig,
    pub augment: AugmentConfig,
    pub stage1: StageSection,
    pub stage2: StageSection,
    pub labeling: LabelingSection,
    pub localization: LocSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Artifact directory. Relative paths resolve against the config file's directory.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub master: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub width: f64,
    pub height: f64,
    pub spacing: f64,
    /// Number of randomly placed APs; ignored when `ap_file` is set.
    pub aps: usize,
    /// File of "x y" lines with explicit AP coordinates.
    pub ap_file: Option<PathBuf>,
    pub propagation: PropagationParams,
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection {
            width: 30.0,
            height: 30.0,
            spacing: 0.5,
            aps: 8,
            ap_file: None,
            propagation: PropagationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Unlabeled crowdsourced trajectories.
    pub crowd: usize,
    /// Length-`2t-1` sequences for the second training stage.
    pub crowd_long: usize,
    /// Labeled trajectories.
    pub labeled: usize,
    pub test: usize,
    /// Held-out length-`2t-1` sequences for the same-endpoint similarity check.
    pub heldout_pairs: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            crowd: 5000,
            crowd_long: 5000,
            labeled: 200,
            test: 1000,
            heldout_pairs: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub sgd: SgdConfig,
    /// Stage 2: add augmentation noise to both cut-and-flip halves.
    pub pair_noise: bool,
    /// Overrides the top-level `[augment]` table for this stage.
    pub augment: Option<AugmentConfig>,
}

impl Default for StageSection {
    fn default() -> Self {
        let d = StageConfig::default();
        StageSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            schedule: d.schedule,
            sgd: d.sgd,
            pair_noise: d.pair_noise,
            augment: None,
        }
    }
}

impl StageSection {
    pub fn to_stage_config(&self, shared: &AugmentConfig, seed: u64) -> StageConfig {
        StageConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            sgd: self.sgd,
            augment: self.augment.clone().unwrap_or_else(|| shared.clone()),
            pair_noise: self.pair_noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingSection {
    /// Threshold used to build the refined set that localization trains on.
    pub delta: Option<f64>,
    /// Extra thresholds reported in the pseudo-label quality table.
    pub sweep: Vec<f64>,
    pub weighting: Weighting,
    pub eps_w: f64,
}

impl Default for LabelingSection {
    fn default() -> Self {
        LabelingSection {
            delta: None,
            sweep: vec![0.8, 0.9],
            weighting: Weighting::Similarity,
            eps_w: DEFAULT_EPS_W,
        }
    }
}

impl LabelingSection {
    pub fn label_config(&self, delta: f64) -> PseudoLabelConfig {
        PseudoLabelConfig {
            delta,
            weighting: self.weighting,
            eps_w: self.eps_w,
        }
    }

    /// The training threshold followed by the sweep, deduplicated, ascending.
    pub fn all_deltas(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.sweep.iter().copied().chain(self.delta).collect();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocSection {
    pub finetune_encoders: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub knn_k: usize,
}

impl Default for LocSection {
    fn default() -> Self {
        let d = LocConfig::default();
        LocSection {
            finetune_encoders: d.finetune_encoders,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            adam: d.adam,
            knn_k: 3,
        }
    }
}

impl LocSection {
    pub fn to_loc_config(&self, seed: u64) -> LocConfig {
        LocConfig {
            finetune_encoders: self.finetune_encoders,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            adam: self.adam,
            seed,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a config file. A relative `output.dir` or `field.ap_file` is
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = cfg.output.dir.as_mut() {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if let Some(f) = cfg.field.ap_file.as_mut() {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Check the keys a full pipeline run needs and validate every section.
    pub fn require_complete(&self) -> Result<()> {
        if self.output.dir.is_none() {
            return Err(Error::Config("missing key `output.dir`".into()));
        }
        if self.seeds.master.is_none() {
            return Err(Error::Config("missing key `seeds.master`".into()));
        }
        let Some(delta) = self.labeling.delta else {
            return Err(Error::Config("missing key `labeling.delta`".into()));
        };
        self.labeling.label_config(delta).validate()?;
        for d in &self.labeling.sweep {
            self.labeling.label_config(*d).validate()?;
        }
        self.validate_sections()
    }

    pub fn validate_sections(&self) -> Result<()> {
        let f = &self.field;
        if !(f.width > 0.0 && f.height > 0.0 && f.spacing > 0.0) {
            return Err(Error::Config("field width, height and spacing must be positive".into()));
        }
        if f.ap_file.is_none() && f.aps == 0 {
            return Err(Error::Config("field.aps must be >= 1".into()));
        }
        f.propagation.validate()?;
        self.mobility.validate()?;
        self.features.validate()?;
        self.arch.validate()?;
        let d = &self.data;
        if d.crowd < 2 || d.crowd_long < 2 || d.labeled == 0 || d.test == 0 {
            return Err(Error::Config(
                "data needs crowd >= 2, crowd_long >= 2, labeled >= 1, test >= 1".into(),
            ));
        }
        let t = self.mobility.t;
        let s1 = self.stage1.to_stage_config(&self.augment, 0);
        s1.validate()?;
        s1.augment.validate(t)?;
        let s2 = self.stage2.to_stage_config(&self.augment, 0);
        s2.validate()?;
        if s2.pair_noise {
            s2.augment.validate(t)?;
        }
        self.localization.to_loc_config(0).validate()?;
        if self.localization.knn_k == 0 || self.localization.knn_k > d.labeled {
            return Err(Error::Config(format!(
                "localization.knn_k must lie in 1..={}, got {}",
                d.labeled, self.localization.knn_k
            )));
        }
        Ok(())
    }

    pub fn master_seed(&self) -> u64 {
        self.seeds.master.unwrap_or(0)
    }
}
