//! Whole-pipeline configuration: one TOML file, overridable from the command
//! line, hashed into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discovery::DiscoveryConfig;
use crate::embedding::TrainConfig;
use crate::error::{Error, Result};
use crate::objectness::{ModulationMode, ObjectnessConfig};
use crate::patches::SamplerConfig;
use crate::util::json_hash;

/// Environment variable that overrides `output_dir` from the file.
pub const OUTPUT_ENV: &str = "PATCHDISC_OUTPUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thres: Vec<f64>,
    /// Repeated inference runs, each with its own pool.
    pub n_runs: usize,
    /// Largest per-image prediction cap in the F1 sweep.
    pub max_predictions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thres: vec![0.5, 0.4],
            n_runs: 10,
            max_predictions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset manifest consumed by `prepare`.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub objectness: ObjectnessConfig,
    pub train: TrainConfig,
    pub discovery: DiscoveryConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            sampler: SamplerConfig::default(),
            objectness: ObjectnessConfig::default(),
            train: TrainConfig::default(),
            discovery: DiscoveryConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<ModulationMode>,
    pub post_objectness: Option<bool>,
    pub output_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub n_runs: Option<usize>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("config", origin, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    /// Defaults, then `path` if given, then `$PATCHDISC_OUTPUT`, then `ov`.
    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let mut cfg = Self::from_toml(&text, p)?;
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.manifest = cfg.manifest.map(|m| base.join(m));
                cfg
            }
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(m) = ov.mode {
            self.train.modulation = m;
        }
        if let Some(p) = ov.post_objectness {
            self.discovery.post_objectness = p;
        }
        if let Some(d) = &ov.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(e) = ov.epochs {
            self.train.epochs = e;
        }
        if let Some(n) = ov.n_runs {
            self.eval.n_runs = n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.train.validate()?;
        self.discovery.validate()?;
        let o = &self.objectness;
        if o.hue_bins == 0 || o.sat_bins == 0 || !(o.band_factor > 0.0) {
            return Err(Error::Config("objectness: bins must be positive and band_factor > 0".into()));
        }
        if o.kmeans.k == 0 || o.background_patches_per_image == 0 {
            return Err(Error::Config("objectness: k and background_patches_per_image must be positive".into()));
        }
        let e = &self.eval;
        if e.iou_thres.is_empty() || e.iou_thres.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::Config("eval.iou_thres must be a non-empty list in [0, 1)".into()));
        }
        if e.n_runs == 0 || e.max_predictions == 0 {
            return Err(Error::Config("eval.n_runs and eval.max_predictions must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.manifest = None;
        json_hash(&c)
    }
}
