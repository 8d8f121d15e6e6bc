//! Run configuration: one JSON file with a section per stage. Every section
//! is optional and falls back to its defaults; the whole tree is validated
//! before any work starts.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use voxelfm_core::augment::TransformPipeline;
use voxelfm_core::embeddings::Aggregation;
use voxelfm_core::encoder::EncoderConfig;
use voxelfm_core::objectives::ObjectiveKind;
use voxelfm_core::trainer::{AblationConfig, ProbeConfig, SamplingStrategy, TrainConfig};
use voxelfm_core::volume::CorpusSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: CorpusSpec,
    /// Replaces `training.pipeline` when given.
    pub pipeline: Option<TransformPipeline>,
    pub encoder: EncoderConfig,
    pub training: TrainConfig,
    pub ablation: AblationConfig,
    pub search: SearchDefaults,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: CorpusSpec::redundant(8, [32, 32, 32]),
            pipeline: None,
            encoder: EncoderConfig::default(),
            training: TrainConfig::default(),
            ablation: AblationConfig {
                strategies: vec![SamplingStrategy::Intra, SamplingStrategy::Inter],
                variants: vec![ObjectiveKind::Ntxent],
                crop_counts: vec![8],
                seeds: vec![0, 1, 2],
                probe_shots: 2,
                probe_holdout: 4,
                probe: ProbeConfig::default(),
            },
            search: SearchDefaults::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Defaults for the analysis subcommands and the service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchDefaults {
    /// Window (and query box) size for search, stability and PCA maps.
    pub patch: [usize; 3],
    /// `None` means stride = patch.
    pub stride: Option<[usize; 3]>,
    pub occluder: [usize; 3],
    pub occlusion_stride: Option<[usize; 3]>,
    /// Occlusion fill in HU; `None` uses the volume minimum.
    pub fill: Option<f32>,
    pub outlier_threshold: f64,
    pub top_k: usize,
    pub aggregation: Aggregation,
}

impl Default for SearchDefaults {
    fn default() -> Self {
        Self {
            patch: [16, 16, 16],
            stride: None,
            occluder: [8, 8, 8],
            occlusion_stride: None,
            fill: None,
            outlier_threshold: 0.9,
            top_k: 10,
            aggregation: Aggregation::Min,
        }
    }
}

impl SearchDefaults {
    pub fn window_stride(&self) -> [usize; 3] {
        self.stride.unwrap_or(self.patch)
    }

    pub fn occlusion_stride(&self) -> [usize; 3] {
        self.occlusion_stride.unwrap_or(self.occluder)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.patch, self.window_stride(), self.occluder, self.occlusion_stride()];
        if all.iter().flatten().any(|&v| v == 0) {
            bail!("search: patch, stride, occluder and occlusion_stride must be >= 1");
        }
        if !(-1.0..=1.0).contains(&self.outlier_threshold) {
            bail!("search: outlier_threshold must lie in [-1, 1]");
        }
        if self.top_k == 0 {
            bail!("search: top_k must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Static UI directory, served at `/` when it exists.
    pub assets_dir: Option<std::path::PathBuf>,
    /// Concurrent search/saliency jobs.
    pub job_workers: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, assets_dir: None, job_workers: 2 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training config with the pipeline section applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.training.clone();
        if let Some(p) = &self.pipeline {
            t.pipeline = p.clone();
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate().context("phantom")?;
        if let Some(p) = &self.pipeline {
            p.validate().context("pipeline")?;
        }
        self.encoder.validate().context("encoder")?;
        self.train_config().validate().context("training")?;
        if self.encoder.patch_shape != self.training.batch.patch_size.0 {
            bail!(
                "encoder.patch_shape {:?} differs from training.batch.patch_size {:?}",
                self.encoder.patch_shape,
                self.training.batch.patch_size.0
            );
        }
        self.ablation.validate().context("ablation")?;
        self.search.validate()?;
        if self.serve.job_workers == 0 {
            bail!("serve: job_workers must be >= 1");
        }
        Ok(())
    }
}
