use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Deserialize;

use crate::error::{MllError, Result};
use crate::reuse::DEFAULT_REUSE_TEMPERATURE;
use crate::selection::{
    NodeScope, SelectParams, ZWeighting, DEFAULT_ALPHA, DEFAULT_K_MATCH, DEFAULT_K_REUSE,
};
use crate::workspace::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionMode {
    Live,
    #[default]
    Fixture,
}

/// Everything a config file may set. Command-line flags win.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub workspace: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub stores: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub k_reuse: Option<usize>,
    pub k_match: Option<usize>,
    pub reuse_temperature: Option<f64>,
    pub raw_z: Option<bool>,
    pub per_class_nodes: Option<bool>,
    pub allow_stale: Option<bool>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub captions: Option<CaptionMode>,
    pub caption_fixture: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MllError::io(path, e))?;
        toml::from_str(&text).map_err(|e| MllError::parse(path, e))
    }

    /// `self` with every field that `over` sets replaced.
    pub fn overlay(self, over: FileConfig) -> FileConfig {
        FileConfig {
            workspace: over.workspace.or(self.workspace),
            graph: over.graph.or(self.graph),
            labels: over.labels.or(self.labels),
            stores: over.stores.or(self.stores),
            tasks: over.tasks.or(self.tasks),
            reports: over.reports.or(self.reports),
            alpha: over.alpha.or(self.alpha),
            k_reuse: over.k_reuse.or(self.k_reuse),
            k_match: over.k_match.or(self.k_match),
            reuse_temperature: over.reuse_temperature.or(self.reuse_temperature),
            raw_z: over.raw_z.or(self.raw_z),
            per_class_nodes: over.per_class_nodes.or(self.per_class_nodes),
            allow_stale: over.allow_stale.or(self.allow_stale),
            seed: over.seed.or(self.seed),
            threads: over.threads.or(self.threads),
            captions: over.captions.or(self.captions),
            caption_fixture: over.caption_fixture.or(self.caption_fixture),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub layout: Layout,
    pub select: SelectParams,
    pub reuse_temperature: f64,
    pub seed: u64,
    pub threads: Option<usize>,
    pub captions: CaptionMode,
    pub caption_fixture: Option<PathBuf>,
}

impl EngineConfig {
    pub fn resolve(file: FileConfig) -> Result<Self> {
        let root = file.workspace.unwrap_or_else(|| PathBuf::from("."));
        let base = Layout::under(&root);
        let layout = Layout {
            graph: file.graph.unwrap_or(base.graph),
            labels: file.labels.unwrap_or(base.labels),
            stores: file.stores.unwrap_or(base.stores),
            tasks: file.tasks.unwrap_or(base.tasks),
            reports: file.reports.unwrap_or(base.reports),
        };
        let select = SelectParams {
            alpha: file.alpha.unwrap_or(DEFAULT_ALPHA),
            k_reuse: file.k_reuse.unwrap_or(DEFAULT_K_REUSE),
            k_match: file.k_match.unwrap_or(DEFAULT_K_MATCH),
            weighting: if file.raw_z.unwrap_or(false) {
                ZWeighting::Raw
            } else {
                ZWeighting::Normalized
            },
            scope: if file.per_class_nodes.unwrap_or(false) {
                NodeScope::PerClass
            } else {
                NodeScope::Global
            },
            allow_stale: file.allow_stale.unwrap_or(false),
        };
        select.validate()?;
        let reuse_temperature = file.reuse_temperature.unwrap_or(DEFAULT_REUSE_TEMPERATURE);
        if !(reuse_temperature.is_finite() && reuse_temperature > 0.0) {
            return Err(MllError::InvalidInput(format!(
                "reuse temperature {reuse_temperature} must be positive"
            )));
        }
        if file.threads == Some(0) {
            return Err(MllError::InvalidInput("threads must be at least 1".into()));
        }
        Ok(EngineConfig {
            layout,
            select,
            reuse_temperature,
            seed: file.seed.unwrap_or(0),
            threads: file.threads,
            captions: file.captions.unwrap_or_default(),
            caption_fixture: file.caption_fixture,
        })
    }
}
