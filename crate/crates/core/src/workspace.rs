//! On-disk layout shared by the CLI and the benchmark harness.
//!
//! ```text
//! graph.json
//! labels/<model>/{model.json, label.json, images/, captions/}
//! stores/graph_captions/                  node captions, text backend
//! stores/tasks/<task>/captions/           class captions, text backend
//! stores/tasks/<task>/<model>/prompts/    class prompts, per model
//! stores/tasks/<task>/<model>/images/     task images, per model
//! tasks/<task>.json                       TaskSpec
//! tasks/<task>.truth.json                 sample id -> class
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MllError, Result};

const TRUTH_SUFFIX: &str = ".truth.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub graph: PathBuf,
    pub labels: PathBuf,
    pub stores: PathBuf,
    pub tasks: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn under(root: &Path) -> Self {
        Layout {
            graph: root.join("graph.json"),
            labels: root.join("labels"),
            stores: root.join("stores"),
            tasks: root.join("tasks"),
            reports: root.join("reports"),
        }
    }

    pub fn node_captions(&self) -> PathBuf {
        self.stores.join("graph_captions")
    }

    pub fn task_dir(&self, task_id: &str) -> PathBuf {
        self.stores.join("tasks").join(task_id)
    }

    pub fn task_captions(&self, task_id: &str) -> PathBuf {
        self.task_dir(task_id).join("captions")
    }

    pub fn task_prompts(&self, task_id: &str, model_id: &str) -> PathBuf {
        self.task_dir(task_id).join(model_id).join("prompts")
    }

    pub fn task_images(&self, task_id: &str, model_id: &str) -> PathBuf {
        self.task_dir(task_id).join(model_id).join("images")
    }

    pub fn task_spec(&self, task_id: &str) -> PathBuf {
        self.tasks.join(format!("{task_id}.json"))
    }

    pub fn truth(&self, task_id: &str) -> PathBuf {
        self.tasks.join(format!("{task_id}{TRUTH_SUFFIX}"))
    }

    /// Task ids with a spec file in the tasks directory, sorted.
    pub fn task_ids(&self) -> Result<Vec<String>> {
        let entries = fs::read_dir(&self.tasks).map_err(|e| MllError::io(&self.tasks, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| MllError::io(&self.tasks, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || name.ends_with(TRUTH_SUFFIX) {
                continue;
            }
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }
}

/// Ground-truth class per sample id.
pub type Truth = BTreeMap<String, String>;
