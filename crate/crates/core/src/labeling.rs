//! Model registration and labeling against the semantic graph.
//!
//! A label records, for every sampled node `v` and every sample `x` of `v`,
//! the cosine between the model's image embedding of `x` and its text
//! embedding of `v`'s caption. The label also keeps the model's full image
//! and caption embedding stores: selection needs similarities of each sample
//! against *other* nodes too, and those are computed lazily from the stores
//! rather than materialized as a samples x nodes matrix.
//!
//! Nothing in this module sees task information.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MllError, Result};
use crate::fsio;
use crate::graph::SemanticGraph;
use crate::store::{self, EmbeddingMatrix, StoreKind};

/// Softmax temperature assumed when a model's metadata gives none.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const LABEL_FORMAT_VERSION: u32 = 1;

pub const MODEL_FILE: &str = "model.json";
pub const LABEL_FILE: &str = "label.json";
pub const IMAGE_STORE_DIR: &str = "images";
pub const CAPTION_STORE_DIR: &str = "captions";

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub dim: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Free-form; `imagenet_acc`, `architecture` and `pretrain_dataset` are
    /// the keys the engine knows about.
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ModelRecord {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Self {
        ModelRecord {
            model_id: model_id.into(),
            dim,
            temperature: DEFAULT_TEMPERATURE,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_imagenet_acc(mut self, acc: f64) -> Self {
        self.metadata
            .insert("imagenet_acc".into(), serde_json::json!(acc));
        self
    }

    pub fn imagenet_acc(&self) -> Option<f64> {
        self.metadata.get("imagenet_acc").and_then(|v| v.as_f64())
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.trim().is_empty() || self.model_id.contains(['/', '\\']) {
            return Err(MllError::InvalidInput(format!(
                "model id {:?} is not usable as a directory name",
                self.model_id
            )));
        }
        if self.dim == 0 {
            return Err(MllError::InvalidInput("model dim must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MllError::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(acc) = self.imagenet_acc() {
            if !(0.0..=1.0).contains(&acc) {
                return Err(MllError::InvalidInput(format!(
                    "imagenet_acc {acc} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// One element of `s_m^v`: a sample and its similarity to the node caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagScore {
    pub sample_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLabel {
    pub model_id: String,
    pub graph_version: u64,
    /// node id -> scores of that node's samples, sorted by sample id.
    pub diag_scores: BTreeMap<String, Vec<DiagScore>>,
    images: Arc<EmbeddingMatrix>,
    captions: Arc<EmbeddingMatrix>,
}

impl ModelLabel {
    /// Sample-image embeddings, keyed by sample id.
    pub fn images(&self) -> &EmbeddingMatrix {
        &self.images
    }

    /// Node-caption embeddings, keyed by node id.
    pub fn captions(&self) -> &EmbeddingMatrix {
        &self.captions
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }
}

fn check_dim(what: &str, matrix: &EmbeddingMatrix, dim: usize) -> Result<()> {
    if matrix.dim() != dim {
        return Err(MllError::InvalidInput(format!(
            "{what} embeddings have dim {}, model dim is {dim}",
            matrix.dim()
        )));
    }
    Ok(())
}

fn diag_for_node(
    node_id: &str,
    sample_ids: &[String],
    images: &EmbeddingMatrix,
    captions: &EmbeddingMatrix,
) -> Result<Vec<DiagScore>> {
    let caption = captions
        .get(node_id)
        .ok_or_else(|| MllError::IncompleteEmbeddings(vec![node_id.to_string()]))?;
    sample_ids
        .iter()
        .map(|sample_id| {
            let image = images
                .get(sample_id)
                .ok_or_else(|| MllError::IncompleteEmbeddings(vec![sample_id.clone()]))?;
            Ok(DiagScore {
                sample_id: sample_id.clone(),
                score: store::cosine(image, caption)?,
            })
        })
        .collect()
}

/// Pre-tests `model` on every sampled node of `graph`.
pub fn compute_label(
    model: &ModelRecord,
    image_embeds: Arc<EmbeddingMatrix>,
    caption_embeds: Arc<EmbeddingMatrix>,
    graph: &SemanticGraph,
) -> Result<ModelLabel> {
    check_dim("image", &image_embeds, model.dim)?;
    check_dim("caption", &caption_embeds, model.dim)?;
    let mut missing = image_embeds.missing(graph.sample_ids());
    missing.extend(caption_embeds.missing(graph.node_ids()));
    if !missing.is_empty() {
        return Err(MllError::IncompleteEmbeddings(missing));
    }
    let mut diag_scores = BTreeMap::new();
    for node in graph.nodes().filter(|n| n.is_sampled()) {
        diag_scores.insert(
            node.synset_id.clone(),
            diag_for_node(
                &node.synset_id,
                &node.sample_ids,
                &image_embeds,
                &caption_embeds,
            )?,
        );
    }
    Ok(ModelLabel {
        model_id: model.model_id.clone(),
        graph_version: graph.version(),
        diag_scores,
        images: image_embeds,
        captions: caption_embeds,
    })
}

/// Brings `label` up to date with `graph`, which must extend the graph the
/// label was computed on. The new embeddings must cover exactly the nodes
/// and samples the label has not seen.
pub fn extend_label(
    label: &ModelLabel,
    graph: &SemanticGraph,
    new_caption_embeds: &EmbeddingMatrix,
    new_image_embeds: &EmbeddingMatrix,
) -> Result<ModelLabel> {
    if graph.version() <= label.graph_version {
        return Err(MllError::StaleGraph {
            label: label.graph_version,
            graph: graph.version(),
        });
    }
    let dim = label.dim();
    check_dim("new caption", new_caption_embeds, dim)?;
    check_dim("new image", new_image_embeds, dim)?;

    let vanished: Vec<String> = label
        .captions
        .ids()
        .iter()
        .filter(|id| !graph.contains(id))
        .cloned()
        .collect();
    if !vanished.is_empty() {
        return Err(MllError::InvalidInput(format!(
            "graph does not extend the labeled graph; missing nodes {}",
            vanished.join(", ")
        )));
    }

    let new_nodes: Vec<&str> = graph
        .node_ids()
        .filter(|id| !label.captions.contains(id))
        .collect();
    let new_samples: BTreeSet<&str> = graph
        .sample_ids()
        .filter(|id| !label.images.contains(id))
        .collect();

    let mut missing = new_caption_embeds.missing(new_nodes.iter().copied());
    missing.extend(new_image_embeds.missing(new_samples.iter().copied()));
    if !missing.is_empty() {
        return Err(MllError::IncompleteEmbeddings(missing));
    }
    let extra: Vec<&str> = new_caption_embeds
        .ids()
        .iter()
        .filter(|id| !new_nodes.contains(&id.as_str()))
        .chain(
            new_image_embeds
                .ids()
                .iter()
                .filter(|id| !new_samples.contains(id.as_str())),
        )
        .map(String::as_str)
        .collect();
    if !extra.is_empty() {
        return Err(MllError::InvalidInput(format!(
            "embeddings for ids the extension does not add: {}",
            extra.join(", ")
        )));
    }

    let captions = Arc::new(label.captions.concat(new_caption_embeds)?);
    let images = Arc::new(label.images.concat(new_image_embeds)?);
    let mut diag_scores = label.diag_scores.clone();
    for id in new_nodes {
        let node = graph.node(id).expect("node listed by graph");
        if node.is_sampled() {
            diag_scores.insert(
                id.to_string(),
                diag_for_node(id, &node.sample_ids, &images, &captions)?,
            );
        }
    }
    Ok(ModelLabel {
        model_id: label.model_id.clone(),
        graph_version: graph.version(),
        diag_scores,
        images,
        captions,
    })
}

#[derive(Debug, Clone)]
pub struct HubEntry {
    pub record: ModelRecord,
    pub label: ModelLabel,
}

/// Registered models keyed by id. Cloning is cheap: embedding stores are
/// shared.
#[derive(Debug, Clone, Default)]
pub struct ModelHub {
    entries: BTreeMap<String, HubEntry>,
}

impl ModelHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns a hub that also contains `model`.
    pub fn register(&self, model: ModelRecord, label: ModelLabel) -> Result<Self> {
        let mut next = self.clone();
        next.register_in_place(model, label)?;
        Ok(next)
    }

    pub fn register_in_place(&mut self, model: ModelRecord, label: ModelLabel) -> Result<()> {
        model.validate()?;
        if label.model_id != model.model_id {
            return Err(MllError::InvalidInput(format!(
                "label belongs to {}, not {}",
                label.model_id, model.model_id
            )));
        }
        if label.dim() != model.dim {
            return Err(MllError::InvalidInput(format!(
                "label dim {} differs from model dim {}",
                label.dim(),
                model.dim
            )));
        }
        if self.entries.contains_key(&model.model_id) {
            return Err(MllError::DuplicateId(vec![model.model_id]));
        }
        self.entries.insert(
            model.model_id.clone(),
            HubEntry {
                record: model,
                label,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model_id: &str) -> Option<&HubEntry> {
        self.entries.get(model_id)
    }

    /// Entries in model-id order.
    pub fn entries(&self) -> impl Iterator<Item = &HubEntry> {
        self.entries.values()
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// The hub restricted to `ids`.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for id in ids {
            let entry = self
                .entries
                .get(id.as_ref())
                .ok_or_else(|| MllError::InvalidInput(format!("unknown model {}", id.as_ref())))?;
            entries.insert(id.as_ref().to_string(), entry.clone());
        }
        Ok(ModelHub { entries })
    }

    /// Models whose label does not cover `graph_version`.
    pub fn stale_models(&self, graph_version: u64) -> Vec<String> {
        self.entries
            .values()
            .filter(|e| e.label.graph_version != graph_version)
            .map(|e| e.record.model_id.clone())
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    format_version: u32,
    model_id: String,
    graph_version: u64,
    image_store: String,
    caption_store: String,
    diag_scores: BTreeMap<String, Vec<DiagScore>>,
}

/// Writes `labels_dir/<model_id>/{model.json,label.json,images/,captions/}`.
/// An existing entry is replaced only when `force` is set.
pub fn save_labeled_model(
    labels_dir: &Path,
    model: &ModelRecord,
    label: &ModelLabel,
    force: bool,
) -> Result<PathBuf> {
    model.validate()?;
    let dest = labels_dir.join(&model.model_id);
    if dest.exists() && !force {
        return Err(MllError::AlreadyExists(dest));
    }
    fs::create_dir_all(labels_dir).map_err(|e| MllError::io(labels_dir, e))?;
    let tmp = fsio::temp_sibling(&dest);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| MllError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| MllError::io(&tmp, e))?;
    store::write_store(
        &tmp.join(IMAGE_STORE_DIR),
        label.images(),
        &model.model_id,
        StoreKind::Image,
    )?;
    store::write_store(
        &tmp.join(CAPTION_STORE_DIR),
        label.captions(),
        &model.model_id,
        StoreKind::Caption,
    )?;
    fsio::write_json(&tmp.join(MODEL_FILE), model)?;
    let file = LabelFile {
        format_version: LABEL_FORMAT_VERSION,
        model_id: label.model_id.clone(),
        graph_version: label.graph_version,
        image_store: IMAGE_STORE_DIR.into(),
        caption_store: CAPTION_STORE_DIR.into(),
        diag_scores: label.diag_scores.clone(),
    };
    fsio::write_json(&tmp.join(LABEL_FILE), &file)?;
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| MllError::io(&dest, e))?;
    }
    fs::rename(&tmp, &dest).map_err(|e| MllError::io(&dest, e))?;
    Ok(dest)
}

pub fn load_labeled_model(model_dir: &Path) -> Result<(ModelRecord, ModelLabel)> {
    let record: ModelRecord = fsio::read_json(&model_dir.join(MODEL_FILE))?;
    record.validate()?;
    let label_path = model_dir.join(LABEL_FILE);
    let file: LabelFile = fsio::read_json(&label_path)?;
    if file.format_version != LABEL_FORMAT_VERSION {
        return Err(MllError::parse(
            &label_path,
            format!("unsupported label format_version {}", file.format_version),
        ));
    }
    if file.model_id != record.model_id {
        return Err(MllError::parse(
            &label_path,
            format!("label for {} stored next to {}", file.model_id, record.model_id),
        ));
    }
    let images = store::read_store(&model_dir.join(&file.image_store))?;
    let captions = store::read_store(&model_dir.join(&file.caption_store))?;
    let label = ModelLabel {
        model_id: file.model_id,
        graph_version: file.graph_version,
        diag_scores: file.diag_scores,
        images: Arc::new(images),
        captions: Arc::new(captions),
    };
    Ok((record, label))
}

/// Loads every `<labels_dir>/<model_id>/` entry into a hub.
pub fn load_hub(labels_dir: &Path) -> Result<ModelHub> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(labels_dir).map_err(|e| MllError::io(labels_dir, e))? {
        let entry = entry.map_err(|e| MllError::io(labels_dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_dir() && !hidden && path.join(LABEL_FILE).exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    let mut hub = ModelHub::new();
    for dir in dirs {
        let (record, label) = load_labeled_model(&dir)?;
        hub.register_in_place(record, label)?;
    }
    Ok(hub)
}
