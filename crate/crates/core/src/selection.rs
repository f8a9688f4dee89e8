//! Per-class model selection.
//!
//! Task classes are matched to graph nodes through caption embeddings
//! (transfer matrix `Z`), each model's precision on the matched nodes is
//! computed from its label, projected onto the classes and blended with the
//! model's mean precision into the reuse metric used for ranking.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MllError, Result};
use crate::graph::SemanticGraph;
use crate::labeling::{HubEntry, ModelHub, ModelLabel};
use crate::store::{self, EmbeddingMatrix};

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_K_MATCH: usize = 5;
pub const DEFAULT_K_REUSE: usize = 1;
pub const DEFAULT_WORD_LIMIT: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub classes: Vec<String>,
    pub domain_text: String,
    pub task_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_captions: Option<BTreeMap<String, String>>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task_id.trim().is_empty() || self.task_id.contains(['/', '\\']) {
            return Err(MllError::InvalidInput(format!(
                "task id {:?} is not usable as a directory name",
                self.task_id
            )));
        }
        if self.classes.is_empty() {
            return Err(MllError::InvalidInput("task has no classes".into()));
        }
        let mut seen = BTreeSet::new();
        let dups: Vec<String> = self
            .classes
            .iter()
            .filter(|c| !seen.insert(c.as_str()))
            .cloned()
            .collect();
        if !dups.is_empty() {
            return Err(MllError::DuplicateId(dups));
        }
        if let Some(captions) = &self.class_captions {
            let keys: BTreeSet<&str> = captions.keys().map(String::as_str).collect();
            if keys != seen {
                return Err(MllError::InvalidInput(
                    "class_captions must hold exactly one caption per class".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }
}

/// Prompt sent to a text-generation service to describe one class.
pub fn build_class_caption_prompt(
    class_name: &str,
    domain_text: &str,
    task_text: &str,
    word_limit: usize,
) -> Result<String> {
    if [class_name, domain_text, task_text]
        .iter()
        .any(|s| s.trim().is_empty())
    {
        return Err(MllError::InvalidInput(
            "class, domain and task text must be non-empty".into(),
        ));
    }
    if word_limit == 0 {
        return Err(MllError::InvalidInput("word limit must be positive".into()));
    }
    Ok(format!(
        "Generate long detailed caption for the {domain_text} of {class_name} in the {task_text}. \
         e.g., \"The {domain_text} of {class_name}, which is ... \". \
         Generate long caption for {class_name} within {word_limit} words."
    ))
}

/// How raw caption similarities become transfer weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZWeighting {
    /// Negative similarities clamped to zero, columns scaled to sum to one.
    #[default]
    Normalized,
    /// Raw top-k similarities, no clamping or scaling.
    Raw,
}

/// Which node set the precision argmax ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeScope {
    /// Union of every class's matched nodes.
    #[default]
    Global,
    /// Only the nodes matched to the class being scored.
    PerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedNode {
    pub node_id: String,
    pub similarity: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferColumn {
    pub class: String,
    /// Nonzero entries, best match first.
    pub nodes: Vec<MatchedNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub k_match: usize,
    pub weighting: ZWeighting,
    /// Sorted union of the nonzero rows.
    pub selected_nodes: Vec<String>,
    pub columns: Vec<TransferColumn>,
}

impl TransferMatrix {
    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.class.as_str())
    }

    pub fn weight(&self, node_id: &str, class: &str) -> f64 {
        self.columns
            .iter()
            .find(|c| c.class == class)
            .and_then(|c| c.nodes.iter().find(|n| n.node_id == node_id))
            .map_or(0.0, |n| n.weight)
    }
}

fn by_score_then_id(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Builds `Z` from class-caption and node-caption embeddings produced by
/// one text-embedding backend. Classes follow the row order of
/// `task_caption_embeds`.
pub fn match_nodes(
    task_caption_embeds: &EmbeddingMatrix,
    node_caption_embeds: &EmbeddingMatrix,
    k_match: usize,
    weighting: ZWeighting,
) -> Result<TransferMatrix> {
    if k_match == 0 {
        return Err(MllError::InvalidInput("k_match must be at least 1".into()));
    }
    if task_caption_embeds.dim() != node_caption_embeds.dim() {
        return Err(MllError::InvalidInput(format!(
            "task captions have dim {}, node captions dim {}",
            task_caption_embeds.dim(),
            node_caption_embeds.dim()
        )));
    }
    if node_caption_embeds.is_empty() {
        return Err(MllError::NoCandidates);
    }
    if task_caption_embeds.is_empty() {
        return Err(MllError::InvalidInput("no task classes to match".into()));
    }

    let mut columns = Vec::with_capacity(task_caption_embeds.len());
    for (class, class_vec) in task_caption_embeds.rows() {
        let mut scored: Vec<(&str, f64)> = node_caption_embeds
            .rows()
            .map(|(node, node_vec)| Ok((node, store::cosine(class_vec, node_vec)?)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| by_score_then_id(*a, *b));
        scored.truncate(k_match);

        let nodes = match weighting {
            ZWeighting::Raw => scored
                .into_iter()
                .map(|(id, sim)| MatchedNode {
                    node_id: id.to_string(),
                    similarity: sim,
                    weight: sim,
                })
                .collect(),
            ZWeighting::Normalized => {
                let kept: Vec<(&str, f64)> =
                    scored.into_iter().filter(|(_, sim)| *sim > 0.0).collect();
                let total: f64 = kept.iter().map(|(_, s)| s).sum();
                kept.into_iter()
                    .map(|(id, sim)| MatchedNode {
                        node_id: id.to_string(),
                        similarity: sim,
                        weight: sim / total,
                    })
                    .collect()
            }
        };
        columns.push(TransferColumn {
            class: class.to_string(),
            nodes,
        });
    }
    let selected: BTreeSet<&str> = columns
        .iter()
        .flat_map(|c| c.nodes.iter().map(|n| n.node_id.as_str()))
        .collect();
    Ok(TransferMatrix {
        k_match,
        weighting,
        selected_nodes: selected.into_iter().map(String::from).collect(),
        columns,
    })
}

/// Fraction of each selected node's samples whose most similar selected
/// node (by the model's own embeddings) is that node. Ties in the argmax go
/// to the lexicographically smallest node id.
pub fn node_precision<S: AsRef<str>>(
    label: &ModelLabel,
    graph: &SemanticGraph,
    selected_nodes: &[S],
) -> Result<BTreeMap<String, f64>> {
    if selected_nodes.is_empty() {
        return Err(MllError::InvalidInput("no selected nodes".into()));
    }
    let mut selected: Vec<&str> = selected_nodes.iter().map(AsRef::as_ref).collect();
    selected.sort_unstable();
    selected.dedup();

    let mut missing = Vec::new();
    for id in &selected {
        let node = graph
            .node(id)
            .ok_or_else(|| MllError::InvalidInput(format!("node {id} is not in the graph")))?;
        if !node.is_sampled() {
            return Err(MllError::InvalidInput(format!(
                "node {id} has no samples and cannot be scored"
            )));
        }
        if !label.captions().contains(id) {
            missing.push(id.to_string());
        }
        missing.extend(
            label
                .images()
                .missing(node.sample_ids.iter().map(String::as_str)),
        );
    }
    if !missing.is_empty() {
        return Err(MllError::IncompleteEmbeddings(missing));
    }

    let captions: Vec<(&[f32], f64)> = selected
        .iter()
        .map(|id| {
            let row = label.captions().get(id).unwrap();
            (row, store::norm(row))
        })
        .collect();

    let mut out = BTreeMap::new();
    for (own, id) in selected.iter().enumerate() {
        let samples = &graph.node(id).unwrap().sample_ids;
        let hits = samples
            .iter()
            .filter(|sample| {
                let image = label.images().get(sample).unwrap();
                let image_norm = store::norm(image);
                let mut best = 0;
                let mut best_sim = f64::NEG_INFINITY;
                for (j, (caption, caption_norm)) in captions.iter().enumerate() {
                    let sim = store::cosine_with_norms(image, image_norm, caption, *caption_norm);
                    if sim > best_sim {
                        best_sim = sim;
                        best = j;
                    }
                }
                best == own
            })
            .count();
        out.insert(id.to_string(), hits as f64 / samples.len() as f64);
    }
    Ok(out)
}

/// `p_{m,y} = sum_v p_{m,v} z_{vy}` for every column of `z`, in column order.
pub fn class_precision(node_precisions: &BTreeMap<String, f64>, z: &TransferMatrix) -> Result<Vec<f64>> {
    z.columns
        .iter()
        .map(|column| {
            let p = column.nodes.iter().try_fold(0.0, |acc, n| {
                node_precisions
                    .get(&n.node_id)
                    .map(|p| acc + p * n.weight)
                    .ok_or_else(|| {
                        MllError::InvalidInput(format!("no precision for node {}", n.node_id))
                    })
            })?;
            // normalized columns make this a convex combination; drop rounding overshoot
            Ok(match z.weighting {
                ZWeighting::Normalized => p.min(1.0),
                ZWeighting::Raw => p,
            })
        })
        .collect()
}

/// `r_{m,y} = alpha p_{m,y} + (1 - alpha) mean_y' p_{m,y'}`.
pub fn reuse_metric(class_precisions: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MllError::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
    }
    if class_precisions.is_empty() {
        return Ok(Vec::new());
    }
    let mean = class_precisions.iter().sum::<f64>() / class_precisions.len() as f64;
    let lo = class_precisions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = class_precisions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(class_precisions
        .iter()
        .map(|p| (alpha * p + (1.0 - alpha) * mean).clamp(lo, hi))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectParams {
    pub alpha: f64,
    pub k_reuse: usize,
    pub k_match: usize,
    pub weighting: ZWeighting,
    pub scope: NodeScope,
    pub allow_stale: bool,
}

impl Default for SelectParams {
    fn default() -> Self {
        SelectParams {
            alpha: DEFAULT_ALPHA,
            k_reuse: DEFAULT_K_REUSE,
            k_match: DEFAULT_K_MATCH,
            weighting: ZWeighting::Normalized,
            scope: NodeScope::Global,
            allow_stale: false,
        }
    }
}

impl SelectParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MllError::InvalidInput(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.k_reuse == 0 || self.k_match == 0 {
            return Err(MllError::InvalidInput(
                "k_reuse and k_match must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Precision results for one model on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScores {
    /// `p_{m,v}` over the global selected set; empty under
    /// [`NodeScope::PerClass`], where node precision depends on the class.
    pub node_precision: BTreeMap<String, f64>,
    /// `p_{m,y}` in class order.
    pub class_precision: Vec<f64>,
}

fn score_model(
    label: &ModelLabel,
    graph: &SemanticGraph,
    z: &TransferMatrix,
    scope: NodeScope,
) -> Result<ModelScores> {
    match scope {
        NodeScope::Global => {
            let node_precision = node_precision(label, graph, &z.selected_nodes)?;
            let class_precision = class_precision(&node_precision, z)?;
            Ok(ModelScores {
                node_precision,
                class_precision,
            })
        }
        NodeScope::PerClass => {
            let class_precision = z
                .columns
                .iter()
                .map(|column| {
                    if column.nodes.is_empty() {
                        return Ok(0.0);
                    }
                    let ids: Vec<&str> = column.nodes.iter().map(|n| n.node_id.as_str()).collect();
                    let p = node_precision(label, graph, &ids)?;
                    Ok(column.nodes.iter().map(|n| p[&n.node_id] * n.weight).sum())
                })
                .collect::<Result<_>>()?;
            Ok(ModelScores {
                node_precision: BTreeMap::new(),
                class_precision,
            })
        }
    }
}

/// A task with every hub model's precisions computed. Rankings for any
/// alpha, `k_reuse` or sub-hub can be drawn from it without rescoring,
/// since each model's scores are independent of the other models.
#[derive(Debug, Clone)]
pub struct ScoredTask {
    pub task_id: String,
    pub graph_version: u64,
    pub classes: Vec<String>,
    pub transfer: TransferMatrix,
    pub params: SelectParams,
    pub scores: BTreeMap<String, ModelScores>,
}

/// Matches the task to the graph and scores every model in `hub`.
/// `node_caption_embeds` and `task_caption_embeds` come from the shared
/// text-embedding backend, keyed by node id and class name.
pub fn score_task(
    task: &TaskSpec,
    hub: &ModelHub,
    graph: &SemanticGraph,
    node_caption_embeds: &EmbeddingMatrix,
    task_caption_embeds: &EmbeddingMatrix,
    params: &SelectParams,
) -> Result<ScoredTask> {
    task.validate()?;
    params.validate()?;
    if hub.is_empty() {
        return Err(MllError::NoModels);
    }
    if !params.allow_stale {
        let stale = hub.stale_models(graph.version());
        if !stale.is_empty() {
            return Err(MllError::StaleLabel {
                models: stale,
                graph: graph.version(),
            });
        }
    }
    let candidates: Vec<&str> = graph.sampled_node_ids().collect();
    if candidates.is_empty() {
        return Err(MllError::NoCandidates);
    }
    let node_embeds = node_caption_embeds.subset(&candidates)?;
    let class_embeds = task_caption_embeds.subset(&task.classes)?;
    let transfer = match_nodes(&class_embeds, &node_embeds, params.k_match, params.weighting)?;

    let entries: Vec<&HubEntry> = hub.entries().collect();
    let scored: Vec<(String, ModelScores)> = entries
        .par_iter()
        .map(|entry| {
            let scores = if transfer.selected_nodes.is_empty() {
                ModelScores {
                    node_precision: BTreeMap::new(),
                    class_precision: vec![0.0; task.classes.len()],
                }
            } else {
                score_model(&entry.label, graph, &transfer, params.scope)?
            };
            Ok((entry.record.model_id.clone(), scores))
        })
        .collect::<Result<_>>()?;

    Ok(ScoredTask {
        task_id: task.task_id.clone(),
        graph_version: graph.version(),
        classes: task.classes.clone(),
        transfer,
        params: *params,
        scores: scored.into_iter().collect(),
    })
}

impl ScoredTask {
    /// Rankings over all scored models.
    pub fn result(&self, alpha: f64, k_reuse: usize) -> Result<SelectionResult> {
        let ids: Vec<&str> = self.scores.keys().map(String::as_str).collect();
        self.result_for(alpha, k_reuse, &ids)
    }

    /// Rankings over the sub-hub `model_ids`.
    pub fn result_for<S: AsRef<str>>(
        &self,
        alpha: f64,
        k_reuse: usize,
        model_ids: &[S],
    ) -> Result<SelectionResult> {
        if k_reuse == 0 {
            return Err(MllError::InvalidInput("k_reuse must be at least 1".into()));
        }
        let mut models: Vec<&str> = model_ids.iter().map(AsRef::as_ref).collect();
        models.sort_unstable();
        models.dedup();
        if models.is_empty() {
            return Err(MllError::NoModels);
        }
        let mut class_precision = Vec::with_capacity(models.len());
        let mut reuse = Vec::with_capacity(models.len());
        for id in &models {
            let scores = self
                .scores
                .get(*id)
                .ok_or_else(|| MllError::InvalidInput(format!("model {id} was not scored")))?;
            reuse.push(reuse_metric(&scores.class_precision, alpha)?);
            class_precision.push(scores.class_precision.clone());
        }

        let mut rankings = Vec::with_capacity(self.classes.len());
        for (c, class) in self.classes.iter().enumerate() {
            let mut ranked: Vec<(&str, f64)> =
                models.iter().enumerate().map(|(m, id)| (*id, reuse[m][c])).collect();
            ranked.sort_by(|a, b| by_score_then_id(*a, *b));
            rankings.push(ClassRanking {
                class: class.clone(),
                members: ranked.iter().take(k_reuse).map(|(id, _)| id.to_string()).collect(),
                ranked: ranked
                    .into_iter()
                    .map(|(id, r)| RankedModel {
                        model_id: id.to_string(),
                        score: r,
                    })
                    .collect(),
            });
        }

        let node_precision = if self.params.scope == NodeScope::Global {
            models
                .iter()
                .map(|id| (id.to_string(), self.scores[*id].node_precision.clone()))
                .collect()
        } else {
            BTreeMap::new()
        };

        Ok(SelectionResult {
            method: SelectionMethod::Mll,
            task_id: self.task_id.clone(),
            graph_version: Some(self.graph_version),
            alpha: Some(alpha),
            k_match: Some(self.params.k_match),
            k_reuse,
            weighting: Some(self.params.weighting),
            scope: Some(self.params.scope),
            classes: self.classes.clone(),
            models: models.iter().map(|s| s.to_string()).collect(),
            class_precision,
            reuse_metric: reuse,
            node_precision,
            rankings,
            transfer: Some(self.transfer.clone()),
        })
    }
}

/// Runs matching, scoring and ranking in one go.
pub fn select(
    task: &TaskSpec,
    hub: &ModelHub,
    graph: &SemanticGraph,
    node_caption_embeds: &EmbeddingMatrix,
    task_caption_embeds: &EmbeddingMatrix,
    params: &SelectParams,
) -> Result<SelectionResult> {
    score_task(task, hub, graph, node_caption_embeds, task_caption_embeds, params)?
        .result(params.alpha, params.k_reuse)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMethod {
    Mll,
    /// Same models for every class, chosen by ImageNet accuracy.
    Inb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRanking {
    pub class: String,
    /// The ensemble for this class: the top `k_reuse` of `ranked`.
    pub members: Vec<String>,
    /// Every candidate, best first; ties go to the smaller model id.
    pub ranked: Vec<RankedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub task_id: String,
    pub graph_version: Option<u64>,
    pub alpha: Option<f64>,
    pub k_match: Option<usize>,
    pub k_reuse: usize,
    pub weighting: Option<ZWeighting>,
    pub scope: Option<NodeScope>,
    pub classes: Vec<String>,
    /// Row order of the two matrices below.
    pub models: Vec<String>,
    /// `p_{m,y}`: row per model, column per class.
    pub class_precision: Vec<Vec<f64>>,
    /// `r_{m,y}`: row per model, column per class.
    pub reuse_metric: Vec<Vec<f64>>,
    pub node_precision: BTreeMap<String, BTreeMap<String, f64>>,
    pub rankings: Vec<ClassRanking>,
    pub transfer: Option<TransferMatrix>,
}

impl SelectionResult {
    /// Ensemble members per class, in class order.
    pub fn members(&self) -> Vec<Vec<String>> {
        self.rankings.iter().map(|r| r.members.clone()).collect()
    }

    /// A selection that hands every class the same ranked models.
    pub fn uniform(
        method: SelectionMethod,
        task: &TaskSpec,
        ranked: &[RankedModel],
        k_reuse: usize,
    ) -> Result<Self> {
        if ranked.is_empty() {
            return Err(MllError::NoModels);
        }
        if k_reuse == 0 {
            return Err(MllError::InvalidInput("k_reuse must be at least 1".into()));
        }
        let members: Vec<String> = ranked.iter().take(k_reuse).map(|m| m.model_id.clone()).collect();
        let mut models: Vec<String> = ranked.iter().map(|m| m.model_id.clone()).collect();
        models.sort();
        Ok(SelectionResult {
            method,
            task_id: task.task_id.clone(),
            graph_version: None,
            alpha: None,
            k_match: None,
            k_reuse,
            weighting: None,
            scope: None,
            classes: task.classes.clone(),
            models,
            class_precision: Vec::new(),
            reuse_metric: Vec::new(),
            node_precision: BTreeMap::new(),
            rankings: task
                .classes
                .iter()
                .map(|class| ClassRanking {
                    class: class.clone(),
                    members: members.clone(),
                    ranked: ranked.to_vec(),
                })
                .collect(),
            transfer: None,
        })
    }
}
