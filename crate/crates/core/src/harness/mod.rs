//! Evaluation, baselines and benchmark experiments.

mod experiments;
pub mod oracle;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use experiments::{ablate, scaling_experiment, AblationReport, AlphaRow, KRow, ScalingCurve};

use crate::error::{MllError, Result};
use crate::fsio;
use crate::graph::SemanticGraph;
use crate::labeling::{self, ModelHub};
use crate::reuse::{EnsemblePredictor, PredictionSet, TaskView};
use crate::selection::{self, RankedModel, SelectParams, SelectionMethod, SelectionResult, TaskSpec};
use crate::store::{self, EmbeddingMatrix, StoreKind};
use crate::workspace::{Layout, Truth};

/// Owner recorded on stores produced by the shared text-embedding backend.
pub const TEXT_BACKEND_OWNER: &str = "text-backend";

/// One downstream task with every model's embeddings of it.
#[derive(Debug, Clone)]
pub struct TaskBundle {
    pub task: TaskSpec,
    /// Class-caption embeddings from the text backend, keyed by class.
    pub task_captions: EmbeddingMatrix,
    pub views: BTreeMap<String, TaskView>,
    pub truth: Truth,
}

/// A labeled hub plus the tasks it is evaluated on.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub graph: SemanticGraph,
    pub hub: ModelHub,
    /// Node-caption embeddings from the text backend, keyed by node id.
    pub node_captions: EmbeddingMatrix,
    pub tasks: Vec<TaskBundle>,
}

impl Benchmark {
    pub fn select(&self, bundle: &TaskBundle, params: &SelectParams) -> Result<SelectionResult> {
        selection::select(
            &bundle.task,
            &self.hub,
            &self.graph,
            &self.node_captions,
            &bundle.task_captions,
            params,
        )
    }

    pub fn predict(
        bundle: &TaskBundle,
        selection: &SelectionResult,
        temperature: f64,
    ) -> Result<PredictionSet> {
        let predictor = predictor_for(selection, &bundle.views, temperature)?;
        Ok(PredictionSet {
            task_id: bundle.task.task_id.clone(),
            method: selection.method,
            classes: selection.classes.clone(),
            records: predictor.predict_all()?,
        })
    }

    /// Selects, predicts and scores every task with the reuse-metric method.
    pub fn run(&self, params: &SelectParams, temperature: f64) -> Result<Vec<EvalReport>> {
        self.tasks
            .iter()
            .map(|bundle| {
                let selection = self.select(bundle, params)?;
                evaluate(&Self::predict(bundle, &selection, temperature)?, &bundle.truth)
            })
            .collect()
    }

    /// Same as [`Benchmark::run`] with the ImageNet baseline.
    pub fn run_inb(&self, k_reuse: usize, temperature: f64) -> Result<Vec<EvalReport>> {
        let ranked = inb_ranking(&self.hub)?;
        self.tasks
            .iter()
            .map(|bundle| {
                let selection =
                    SelectionResult::uniform(SelectionMethod::Inb, &bundle.task, &ranked, k_reuse)?;
                evaluate(&Self::predict(bundle, &selection, temperature)?, &bundle.truth)
            })
            .collect()
    }

    pub fn save(&self, layout: &Layout) -> Result<()> {
        self.graph.save(&layout.graph)?;
        for entry in self.hub.entries() {
            labeling::save_labeled_model(&layout.labels, &entry.record, &entry.label, false)?;
        }
        store::write_store(
            &layout.node_captions(),
            &self.node_captions,
            TEXT_BACKEND_OWNER,
            StoreKind::Caption,
        )?;
        for bundle in &self.tasks {
            let id = &bundle.task.task_id;
            fsio::write_json(&layout.task_spec(id), &bundle.task)?;
            fsio::write_json(&layout.truth(id), &bundle.truth)?;
            store::write_store(
                &layout.task_captions(id),
                &bundle.task_captions,
                TEXT_BACKEND_OWNER,
                StoreKind::TaskCaption,
            )?;
            for (model, view) in &bundle.views {
                store::write_store(
                    &layout.task_prompts(id, model),
                    view.prompts(),
                    model,
                    StoreKind::ClassPrompt,
                )?;
                store::write_store(
                    &layout.task_images(id, model),
                    view.images(),
                    model,
                    StoreKind::Image,
                )?;
            }
        }
        Ok(())
    }

    /// Loads the graph, hub, backend captions and the named tasks (all
    /// tasks in the layout when `task_ids` is `None`).
    pub fn load(layout: &Layout, task_ids: Option<&[String]>) -> Result<Self> {
        let graph = SemanticGraph::load(&layout.graph)?;
        let hub = labeling::load_hub(&layout.labels)?;
        let node_captions = store::read_store(&layout.node_captions())?;
        let ids = match task_ids {
            Some(ids) => ids.to_vec(),
            None => layout.task_ids()?,
        };
        let models = hub.model_ids();
        let tasks = ids
            .iter()
            .map(|id| load_task(layout, id, &models, true))
            .collect::<Result<_>>()?;
        Ok(Benchmark {
            graph,
            hub,
            node_captions,
            tasks,
        })
    }
}

pub fn load_task_spec(layout: &Layout, task_id: &str) -> Result<TaskSpec> {
    let task: TaskSpec = fsio::read_json(&layout.task_spec(task_id))?;
    task.validate()?;
    if task.task_id != task_id {
        return Err(MllError::InvalidInput(format!(
            "task file {} declares id {}",
            layout.task_spec(task_id).display(),
            task.task_id
        )));
    }
    Ok(task)
}

/// Loads one task with views for `models`; the truth file is read only when
/// `with_truth` is set.
pub fn load_task<S: AsRef<str>>(
    layout: &Layout,
    task_id: &str,
    models: &[S],
    with_truth: bool,
) -> Result<TaskBundle> {
    let task = load_task_spec(layout, task_id)?;
    let task_captions = store::read_store(&layout.task_captions(task_id))?;
    let mut views = BTreeMap::new();
    for model in models {
        let model = model.as_ref();
        let prompts = store::read_store(&layout.task_prompts(task_id, model))?;
        let images = store::read_store(&layout.task_images(task_id, model))?;
        views.insert(
            model.to_string(),
            TaskView::new(&task.classes, &prompts, Arc::new(images))?,
        );
    }
    let truth = if with_truth {
        fsio::read_json(&layout.truth(task_id))?
    } else {
        Truth::new()
    };
    Ok(TaskBundle {
        task,
        task_captions,
        views,
        truth,
    })
}

pub fn predictor_for(
    selection: &SelectionResult,
    views: &BTreeMap<String, TaskView>,
    temperature: f64,
) -> Result<EnsemblePredictor> {
    let used: BTreeSet<&String> = selection.rankings.iter().flat_map(|r| &r.members).collect();
    let views = views
        .iter()
        .filter(|(m, _)| used.contains(m))
        .map(|(m, v)| (m.clone(), v.clone()))
        .collect();
    EnsemblePredictor::new(selection.classes.clone(), selection.members(), views, temperature)
}

/// Hub models ordered by ImageNet accuracy, best first, ties by id.
pub fn inb_ranking(hub: &ModelHub) -> Result<Vec<RankedModel>> {
    if hub.is_empty() {
        return Err(MllError::NoModels);
    }
    let missing: Vec<String> = hub
        .entries()
        .filter(|e| e.record.imagenet_acc().is_none())
        .map(|e| e.record.model_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MllError::IncompleteMetadata {
            field: "imagenet_acc".into(),
            models: missing,
        });
    }
    let mut ranked: Vec<RankedModel> = hub
        .entries()
        .map(|e| RankedModel {
            model_id: e.record.model_id.clone(),
            score: e.record.imagenet_acc().unwrap(),
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.model_id.cmp(&b.model_id)));
    Ok(ranked)
}

/// The top `k` models by ImageNet accuracy.
pub fn inb_select(hub: &ModelHub, k: usize) -> Result<Vec<String>> {
    if k == 0 {
        return Err(MllError::InvalidInput("k must be at least 1".into()));
    }
    Ok(inb_ranking(hub)?
        .into_iter()
        .take(k)
        .map(|m| m.model_id)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub method: SelectionMethod,
    pub classes: Vec<String>,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// One-vs-rest F1 per class.
    pub per_class_f1: BTreeMap<String, f64>,
    /// `confusion[truth][predicted]`, both in class order.
    pub confusion: Vec<Vec<usize>>,
    /// Mean distinct models run per sample.
    pub forward_cost: f64,
}

/// Scores `predictions` against `truth`. The two must cover the same
/// samples and use only the task's classes.
pub fn evaluate(predictions: &PredictionSet, truth: &Truth) -> Result<EvalReport> {
    let classes = &predictions.classes;
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    if predictions.records.is_empty() {
        return Err(MllError::InvalidInput("no predictions to evaluate".into()));
    }
    let predicted_ids: BTreeSet<&str> = predictions.records.iter().map(|r| r.sample_id.as_str()).collect();
    if predicted_ids.len() != predictions.records.len() {
        return Err(MllError::InvalidInput("a sample is predicted twice".into()));
    }
    let truth_ids: BTreeSet<&str> = truth.keys().map(String::as_str).collect();
    if predicted_ids != truth_ids {
        let unmatched: Vec<&str> = predicted_ids.symmetric_difference(&truth_ids).copied().take(5).collect();
        return Err(MllError::InvalidInput(format!(
            "predictions and ground truth cover different samples (e.g. {})",
            unmatched.join(", ")
        )));
    }

    let n = classes.len();
    let mut confusion = vec![vec![0usize; n]; n];
    let mut cost = 0usize;
    for record in &predictions.records {
        let actual = &truth[&record.sample_id];
        let t = *index.get(actual.as_str()).ok_or_else(|| {
            MllError::InvalidInput(format!("unknown label {actual} for {}", record.sample_id))
        })?;
        let p = *index.get(record.predicted.as_str()).ok_or_else(|| {
            MllError::InvalidInput(format!("unknown prediction {} for {}", record.predicted, record.sample_id))
        })?;
        confusion[t][p] += 1;
        cost += record
            .weights
            .iter()
            .flatten()
            .map(|w| w.model_id.as_str())
            .collect::<BTreeSet<_>>()
            .len();
    }
    let total = predictions.records.len();
    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    let per_class_f1 = classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..n).map(|t| confusion[t][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (name.clone(), f1)
        })
        .collect();
    Ok(EvalReport {
        task_id: predictions.task_id.clone(),
        method: predictions.method,
        classes: classes.clone(),
        total,
        correct,
        accuracy: correct as f64 / total as f64,
        per_class_f1,
        confusion,
        forward_cost: cost as f64 / total as f64,
    })
}

/// Accuracy table with one row per method, one column per task and a final
/// average column.
pub fn accuracy_table(rows: &[(String, BTreeMap<String, f64>)]) -> Result<String> {
    let tasks: BTreeSet<&String> = rows.iter().flat_map(|(_, r)| r.keys()).collect();
    let mut out = String::from("Methods");
    for task in &tasks {
        write!(out, " | {task}").unwrap();
    }
    out.push_str(" | Avg.\n");
    for (method, accs) in rows {
        if accs.len() != tasks.len() {
            return Err(MllError::InvalidInput(format!(
                "method {method} is missing results for some tasks"
            )));
        }
        out.push_str(method);
        for task in &tasks {
            write!(out, " | {:.4}", accs[*task]).unwrap();
        }
        let mean = accs.values().sum::<f64>() / accs.len() as f64;
        writeln!(out, " | {mean:.4}").unwrap();
    }
    Ok(out)
}

/// Per-class F1 lines for one report.
pub fn f1_table(report: &EvalReport) -> String {
    let mut out = format!("class | F1 ({} / {})\n", report.task_id, method_name(report.method));
    for class in &report.classes {
        writeln!(out, "{class} | {:.4}", report.per_class_f1[class]).unwrap();
    }
    out
}

pub fn method_name(method: SelectionMethod) -> &'static str {
    match method {
        SelectionMethod::Mll => "Proposal",
        SelectionMethod::Inb => "INB",
    }
}
