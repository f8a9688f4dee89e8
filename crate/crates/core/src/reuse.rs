//! Zero-shot prediction and entropy-weighted per-class ensembles.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MllError, Result};
use crate::selection::SelectionMethod;
use crate::store::{self, EmbeddingMatrix};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of {class}";
pub const DEFAULT_REUSE_TEMPERATURE: f64 = 1.0;
/// Below this total entropy the ensemble falls back to uniform weights.
pub const ENTROPY_EPSILON: f64 = 1e-12;

pub fn class_prompt(template: &str, class: &str) -> String {
    template.replace("{class}", class)
}

pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Index of the largest value; exact ties go to the smallest `names` entry.
pub fn argmax_by_name<S: AsRef<str>>(values: &[f64], names: &[S]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        let (v, b) = (values[i], values[best]);
        if v > b || (v == b && names[i].as_ref() < names[best].as_ref()) {
            best = i;
        }
    }
    best
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(MllError::InvalidInput(format!("temperature {t} must be positive")))
    }
}

fn similarities(image: &[f32], prompts: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if image.len() != prompts.dim() {
        return Err(MllError::InvalidInput(format!(
            "image has dim {}, prompts dim {}",
            image.len(),
            prompts.dim()
        )));
    }
    (0..prompts.len())
        .map(|i| store::cosine(image, prompts.row(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub class: String,
    pub class_index: usize,
    pub probs: Vec<f64>,
}

/// Classifies `image` against one prompt embedding per class (row ids are
/// the class names) with a softmax at temperature `tau`.
pub fn zero_shot_predict(image: &[f32], prompts: &EmbeddingMatrix, tau: f64) -> Result<ZeroShot> {
    check_temperature(tau)?;
    if prompts.is_empty() {
        return Err(MllError::InvalidInput("no class prompts".into()));
    }
    let probs = softmax(&similarities(image, prompts)?, tau);
    let class_index = argmax_by_name(&probs, prompts.ids());
    Ok(ZeroShot {
        class: prompts.ids()[class_index].clone(),
        class_index,
        probs,
    })
}

/// One model's view of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberOutput {
    pub probs: Vec<f64>,
    pub entropy: f64,
}

impl MemberOutput {
    pub fn from_similarities(sims: &[f64], temperature: f64) -> Self {
        let probs = softmax(sims, temperature);
        let entropy = entropy(&probs);
        MemberOutput { probs, entropy }
    }
}

pub fn member_output(image: &[f32], prompts: &EmbeddingMatrix, temperature: f64) -> Result<MemberOutput> {
    check_temperature(temperature)?;
    Ok(MemberOutput::from_similarities(&similarities(image, prompts)?, temperature))
}

/// `w_m = H_m / sum H`, uniform when every member is fully confident.
pub fn entropy_weights(entropies: &[f64]) -> Vec<f64> {
    let total: f64 = entropies.iter().sum();
    if total < ENTROPY_EPSILON {
        let n = entropies.len() as f64;
        return vec![1.0 / n; entropies.len()];
    }
    entropies.iter().map(|h| h / total).collect()
}

/// Weights for raw similarity vectors, one per model.
pub fn entropy_weights_for(similarity_vectors: &[&[f64]], temperature: f64) -> Vec<f64> {
    let entropies: Vec<f64> = similarity_vectors
        .iter()
        .map(|s| MemberOutput::from_similarities(s, temperature).entropy)
        .collect();
    entropy_weights(&entropies)
}

/// Weighted confidence of class `class_index` and the weights used.
pub fn ensemble_confidence(class_index: usize, outputs: &[&MemberOutput]) -> (f64, Vec<f64>) {
    let weights = entropy_weights(&outputs.iter().map(|o| o.entropy).collect::<Vec<_>>());
    let confidence = outputs
        .iter()
        .zip(&weights)
        .map(|(o, w)| w * o.probs[class_index])
        .sum();
    (confidence, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberWeight {
    pub model_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub predicted: String,
    /// Ensemble confidence per class, in class order.
    pub confidences: Vec<f64>,
    /// Member weights per class, in class order.
    pub weights: Vec<Vec<MemberWeight>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub task_id: String,
    pub method: SelectionMethod,
    pub classes: Vec<String>,
    pub records: Vec<PredictionRecord>,
}

/// Combines precomputed member outputs into one prediction.
pub fn combine<'a>(
    sample_id: &str,
    classes: &[String],
    members: &[Vec<String>],
    output: impl Fn(&str) -> &'a MemberOutput,
) -> PredictionRecord {
    let mut confidences = Vec::with_capacity(classes.len());
    let mut weights = Vec::with_capacity(classes.len());
    for (c, class_members) in members.iter().enumerate() {
        let outputs: Vec<&MemberOutput> = class_members.iter().map(|m| output(m)).collect();
        let (confidence, w) = ensemble_confidence(c, &outputs);
        confidences.push(confidence);
        weights.push(
            class_members
                .iter()
                .zip(w)
                .map(|(m, weight)| MemberWeight {
                    model_id: m.clone(),
                    weight,
                })
                .collect(),
        );
    }
    let best = argmax_by_name(&confidences, classes);
    PredictionRecord {
        sample_id: sample_id.to_string(),
        predicted: classes[best].clone(),
        confidences,
        weights,
    }
}

/// A model's embeddings for one task: class prompts and task images.
#[derive(Debug, Clone)]
pub struct TaskView {
    prompts: Arc<EmbeddingMatrix>,
    images: Arc<EmbeddingMatrix>,
}

impl TaskView {
    /// `prompts` is keyed by class name and is reordered to `classes`.
    pub fn new<S: AsRef<str>>(
        classes: &[S],
        prompts: &EmbeddingMatrix,
        images: Arc<EmbeddingMatrix>,
    ) -> Result<Self> {
        if prompts.dim() != images.dim() {
            return Err(MllError::InvalidInput(format!(
                "prompts have dim {}, images dim {}",
                prompts.dim(),
                images.dim()
            )));
        }
        Ok(TaskView {
            prompts: Arc::new(prompts.subset(classes)?),
            images,
        })
    }

    pub fn prompts(&self) -> &EmbeddingMatrix {
        &self.prompts
    }

    pub fn images(&self) -> &EmbeddingMatrix {
        &self.images
    }

    pub fn output(&self, sample_id: &str, temperature: f64) -> Result<MemberOutput> {
        let image = self
            .images
            .get(sample_id)
            .ok_or_else(|| MllError::IncompleteEmbeddings(vec![sample_id.to_string()]))?;
        member_output(image, &self.prompts, temperature)
    }
}

/// Per-class ensembles ready to classify task samples.
#[derive(Debug, Clone)]
pub struct EnsemblePredictor {
    classes: Vec<String>,
    members: Vec<Vec<String>>,
    views: BTreeMap<String, TaskView>,
    temperature: f64,
    samples: Vec<String>,
}

impl EnsemblePredictor {
    /// `members[c]` is the ensemble for `classes[c]`; every member needs a
    /// view, and every view must cover the same samples.
    pub fn new(
        classes: Vec<String>,
        members: Vec<Vec<String>>,
        views: BTreeMap<String, TaskView>,
        temperature: f64,
    ) -> Result<Self> {
        check_temperature(temperature)?;
        if classes.is_empty() || classes.len() != members.len() {
            return Err(MllError::InvalidInput(format!(
                "{} classes but {} ensembles",
                classes.len(),
                members.len()
            )));
        }
        for (class, ensemble) in classes.iter().zip(&members) {
            if ensemble.is_empty() {
                return Err(MllError::InvalidInput(format!("class {class} has no ensemble members")));
            }
            let distinct: BTreeSet<&String> = ensemble.iter().collect();
            if distinct.len() != ensemble.len() {
                return Err(MllError::DuplicateId(vec![class.clone()]));
            }
        }
        let used: BTreeSet<&str> = members.iter().flatten().map(String::as_str).collect();
        let missing: Vec<String> = used
            .iter()
            .filter(|m| !views.contains_key(**m))
            .map(|m| m.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(MllError::InvalidInput(format!(
                "no task embeddings for models {}",
                missing.join(", ")
            )));
        }
        let views: BTreeMap<String, TaskView> = views
            .into_iter()
            .filter(|(m, _)| used.contains(m.as_str()))
            .collect();
        for view in views.values() {
            if view.prompts.len() != classes.len() {
                return Err(MllError::InvalidInput("prompt rows do not match classes".into()));
            }
        }

        let mut samples: Vec<String> = views.values().next().unwrap().images.ids().to_vec();
        samples.sort();
        let expected: BTreeSet<&str> = samples.iter().map(String::as_str).collect();
        let mut mismatched = BTreeSet::new();
        for view in views.values() {
            let have: BTreeSet<&str> = view.images.ids().iter().map(String::as_str).collect();
            mismatched.extend(expected.symmetric_difference(&have).map(|s| s.to_string()));
        }
        if !mismatched.is_empty() {
            return Err(MllError::IncompleteEmbeddings(mismatched.into_iter().collect()));
        }

        Ok(EnsemblePredictor {
            classes,
            members,
            views,
            temperature,
            samples,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn members(&self) -> &[Vec<String>] {
        &self.members
    }

    /// Task samples in sorted order.
    pub fn sample_ids(&self) -> &[String] {
        &self.samples
    }

    /// Distinct models that run on every sample.
    pub fn forward_cost(&self) -> usize {
        self.views.len()
    }

    pub fn predict(&self, sample_id: &str) -> Result<PredictionRecord> {
        let outputs: BTreeMap<&str, MemberOutput> = self
            .views
            .iter()
            .map(|(m, view)| Ok((m.as_str(), view.output(sample_id, self.temperature)?)))
            .collect::<Result<_>>()?;
        Ok(combine(sample_id, &self.classes, &self.members, |m| &outputs[m]))
    }

    /// Predictions for every sample, sorted by sample id.
    pub fn predict_all(&self) -> Result<Vec<PredictionRecord>> {
        self.samples.par_iter().map(|s| self.predict(s)).collect()
    }
}
