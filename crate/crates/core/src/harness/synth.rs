//! Synthetic hubs with exactly controlled behavior.
//!
//! Concept `i` is a signed standard basis vector `e_i` (the axis and sign
//! are drawn from the seed). It is at once graph node `i`, task class `i`,
//! the node and class caption embedding, and every model's prompt for
//! class `i`. A model's competence on concept `i` is the fraction of the
//! concept's images it embeds close to `e_i`:
//!
//! - label images: a hit is `e_v`, a miss is `e_{v+1}`, so the model's node
//!   precision is exactly its competence;
//! - task images: a hit is `a e_i + b e_{i+1}` with `a^2 + b^2 = 1`, a miss
//!   is `b e_i + a e_{i+1}`, or the uniform vector when the model abstains.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Benchmark, TaskBundle};
use crate::error::{MllError, Result};
use crate::graph::{SampleMap, SemanticGraph, SynsetRecord};
use crate::labeling::{compute_label, ModelHub, ModelRecord};
use crate::reuse::TaskView;
use crate::selection::TaskSpec;
use crate::store::EmbeddingMatrix;
use crate::workspace::Truth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    /// Per concept, in [0, 1].
    pub competence: Vec<f64>,
    /// Weight of the true concept in a hit, in (1/sqrt 2, 1].
    pub sharpness: f64,
    /// Misses become uninformative instead of pointing at a wrong class.
    pub abstain: bool,
    pub imagenet_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task_id: String,
    pub concepts: usize,
    pub dim: usize,
    pub samples_per_node: usize,
    pub samples_per_class: usize,
    pub models: Vec<ModelProfile>,
}

pub fn node_id(concept: usize) -> String {
    format!("n{:08}", concept + 1)
}

pub fn class_name(concept: usize) -> String {
    format!("class_{concept:02}")
}

/// `classes` specialists, each perfect on one concept and blind elsewhere,
/// and one generalist with the given competence on every concept.
pub fn specialist_spec(classes: usize, generalist_acc: f64) -> SynthSpec {
    let mut models: Vec<ModelProfile> = (0..classes)
        .map(|i| ModelProfile {
            model_id: format!("specialist_{i:02}"),
            competence: (0..classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect(),
            sharpness: 1.0,
            abstain: true,
            imagenet_acc: 1.0 / classes as f64,
        })
        .collect();
    models.push(ModelProfile {
        model_id: "generalist".into(),
        competence: vec![generalist_acc; classes],
        sharpness: 0.8,
        abstain: false,
        imagenet_acc: generalist_acc,
    });
    SynthSpec {
        task_id: "specialist".into(),
        concepts: classes,
        dim: classes,
        samples_per_node: 5,
        samples_per_class: 5,
        models,
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.concepts == 0 || self.models.is_empty() {
            return Err(MllError::InvalidInput("need at least one concept and one model".into()));
        }
        if self.dim < self.concepts {
            return Err(MllError::InfeasibleFixture(format!(
                "{} orthogonal concepts do not fit in dim {}",
                self.concepts, self.dim
            )));
        }
        if self.samples_per_node == 0 || self.samples_per_class == 0 {
            return Err(MllError::InvalidInput("sample counts must be positive".into()));
        }
        for m in &self.models {
            if m.competence.len() != self.concepts {
                return Err(MllError::InvalidInput(format!(
                    "model {} has {} competences for {} concepts",
                    m.model_id,
                    m.competence.len(),
                    self.concepts
                )));
            }
            if m.competence.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(MllError::InvalidInput(format!(
                    "model {} has competence outside [0, 1]",
                    m.model_id
                )));
            }
            if !(m.sharpness > std::f64::consts::FRAC_1_SQRT_2 && m.sharpness <= 1.0) {
                return Err(MllError::InvalidInput(format!(
                    "model {} sharpness must lie in (1/sqrt 2, 1]",
                    m.model_id
                )));
            }
        }
        Ok(())
    }
}

struct Basis {
    dim: usize,
    axes: Vec<usize>,
    signs: Vec<f64>,
}

impl Basis {
    fn draw(concepts: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut axes: Vec<usize> = (0..dim).collect();
        axes.shuffle(rng);
        axes.truncate(concepts);
        let signs = (0..concepts)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        Basis { dim, axes, signs }
    }

    fn n(&self) -> usize {
        self.axes.len()
    }

    /// Unit vector for the weighted sum of concepts.
    fn mix(&self, terms: &[(usize, f64)]) -> Vec<f32> {
        let mut v = vec![0.0f64; self.dim];
        for &(c, w) in terms {
            v[self.axes[c]] += w * self.signs[c];
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| (x / norm) as f32).collect()
    }

    fn concept(&self, c: usize) -> Vec<f32> {
        self.mix(&[(c, 1.0)])
    }

    fn uniform(&self) -> Vec<f32> {
        self.mix(&(0..self.n()).map(|c| (c, 1.0)).collect::<Vec<_>>())
    }

    fn next(&self, c: usize) -> usize {
        (c + 1) % self.n()
    }
}

/// Which of `n` draws are hits for competence `c`: `round(c n)` of them,
/// positions drawn from `rng`.
fn hits(c: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = (c * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < k).collect();
    flags.shuffle(rng);
    flags
}

fn matrix(ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_rows(ids, rows)
}

/// Builds the hub, graph, task and stores described by `spec`.
pub fn synth_hub(spec: &SynthSpec, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = Basis::draw(spec.concepts, spec.dim, &mut rng);
    let n = spec.concepts;

    let records: Vec<SynsetRecord> = (0..n)
        .map(|i| SynsetRecord {
            synset_id: node_id(i),
            name: format!("concept {i}"),
            definition: format!("synthetic concept number {i}"),
            hypernym_ids: vec![],
        })
        .collect();
    let mut samples = SampleMap::new();
    for i in 0..n {
        samples.insert(
            node_id(i),
            (0..spec.samples_per_node).map(|t| format!("{}_{t:02}", node_id(i))).collect(),
        );
    }
    let graph = SemanticGraph::build(&records, &samples)?;
    let node_ids: Vec<String> = (0..n).map(node_id).collect();
    let concept_rows: Vec<Vec<f32>> = (0..n).map(|i| basis.concept(i)).collect();
    let node_captions = matrix(node_ids.clone(), concept_rows.clone())?;

    let classes: Vec<String> = (0..n).map(class_name).collect();
    let task = TaskSpec {
        task_id: spec.task_id.clone(),
        classes: classes.clone(),
        domain_text: "synthetic picture".into(),
        task_text: "image classification".into(),
        class_captions: Some(
            classes
                .iter()
                .enumerate()
                .map(|(i, c)| (c.clone(), format!("The synthetic picture of {c}, which is concept {i}.")))
                .collect(),
        ),
    };
    let task_captions = matrix(classes.clone(), concept_rows.clone())?;
    let task_samples: Vec<Vec<String>> = (0..n)
        .map(|i| {
            (0..spec.samples_per_class)
                .map(|t| format!("{}_{}_{t:02}", spec.task_id, classes[i]))
                .collect()
        })
        .collect();
    let mut truth = Truth::new();
    for (i, ids) in task_samples.iter().enumerate() {
        for id in ids {
            truth.insert(id.clone(), classes[i].clone());
        }
    }

    let mut hub = ModelHub::new();
    let mut views = BTreeMap::new();
    for profile in &spec.models {
        let mut label_ids = Vec::new();
        let mut label_rows = Vec::new();
        let mut task_ids = Vec::new();
        let mut task_rows = Vec::new();
        for (i, &c) in profile.competence.iter().enumerate() {
            for (t, hit) in hits(c, spec.samples_per_node, &mut rng).into_iter().enumerate() {
                label_ids.push(samples[&node_ids[i]][t].clone());
                label_rows.push(basis.concept(if hit { i } else { basis.next(i) }));
            }
            let a = profile.sharpness;
            let b = (1.0 - a * a).max(0.0).sqrt();
            for (t, hit) in hits(c, spec.samples_per_class, &mut rng).into_iter().enumerate() {
                task_ids.push(task_samples[i][t].clone());
                task_rows.push(if hit {
                    basis.mix(&[(i, a), (basis.next(i), b)])
                } else if profile.abstain {
                    basis.uniform()
                } else {
                    basis.mix(&[(i, b), (basis.next(i), a)])
                });
            }
        }
        let record = ModelRecord::new(profile.model_id.clone(), spec.dim).with_imagenet_acc(profile.imagenet_acc);
        let captions = Arc::new(node_captions.clone());
        let label = compute_label(&record, Arc::new(matrix(label_ids, label_rows)?), captions, &graph)?;
        hub.register_in_place(record, label)?;
        let prompts = matrix(classes.clone(), concept_rows.clone())?;
        views.insert(
            profile.model_id.clone(),
            TaskView::new(&classes, &prompts, Arc::new(matrix(task_ids, task_rows)?))?,
        );
    }

    Ok(Benchmark {
        graph,
        hub,
        node_captions,
        tasks: vec![TaskBundle {
            task,
            task_captions,
            views,
            truth,
        }],
    })
}

/// Size limits for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct RandomLimits {
    pub models: usize,
    pub nodes: usize,
    pub classes: usize,
    pub samples_per_node: usize,
    pub dim: usize,
    pub task_samples: usize,
}

impl Default for RandomLimits {
    fn default() -> Self {
        RandomLimits {
            models: 5,
            nodes: 12,
            classes: 6,
            samples_per_node: 8,
            dim: 16,
            task_samples: 10,
        }
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| (*x as f64 / norm) as f32).collect();
        }
    }
}

fn random_matrix(ids: Vec<String>, dim: usize, rng: &mut ChaCha8Rng) -> Result<EmbeddingMatrix> {
    let rows = ids.iter().map(|_| random_unit(dim, rng)).collect();
    matrix(ids, rows)
}

/// A small random hub and task. Models have their own dimensions; some
/// instances contain exact duplicates (two nodes with one caption, two
/// models with one set of embeddings) so that tie-breaking is exercised.
pub fn random_instance(seed: u64, limits: RandomLimits) -> Result<Benchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nodes = rng.random_range(1..=limits.nodes);
    let n_classes = rng.random_range(1..=limits.classes);
    let n_models = rng.random_range(1..=limits.models);
    let backend_dim = rng.random_range(2..=limits.dim);

    let records: Vec<SynsetRecord> = (0..n_nodes)
        .map(|i| SynsetRecord {
            synset_id: node_id(i),
            name: format!("node {i}"),
            definition: "random".into(),
            hypernym_ids: if i > 0 && rng.random_bool(0.5) {
                vec![node_id(rng.random_range(0..i))]
            } else {
                vec![]
            },
        })
        .collect();
    let mut samples = SampleMap::new();
    for i in 0..n_nodes {
        // leave some nodes unsampled, but never all of them
        if i > 0 && rng.random_bool(0.15) {
            continue;
        }
        let count = rng.random_range(1..=limits.samples_per_node);
        samples.insert(node_id(i), (0..count).map(|t| format!("{}_{t}", node_id(i))).collect());
    }
    let graph = SemanticGraph::build(&records, &samples)?;
    let node_ids: Vec<String> = (0..n_nodes).map(node_id).collect();
    let sample_ids: Vec<String> = graph.sample_ids().map(String::from).collect();

    let mut node_captions = random_matrix(node_ids.clone(), backend_dim, &mut rng)?;
    let classes: Vec<String> = (0..n_classes).map(class_name).collect();
    let task = TaskSpec {
        task_id: format!("random_{seed}"),
        classes: classes.clone(),
        domain_text: "random picture".into(),
        task_text: "image classification".into(),
        class_captions: None,
    };
    let mut task_captions = random_matrix(classes.clone(), backend_dim, &mut rng)?;
    if rng.random_bool(0.3) {
        // a class caption equal to a node caption pins that node first
        let node = rng.random_range(0..n_nodes);
        let class = rng.random_range(0..n_classes);
        let mut rows: Vec<Vec<f32>> = (0..n_classes).map(|c| task_captions.row(c).to_vec()).collect();
        rows[class] = node_captions.row(node).to_vec();
        task_captions = matrix(classes.clone(), rows)?;
    }
    if n_nodes > 1 && rng.random_bool(0.3) {
        let mut rows: Vec<Vec<f32>> = (0..n_nodes).map(|i| node_captions.row(i).to_vec()).collect();
        rows[1] = rows[0].clone();
        node_captions = matrix(node_ids, rows)?;
    }
    finish(seed, limits, graph, node_captions, task, task_captions, sample_ids, n_models, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    seed: u64,
    limits: RandomLimits,
    graph: SemanticGraph,
    node_captions: EmbeddingMatrix,
    task: TaskSpec,
    task_captions: EmbeddingMatrix,
    sample_ids: Vec<String>,
    n_models: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Benchmark> {
    let classes = task.classes.clone();
    let n_task = rng.random_range(1..=limits.task_samples);
    let task_sample_ids: Vec<String> = (0..n_task).map(|t| format!("task_{seed}_{t:02}")).collect();
    let truth: Truth = task_sample_ids
        .iter()
        .map(|s| (s.clone(), classes[rng.random_range(0..classes.len())].clone()))
        .collect();
    let node_ids: Vec<String> = graph.node_ids().map(String::from).collect();

    let mut hub = ModelHub::new();
    let mut views = BTreeMap::new();
    let mut previous: Option<(usize, EmbeddingMatrix, EmbeddingMatrix, EmbeddingMatrix, EmbeddingMatrix)> = None;
    for m in 0..n_models {
        let model_id = format!("model_{m}");
        let (dim, images, captions, prompts, task_images) = match previous.take() {
            Some(prev) if rng.random_bool(0.25) => prev,
            _ => {
                let dim = rng.random_range(2..=limits.dim);
                // images cluster loosely around their node's caption
                let captions = random_matrix(node_ids.clone(), dim, rng)?;
                let rows = sample_ids
                    .iter()
                    .map(|s| {
                        let node = s.split('_').next().unwrap();
                        let anchor = captions.get(node).unwrap();
                        let noise = random_unit(dim, rng);
                        let w = rng.random_range(0.0..2.0f32);
                        anchor.iter().zip(&noise).map(|(a, n)| a + w * n).collect()
                    })
                    .collect();
                let images = matrix(sample_ids.clone(), rows)?.normalized()?;
                let prompts = random_matrix(classes.clone(), dim, rng)?;
                let task_images = random_matrix(task_sample_ids.clone(), dim, rng)?;
                (dim, images, captions, prompts, task_images)
            }
        };
        let record = ModelRecord::new(model_id.clone(), dim).with_imagenet_acc(rng.random_range(0.2..0.9));
        let label = compute_label(
            &record,
            Arc::new(images.clone()),
            Arc::new(captions.clone()),
            &graph,
        )?;
        hub.register_in_place(record, label)?;
        views.insert(
            model_id,
            TaskView::new(&classes, &prompts, Arc::new(task_images.clone()))?,
        );
        previous = Some((dim, images, captions, prompts, task_images));
    }

    Ok(Benchmark {
        graph,
        hub,
        node_captions,
        tasks: vec![TaskBundle {
            task,
            task_captions,
            views,
            truth,
        }],
    })
}
