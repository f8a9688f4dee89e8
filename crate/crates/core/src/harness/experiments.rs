//! Hub-scaling curves and the alpha / k ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Benchmark, TaskBundle};
use crate::error::{MllError, Result};
use crate::reuse::{combine, MemberOutput};
use crate::selection::{score_task, ScoredTask, SelectParams};

/// A task scored once, with every model's output on every sample cached so
/// that any sub-hub or parameter setting is cheap to evaluate.
struct CachedTask {
    scored: ScoredTask,
    samples: Vec<String>,
    truth: Vec<String>,
    outputs: BTreeMap<String, Vec<MemberOutput>>,
}

impl CachedTask {
    fn build(bench: &Benchmark, bundle: &TaskBundle, params: &SelectParams, temperature: f64) -> Result<Self> {
        let scored = score_task(
            &bundle.task,
            &bench.hub,
            &bench.graph,
            &bench.node_captions,
            &bundle.task_captions,
            params,
        )?;
        let samples: Vec<String> = bundle.truth.keys().cloned().collect();
        if samples.is_empty() {
            return Err(MllError::InvalidInput(format!(
                "task {} has no ground truth",
                bundle.task.task_id
            )));
        }
        let truth = samples.iter().map(|s| bundle.truth[s].clone()).collect();
        let models: Vec<&String> = scored.scores.keys().collect();
        let outputs = models
            .par_iter()
            .map(|model| {
                let view = bundle.views.get(*model).ok_or_else(|| {
                    MllError::InvalidInput(format!(
                        "no embeddings of task {} for model {model}",
                        bundle.task.task_id
                    ))
                })?;
                let outs = samples
                    .iter()
                    .map(|s| view.output(s, temperature))
                    .collect::<Result<Vec<_>>>()?;
                Ok(((*model).clone(), outs))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        Ok(CachedTask {
            scored,
            samples,
            truth,
            outputs,
        })
    }

    /// Accuracy and distinct models per sample for the given members.
    fn score(&self, members: &[Vec<String>]) -> (f64, usize) {
        let correct = (0..self.samples.len())
            .filter(|&i| {
                let record = combine(&self.samples[i], &self.scored.classes, members, |m| {
                    &self.outputs[m][i]
                });
                record.predicted == self.truth[i]
            })
            .count();
        let distinct = members.iter().flatten().collect::<BTreeSet<_>>().len();
        (correct as f64 / self.samples.len() as f64, distinct)
    }

    fn run<S: AsRef<str>>(&self, alpha: f64, k_reuse: usize, models: &[S]) -> Result<(f64, usize)> {
        let result = self.scored.result_for(alpha, k_reuse, models)?;
        Ok(self.score(&result.members()))
    }
}

fn cache_all(bench: &Benchmark, params: &SelectParams, temperature: f64) -> Result<Vec<CachedTask>> {
    if bench.tasks.is_empty() {
        return Err(MllError::InvalidInput("no tasks to evaluate".into()));
    }
    bench
        .tasks
        .par_iter()
        .map(|bundle| CachedTask::build(bench, bundle, params, temperature))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub seed: u64,
    pub alpha: f64,
    pub k_reuse: usize,
    /// Seed of each permutation's shuffle.
    pub permutation_seeds: Vec<u64>,
    /// Order in which each permutation adds models.
    pub orders: Vec<Vec<String>>,
    /// Hub sizes 1..=M.
    pub sizes: Vec<usize>,
    /// Mean over permutations of the task-averaged accuracy, per size.
    pub mean: Vec<f64>,
    /// `[permutation][size]` task-averaged accuracy.
    pub per_permutation: Vec<Vec<f64>>,
    /// `task -> [permutation][size]` accuracy.
    pub per_task: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ScalingCurve {
    pub fn to_table(&self) -> String {
        let mut out = String::from("Hub size | Mean Accuracy | Min | Max\n");
        for (s, size) in self.sizes.iter().enumerate() {
            let column: Vec<f64> = self.per_permutation.iter().map(|p| p[s]).collect();
            let min = column.iter().copied().fold(f64::INFINITY, f64::min);
            let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            writeln!(out, "{size} | {:.4} | {min:.4} | {max:.4}", self.mean[s]).unwrap();
        }
        out
    }
}

/// Grows the hub one model at a time along `permutations` random orders
/// and records task-averaged accuracy at every size. Permutation `i` is
/// shuffled with seed `seed + i`.
pub fn scaling_experiment(
    bench: &Benchmark,
    permutations: usize,
    seed: u64,
    params: &SelectParams,
    temperature: f64,
) -> Result<ScalingCurve> {
    params.validate()?;
    if permutations == 0 {
        return Err(MllError::InvalidInput("need at least one permutation".into()));
    }
    let cached = cache_all(bench, params, temperature)?;
    let models = bench.hub.model_ids();
    let sizes: Vec<usize> = (1..=models.len()).collect();
    let permutation_seeds: Vec<u64> = (0..permutations as u64).map(|i| seed.wrapping_add(i)).collect();

    let runs = permutation_seeds
        .par_iter()
        .map(|&perm_seed| {
            let mut order = models.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let per_task = sizes
                .iter()
                .map(|&s| {
                    cached
                        .iter()
                        .map(|task| Ok(task.run(params.alpha, params.k_reuse, &order[..s])?.0))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((order, per_task))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut orders = Vec::with_capacity(permutations);
    let mut per_permutation = Vec::with_capacity(permutations);
    let mut per_task: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (order, by_size) in runs {
        per_permutation.push(by_size.iter().map(|accs| mean(accs)).collect());
        for (t, task) in cached.iter().enumerate() {
            per_task
                .entry(task.scored.task_id.clone())
                .or_default()
                .push(by_size.iter().map(|accs| accs[t]).collect());
        }
        orders.push(order);
    }
    let mean_curve = (0..sizes.len())
        .map(|s| mean(&per_permutation.iter().map(|p: &Vec<f64>| p[s]).collect::<Vec<_>>()))
        .collect();
    Ok(ScalingCurve {
        seed,
        alpha: params.alpha,
        k_reuse: params.k_reuse,
        permutation_seeds,
        orders,
        sizes,
        mean: mean_curve,
        per_permutation,
        per_task,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub mean_accuracy: f64,
    /// Mean distinct models run per sample.
    pub forward_cost: f64,
    /// `forward_cost` over the same quantity at k = 1.
    pub relative_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// k used for the alpha grid.
    pub alpha_k: usize,
    /// alpha used for the k grid.
    pub k_alpha: f64,
    pub alphas: Vec<AlphaRow>,
    pub ks: Vec<KRow>,
}

impl AblationReport {
    pub fn alpha_table(&self) -> String {
        let mut head = String::from("alpha");
        let mut row = String::from("Avg.");
        for r in &self.alphas {
            write!(head, " | {}", r.alpha).unwrap();
            write!(row, " | {:.4}", r.mean_accuracy).unwrap();
        }
        format!("{head}\n{row}\n")
    }

    pub fn k_table(&self) -> String {
        let mut out = String::from("k | Average Accuracy | Interface Time Cost Compared with k = 1\n");
        for r in &self.ks {
            writeln!(out, "{} | {:.4} | {:.3}", r.k, r.mean_accuracy, r.relative_cost).unwrap();
        }
        out
    }
}

/// Evaluates every alpha in `alphas` at `k_reuse = 1` and every k in `ks`
/// at `params.alpha`. Costs count the distinct models each sample runs
/// through, averaged over all samples of all tasks.
pub fn ablate(
    bench: &Benchmark,
    alphas: &[f64],
    ks: &[usize],
    params: &SelectParams,
    temperature: f64,
) -> Result<AblationReport> {
    params.validate()?;
    if alphas.is_empty() || ks.is_empty() {
        return Err(MllError::InvalidInput("ablation grids must be non-empty".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(MllError::InvalidInput(format!("alpha {a} outside [0, 1]")));
    }
    if ks.contains(&0) {
        return Err(MllError::InvalidInput("k must be at least 1".into()));
    }
    let cached = cache_all(bench, params, temperature)?;
    let models = bench.hub.model_ids();
    let total_samples: usize = cached.iter().map(|t| t.samples.len()).sum();

    let grid = |alpha: f64, k: usize| -> Result<(f64, f64)> {
        let mut accs = Vec::with_capacity(cached.len());
        let mut cost = 0usize;
        for task in &cached {
            let (acc, distinct) = task.run(alpha, k, &models)?;
            accs.push(acc);
            cost += distinct * task.samples.len();
        }
        Ok((mean(&accs), cost as f64 / total_samples as f64))
    };

    let alpha_rows = alphas
        .par_iter()
        .map(|&alpha| {
            Ok(AlphaRow {
                alpha,
                mean_accuracy: grid(alpha, 1)?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, base_cost) = grid(params.alpha, 1)?;
    let k_rows = ks
        .par_iter()
        .map(|&k| {
            let (mean_accuracy, forward_cost) = grid(params.alpha, k)?;
            Ok(KRow {
                k,
                mean_accuracy,
                forward_cost,
                relative_cost: forward_cost / base_cost,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        alpha_k: 1,
        k_alpha: params.alpha,
        alphas: alpha_rows,
        ks: k_rows,
    })
}
