//! Brute-force reference for selection and ensemble prediction.
//!
//! Written with plain loops over raw rows and deliberately shares no code
//! with `selection` or `reuse`; tests compare the two.

use std::collections::BTreeMap;

use crate::error::{MllError, Result};
use crate::graph::SemanticGraph;
use crate::labeling::ModelHub;
use crate::reuse::TaskView;
use crate::selection::TaskSpec;
use crate::store::EmbeddingMatrix;

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSelection {
    pub selected: Vec<String>,
    /// `(node, class) -> weight`, nonzero entries only.
    pub z: BTreeMap<(String, String), f64>,
    pub node_precision: BTreeMap<String, BTreeMap<String, f64>>,
    pub class_precision: BTreeMap<String, Vec<f64>>,
    pub reuse: BTreeMap<String, Vec<f64>>,
    /// Full ranking per class, in class order.
    pub rankings: Vec<Vec<String>>,
    pub members: Vec<Vec<String>>,
}

/// Reference selection with normalized transfer weights and the global
/// selected-node set.
#[allow(clippy::too_many_arguments)]
pub fn oracle_select(
    task: &TaskSpec,
    hub: &ModelHub,
    graph: &SemanticGraph,
    node_captions: &EmbeddingMatrix,
    task_captions: &EmbeddingMatrix,
    alpha: f64,
    k_match: usize,
    k_reuse: usize,
) -> Result<OracleSelection> {
    if hub.is_empty() {
        return Err(MllError::NoModels);
    }
    let mut candidates: Vec<String> = Vec::new();
    for node in graph.nodes() {
        if !node.sample_ids.is_empty() {
            candidates.push(node.synset_id.clone());
        }
    }
    if candidates.is_empty() {
        return Err(MllError::NoCandidates);
    }
    candidates.sort();

    // transfer matrix: repeated max-scan for the top k_match
    let mut z = BTreeMap::new();
    for class in &task.classes {
        let cv = task_captions
            .get(class)
            .ok_or_else(|| MllError::IncompleteEmbeddings(vec![class.clone()]))?;
        let mut sims: Vec<(String, f64)> = Vec::new();
        for node in &candidates {
            let nv = node_captions
                .get(node)
                .ok_or_else(|| MllError::IncompleteEmbeddings(vec![node.clone()]))?;
            sims.push((node.clone(), cos(cv, nv).clamp(-1.0, 1.0)));
        }
        let mut picked: Vec<(String, f64)> = Vec::new();
        for _ in 0..k_match.min(sims.len()) {
            let mut best: Option<usize> = None;
            for (i, (id, s)) in sims.iter().enumerate() {
                if picked.iter().any(|(p, _)| p == id) {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) if *s > sims[b].1 || (*s == sims[b].1 && *id < sims[b].0) => Some(i),
                    keep => keep,
                };
            }
            picked.push(sims[best.unwrap()].clone());
        }
        let mut total = 0.0;
        for (_, s) in &picked {
            if *s > 0.0 {
                total += s;
            }
        }
        for (id, s) in picked {
            if s > 0.0 {
                z.insert((id, class.clone()), s / total);
            }
        }
    }
    let mut selected: Vec<String> = z.keys().map(|(n, _)| n.clone()).collect();
    selected.sort();
    selected.dedup();

    let mut node_precision = BTreeMap::new();
    let mut class_precision = BTreeMap::new();
    let mut reuse = BTreeMap::new();
    for entry in hub.entries() {
        let label = &entry.label;
        let mut pv = BTreeMap::new();
        for v in &selected {
            let samples = &graph.node(v).unwrap().sample_ids;
            let mut hits = 0;
            for s in samples {
                let image = label.images().get(s).unwrap();
                let mut best = String::new();
                let mut best_sim = f64::NEG_INFINITY;
                for u in &selected {
                    let sim = cos(image, label.captions().get(u).unwrap());
                    if sim > best_sim || (sim == best_sim && *u < best) {
                        best_sim = sim;
                        best = u.clone();
                    }
                }
                if best == *v {
                    hits += 1;
                }
            }
            pv.insert(v.clone(), hits as f64 / samples.len() as f64);
        }
        let mut py = Vec::new();
        for class in &task.classes {
            let mut p = 0.0;
            for v in &selected {
                if let Some(w) = z.get(&(v.clone(), class.clone())) {
                    p += pv[v] * w;
                }
            }
            py.push(if p > 1.0 { 1.0 } else { p });
        }
        let mut sum = 0.0;
        for p in &py {
            sum += p;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in &py {
            lo = lo.min(*p);
            hi = hi.max(*p);
        }
        let mut ry = Vec::new();
        for p in &py {
            let r = alpha * p + (1.0 - alpha) * sum / py.len() as f64;
            ry.push(if r > hi { hi } else if r < lo { lo } else { r });
        }
        let id = entry.record.model_id.clone();
        node_precision.insert(id.clone(), pv);
        class_precision.insert(id.clone(), py);
        reuse.insert(id, ry);
    }

    let mut rankings = Vec::new();
    let mut members = Vec::new();
    for c in 0..task.classes.len() {
        let mut remaining: Vec<&String> = reuse.keys().collect();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (ri, rb) = (reuse[remaining[i]][c], reuse[remaining[best]][c]);
                if ri > rb || (ri == rb && remaining[i] < remaining[best]) {
                    best = i;
                }
            }
            order.push(remaining.remove(best).clone());
        }
        members.push(order.iter().take(k_reuse).cloned().collect());
        rankings.push(order);
    }

    Ok(OracleSelection {
        selected,
        z,
        node_precision,
        class_precision,
        reuse,
        rankings,
        members,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePrediction {
    pub predicted: String,
    pub confidences: Vec<f64>,
    /// Per class, per member.
    pub weights: Vec<Vec<f64>>,
}

/// Reference ensemble prediction for one sample.
pub fn oracle_predict(
    classes: &[String],
    members: &[Vec<String>],
    views: &BTreeMap<String, TaskView>,
    temperature: f64,
    sample_id: &str,
) -> OraclePrediction {
    let probs_entropy = |model: &str| -> (Vec<f64>, f64) {
        let view = &views[model];
        let image = view.images().get(sample_id).unwrap();
        let mut exps = Vec::new();
        for class in classes {
            let prompt = view.prompts().get(class).unwrap();
            exps.push((cos(image, prompt).clamp(-1.0, 1.0) / temperature).exp());
        }
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut h = 0.0;
        for p in &probs {
            if *p > 0.0 {
                h -= p * p.ln();
            }
        }
        (probs, h)
    };

    let mut confidences = Vec::new();
    let mut weights = Vec::new();
    for (c, ensemble) in members.iter().enumerate() {
        let outs: Vec<(Vec<f64>, f64)> = ensemble.iter().map(|m| probs_entropy(m)).collect();
        let total_h: f64 = outs.iter().map(|(_, h)| h).sum();
        let w: Vec<f64> = if total_h < 1e-12 {
            vec![1.0 / outs.len() as f64; outs.len()]
        } else {
            outs.iter().map(|(_, h)| h / total_h).collect()
        };
        let mut conf = 0.0;
        for (i, (p, _)) in outs.iter().enumerate() {
            conf += w[i] * p[c];
        }
        confidences.push(conf);
        weights.push(w);
    }
    let mut best = 0;
    for c in 1..classes.len() {
        if confidences[c] > confidences[best]
            || (confidences[c] == confidences[best] && classes[c] < classes[best])
        {
            best = c;
        }
    }
    OraclePrediction {
        predicted: classes[best].clone(),
        confidences,
        weights,
    }
}
