//! Semantic graph of visual concepts.
//!
//! Each node is a WordNet-style synset carrying a caption of the form
//! `<name> which is <definition>` and the ids of the representative sample
//! images used to pre-test models. Graphs are immutable values; extension
//! produces a new graph with a bumped `graph_version`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MllError, Result};
use crate::fsio;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// Sample ids keyed by the synset they represent.
pub type SampleMap = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynsetRecord {
    pub synset_id: String,
    pub name: String,
    pub definition: String,
    #[serde(default)]
    pub hypernym_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub synset_id: String,
    pub name: String,
    pub definition: String,
    pub caption: String,
    pub hypernym_ids: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl GraphNode {
    pub fn is_sampled(&self) -> bool {
        !self.sample_ids.is_empty()
    }

    pub fn record(&self) -> SynsetRecord {
        SynsetRecord {
            synset_id: self.synset_id.clone(),
            name: self.name.clone(),
            definition: self.definition.clone(),
            hypernym_ids: self.hypernym_ids.clone(),
        }
    }
}

/// Node caption: `<name> which is <definition>`.
pub fn make_caption(name: &str, definition: &str) -> Result<String> {
    let name = name.trim();
    let definition = definition.trim();
    if name.is_empty() || definition.is_empty() {
        return Err(MllError::InvalidInput(
            "caption needs a non-empty name and definition".into(),
        ));
    }
    Ok(format!("{name} which is {definition}"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticGraph {
    nodes: BTreeMap<String, GraphNode>,
    graph_version: u64,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format_version: u32,
    graph_version: u64,
    nodes: Vec<GraphNode>,
}

impl SemanticGraph {
    pub fn build(records: &[SynsetRecord], samples: &SampleMap) -> Result<Self> {
        if records.is_empty() {
            return Err(MllError::InvalidInput("no synset records".into()));
        }
        let empty = SemanticGraph {
            nodes: BTreeMap::new(),
            graph_version: 0,
        };
        empty.extend(records, samples)
    }

    /// Adds `new_records` (ids disjoint from the current graph) and their
    /// samples. Existing nodes are carried over untouched.
    pub fn extend(&self, new_records: &[SynsetRecord], new_samples: &SampleMap) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut duplicates = BTreeSet::new();
        for rec in new_records {
            if rec.synset_id.trim().is_empty() {
                return Err(MllError::InvalidInput("empty synset_id".into()));
            }
            if self.nodes.contains_key(&rec.synset_id) || !seen.insert(rec.synset_id.as_str()) {
                duplicates.insert(rec.synset_id.clone());
            }
            if rec.hypernym_ids.iter().any(|h| h == &rec.synset_id) {
                return Err(MllError::InvalidInput(format!(
                    "synset {} lists itself as a hypernym",
                    rec.synset_id
                )));
            }
        }
        if !duplicates.is_empty() {
            return Err(MllError::DuplicateId(duplicates.into_iter().collect()));
        }

        let mut unresolved = Vec::new();
        for rec in new_records {
            for h in &rec.hypernym_ids {
                if !self.nodes.contains_key(h) && !seen.contains(h.as_str()) {
                    unresolved.push((rec.synset_id.clone(), h.clone()));
                }
            }
        }
        for key in new_samples.keys() {
            if !seen.contains(key.as_str()) {
                unresolved.push(("samples".to_string(), key.clone()));
            }
        }
        if !unresolved.is_empty() {
            unresolved.sort();
            return Err(MllError::UnresolvedReference(unresolved));
        }

        let mut known_samples: BTreeSet<&str> = self
            .nodes
            .values()
            .flat_map(|n| n.sample_ids.iter().map(String::as_str))
            .collect();
        let mut dup_samples = BTreeSet::new();
        for ids in new_samples.values() {
            for id in ids {
                if !known_samples.insert(id.as_str()) {
                    dup_samples.insert(id.clone());
                }
            }
        }
        if !dup_samples.is_empty() {
            return Err(MllError::DuplicateId(dup_samples.into_iter().collect()));
        }

        let mut nodes = self.nodes.clone();
        for rec in new_records {
            let mut hypernym_ids = rec.hypernym_ids.clone();
            hypernym_ids.sort();
            hypernym_ids.dedup();
            let mut sample_ids = new_samples.get(&rec.synset_id).cloned().unwrap_or_default();
            sample_ids.sort();
            nodes.insert(
                rec.synset_id.clone(),
                GraphNode {
                    synset_id: rec.synset_id.clone(),
                    name: rec.name.clone(),
                    definition: rec.definition.clone(),
                    caption: make_caption(&rec.name, &rec.definition)?,
                    hypernym_ids,
                    sample_ids,
                },
            );
        }
        Ok(SemanticGraph {
            nodes,
            graph_version: self.graph_version + 1,
        })
    }

    pub fn version(&self) -> u64 {
        self.graph_version
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn sampled_node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes
            .values()
            .filter(|n| n.is_sampled())
            .map(|n| n.synset_id.as_str())
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes
            .values()
            .flat_map(|n| n.sample_ids.iter().map(String::as_str))
    }

    /// (child, hypernym) pairs in canonical order.
    pub fn edges(&self) -> Vec<(String, String)> {
        self.nodes
            .values()
            .flat_map(|n| {
                n.hypernym_ids
                    .iter()
                    .map(move |h| (n.synset_id.clone(), h.clone()))
            })
            .collect()
    }

    pub fn records(&self) -> Vec<SynsetRecord> {
        self.nodes.values().map(GraphNode::record).collect()
    }

    pub fn samples(&self) -> SampleMap {
        self.nodes
            .values()
            .filter(|n| n.is_sampled())
            .map(|n| (n.synset_id.clone(), n.sample_ids.clone()))
            .collect()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut owners: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for node in self.nodes.values() {
            if node.sample_ids.is_empty() {
                report.unsampled.push(node.synset_id.clone());
            }
            for h in &node.hypernym_ids {
                if h == &node.synset_id {
                    report.self_loops.push(h.clone());
                } else if !self.nodes.contains_key(h) {
                    report
                        .unresolved_edges
                        .push((node.synset_id.clone(), h.clone()));
                }
            }
            for s in &node.sample_ids {
                owners.entry(s).or_default().push(node.synset_id.clone());
            }
        }
        report.duplicate_samples = owners
            .into_iter()
            .filter(|(_, nodes)| nodes.len() > 1)
            .map(|(sample_id, node_ids)| DuplicateSample {
                sample_id: sample_id.to_string(),
                node_ids,
            })
            .collect();
        report
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GraphFile {
            format_version: GRAPH_FORMAT_VERSION,
            graph_version: self.graph_version,
            nodes: self.nodes.values().cloned().collect(),
        };
        fsio::to_canonical_json(&file)
    }

    /// Parses a graph document. Structural problems such as dangling edges
    /// are left for [`SemanticGraph::validate`] to report.
    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format_version != GRAPH_FORMAT_VERSION {
            return Err(format!(
                "unsupported graph format_version {}",
                file.format_version
            ));
        }
        let mut nodes = BTreeMap::new();
        for mut node in file.nodes {
            node.hypernym_ids.sort();
            node.sample_ids.sort();
            let id = node.synset_id.clone();
            if nodes.insert(id.clone(), node).is_some() {
                return Err(format!("duplicate node id {id}"));
            }
        }
        Ok(SemanticGraph {
            nodes,
            graph_version: file.graph_version,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MllError::io(path, e))?;
        Self::from_json(&text).map_err(|msg| MllError::parse(path, msg))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_json()?.as_bytes())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateSample {
    pub sample_id: String,
    pub node_ids: Vec<String>,
}

/// Findings of [`SemanticGraph::validate`]. Unsampled nodes are legal but
/// listed; the other categories make a graph invalid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub unsampled: Vec<String>,
    pub unresolved_edges: Vec<(String, String)>,
    pub self_loops: Vec<String>,
    pub duplicate_samples: Vec<DuplicateSample>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.unsampled.is_empty() && !self.has_errors()
    }

    pub fn has_errors(&self) -> bool {
        !self.unresolved_edges.is_empty()
            || !self.self_loops.is_empty()
            || !self.duplicate_samples.is_empty()
    }
}

/// Reads tab-separated synset records:
/// `synset_id<TAB>name<TAB>definition[<TAB>hypernym,hypernym,...]`.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_synsets_tsv(path: &Path) -> Result<Vec<SynsetRecord>> {
    let mut records = Vec::new();
    for (line_no, fields) in read_tsv(path)?.into_iter() {
        if fields.len() < 3 || fields.len() > 4 {
            return Err(MllError::parse(
                path,
                format!("line {line_no}: expected 3 or 4 tab-separated fields"),
            ));
        }
        let hypernym_ids = fields
            .get(3)
            .map(|h| {
                h.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();
        records.push(SynsetRecord {
            synset_id: fields[0].trim().to_string(),
            name: fields[1].trim().to_string(),
            definition: fields[2].trim().to_string(),
            hypernym_ids,
        });
    }
    Ok(records)
}

/// Reads `synset_id<TAB>sample_id` lines into a [`SampleMap`].
pub fn read_samples_tsv(path: &Path) -> Result<SampleMap> {
    let mut map = SampleMap::new();
    for (line_no, fields) in read_tsv(path)? {
        if fields.len() != 2 {
            return Err(MllError::parse(
                path,
                format!("line {line_no}: expected synset_id<TAB>sample_id"),
            ));
        }
        map.entry(fields[0].trim().to_string())
            .or_default()
            .push(fields[1].trim().to_string());
    }
    Ok(map)
}

fn read_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .quoting(false)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| MllError::parse(path, e))?;
    let mut rows = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| MllError::parse(path, e))?;
        if row.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let line = row.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        rows.push((line, row.iter().map(String::from).collect()));
    }
    Ok(rows)
}
