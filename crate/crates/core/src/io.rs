//! File formats: hierarchy JSON, delimited datasets, versioned model files,
//! and the raw-text tokenizer.
//!
//! Parameter vectors are stored as hexadecimal bit patterns of the underlying
//! f64 so that save -> load -> save is byte-identical (including non-finite
//! logits, which JSON numbers cannot carry).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Family, Hierarchy, NodeId};
use crate::likelihoods::SparseDoc;
use crate::objective::DotCoefficients;

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Lossless f64 encoding as the hex of its bit pattern, e.g. `3ff0000000000000`.
pub fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn f64_from_hex(s: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(Error::Model(format!("bad float encoding '{s}'")));
    }
    let bits = u64::from_str_radix(s, 16)
        .map_err(|_| Error::Model(format!("bad float encoding '{s}'")))?;
    Ok(f64::from_bits(bits))
}

/// On-disk hierarchy: `{"nodes": [...], "edges": [[child, parent], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyFile {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
}

impl HierarchyFile {
    pub fn from_hierarchy(h: &Hierarchy) -> Self {
        let edges = h
            .edge_children()
            .into_iter()
            .map(|c| (h.name(c).to_string(), h.name(h.parent(c).unwrap()).to_string()))
            .collect();
        HierarchyFile {
            nodes: h.names().to_vec(),
            edges,
        }
    }

    pub fn build(&self) -> Result<Hierarchy> {
        Hierarchy::build(&self.nodes, &self.edges)
    }
}

pub fn parse_hierarchy(text: &str) -> Result<Hierarchy> {
    let file: HierarchyFile = serde_json::from_str(text)
        .map_err(|e| parse_err(format!("hierarchy:{}:{}", e.line(), e.column()), e.to_string()))?;
    file.build()
}

pub fn load_hierarchy(path: &Path) -> Result<Hierarchy> {
    parse_hierarchy(&std::fs::read_to_string(path)?)
}

/// Gaussian data: CSV, first column label, remaining columns features. Blank
/// lines are skipped; every record must have the same width.
pub fn parse_gaussian_csv(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = |col: usize| format!("line {}, field {}", lineno + 1, col + 1);
        let mut fields = line.split(',');
        let label = fields
            .next()
            .filter(|l| !l.trim().is_empty())
            .ok_or_else(|| parse_err(loc(0), "missing class label"))?
            .trim()
            .to_string();
        let mut row = Vec::new();
        for (col, f) in fields.enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(loc(col + 1), format!("not a number: '{}'", f.trim())))?;
            row.push(v);
        }
        if row.is_empty() {
            return Err(parse_err(loc(0), "record has no feature columns"));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    format!("line {}", lineno + 1),
                    format!("expected {w} features, found {}", row.len()),
                ))
            }
            _ => {}
        }
        out.push((label, row));
    }
    Ok(out)
}

pub fn render_gaussian_csv(rows: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    for (label, row) in rows {
        out.push_str(label);
        for v in row {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

/// Document data: one record per line, `label<TAB>id:count id:count ...`.
/// Counts must be nonnegative integers.
pub fn parse_docs(text: &str) -> Result<Vec<(String, SparseDoc)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("line {}", lineno + 1);
        let (label, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(loc(), "expected 'label<TAB>id:count ...'"))?;
        if label.trim().is_empty() {
            return Err(parse_err(loc(), "missing class label"));
        }
        let mut doc: SparseDoc = Vec::new();
        for tok in rest.split_whitespace() {
            let (id, count) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(loc(), format!("malformed pair '{tok}'")))?;
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(loc(), format!("bad word id '{id}'")))?;
            let count: u64 = count
                .parse()
                .map_err(|_| parse_err(loc(), format!("bad count '{count}' (nonnegative integer)")))?;
            if count > 0 {
                doc.push((id, count as f64));
            }
        }
        out.push((label.trim().to_string(), doc));
    }
    Ok(out)
}

pub fn render_docs(docs: &[(String, SparseDoc)]) -> String {
    let mut out = String::new();
    for (label, doc) in docs {
        out.push_str(label);
        out.push('\t');
        let pairs: Vec<String> = doc.iter().map(|(id, c)| format!("{id}:{}", *c as u64)).collect();
        out.push_str(&pairs.join(" "));
        out.push('\n');
    }
    out
}

/// Family tag in model files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FamilyTag {
    Gaussian { dim: usize },
    Multinomial { vocab: usize },
}

impl From<Family> for FamilyTag {
    fn from(f: Family) -> Self {
        match f {
            Family::Gaussian { dim } => FamilyTag::Gaussian { dim },
            Family::Multinomial { vocab } => FamilyTag::Multinomial { vocab },
        }
    }
}

impl From<FamilyTag> for Family {
    fn from(t: FamilyTag) -> Self {
        match t {
            FamilyTag::Gaussian { dim } => Family::Gaussian { dim },
            FamilyTag::Multinomial { vocab } => Family::Multinomial { vocab },
        }
    }
}

/// Versioned, byte-exact serialized model: hierarchy, per-node parameter
/// blocks, optional DOT coefficients, and the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub family: FamilyTag,
    pub hierarchy: HierarchyFile,
    /// node name -> hex-encoded flat parameter block
    pub params: BTreeMap<String, Vec<String>>,
    /// child node name -> hex-encoded per-coordinate DOT coefficients
    pub dot: Option<BTreeMap<String, Vec<String>>>,
    /// free-form provenance (flags, seeds); not interpreted on load
    pub config: serde_json::Value,
}

impl ModelFile {
    pub fn new(
        h: &Hierarchy,
        family: Family,
        state: &[f64],
        node_dim: usize,
        dot: Option<&DotCoefficients>,
        config: serde_json::Value,
    ) -> Result<Self> {
        if state.len() != h.len() * node_dim {
            return Err(Error::Dim("state length does not match hierarchy".into()));
        }
        let mut params = BTreeMap::new();
        for node in 0..h.len() {
            let block = &state[node * node_dim..(node + 1) * node_dim];
            params.insert(
                h.name(node).to_string(),
                block.iter().map(|&v| f64_to_hex(v)).collect(),
            );
        }
        let dot = dot.map(|d| {
            d.values
                .iter()
                .map(|(&child, vals)| {
                    (
                        h.name(child).to_string(),
                        vals.iter().map(|&v| f64_to_hex(v)).collect(),
                    )
                })
                .collect()
        });
        Ok(ModelFile {
            version: MODEL_FORMAT_VERSION,
            family: family.into(),
            hierarchy: HierarchyFile::from_hierarchy(h),
            params,
            dot,
            config,
        })
    }

    pub fn family(&self) -> Family {
        self.family.into()
    }

    pub fn build_hierarchy(&self) -> Result<Hierarchy> {
        self.hierarchy.build()
    }

    /// Decoded flat parameter block for every node, keyed by node id in `h`.
    pub fn node_params(&self, h: &Hierarchy) -> Result<BTreeMap<NodeId, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for node in 0..h.len() {
            let name = h.name(node);
            let hexes = self
                .params
                .get(name)
                .ok_or_else(|| Error::Model(format!("missing parameters for node '{name}'")))?;
            out.insert(node, hexes.iter().map(|s| f64_from_hex(s)).collect::<Result<_>>()?);
        }
        Ok(out)
    }

    /// Decoded flat state vector in hierarchy node order.
    pub fn state(&self, h: &Hierarchy) -> Result<Vec<f64>> {
        let per_node = self.node_params(h)?;
        let mut state = Vec::new();
        for node in 0..h.len() {
            state.extend_from_slice(&per_node[&node]);
        }
        Ok(state)
    }

    pub fn dot_coefficients(&self, h: &Hierarchy) -> Result<Option<DotCoefficients>> {
        let Some(dot) = &self.dot else { return Ok(None) };
        let mut values = BTreeMap::new();
        for (name, hexes) in dot {
            let node = h
                .node_by_name(name)
                .ok_or_else(|| Error::Model(format!("DOT entry for unknown node '{name}'")))?;
            values.insert(node, hexes.iter().map(|s| f64_from_hex(s)).collect::<Result<Vec<f64>>>()?);
        }
        Ok(Some(DotCoefficients { values }))
    }
}

pub fn render_model(model: &ModelFile) -> Result<String> {
    let mut s = serde_json::to_string_pretty(model)
        .map_err(|e| Error::Model(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_model(text: &str) -> Result<ModelFile> {
    let model: ModelFile = serde_json::from_str(text)
        .map_err(|e| parse_err(format!("model:{}:{}", e.line(), e.column()), e.to_string()))?;
    if model.version != MODEL_FORMAT_VERSION {
        return Err(Error::Model(format!(
            "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
            model.version
        )));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    std::fs::write(path, render_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    parse_model(&std::fs::read_to_string(path)?)
}

/// Lowercases, splits on non-alphanumeric characters, and drops tokens that
/// occur exactly once in the whole corpus. Returns the sorted vocabulary and
/// per-record sparse count vectors over it.
pub fn tokenize(records: &[(String, String)]) -> (Vec<String>, Vec<(String, SparseDoc)>) {
    let split = |text: &str| -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    };
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for (_, text) in records {
        for tok in split(text) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let vocab: Vec<String> = freq
        .iter()
        .filter(|(_, &c)| c > 1)
        .map(|(t, _)| t.clone())
        .collect();
    let index: BTreeMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let docs = records
        .iter()
        .map(|(label, text)| {
            let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
            for tok in split(text) {
                if let Some(&id) = index.get(tok.as_str()) {
                    *counts.entry(id).or_insert(0.0) += 1.0;
                }
            }
            (label.clone(), counts.into_iter().collect::<SparseDoc>())
        })
        .collect();
    (vocab, docs)
}

/// Groups labeled records by hierarchy leaf, rejecting unknown or non-leaf
/// labels.
pub fn group_by_leaf<T>(h: &Hierarchy, records: Vec<(String, T)>) -> Result<BTreeMap<NodeId, Vec<T>>> {
    let leaves = h.leaves();
    let mut out: BTreeMap<NodeId, Vec<T>> = BTreeMap::new();
    for (label, item) in records {
        let node = h
            .node_by_name(&label)
            .ok_or_else(|| Error::Data(format!("label '{label}' is not a node in the hierarchy")))?;
        if !leaves.contains(&node) {
            return Err(Error::Data(format!("label '{label}' is not a leaf class")));
        }
        out.entry(node).or_default().push(item);
    }
    Ok(out)
}
