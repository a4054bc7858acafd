//! Class hierarchy representation and the flat parameter layout.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::Error;
use crate::likelihoods::ut_len;

/// Index of a node inside a [`Hierarchy`].
pub type NodeId = usize;

/// A rooted tree of named classes. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    names: Vec<String>,
    parents: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    root: NodeId,
}

impl Hierarchy {
    /// Builds and validates a hierarchy from `(child, parent)` edges over the
    /// declared node names. Exactly one name must end up without a parent.
    pub fn build(names: &[String], edges: &[(String, String)]) -> Result<Self, Error> {
        if names.is_empty() {
            return Err(Error::Hierarchy("no nodes declared".into()));
        }
        let mut index: HashMap<&str, NodeId> = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Hierarchy("empty node name".into()));
            }
            if index.insert(name.as_str(), i).is_some() {
                return Err(Error::Hierarchy(format!("duplicate node name '{name}'")));
            }
        }
        let mut parents: Vec<Option<NodeId>> = vec![None; names.len()];
        for (child, parent) in edges {
            let c = *index
                .get(child.as_str())
                .ok_or_else(|| Error::Hierarchy(format!("unknown name '{child}' in edge")))?;
            let p = *index
                .get(parent.as_str())
                .ok_or_else(|| Error::Hierarchy(format!("unknown name '{parent}' in edge")))?;
            if parents[c].is_some() {
                return Err(Error::Hierarchy(format!("node '{child}' has two parents")));
            }
            parents[c] = Some(p);
        }
        let roots: Vec<NodeId> = (0..names.len()).filter(|&i| parents[i].is_none()).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(Error::Hierarchy("cycle detected: no root".into())),
            _ => {
                let list: Vec<&str> = roots.iter().map(|&r| names[r].as_str()).collect();
                return Err(Error::Hierarchy(format!(
                    "multiple roots: {}",
                    list.join(", ")
                )));
            }
        };
        let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); names.len()];
        for (c, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(c);
            }
        }
        // Reachability from the root doubles as the cycle check.
        let mut seen = vec![false; names.len()];
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            seen[n] = true;
            stack.extend(&children[n]);
        }
        if let Some(orphan) = (0..names.len()).find(|&i| !seen[i]) {
            return Err(Error::Hierarchy(format!(
                "cycle detected: '{}' unreachable from root",
                names[orphan]
            )));
        }
        Ok(Hierarchy {
            names: names.to_vec(),
            parents,
            children,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parents[id]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id]
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.names.iter().position(|n| n == name)
    }

    /// Nodes with no children, in id order.
    pub fn leaves(&self) -> Vec<NodeId> {
        (0..self.len()).filter(|&i| self.children[i].is_empty()).collect()
    }

    /// All non-root nodes, i.e. the child endpoint of each edge, in id order.
    pub fn edge_children(&self) -> Vec<NodeId> {
        (0..self.len()).filter(|&i| self.parents[i].is_some()).collect()
    }

    /// Leaf descendants of `id` (the node itself when it is a leaf).
    pub fn leaf_descendants(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if self.children[n].is_empty() {
                out.push(n);
            } else {
                stack.extend(&self.children[n]);
            }
        }
        out.sort_unstable();
        out
    }

    /// Depth of a node (root = 0).
    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut n = id;
        while let Some(p) = self.parents[n] {
            d += 1;
            n = p;
        }
        d
    }

    pub fn max_depth(&self) -> usize {
        (0..self.len()).map(|i| self.depth(i)).max().unwrap_or(0)
    }
}

/// Leaf-model family; fixes the per-node parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Family {
    /// Multivariate Gaussian in mean/precision parametrization.
    Gaussian { dim: usize },
    /// Log-space multinomial over a fixed vocabulary.
    Multinomial { vocab: usize },
}

impl Family {
    /// Parameter groups and their sizes, in storage order.
    pub fn groups(&self) -> Vec<(Group, usize)> {
        match *self {
            Family::Gaussian { dim } => {
                vec![(Group::Mean, dim), (Group::Precision, ut_len(dim))]
            }
            Family::Multinomial { vocab } => vec![(Group::Logits, vocab)],
        }
    }

    /// Total parameters per node.
    pub fn node_dim(&self) -> usize {
        self.groups().iter().map(|(_, n)| n).sum()
    }
}

/// Parameter-group label within a node block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Group {
    Mean,
    Precision,
    Logits,
}

/// Maps `(node, group)` to coordinate ranges in the flat parameter vector.
///
/// Every node carries the same group structure, so the layout is
/// `node_id * node_dim + group offset`.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    family: Family,
    n_nodes: usize,
    group_offsets: Vec<(Group, Range<usize>)>,
    node_dim: usize,
}

impl ParamIndex {
    pub fn new(h: &Hierarchy, family: Family) -> Result<Self, Error> {
        let groups = family.groups();
        if groups.iter().any(|(_, n)| *n == 0) {
            return Err(Error::Hierarchy("zero-dimensional parameter group".into()));
        }
        let mut group_offsets = Vec::new();
        let mut off = 0;
        for (g, n) in groups {
            group_offsets.push((g, off..off + n));
            off += n;
        }
        Ok(ParamIndex {
            family,
            n_nodes: h.len(),
            group_offsets,
            node_dim: off,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn total_dim(&self) -> usize {
        self.n_nodes * self.node_dim
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    /// Flat range owned by a node.
    pub fn node_block(&self, node: NodeId) -> Range<usize> {
        let start = node * self.node_dim;
        start..start + self.node_dim
    }

    /// Flat range of one group within a node.
    pub fn block(&self, node: NodeId, group: Group) -> Range<usize> {
        let local = self
            .group_offsets
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, r)| r.clone())
            .expect("group not defined by this family");
        let base = node * self.node_dim;
        base + local.start..base + local.end
    }

    /// Inverse map: which `(node, group, within-group offset)` owns a flat coordinate.
    pub fn locate(&self, coord: usize) -> (NodeId, Group, usize) {
        let node = coord / self.node_dim;
        let local = coord % self.node_dim;
        for (g, r) in &self.group_offsets {
            if r.contains(&local) {
                return (node, *g, local - r.start);
            }
        }
        unreachable!("coordinate outside layout")
    }
}
