//! Synthetic hierarchies and datasets for smoke tests and directional
//! benchmarks: a complete tree whose node parameters drift from the root by
//! seeded perturbations, with train/test samples drawn from the leaf models.

use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimate::{DataMap, RawData};
use crate::hierarchy::{Family, Hierarchy, NodeId};
use crate::likelihoods::{softmax, ut_index, ut_len, GaussianParams, SparseDoc};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub family: Family,
    /// levels below the root; leaves sit at this depth
    pub depth: usize,
    /// children per internal node
    pub branching: usize,
    /// parent-to-child jitter scale (0 = identical leaves)
    pub perturbation: f64,
    pub train_per_leaf: usize,
    pub test_per_leaf: usize,
    /// multinomial only: tokens drawn per document
    pub tokens_per_doc: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.branching == 0 {
            return Err(Error::Config("branching must be at least 1".into()));
        }
        if self.train_per_leaf == 0 || self.test_per_leaf == 0 {
            return Err(Error::Config("train/test counts must be positive".into()));
        }
        if !(self.perturbation >= 0.0) {
            return Err(Error::Config("perturbation scale must be >= 0".into()));
        }
        if matches!(self.family, Family::Multinomial { .. }) && self.tokens_per_doc == 0 {
            return Err(Error::Config("tokens_per_doc must be positive".into()));
        }
        match self.family {
            Family::Gaussian { dim } if dim == 0 => {
                Err(Error::Config("dimension must be positive".into()))
            }
            Family::Multinomial { vocab } if vocab < 2 => {
                Err(Error::Config("vocabulary needs at least 2 words".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Generated hierarchy, ground-truth flat parameters per node, and sampled
/// per-leaf datasets.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub hierarchy: Hierarchy,
    pub truth: BTreeMap<NodeId, Vec<f64>>,
    pub train: DataMap,
    pub test: DataMap,
}

fn complete_tree(depth: usize, branching: usize) -> Result<Hierarchy> {
    let mut names = vec!["root".to_string()];
    let mut edges = Vec::new();
    let mut frontier = vec!["root".to_string()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for parent in &frontier {
            for b in 0..branching {
                let child = format!("{parent}.{b}");
                names.push(child.clone());
                edges.push((child.clone(), parent.clone()));
                next.push(child);
            }
        }
        frontier = next;
    }
    Hierarchy::build(&names, &edges)
}

fn normal(rng: &mut StdRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Root draw and parent-to-child jitter, both in the natural parametrization:
/// Gaussian means and log of the (diagonal) precision entries, or multinomial
/// logits.
fn node_params(family: Family, parent: Option<&[f64]>, scale: f64, rng: &mut StdRng) -> Vec<f64> {
    match family {
        Family::Gaussian { dim } => {
            let mut flat = vec![0.0; dim + ut_len(dim)];
            for i in 0..dim {
                let base = parent.map_or_else(|| normal(rng), |p| p[i]);
                flat[i] = base + if parent.is_some() { scale * normal(rng) } else { 0.0 };
            }
            for i in 0..dim {
                let idx = dim + ut_index(i, i, dim);
                let parent_log = parent.map_or(0.0, |p| p[idx].ln());
                let log_prec = match parent {
                    Some(_) => parent_log + scale * normal(rng),
                    None => 0.0,
                };
                flat[idx] = log_prec.exp();
            }
            flat
        }
        Family::Multinomial { vocab } => (0..vocab)
            .map(|i| {
                let base = parent.map_or_else(|| normal(rng), |p| p[i]);
                base + if parent.is_some() { scale * normal(rng) } else { 0.0 }
            })
            .collect(),
    }
}

fn sample_gaussian_rows(params: &GaussianParams, n: usize, rng: &mut StdRng) -> Result<Vec<Vec<f64>>> {
    let d = params.dim();
    let chol = params.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    Ok((0..n)
        .map(|_| {
            let z = nalgebra::DVector::from_fn(d, |_, _| normal(rng));
            // K = L L^T, so cov = K^{-1} = L^{-T} L^{-1}; x = mean + L^{-T} z
            let x = &params.mean + l.transpose().solve_upper_triangular(&z).unwrap();
            x.iter().cloned().collect()
        })
        .collect())
}

fn sample_docs(logits: &[f64], n_docs: usize, tokens: usize, rng: &mut StdRng) -> Result<Vec<SparseDoc>> {
    let probs = softmax(logits);
    let dist = WeightedIndex::new(&probs)
        .map_err(|e| Error::Data(format!("invalid sampling distribution: {e}")))?;
    Ok((0..n_docs)
        .map(|_| {
            let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
            for _ in 0..tokens {
                *counts.entry(dist.sample(rng)).or_insert(0.0) += 1.0;
            }
            counts.into_iter().collect()
        })
        .collect())
}

/// Generates hierarchy, ground truth, and train/test datasets from `spec`.
/// Fully determined by the seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let h = complete_tree(spec.depth, spec.branching)?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    // parameters top-down in node-id order (parents precede children)
    let mut truth: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for node in 0..h.len() {
        let parent = h.parent(node).map(|p| truth[&p].clone());
        truth.insert(
            node,
            node_params(spec.family, parent.as_deref(), spec.perturbation, &mut rng),
        );
    }
    let mut train: DataMap = BTreeMap::new();
    let mut test: DataMap = BTreeMap::new();
    for leaf in h.leaves() {
        match spec.family {
            Family::Gaussian { dim } => {
                let params = GaussianParams::from_flat(&truth[&leaf], dim);
                train.insert(
                    leaf,
                    RawData::Gaussian(sample_gaussian_rows(&params, spec.train_per_leaf, &mut rng)?),
                );
                test.insert(
                    leaf,
                    RawData::Gaussian(sample_gaussian_rows(&params, spec.test_per_leaf, &mut rng)?),
                );
            }
            Family::Multinomial { .. } => {
                let logits = &truth[&leaf];
                train.insert(
                    leaf,
                    RawData::Docs(sample_docs(logits, spec.train_per_leaf, spec.tokens_per_doc, &mut rng)?),
                );
                test.insert(
                    leaf,
                    RawData::Docs(sample_docs(logits, spec.test_per_leaf, spec.tokens_per_doc, &mut rng)?),
                );
            }
        }
    }
    Ok(SynthOutput {
        hierarchy: h,
        truth,
        train,
        test,
    })
}
