//! Baseline estimators: independent cross-validated regularization (CV Reg),
//! recursive shrinkage toward the parent, unregularized ML, and the
//! cross-validated-beta variant of the joint objective.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::estimate::{fit_map, DataMap, FitResult, InitPolicy, RawData};
use crate::eval::kfold_split;
use crate::hierarchy::{Family, Hierarchy, NodeId, ParamIndex};
use crate::likelihoods::{
    aggregate_counts, gaussian_loglik, gaussian_ml, gaussian_stats, multinomial_ml,
    nb_doc_loglik, GaussianParams, SparseDoc,
};
use crate::objective::ObjectiveConfig;
use crate::optimize::OptimizerConfig;

/// Candidate hyperparameter values and the fold layout used to score them.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CvGrid {
    pub values: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl CvGrid {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("empty hyperparameter grid".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        Ok(())
    }
}

fn select<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Held-out log-likelihood of one leaf's data under a regularized ML fit at
/// `alpha`, averaged over folds. Leaves smaller than the fold count fall back
/// to leave-one-out.
fn cv_score_leaf(raw: &RawData, family: Family, alpha: f64, folds: usize, seed: u64) -> Result<f64> {
    let n = raw.len();
    let k = folds.min(n);
    if k < 2 {
        // nothing to hold out: score by in-sample regularized likelihood
        return leaf_loglik(raw, family, &fit_leaf(raw, family, alpha)?);
    }
    let splits = kfold_split(n, k, seed)?;
    let mut total = 0.0;
    for (train, test) in &splits {
        let (train_raw, test_raw) = match raw {
            RawData::Gaussian(rows) => (
                RawData::Gaussian(select(rows, train)),
                RawData::Gaussian(select(rows, test)),
            ),
            RawData::Docs(docs) => (
                RawData::Docs(select(docs, train)),
                RawData::Docs(select(docs, test)),
            ),
        };
        match fit_leaf(&train_raw, family, alpha) {
            Ok(params) => total += leaf_loglik(&test_raw, family, &params)?,
            Err(_) => return Ok(f64::NEG_INFINITY), // singular fit at this alpha
        }
    }
    Ok(total / k as f64)
}

/// Regularized ML fit of one leaf, returned as node-local flat parameters.
fn fit_leaf(raw: &RawData, family: Family, alpha: f64) -> Result<Vec<f64>> {
    match (family, raw) {
        (Family::Gaussian { dim }, RawData::Gaussian(rows)) => {
            let stats = gaussian_stats(rows, dim)?;
            Ok(gaussian_ml(&stats, alpha)?.to_flat())
        }
        (Family::Multinomial { vocab }, RawData::Docs(docs)) => {
            Ok(multinomial_ml(&aggregate_counts(docs, vocab)?, alpha))
        }
        _ => Err(Error::Dim("data does not match model family".into())),
    }
}

fn leaf_loglik(raw: &RawData, family: Family, params: &[f64]) -> Result<f64> {
    match (family, raw) {
        (Family::Gaussian { dim }, RawData::Gaussian(rows)) => {
            let stats = gaussian_stats(rows, dim)?;
            gaussian_loglik(&stats, &GaussianParams::from_flat(params, dim))
        }
        (Family::Multinomial { .. }, RawData::Docs(docs)) => {
            let mut total = 0.0;
            for doc in docs {
                total += nb_doc_loglik(doc, params)?;
            }
            Ok(total)
        }
        _ => Err(Error::Dim("data does not match model family".into())),
    }
}

/// CV Reg: per leaf independently, picks the ridge/pseudocount maximizing
/// mean held-out log-likelihood, then refits on all data.
pub fn fit_cvreg(
    data: &DataMap,
    family: Family,
    grid: &CvGrid,
) -> Result<(BTreeMap<NodeId, Vec<f64>>, BTreeMap<NodeId, f64>)> {
    grid.validate()?;
    let mut params = BTreeMap::new();
    let mut chosen = BTreeMap::new();
    for (&leaf, raw) in data {
        if raw.is_empty() {
            return Err(Error::Data(format!("empty dataset for leaf {leaf}")));
        }
        let mut best_alpha = grid.values[0];
        let mut best_score = f64::NEG_INFINITY;
        for &alpha in &grid.values {
            let score = cv_score_leaf(raw, family, alpha, grid.folds, grid.seed)?;
            if score > best_score {
                best_score = score;
                best_alpha = alpha;
            }
        }
        params.insert(leaf, fit_leaf(raw, family, best_alpha)?);
        chosen.insert(leaf, best_alpha);
    }
    Ok((params, chosen))
}

/// Per-node Laplacian-smoothed (`alpha = 1`) probability vectors from pooled
/// subtree documents.
fn own_probs(
    h: &Hierarchy,
    data: &DataMap,
    vocab: usize,
) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for node in 0..h.len() {
        let mut counts = vec![0.0; vocab];
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if let Some(raw) = data.get(&n) {
                let RawData::Docs(docs) = raw else {
                    return Err(Error::Config(
                        "shrinkage requires multinomial data".into(),
                    ));
                };
                for (i, c) in aggregate_counts(docs, vocab)?.into_iter().enumerate() {
                    counts[i] += c;
                }
            }
            stack.extend(h.children(n));
        }
        let total: f64 = counts.iter().sum::<f64>() + vocab as f64;
        out.insert(node, counts.into_iter().map(|c| (c + 1.0) / total).collect());
    }
    Ok(out)
}

/// Top-down interpolation: each node's probability vector is
/// `w * own + (1 - w) * parent-final`, with one weight per depth level.
pub fn shrinkage_apply(
    h: &Hierarchy,
    own: &BTreeMap<NodeId, Vec<f64>>,
    level_weights: &[f64],
) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    let mut finals: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    let mut order: Vec<NodeId> = (0..h.len()).collect();
    order.sort_by_key(|&n| h.depth(n));
    for node in order {
        let depth = h.depth(node);
        if depth == 0 {
            finals.insert(node, own[&node].clone());
            continue;
        }
        let w = *level_weights
            .get(depth - 1)
            .ok_or_else(|| Error::Config("missing shrinkage weight for level".into()))?;
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Config("shrinkage weight must be in [0, 1]".into()));
        }
        let parent = finals[&h.parent(node).unwrap()].clone();
        let mixed: Vec<f64> = own[&node]
            .iter()
            .zip(&parent)
            .map(|(o, p)| w * o + (1.0 - w) * p)
            .collect();
        finals.insert(node, mixed);
    }
    Ok(finals)
}

/// Shrinkage baseline for multinomial hierarchies: Laplacian-smoothed node
/// estimates interpolated toward the parent, per-level weights chosen by
/// k-fold cross-validation (greedy, root level first). Returns log-space
/// parameters per node.
pub fn fit_shrinkage(
    h: &Hierarchy,
    data: &DataMap,
    family: Family,
    grid: &CvGrid,
) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    let Family::Multinomial { vocab } = family else {
        // interpolating covariance matrices yields invalid distributions
        return Err(Error::Config(
            "shrinkage is only defined for the multinomial family".into(),
        ));
    };
    grid.validate()?;
    for w in &grid.values {
        if !(0.0..=1.0).contains(w) {
            return Err(Error::Config("shrinkage grid values must be in [0, 1]".into()));
        }
    }
    let depth = h.max_depth();
    let mut weights = vec![1.0; depth.max(1)];
    let leaves = h.leaves();
    let min_leaf = leaves
        .iter()
        .map(|l| data.get(l).map_or(0, |d| d.len()))
        .min()
        .unwrap_or(0);
    if min_leaf == 0 {
        return Err(Error::Data("every leaf needs at least one document".into()));
    }
    let k = grid.folds.min(min_leaf);
    if k >= 2 && depth > 0 {
        // per-leaf fold assignments, shared across candidate weights
        let splits: BTreeMap<NodeId, Vec<(Vec<usize>, Vec<usize>)>> = leaves
            .iter()
            .map(|&l| {
                let n = data[&l].len();
                Ok((l, kfold_split(n, k, grid.seed.wrapping_add(l as u64))?))
            })
            .collect::<Result<_>>()?;
        for level in 0..depth {
            let mut best_w = weights[level];
            let mut best_score = f64::NEG_INFINITY;
            for &w in &grid.values {
                let mut trial = weights.clone();
                trial[level] = w;
                let mut score = 0.0;
                for fold in 0..k {
                    let mut train: DataMap = BTreeMap::new();
                    let mut held: BTreeMap<NodeId, Vec<SparseDoc>> = BTreeMap::new();
                    for &l in &leaves {
                        let RawData::Docs(docs) = &data[&l] else { unreachable!() };
                        let (tr, te) = &splits[&l][fold];
                        train.insert(l, RawData::Docs(select(docs, tr)));
                        held.insert(l, select(docs, te));
                    }
                    let own = own_probs(h, &train, vocab)?;
                    let finals = shrinkage_apply(h, &own, &trial)?;
                    for (&l, docs) in &held {
                        let logits: Vec<f64> = finals[&l].iter().map(|p| p.ln()).collect();
                        for doc in docs {
                            score += nb_doc_loglik(doc, &logits)?;
                        }
                    }
                }
                if score > best_score {
                    best_score = score;
                    best_w = w;
                }
            }
            weights[level] = best_w;
        }
    }
    let own = own_probs(h, data, vocab)?;
    let finals = shrinkage_apply(h, &own, &weights)?;
    Ok(finals
        .into_iter()
        .map(|(n, p)| (n, p.into_iter().map(|v| v.ln()).collect()))
        .collect())
}

/// Unregularized per-leaf maximum likelihood. Multinomial zero counts map to
/// `-inf` logits; Gaussian fits with too few instances are rejected.
pub fn fit_likelihood(data: &DataMap, family: Family) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (&leaf, raw) in data {
        if raw.is_empty() {
            return Err(Error::Data(format!("empty dataset for leaf {leaf}")));
        }
        if let (Family::Gaussian { dim }, RawData::Gaussian(rows)) = (family, raw) {
            if rows.len() <= dim {
                return Err(Error::Data(format!(
                    "leaf {leaf}: {} instances cannot determine a {dim}-dimensional covariance",
                    rows.len()
                )));
            }
        }
        out.insert(leaf, fit_leaf(raw, family, 0.0)?);
    }
    Ok(out)
}

/// CV Const: the joint objective without per-parameter coefficients, with
/// the global weight chosen by k-fold cross-validation over `beta_grid`.
/// Returns the refit on all data plus the selected weight.
pub fn fit_cvconst(
    h: &Hierarchy,
    layout: &ParamIndex,
    data: &DataMap,
    alpha: f64,
    beta_grid: &CvGrid,
    opt: &OptimizerConfig,
) -> Result<(FitResult, f64)> {
    beta_grid.validate()?;
    let family = layout.family();
    let leaves = h.leaves();
    let min_leaf = leaves
        .iter()
        .map(|l| data.get(l).map_or(0, |d| d.len()))
        .min()
        .unwrap_or(0);
    let k = beta_grid.folds.min(min_leaf);
    let mut best_beta = beta_grid.values[0];
    if k >= 2 {
        let splits: BTreeMap<NodeId, Vec<(Vec<usize>, Vec<usize>)>> = leaves
            .iter()
            .map(|&l| {
                let n = data[&l].len();
                Ok((l, kfold_split(n, k, beta_grid.seed.wrapping_add(l as u64))?))
            })
            .collect::<Result<_>>()?;
        let mut best_score = f64::NEG_INFINITY;
        for &beta in &beta_grid.values {
            let config = ObjectiveConfig::new(family, beta, alpha);
            let mut score = 0.0;
            for fold in 0..k {
                let mut train: DataMap = BTreeMap::new();
                let mut held: DataMap = BTreeMap::new();
                for &l in &leaves {
                    match &data[&l] {
                        RawData::Gaussian(rows) => {
                            let (tr, te) = &splits[&l][fold];
                            train.insert(l, RawData::Gaussian(select(rows, tr)));
                            held.insert(l, RawData::Gaussian(select(rows, te)));
                        }
                        RawData::Docs(docs) => {
                            let (tr, te) = &splits[&l][fold];
                            train.insert(l, RawData::Docs(select(docs, tr)));
                            held.insert(l, RawData::Docs(select(docs, te)));
                        }
                    }
                }
                let fit = fit_map(
                    h,
                    layout,
                    &train,
                    &config,
                    None,
                    None,
                    opt,
                    &InitPolicy::IndependentMl,
                )?;
                for &l in &leaves {
                    let block = &fit.state[layout.node_block(l)];
                    score += leaf_loglik(&held[&l], family, block)?;
                }
            }
            if score > best_score {
                best_score = score;
                best_beta = beta;
            }
        }
    }
    let config = ObjectiveConfig::new(family, best_beta, alpha);
    let fit = fit_map(
        h,
        layout,
        data,
        &config,
        None,
        None,
        opt,
        &InitPolicy::IndependentMl,
    )?;
    Ok((fit, best_beta))
}
