//! Bootstrap DOT estimation, initialization policies, and the MAP fitting
//! driver (joint CG for multinomials, alternating two-block CG for Gaussians).

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::hierarchy::{Family, Group, Hierarchy, NodeId, ParamIndex};
use crate::likelihoods::{
    aggregate_counts, apply_ridge, gaussian_ml, gaussian_stats, merge_stats, multinomial_ml,
    GaussianStats, SparseDoc,
};
use crate::objective::{
    DotCoefficients, DotMode, HyperpriorSpec, JointProblem, NodeData, ObjectiveConfig, TyingMask,
};
use crate::optimize::{cg_minimize, cg_minimize_subset, CgResult, OptimizerConfig};

/// Raw per-node training data.
#[derive(Debug, Clone)]
pub enum RawData {
    Gaussian(Vec<Vec<f64>>),
    Docs(Vec<SparseDoc>),
}

impl RawData {
    pub fn len(&self) -> usize {
        match self {
            RawData::Gaussian(rows) => rows.len(),
            RawData::Docs(docs) => docs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub type DataMap = BTreeMap<NodeId, RawData>;

/// Reduces raw data to the per-node sufficient statistics consumed by the
/// joint objective. Gaussian scatters are ridge-augmented with `alpha` here.
pub fn build_node_data(
    data: &DataMap,
    family: Family,
    alpha: f64,
) -> Result<BTreeMap<NodeId, NodeData>> {
    let mut out = BTreeMap::new();
    for (&node, raw) in data {
        let nd = match (family, raw) {
            (Family::Gaussian { dim }, RawData::Gaussian(rows)) => {
                let stats = gaussian_stats(rows, dim)?;
                NodeData::Gaussian(apply_ridge(&stats, alpha)?)
            }
            (Family::Multinomial { vocab }, RawData::Docs(docs)) => {
                NodeData::Counts(aggregate_counts(docs, vocab)?)
            }
            _ => return Err(Error::Dim("data does not match model family".into())),
        };
        out.insert(node, nd);
    }
    Ok(out)
}

/// Pooled raw data of every node in the subtree rooted at `node` that has
/// data attached (leaf descendants plus any internal attachments).
fn pooled_subtree(h: &Hierarchy, data: &DataMap, node: NodeId) -> Vec<NodeId> {
    let mut stack = vec![node];
    let mut out = Vec::new();
    while let Some(n) = stack.pop() {
        if data.contains_key(&n) {
            out.push(n);
        }
        stack.extend(h.children(n));
    }
    out.sort_unstable();
    out
}

/// Regularized ML node-local parameters from pooled raw sources.
fn ml_local(
    family: Family,
    data: &DataMap,
    sources: &[NodeId],
    alpha: f64,
) -> Result<Vec<f64>> {
    match family {
        Family::Gaussian { dim } => {
            let mut stats = GaussianStats {
                count: 0.0,
                sum: nalgebra::DVector::zeros(dim),
                scatter: nalgebra::DMatrix::zeros(dim, dim),
            };
            for &s in sources {
                if let Some(RawData::Gaussian(rows)) = data.get(&s) {
                    stats = merge_stats(&stats, &gaussian_stats(rows, dim)?);
                }
            }
            match gaussian_ml(&stats, alpha) {
                Ok(p) => Ok(p.to_flat()),
                Err(_) => {
                    // singular or empty: sample mean (or zero) with identity precision
                    let mean = if stats.count > 0.0 {
                        &stats.sum / stats.count
                    } else {
                        nalgebra::DVector::zeros(dim)
                    };
                    let ident = crate::likelihoods::ut_from_mat(
                        &nalgebra::DMatrix::identity(dim, dim),
                    );
                    let mut flat: Vec<f64> = mean.iter().cloned().collect();
                    flat.extend(ident);
                    Ok(flat)
                }
            }
        }
        Family::Multinomial { vocab } => {
            let mut counts = vec![0.0; vocab];
            for &s in sources {
                if let Some(RawData::Docs(docs)) = data.get(&s) {
                    for (i, c) in aggregate_counts(docs, vocab)?.into_iter().enumerate() {
                        counts[i] += c;
                    }
                }
            }
            let logits = multinomial_ml(&counts, alpha);
            if logits.iter().all(|v| v.is_finite()) {
                Ok(logits)
            } else {
                // keep the starting point finite when alpha = 0 leaves zeros
                Ok(multinomial_ml(&counts, 1e-3))
            }
        }
    }
}

/// Starting-point policy for the optimizer.
#[derive(Debug, Clone)]
pub enum InitPolicy {
    /// Each node at the regularized ML estimate of its pooled subtree data.
    IndependentMl,
    /// Every node at the regularized ML estimate of all data pooled.
    PooledRoot,
    Supplied(Vec<f64>),
}

/// Builds the initial flat parameter vector.
pub fn init_state(
    h: &Hierarchy,
    layout: &ParamIndex,
    data: &DataMap,
    alpha: f64,
    policy: &InitPolicy,
) -> Result<Vec<f64>> {
    let family = layout.family();
    let mut state = vec![0.0; layout.total_dim()];
    match policy {
        InitPolicy::Supplied(x) => {
            if x.len() != layout.total_dim() {
                return Err(Error::Dim("supplied init has wrong dimension".into()));
            }
            state.copy_from_slice(x);
        }
        InitPolicy::PooledRoot => {
            let sources = pooled_subtree(h, data, h.root());
            let local = ml_local(family, data, &sources, alpha)?;
            for node in 0..h.len() {
                state[layout.node_block(node)].copy_from_slice(&local);
            }
        }
        InitPolicy::IndependentMl => {
            for node in 0..h.len() {
                let sources = pooled_subtree(h, data, node);
                let local = ml_local(family, data, &sources, alpha)?;
                state[layout.node_block(node)].copy_from_slice(&local);
            }
        }
    }
    Ok(state)
}

/// Bootstrap resampling settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 50,
            seed: 0,
            variance_floor: 1e-6,
        }
    }
}

/// Lambda granularity: one coefficient per tied coordinate, or one shared
/// coefficient per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DotGranularity {
    PerCoordinate,
    PerGroup,
}

fn resample(raw: &RawData, rng: &mut StdRng) -> RawData {
    match raw {
        RawData::Gaussian(rows) => {
            let n = rows.len();
            RawData::Gaussian((0..n).map(|_| rows[rng.gen_range(0..n)].clone()).collect())
        }
        RawData::Docs(docs) => {
            let n = docs.len();
            RawData::Docs((0..n).map(|_| docs[rng.gen_range(0..n)].clone()).collect())
        }
    }
}

/// Estimates degree-of-transfer coefficients as the empirical variance of
/// the child-parent difference of regularized ML estimates across paired
/// bootstrap resamples, floored at `variance_floor`.
pub fn bootstrap_dot(
    h: &Hierarchy,
    layout: &ParamIndex,
    data: &DataMap,
    cfg: &BootstrapConfig,
    alpha: f64,
    mask: &TyingMask,
    granularity: DotGranularity,
) -> Result<DotCoefficients> {
    if cfg.resamples < 2 {
        return Err(Error::Config("bootstrap needs at least 2 resamples".into()));
    }
    if cfg.variance_floor <= 0.0 {
        return Err(Error::Config("variance floor must be positive".into()));
    }
    for leaf in h.leaves() {
        if data.get(&leaf).map_or(true, |d| d.is_empty()) {
            return Err(Error::Data(format!(
                "leaf '{}' has no instances to resample",
                h.name(leaf)
            )));
        }
    }
    let family = layout.family();
    let node_dim = layout.node_dim();
    let tied = mask.tied_coords();
    let edges = h.edge_children();
    // deltas[edge index][tied coord index][trial]
    let mut deltas = vec![vec![Vec::with_capacity(cfg.resamples); tied.len()]; edges.len()];
    for trial in 0..cfg.resamples {
        let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
        // one resample per data-bearing node, shared by all ancestors this trial
        let resampled: DataMap = data
            .iter()
            .map(|(&n, raw)| (n, resample(raw, &mut rng)))
            .collect();
        let mut estimates: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        for node in 0..h.len() {
            let sources = pooled_subtree(h, &resampled, node);
            estimates.insert(node, ml_local(family, &resampled, &sources, alpha)?);
        }
        for (e, &child) in edges.iter().enumerate() {
            let parent = h.parent(child).unwrap();
            for (t, &local) in tied.iter().enumerate() {
                deltas[e][t].push(estimates[&child][local] - estimates[&parent][local]);
            }
        }
    }
    let mut dot = DotCoefficients {
        values: edges.iter().map(|&c| (c, vec![cfg.variance_floor; node_dim])).collect(),
    };
    for (e, &child) in edges.iter().enumerate() {
        let lams = dot.values.get_mut(&child).unwrap();
        let k = cfg.resamples as f64;
        let mut per_coord = vec![0.0; tied.len()];
        for (t, series) in deltas[e].iter().enumerate() {
            let mean: f64 = series.iter().sum::<f64>() / k;
            let var: f64 =
                series.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (k - 1.0);
            per_coord[t] = var;
        }
        match granularity {
            DotGranularity::PerCoordinate => {
                for (t, &local) in tied.iter().enumerate() {
                    lams[local] = per_coord[t].max(cfg.variance_floor);
                }
            }
            DotGranularity::PerGroup => {
                for (group, _) in family.groups() {
                    let r = layout.block(0, group); // node 0 local offsets
                    let base = layout.node_block(0).start;
                    let in_group: Vec<usize> = tied
                        .iter()
                        .enumerate()
                        .filter(|(_, &local)| r.contains(&(base + local)))
                        .map(|(t, _)| t)
                        .collect();
                    if in_group.is_empty() {
                        continue;
                    }
                    let avg: f64 = in_group.iter().map(|&t| per_coord[t]).sum::<f64>()
                        / in_group.len() as f64;
                    let lam = avg.max(cfg.variance_floor);
                    for &t in &in_group {
                        lams[tied[t]] = lam;
                    }
                }
            }
        }
    }
    Ok(dot)
}

/// Outcome of a MAP fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Flat parameter vector at convergence (theta only).
    pub state: Vec<f64>,
    /// Transfer coefficients used (input, uniform, or optimized).
    pub dot: DotCoefficients,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn append_run(total: &mut FitResult, run: &CgResult) {
    total.iterations += run.iterations;
    // skip the repeated starting value when chaining traces
    let skip = if total.trace.is_empty() { 0 } else { 1 };
    total.trace.extend(run.trace.iter().skip(skip));
}

/// Minimizes the joint MAP objective.
///
/// Multinomial models run a single joint CG. Gaussian models alternate CG
/// over all means and over all precisions (the log-likelihood is concave in
/// each block separately but not jointly). In hyperprior mode the log-lambda
/// coordinates are optimized within every phase.
pub fn fit_map(
    h: &Hierarchy,
    layout: &ParamIndex,
    data: &DataMap,
    config: &ObjectiveConfig,
    dot: Option<&DotCoefficients>,
    prior: Option<&HyperpriorSpec>,
    opt: &OptimizerConfig,
    init: &InitPolicy,
) -> Result<FitResult> {
    match config.dot_mode {
        DotMode::None => {
            if dot.is_some() {
                return Err(Error::Config(
                    "DOT coefficients supplied but dot_mode is none".into(),
                ));
            }
        }
        DotMode::Fixed | DotMode::Hyperprior => {
            if dot.is_none() {
                return Err(Error::Config("dot_mode requires DOT coefficients".into()));
            }
        }
    }
    let owned_prior;
    let prior = match (config.dot_mode, prior) {
        (DotMode::Hyperprior, Some(p)) => Some(p),
        (DotMode::Hyperprior, None) => {
            owned_prior =
                HyperpriorSpec::from_reference(dot.unwrap(), HyperpriorSpec::DEFAULT_SHAPE)?;
            Some(&owned_prior)
        }
        (_, p) => p,
    };
    let node_data = build_node_data(data, layout.family(), config.alpha)?;
    let problem = JointProblem::new(h, layout, &node_data, config, dot, prior)?;
    let theta0 = init_state(h, layout, data, config.alpha, init)?;
    let x0 = problem.initial_state(&theta0);
    if !problem.feasible(&x0) {
        return Err(Error::Optimizer("infeasible initialization".into()));
    }
    let f = |x: &[f64]| problem.value(x);
    let g = |x: &[f64]| problem.grad(x);
    let feas = |x: &[f64]| problem.feasible(x);

    let mut result = FitResult {
        state: Vec::new(),
        dot: DotCoefficients::uniform(h, layout.node_dim(), 1.0),
        objective_value: f64::INFINITY,
        iterations: 0,
        converged: false,
        trace: Vec::new(),
    };
    let lambda_coords: Vec<usize> =
        (layout.total_dim()..layout.total_dim() + problem.lambda_dim()).collect();

    let final_x = match layout.family() {
        Family::Multinomial { .. } => {
            let run = cg_minimize(f, g, &x0, opt, feas)?;
            result.converged = run.converged();
            append_run(&mut result, &run);
            run.x
        }
        Family::Gaussian { .. } => {
            let mut mean_coords = Vec::new();
            let mut prec_coords = Vec::new();
            for node in 0..h.len() {
                mean_coords.extend(layout.block(node, Group::Mean));
                prec_coords.extend(layout.block(node, Group::Precision));
            }
            mean_coords.extend(&lambda_coords);
            prec_coords.extend(&lambda_coords);
            let mut x = x0;
            let mut prev = f(&x)?;
            let mut converged = false;
            for _ in 0..opt.outer_block_iters.max(1) {
                let run_m = cg_minimize_subset(f, g, &x, &mean_coords, opt, feas)?;
                append_run(&mut result, &run_m);
                let run_p = cg_minimize_subset(f, g, &run_m.x, &prec_coords, opt, feas)?;
                append_run(&mut result, &run_p);
                let cur = run_p.value;
                let both_converged = run_m.converged() && run_p.converged();
                x = run_p.x;
                if (prev - cur).abs() <= opt.grad_tol * (1.0 + cur.abs()) {
                    converged = both_converged;
                    break;
                }
                prev = cur;
            }
            result.converged = converged;
            x
        }
    };
    result.objective_value = f(&final_x)?;
    result.dot = problem.dot_at(&final_x);
    result.state = final_x[..layout.total_dim()].to_vec();
    Ok(result)
}
