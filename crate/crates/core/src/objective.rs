//! Divergence penalties, degree-of-transfer coefficients, the inverse-Gamma
//! hyperprior, and assembly of the joint MAP objective with its gradient.

use std::collections::BTreeMap;

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::hierarchy::{Family, Group, Hierarchy, NodeId, ParamIndex};
use crate::likelihoods::{
    gaussian_grad, gaussian_loglik, mat_from_ut, multinomial_grad, multinomial_loglik,
    ut_index, GaussianParams, GaussianStats,
};

/// Convex per-coordinate divergence between child and parent parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum DivergenceSpec {
    /// Squared difference.
    L2,
    /// `sqrt(diff^2 + smoothing^2) - smoothing`.
    L1Smoothed { smoothing: f64 },
    /// `max(0, |diff| - epsilon)^2`.
    EpsInsensitive { epsilon: f64 },
}

impl DivergenceSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DivergenceSpec::L2 => Ok(()),
            DivergenceSpec::L1Smoothed { smoothing } if smoothing > 0.0 => Ok(()),
            DivergenceSpec::L1Smoothed { .. } => {
                Err(Error::Config("L1 smoothing must be positive".into()))
            }
            DivergenceSpec::EpsInsensitive { epsilon } if epsilon >= 0.0 => Ok(()),
            DivergenceSpec::EpsInsensitive { .. } => {
                Err(Error::Config("epsilon must be nonnegative".into()))
            }
        }
    }

    /// Scalar penalty value at difference `diff`.
    pub fn penalty(&self, diff: f64) -> f64 {
        match *self {
            DivergenceSpec::L2 => diff * diff,
            DivergenceSpec::L1Smoothed { smoothing } => {
                (diff * diff + smoothing * smoothing).sqrt() - smoothing
            }
            DivergenceSpec::EpsInsensitive { epsilon } => {
                let over = (diff.abs() - epsilon).max(0.0);
                over * over
            }
        }
    }

    /// Derivative of [`Self::penalty`] with respect to `diff`.
    pub fn derivative(&self, diff: f64) -> f64 {
        match *self {
            DivergenceSpec::L2 => 2.0 * diff,
            DivergenceSpec::L1Smoothed { smoothing } => {
                diff / (diff * diff + smoothing * smoothing).sqrt()
            }
            DivergenceSpec::EpsInsensitive { epsilon } => {
                let over = (diff.abs() - epsilon).max(0.0);
                2.0 * over * diff.signum()
            }
        }
    }
}

/// Which node-local coordinates are penalized across every edge.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TyingMask {
    coords: Vec<bool>,
}

impl TyingMask {
    /// Default tying: Gaussian ties mean and diagonal precision
    /// (off-diagonal free); multinomial ties all logits.
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Gaussian { dim } => {
                let mut coords = vec![true; dim];
                let mut prec = vec![false; crate::likelihoods::ut_len(dim)];
                for i in 0..dim {
                    prec[ut_index(i, i, dim)] = true;
                }
                coords.extend(prec);
                TyingMask { coords }
            }
            Family::Multinomial { vocab } => TyingMask {
                coords: vec![true; vocab],
            },
        }
    }

    pub fn all(family: Family) -> Self {
        TyingMask {
            coords: vec![true; family.node_dim()],
        }
    }

    pub fn from_coords(coords: Vec<bool>) -> Self {
        TyingMask { coords }
    }

    pub fn is_tied(&self, local: usize) -> bool {
        self.coords[local]
    }

    /// Tied node-local coordinates, in storage order.
    pub fn tied_coords(&self) -> Vec<usize> {
        (0..self.coords.len()).filter(|&i| self.coords[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Per-edge, per-coordinate transfer weights; keyed by the child node of the
/// edge, holding one value per node-local coordinate (untied entries unused).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DotCoefficients {
    pub values: BTreeMap<NodeId, Vec<f64>>,
}

impl DotCoefficients {
    pub fn uniform(h: &Hierarchy, node_dim: usize, value: f64) -> Self {
        let values = h
            .edge_children()
            .into_iter()
            .map(|c| (c, vec![value; node_dim]))
            .collect();
        DotCoefficients { values }
    }

    pub fn get(&self, child: NodeId, local: usize) -> Result<f64> {
        let lam = self
            .values
            .get(&child)
            .and_then(|v| v.get(local))
            .copied()
            .ok_or_else(|| {
                Error::Config(format!("missing DOT coefficient for edge child {child}"))
            })?;
        if lam <= 0.0 {
            return Err(Error::Config(format!(
                "DOT coefficient must be positive, got {lam}"
            )));
        }
        Ok(lam)
    }

    /// Checks coverage and positivity for every tied coordinate of every edge.
    pub fn validate(&self, h: &Hierarchy, mask: &TyingMask) -> Result<()> {
        for child in h.edge_children() {
            for local in mask.tied_coords() {
                self.get(child, local)?;
            }
        }
        Ok(())
    }
}

/// Inverse-Gamma hyperprior on the transfer coefficients; the scale is set so
/// the prior mean `b / (a - 1)` equals a reference (bootstrap) value.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperpriorSpec {
    pub shape: f64,
    pub scales: BTreeMap<NodeId, Vec<f64>>,
}

impl HyperpriorSpec {
    pub const DEFAULT_SHAPE: f64 = 2.0;

    /// Prior with mean matched to the given coefficients.
    pub fn from_reference(dot: &DotCoefficients, shape: f64) -> Result<Self> {
        if shape <= 1.0 {
            return Err(Error::Config("hyperprior shape must exceed 1".into()));
        }
        let scales = dot
            .values
            .iter()
            .map(|(c, v)| (*c, v.iter().map(|lam| (shape - 1.0) * lam).collect()))
            .collect();
        Ok(HyperpriorSpec { shape, scales })
    }

    pub fn scale(&self, child: NodeId, local: usize) -> Result<f64> {
        let b = self
            .scales
            .get(&child)
            .and_then(|v| v.get(local))
            .copied()
            .ok_or_else(|| Error::Config(format!("missing hyperprior scale for edge {child}")))?;
        if b <= 0.0 {
            return Err(Error::Config("hyperprior scale must be positive".into()));
        }
        Ok(b)
    }
}

/// How the transfer coefficients enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DotMode {
    /// No per-coordinate coefficients (all fixed at 1).
    None,
    /// Coefficients supplied up front (e.g. bootstrap estimates).
    Fixed,
    /// Coefficients optimized jointly under the inverse-Gamma hyperprior.
    Hyperprior,
}

/// Global objective settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub alpha: f64,
    pub divergence: DivergenceSpec,
    pub mask: TyingMask,
    pub dot_mode: DotMode,
}

impl ObjectiveConfig {
    pub fn new(family: Family, beta: f64, alpha: f64) -> Self {
        ObjectiveConfig {
            beta,
            alpha,
            divergence: DivergenceSpec::L2,
            mask: TyingMask::default_for(family),
            dot_mode: DotMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        self.divergence.validate()
    }
}

/// Per-node attached data, reduced to sufficient statistics.
#[derive(Debug, Clone)]
pub enum NodeData {
    Gaussian(GaussianStats),
    Counts(Vec<f64>),
}

/// Negative-log-inverse-Gamma term over all coefficients, constants dropped:
/// `sum (a+1) ln(lambda) + b / lambda`.
pub fn hyperprior_term(dot: &DotCoefficients, prior: &HyperpriorSpec) -> Result<f64> {
    let a = prior.shape;
    let mut total = 0.0;
    for (&child, lams) in &dot.values {
        for (local, &lam) in lams.iter().enumerate() {
            if lam <= 0.0 {
                return Err(Error::Config("DOT coefficient must be positive".into()));
            }
            let b = prior.scale(child, local)?;
            total += (a + 1.0) * lam.ln() + b / lam;
        }
    }
    Ok(total)
}

/// The sum of DOT-weighted divergence penalties over all edges:
/// `beta * sum_edges sum_tied penalty(theta_child - theta_parent) / lambda`.
pub fn transfer_penalty(
    state: &[f64],
    h: &Hierarchy,
    layout: &ParamIndex,
    dot: &DotCoefficients,
    config: &ObjectiveConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for child in h.edge_children() {
        let parent = h.parent(child).unwrap();
        let cb = layout.node_block(child).start;
        let pb = layout.node_block(parent).start;
        for local in config.mask.tied_coords() {
            let diff = state[cb + local] - state[pb + local];
            let lam = dot.get(child, local)?;
            total += config.divergence.penalty(diff) / lam;
        }
    }
    Ok(config.beta * total)
}

/// The joint MAP objective over a hierarchy: negated data terms plus
/// DOT-weighted divergence penalties, plus the hyperprior term when the
/// coefficients are free variables.
///
/// In [`DotMode::Hyperprior`] the state vector is `[theta, log(lambda)]`; the
/// log parametrization keeps the coefficients positive without constraints.
pub struct JointProblem<'a> {
    h: &'a Hierarchy,
    layout: &'a ParamIndex,
    data: &'a BTreeMap<NodeId, NodeData>,
    config: &'a ObjectiveConfig,
    dot: DotCoefficients,
    prior: Option<HyperpriorSpec>,
    lambda_order: Vec<(NodeId, usize)>,
}

impl<'a> JointProblem<'a> {
    pub fn new(
        h: &'a Hierarchy,
        layout: &'a ParamIndex,
        data: &'a BTreeMap<NodeId, NodeData>,
        config: &'a ObjectiveConfig,
        dot: Option<&DotCoefficients>,
        prior: Option<&HyperpriorSpec>,
    ) -> Result<Self> {
        config.validate()?;
        if config.mask.len() != layout.node_dim() {
            return Err(Error::Config("tying mask length != node dimension".into()));
        }
        for leaf in h.leaves() {
            if !data.contains_key(&leaf) {
                return Err(Error::Data(format!(
                    "missing data for leaf '{}'",
                    h.name(leaf)
                )));
            }
        }
        for (&node, nd) in data {
            match (layout.family(), nd) {
                (Family::Gaussian { dim }, NodeData::Gaussian(s)) if s.dim() == dim => {}
                (Family::Multinomial { vocab }, NodeData::Counts(c)) if c.len() == vocab => {}
                _ => {
                    return Err(Error::Dim(format!(
                        "data attached to node '{}' does not match the model family",
                        h.name(node)
                    )))
                }
            }
        }
        let dot = match config.dot_mode {
            DotMode::None => DotCoefficients::uniform(h, layout.node_dim(), 1.0),
            DotMode::Fixed | DotMode::Hyperprior => dot
                .cloned()
                .ok_or_else(|| Error::Config("DOT coefficients required for this mode".into()))?,
        };
        dot.validate(h, &config.mask)?;
        let prior = match config.dot_mode {
            DotMode::Hyperprior => Some(
                prior
                    .cloned()
                    .ok_or_else(|| Error::Config("hyperprior spec required".into()))?,
            ),
            _ => {
                if prior.is_some() {
                    return Err(Error::Config(
                        "hyperprior spec only valid in hyperprior mode".into(),
                    ));
                }
                None
            }
        };
        let lambda_order = if config.dot_mode == DotMode::Hyperprior {
            let mut order = Vec::new();
            for child in h.edge_children() {
                for local in config.mask.tied_coords() {
                    order.push((child, local));
                }
            }
            order
        } else {
            Vec::new()
        };
        Ok(JointProblem {
            h,
            layout,
            data,
            config,
            dot,
            prior,
            lambda_order,
        })
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        self.h
    }

    pub fn layout(&self) -> &ParamIndex {
        self.layout
    }

    pub fn theta_dim(&self) -> usize {
        self.layout.total_dim()
    }

    pub fn lambda_dim(&self) -> usize {
        self.lambda_order.len()
    }

    /// Full free-variable dimension (theta, plus log-lambda in hyperprior mode).
    pub fn dim(&self) -> usize {
        self.theta_dim() + self.lambda_dim()
    }

    pub fn lambda_order(&self) -> &[(NodeId, usize)] {
        &self.lambda_order
    }

    /// Initial full state: theta plus log of the reference coefficients.
    pub fn initial_state(&self, theta: &[f64]) -> Vec<f64> {
        let mut x = theta.to_vec();
        for &(child, local) in &self.lambda_order {
            x.push(self.dot.get(child, local).unwrap().ln());
        }
        x
    }

    /// Coefficients at a state: exp of the appended block in hyperprior mode,
    /// the resolved fixed values otherwise.
    pub fn dot_at(&self, x: &[f64]) -> DotCoefficients {
        if self.lambda_order.is_empty() {
            return self.dot.clone();
        }
        let mut dot = self.dot.clone();
        for (k, &(child, local)) in self.lambda_order.iter().enumerate() {
            dot.values.get_mut(&child).unwrap()[local] = x[self.theta_dim() + k].exp();
        }
        dot
    }

    /// True when every Gaussian precision block at `x` is Cholesky-factorizable.
    pub fn feasible(&self, x: &[f64]) -> bool {
        if let Family::Gaussian { dim } = self.layout.family() {
            for node in 0..self.h.len() {
                let r = self.layout.block(node, Group::Precision);
                let k = mat_from_ut(&x[r], dim);
                if Cholesky::new(k).is_none() {
                    return false;
                }
            }
        }
        true
    }

    fn data_loglik(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (&node, nd) in self.data {
            match nd {
                NodeData::Gaussian(stats) => {
                    let block = &x[self.layout.node_block(node)];
                    let params =
                        GaussianParams::from_flat(block, stats.dim());
                    total += gaussian_loglik(stats, &params)?;
                }
                NodeData::Counts(counts) => {
                    let logits = &x[self.layout.block(node, Group::Logits)];
                    total += multinomial_loglik(counts, logits, self.config.alpha)?;
                }
            }
        }
        Ok(total)
    }

    /// Objective value at a full state vector.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let dot = self.dot_at(x);
        let mut f = -self.data_loglik(x)?;
        f += transfer_penalty(x, self.h, self.layout, &dot, self.config)?;
        if let Some(prior) = &self.prior {
            f += hyperprior_term(&dot, prior)?;
        }
        Ok(f)
    }

    /// Full gradient at a state vector, over theta and (in hyperprior mode)
    /// the log-lambda coordinates.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        // negated data gradients
        for (&node, nd) in self.data {
            match nd {
                NodeData::Gaussian(stats) => {
                    let r = self.layout.node_block(node);
                    let params = GaussianParams::from_flat(&x[r.clone()], stats.dim());
                    let dg = gaussian_grad(stats, &params)?;
                    for (k, v) in dg.into_iter().enumerate() {
                        g[r.start + k] -= v;
                    }
                }
                NodeData::Counts(counts) => {
                    let r = self.layout.block(node, Group::Logits);
                    let dg = multinomial_grad(counts, &x[r.clone()], self.config.alpha)?;
                    for (k, v) in dg.into_iter().enumerate() {
                        g[r.start + k] -= v;
                    }
                }
            }
        }
        // edge penalties: each edge pushes child and parent toward each other
        let dot = self.dot_at(x);
        for child in self.h.edge_children() {
            let parent = self.h.parent(child).unwrap();
            let cb = self.layout.node_block(child).start;
            let pb = self.layout.node_block(parent).start;
            for local in self.config.mask.tied_coords() {
                let diff = x[cb + local] - x[pb + local];
                let lam = dot.get(child, local)?;
                let d = self.config.beta * self.config.divergence.derivative(diff) / lam;
                g[cb + local] += d;
                g[pb + local] -= d;
            }
        }
        // log-lambda coordinates
        if let Some(prior) = &self.prior {
            let a = prior.shape;
            for (k, &(child, local)) in self.lambda_order.iter().enumerate() {
                let u = x[self.theta_dim() + k];
                let lam = u.exp();
                let cb = self.layout.node_block(child).start;
                let pb = self.layout.node_block(self.h.parent(child).unwrap()).start;
                let diff = x[cb + local] - x[pb + local];
                let pen = self.config.divergence.penalty(diff);
                let b = prior.scale(child, local)?;
                // d/du of beta*pen*exp(-u) + (a+1)*u + b*exp(-u)
                g[self.theta_dim() + k] =
                    -self.config.beta * pen / lam + (a + 1.0) - b / lam;
            }
        }
        Ok(g)
    }
}
