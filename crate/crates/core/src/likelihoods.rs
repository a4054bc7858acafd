//! Data objectives and analytic gradients for the two leaf-model families.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Sparse bag-of-words document: `(word-id, count)` pairs.
pub type SparseDoc = Vec<(usize, f64)>;

/// Length of the packed upper triangle of a `d x d` symmetric matrix.
pub fn ut_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Packed index of entry `(i, j)` with `i <= j`, row-major over the triangle.
pub fn ut_index(i: usize, j: usize, d: usize) -> usize {
    debug_assert!(i <= j && j < d);
    i * (2 * d - i + 1) / 2 + (j - i)
}

/// Expands a packed upper triangle into a full symmetric matrix.
pub fn mat_from_ut(ut: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = ut[ut_index(i, j, d)];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Packs the upper triangle of a symmetric matrix.
pub fn ut_from_mat(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut ut = vec![0.0; ut_len(d)];
    for i in 0..d {
        for j in i..d {
            ut[ut_index(i, j, d)] = m[(i, j)];
        }
    }
    ut
}

/// Gaussian parameters: mean and precision (packed upper triangle).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub prec_ut: Vec<f64>,
}

impl GaussianParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        mat_from_ut(&self.prec_ut, self.dim())
    }

    pub fn cholesky(&self) -> Option<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.precision())
    }

    /// Flattened as `[mean, prec_ut]`, matching the node-block layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + self.prec_ut.len());
        v.extend(self.mean.iter());
        v.extend(&self.prec_ut);
        v
    }

    pub fn from_flat(flat: &[f64], d: usize) -> Self {
        GaussianParams {
            mean: DVector::from_column_slice(&flat[..d]),
            prec_ut: flat[d..d + ut_len(d)].to_vec(),
        }
    }
}

/// Sufficient statistics for the Gaussian data objective.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub count: f64,
    pub sum: DVector<f64>,
    pub scatter: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.sum.len()
    }
}

/// Collects count, sum and scatter from instance rows.
pub fn gaussian_stats(rows: &[Vec<f64>], d: usize) -> Result<GaussianStats> {
    let mut sum = DVector::zeros(d);
    let mut scatter = DMatrix::zeros(d, d);
    for (m, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Dim(format!(
                "row {m} has {} columns, expected {d}",
                row.len()
            )));
        }
        let x = DVector::from_column_slice(row);
        scatter += &x * x.transpose();
        sum += x;
    }
    Ok(GaussianStats {
        count: rows.len() as f64,
        sum,
        scatter,
    })
}

/// Merges sufficient statistics (data pooling).
pub fn merge_stats(a: &GaussianStats, b: &GaussianStats) -> GaussianStats {
    GaussianStats {
        count: a.count + b.count,
        sum: &a.sum + &b.sum,
        scatter: &a.scatter + &b.scatter,
    }
}

/// Augments the scatter so the ML stationary point of the precision becomes
/// `(empirical covariance + alpha*I)^{-1}`.
pub fn apply_ridge(stats: &GaussianStats, alpha: f64) -> Result<GaussianStats> {
    if alpha < 0.0 {
        return Err(Error::Config("ridge alpha must be nonnegative".into()));
    }
    let d = stats.dim();
    let mut out = stats.clone();
    out.scatter += DMatrix::identity(d, d) * (alpha * stats.count);
    Ok(out)
}

/// Log density sum `sum_m log N(x[m] | mean, K^{-1})` from sufficient
/// statistics, normalizer included.
pub fn gaussian_loglik(stats: &GaussianStats, params: &GaussianParams) -> Result<f64> {
    let d = params.dim();
    if stats.dim() != d {
        return Err(Error::Dim("stats/params dimension mismatch".into()));
    }
    if stats.count == 0.0 {
        return Ok(0.0);
    }
    let k = params.precision();
    let chol = Cholesky::new(k.clone()).ok_or(Error::NotPositiveDefinite)?;
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let m = stats.count;
    let mu = &params.mean;
    let quad = (&k * &stats.scatter).trace() - 2.0 * mu.dot(&(&k * &stats.sum))
        + m * mu.dot(&(&k * mu));
    Ok(-0.5 * quad + 0.5 * m * logdet
        - 0.5 * m * d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Gradient of [`gaussian_loglik`] over `(mean, packed precision)`.
/// Off-diagonal precision partials are doubled (symmetric-storage chain rule).
pub fn gaussian_grad(stats: &GaussianStats, params: &GaussianParams) -> Result<Vec<f64>> {
    let d = params.dim();
    if stats.dim() != d {
        return Err(Error::Dim("stats/params dimension mismatch".into()));
    }
    if stats.count == 0.0 {
        return Ok(vec![0.0; d + ut_len(d)]);
    }
    let k = params.precision();
    let chol = Cholesky::new(k.clone()).ok_or(Error::NotPositiveDefinite)?;
    let m = stats.count;
    let mu = &params.mean;
    let d_mean = &k * (&stats.sum - mu * m);
    // centered scatter: sum_m (x - mu)(x - mu)^T
    let centered = &stats.scatter - &stats.sum * mu.transpose() - mu * stats.sum.transpose()
        + mu * mu.transpose() * m;
    let k_inv = chol.inverse();
    let d_k = k_inv * (m / 2.0) - centered * 0.5;
    let mut g = Vec::with_capacity(d + ut_len(d));
    g.extend(d_mean.iter());
    for i in 0..d {
        for j in i..d {
            g.push(if i == j { d_k[(i, j)] } else { 2.0 * d_k[(i, j)] });
        }
    }
    Ok(g)
}

/// Regularized ML Gaussian fit: mean = sample mean, precision =
/// `(empirical covariance + alpha*I)^{-1}`.
pub fn gaussian_ml(stats: &GaussianStats, alpha: f64) -> Result<GaussianParams> {
    if stats.count == 0.0 {
        return Err(Error::Data("cannot fit Gaussian to empty data".into()));
    }
    let d = stats.dim();
    let m = stats.count;
    let mean = &stats.sum / m;
    let mut cov = &stats.scatter / m - &mean * mean.transpose();
    cov += DMatrix::identity(d, d) * alpha;
    let chol = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite)?;
    let prec = chol.inverse();
    Ok(GaussianParams {
        mean,
        prec_ut: ut_from_mat(&prec),
    })
}

/// `log sum_i exp(x_i)`; tolerates `-inf` entries.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = logsumexp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

/// Multinomial data objective: `sum_i (n_i + alpha) * (theta_i - logsumexp(theta))`.
pub fn multinomial_loglik(counts: &[f64], logits: &[f64], alpha: f64) -> Result<f64> {
    if counts.len() != logits.len() {
        return Err(Error::Dim(format!(
            "counts len {} vs logits len {}",
            counts.len(),
            logits.len()
        )));
    }
    let lse = logsumexp(logits);
    let mut total = 0.0;
    for (n, th) in counts.iter().zip(logits) {
        let w = n + alpha;
        if w != 0.0 {
            total += w * (th - lse);
        }
    }
    Ok(total)
}

/// Gradient of [`multinomial_loglik`]:
/// `(n_i + alpha) - (sum_j n_j + alpha*V) * softmax(theta)_i`.
pub fn multinomial_grad(counts: &[f64], logits: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if counts.len() != logits.len() {
        return Err(Error::Dim("counts/logits dimension mismatch".into()));
    }
    let total: f64 = counts.iter().sum::<f64>() + alpha * counts.len() as f64;
    let sm = softmax(logits);
    Ok(counts
        .iter()
        .zip(&sm)
        .map(|(n, p)| n + alpha - total * p)
        .collect())
}

/// Smoothed log-frequency estimate: `log((n_i + alpha) / (N + alpha*V))`.
/// With `alpha = 0` zero counts map to `-inf` logits.
pub fn multinomial_ml(counts: &[f64], alpha: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + alpha * counts.len() as f64;
    if total == 0.0 {
        return vec![0.0; counts.len()]; // no evidence, uniform gauge
    }
    counts.iter().map(|n| ((n + alpha) / total).ln()).collect()
}

/// Naive Bayes document log-likelihood `sum_i d_i * (theta_i - logsumexp(theta))`.
pub fn nb_doc_loglik(doc: &SparseDoc, logits: &[f64]) -> Result<f64> {
    let lse = logsumexp(logits);
    let mut total = 0.0;
    for &(id, count) in doc {
        if id >= logits.len() {
            return Err(Error::Dim(format!(
                "word id {id} outside vocabulary of {}",
                logits.len()
            )));
        }
        if count != 0.0 {
            total += count * (logits[id] - lse);
        }
    }
    Ok(total)
}

/// Aggregates per-document sparse counts into one dense count vector.
pub fn aggregate_counts(docs: &[SparseDoc], vocab: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; vocab];
    for doc in docs {
        for &(id, c) in doc {
            if id >= vocab {
                return Err(Error::Dim(format!(
                    "word id {id} outside vocabulary of {vocab}"
                )));
            }
            if c < 0.0 {
                return Err(Error::Data("negative word count".into()));
            }
            counts[id] += c;
        }
    }
    Ok(counts)
}
