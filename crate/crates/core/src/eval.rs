//! Evaluation metrics, classification, and k-fold splitting.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::likelihoods::{gaussian_loglik, gaussian_stats, nb_doc_loglik, GaussianParams, SparseDoc};

const LN_2: f64 = std::f64::consts::LN_2;

/// Seeded disjoint near-equal folds over `n` items; returns
/// `(train-indices, test-indices)` pairs.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config("k-fold needs k >= 2".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds dataset size {n}")));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = indices[start..start + size].to_vec();
        let train: Vec<usize> = indices[..start]
            .iter()
            .chain(&indices[start + size..])
            .cloned()
            .collect();
        out.push((train, test));
        start += size;
    }
    Ok(out)
}

/// Held-out Gaussian log-likelihood in bits per instance.
pub fn gaussian_test_bits(params: &GaussianParams, rows: &[Vec<f64>]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let stats = gaussian_stats(rows, params.dim())?;
    let nats = gaussian_loglik(&stats, params)?;
    Ok(nats / (rows.len() as f64 * LN_2))
}

/// Held-out naive Bayes log-likelihood in bits per instance.
pub fn multinomial_test_bits(logits: &[f64], docs: &[SparseDoc]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut nats = 0.0;
    for doc in docs {
        nats += nb_doc_loglik(doc, logits)?;
    }
    Ok(nats / (docs.len() as f64 * LN_2))
}

/// Class prior treatment for classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ClassPriors {
    /// Empirical training frequencies.
    Empirical,
    Uniform,
}

/// Log priors from per-class training counts.
pub fn log_priors(train_counts: &[usize], priors: ClassPriors) -> Vec<f64> {
    match priors {
        ClassPriors::Uniform => vec![0.0; train_counts.len()],
        ClassPriors::Empirical => {
            let total: usize = train_counts.iter().sum();
            train_counts
                .iter()
                .map(|&c| {
                    if total == 0 || c == 0 {
                        f64::NEG_INFINITY
                    } else {
                        (c as f64 / total as f64).ln()
                    }
                })
                .collect()
        }
    }
}

/// Argmax of `log P(doc | class) + log prior(class)`; ties break toward the
/// smallest class index.
pub fn classify(doc: &SparseDoc, class_logits: &[Vec<f64>], log_priors: &[f64]) -> Result<usize> {
    if class_logits.len() != log_priors.len() || class_logits.is_empty() {
        return Err(Error::Dim("class models and priors must align".into()));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, logits) in class_logits.iter().enumerate() {
        let score = nb_doc_loglik(doc, logits)? + log_priors[c];
        if score > best_score {
            best = c;
            best_score = score;
        }
    }
    Ok(best)
}

/// Fraction of documents assigned their true class.
pub fn accuracy(
    docs: &[(usize, SparseDoc)],
    class_logits: &[Vec<f64>],
    log_priors: &[f64],
) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut correct = 0usize;
    for (label, doc) in docs {
        if classify(doc, class_logits, log_priors)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / docs.len() as f64)
}

/// One evaluation table cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub class: String,
    pub n: usize,
    pub metric: String,
    pub value: f64,
}

/// Tabular evaluation results; renders deterministically.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, method: &str, class: &str, n: usize, metric: &str, value: f64) {
        self.rows.push(EvalRow {
            method: method.to_string(),
            class: class.to_string(),
            n,
            metric: metric.to_string(),
            value,
        });
    }

    /// Tab-separated table, one row per (method, class, N, metric).
    pub fn render(&self) -> String {
        let mut out = String::from("method\tclass\tN\tmetric\tvalue\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.12e}\n",
                r.method, r.class, r.n, r.metric, r.value
            ));
        }
        out
    }

    /// Mean metric per (method, N) minus the same mean for `baseline`.
    pub fn deltas_vs(&self, baseline: &str, metric: &str) -> Vec<(String, usize, f64)> {
        use std::collections::BTreeMap;
        let mut sums: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.metric == metric) {
            let e = sums.entry((r.method.clone(), r.n)).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        let means: BTreeMap<(String, usize), f64> = sums
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect();
        means
            .iter()
            .map(|((m, n), v)| {
                let base = means.get(&(baseline.to_string(), *n)).copied().unwrap_or(0.0);
                (m.clone(), *n, v - base)
            })
            .collect()
    }
}
