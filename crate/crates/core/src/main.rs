//! Command-line driver: fitting, evaluation, classification, synthetic data,
//! experiment sweeps, bootstrap DOT estimation, and tokenization.
//!
//! Exit codes: 0 success, 1 usage/parse error, 2 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use hbtransfer::baselines::{fit_cvconst, fit_cvreg, fit_likelihood, fit_shrinkage, CvGrid};
use hbtransfer::error::{Error, Result};
use hbtransfer::estimate::{
    bootstrap_dot, fit_map, BootstrapConfig, DataMap, DotGranularity, FitResult, InitPolicy,
    RawData,
};
use hbtransfer::eval::{
    accuracy, gaussian_test_bits, multinomial_test_bits, EvalReport,
};
use hbtransfer::hierarchy::{Family, Hierarchy, NodeId, ParamIndex};
use hbtransfer::io::{
    group_by_leaf, load_hierarchy, load_model, parse_docs, parse_gaussian_csv, render_docs,
    render_gaussian_csv, save_model, tokenize, HierarchyFile, ModelFile,
};
use hbtransfer::likelihoods::{GaussianParams, SparseDoc};
use hbtransfer::objective::{DivergenceSpec, DotMode, ObjectiveConfig};
use hbtransfer::optimize::OptimizerConfig;
use hbtransfer::synth::{synth_generate, SynthSpec};

#[derive(Parser)]
#[command(name = "hbt", about = "MAP estimation over undirected transfer hierarchies", version)]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for sweep cells (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Optional JSON file overriding optimizer settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

/// Optional overrides loaded from --config.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    grad_tol: Option<f64>,
    max_iters: Option<usize>,
    restart_period: Option<usize>,
    outer_block_iters: Option<usize>,
}

impl FileConfig {
    fn apply(&self, opt: &mut OptimizerConfig) {
        if let Some(v) = self.grad_tol {
            opt.grad_tol = v;
        }
        if let Some(v) = self.max_iters {
            opt.max_iters = v;
        }
        if let Some(v) = self.restart_period {
            opt.restart_period = v;
        }
        if let Some(v) = self.outer_block_iters {
            opt.outer_block_iters = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DivergenceArg {
    L2,
    L1,
    Eps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DotModeArg {
    None,
    Bootstrap,
    Hyperprior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GranularityArg {
    PerCoordinate,
    PerGroup,
}

impl From<GranularityArg> for DotGranularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::PerCoordinate => DotGranularity::PerCoordinate,
            GranularityArg::PerGroup => DotGranularity::PerGroup,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Bits,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Cvreg,
    Likelihood,
    Shrinkage,
    Cvconst,
    Hb,
    HbBootstrap,
    HbHyperprior,
}

impl MethodArg {
    fn name(self) -> &'static str {
        match self {
            MethodArg::Cvreg => "cvreg",
            MethodArg::Likelihood => "likelihood",
            MethodArg::Shrinkage => "shrinkage",
            MethodArg::Cvconst => "cvconst",
            MethodArg::Hb => "hb",
            MethodArg::HbBootstrap => "hb-bootstrap",
            MethodArg::HbHyperprior => "hb-hyperprior",
        }
    }
}

/// Objective-shaping flags shared by fit and sweep.
#[derive(Debug, Args)]
struct ObjectiveFlags {
    /// Global transfer weight.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,

    /// Likelihood regularization (ridge / pseudocounts).
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,

    #[arg(long, value_enum, default_value_t = DivergenceArg::L2)]
    divergence: DivergenceArg,

    /// Smoothing for the l1 divergence.
    #[arg(long, default_value_t = 1e-6)]
    smoothing: f64,

    /// Dead zone for the eps divergence.
    #[arg(long, default_value_t = 1e-2)]
    epsilon: f64,
}

impl ObjectiveFlags {
    fn divergence_spec(&self) -> DivergenceSpec {
        match self.divergence {
            DivergenceArg::L2 => DivergenceSpec::L2,
            DivergenceArg::L1 => DivergenceSpec::L1Smoothed {
                smoothing: self.smoothing,
            },
            DivergenceArg::Eps => DivergenceSpec::EpsInsensitive {
                epsilon: self.epsilon,
            },
        }
    }
}

#[derive(Debug, Args)]
struct BootstrapFlags {
    #[arg(long, default_value_t = 50)]
    resamples: usize,

    #[arg(long, default_value_t = 1e-6)]
    variance_floor: f64,

    #[arg(long, value_enum, default_value_t = GranularityArg::PerCoordinate)]
    granularity: GranularityArg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a hierarchical model and write a model file.
    Fit {
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        family: FamilyArg,
        /// Vocabulary size (multinomial; default: max word id + 1).
        #[arg(long)]
        vocab: Option<usize>,
        #[command(flatten)]
        objective: ObjectiveFlags,
        #[arg(long, value_enum, default_value_t = DotModeArg::None)]
        dot_mode: DotModeArg,
        #[command(flatten)]
        bootstrap: BootstrapFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model file on a test dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Second model to diff against (per-(method, N) mean deltas).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify documents with a multinomial model.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training data for empirical class priors (default: uniform).
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Generate a synthetic hierarchy with train/test datasets.
    Synth {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[arg(long, default_value_t = 2)]
        branching: usize,
        #[arg(long, default_value_t = 0.1)]
        perturbation: f64,
        #[arg(long, default_value_t = 5)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test: usize,
        #[arg(long, default_value_t = 50)]
        tokens: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit several methods across training sizes and folds; report mean
    /// deltas versus the cvreg baseline.
    Sweep {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[arg(long, default_value_t = 2)]
        branching: usize,
        #[arg(long, default_value_t = 0.1)]
        perturbation: f64,
        /// Comma-separated training sizes per leaf.
        #[arg(long, value_delimiter = ',', default_value = "3,5,10,15")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        test: usize,
        #[arg(long, default_value_t = 50)]
        tokens: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "cvreg,hb")]
        methods: Vec<MethodArg>,
        #[arg(long, value_enum, default_value_t = MetricArg::Bits)]
        metric: MetricArg,
        #[command(flatten)]
        objective: ObjectiveFlags,
        #[command(flatten)]
        bootstrap: BootstrapFlags,
        /// Write the full per-cell table here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write plot data (x = N, y = mean delta) here.
        #[arg(long)]
        plot_out: Option<PathBuf>,
    },
    /// Estimate degree-of-transfer coefficients by bootstrap resampling.
    Bootstrap {
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[command(flatten)]
        bootstrap: BootstrapFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert raw text (label<TAB>text per line) to word-id counts.
    Tokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_docs: PathBuf,
        #[arg(long)]
        out_vocab: PathBuf,
    },
}

/// Deterministic seed mixing (splitmix64 over the concatenated words).
fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        let mut z = state.wrapping_add(p).wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        state = z ^ (z >> 31);
    }
    state
}

fn infer_vocab(docs: &[(String, SparseDoc)], flag: Option<usize>) -> Result<usize> {
    if let Some(v) = flag {
        return Ok(v);
    }
    docs.iter()
        .flat_map(|(_, d)| d.iter().map(|&(id, _)| id + 1))
        .max()
        .ok_or_else(|| Error::Data("empty document file".into()))
}

/// Loads a dataset and groups it by leaf. Returns the concrete family
/// (dimension from the CSV width, vocabulary from ids unless given).
fn load_data(
    h: &Hierarchy,
    path: &Path,
    family: FamilyArg,
    vocab: Option<usize>,
) -> Result<(Family, DataMap)> {
    let text = std::fs::read_to_string(path)?;
    match family {
        FamilyArg::Gaussian => {
            let rows = parse_gaussian_csv(&text)?;
            let dim = rows
                .first()
                .map(|(_, r)| r.len())
                .ok_or_else(|| Error::Data("empty data file".into()))?;
            let grouped = group_by_leaf(h, rows)?;
            let data = grouped
                .into_iter()
                .map(|(n, rows)| (n, RawData::Gaussian(rows)))
                .collect();
            Ok((Family::Gaussian { dim }, data))
        }
        FamilyArg::Multinomial => {
            let docs = parse_docs(&text)?;
            let vocab = infer_vocab(&docs, vocab)?;
            let grouped = group_by_leaf(h, docs)?;
            let data = grouped
                .into_iter()
                .map(|(n, d)| (n, RawData::Docs(d)))
                .collect();
            Ok((Family::Multinomial { vocab }, data))
        }
    }
}

fn fit_with_mode(
    h: &Hierarchy,
    layout: &ParamIndex,
    data: &DataMap,
    config: &mut ObjectiveConfig,
    dot_mode: DotModeArg,
    boot: &BootstrapFlags,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<FitResult> {
    let boot_cfg = BootstrapConfig {
        resamples: boot.resamples,
        seed,
        variance_floor: boot.variance_floor,
    };
    match dot_mode {
        DotModeArg::None => {
            config.dot_mode = DotMode::None;
            fit_map(h, layout, data, config, None, None, opt, &InitPolicy::IndependentMl)
        }
        DotModeArg::Bootstrap => {
            config.dot_mode = DotMode::Fixed;
            let dot = bootstrap_dot(
                h,
                layout,
                data,
                &boot_cfg,
                config.alpha,
                &config.mask,
                boot.granularity.into(),
            )?;
            fit_map(h, layout, data, config, Some(&dot), None, opt, &InitPolicy::IndependentMl)
        }
        DotModeArg::Hyperprior => {
            config.dot_mode = DotMode::Hyperprior;
            let dot = bootstrap_dot(
                h,
                layout,
                data,
                &boot_cfg,
                config.alpha,
                &config.mask,
                boot.granularity.into(),
            )?;
            fit_map(h, layout, data, config, Some(&dot), None, opt, &InitPolicy::IndependentMl)
        }
    }
}

/// Per-leaf flat parameter blocks from a full fit state.
fn leaf_blocks(h: &Hierarchy, layout: &ParamIndex, state: &[f64]) -> BTreeMap<NodeId, Vec<f64>> {
    h.leaves()
        .into_iter()
        .map(|l| (l, state[layout.node_block(l)].to_vec()))
        .collect()
}

fn eval_model_rows(
    report: &mut EvalReport,
    method: &str,
    h: &Hierarchy,
    family: Family,
    params: &BTreeMap<NodeId, Vec<f64>>,
    test: &DataMap,
) -> Result<()> {
    for (&leaf, raw) in test {
        let block = params
            .get(&leaf)
            .ok_or_else(|| Error::Model(format!("no parameters for leaf '{}'", h.name(leaf))))?;
        let n = raw.len();
        let bits = match (family, raw) {
            (Family::Gaussian { dim }, RawData::Gaussian(rows)) => {
                gaussian_test_bits(&GaussianParams::from_flat(block, dim), rows)?
            }
            (Family::Multinomial { .. }, RawData::Docs(docs)) => {
                multinomial_test_bits(block, docs)?
            }
            _ => return Err(Error::Dim("data does not match model family".into())),
        };
        report.push(method, h.name(leaf), n, "bits", bits);
    }
    if let Family::Multinomial { .. } = family {
        let leaves = h.leaves();
        let class_logits: Vec<Vec<f64>> = leaves.iter().map(|l| params[l].clone()).collect();
        let mut labeled: Vec<(usize, SparseDoc)> = Vec::new();
        for (pos, leaf) in leaves.iter().enumerate() {
            if let Some(RawData::Docs(docs)) = test.get(leaf) {
                labeled.extend(docs.iter().map(|d| (pos, d.clone())));
            }
        }
        if !labeled.is_empty() {
            let priors = vec![0.0; leaves.len()];
            let acc = accuracy(&labeled, &class_logits, &priors)?;
            report.push(method, "(all)", labeled.len(), "accuracy", acc);
        }
    }
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string())
}

fn cmd_fit(
    hierarchy: &Path,
    data: &Path,
    family: FamilyArg,
    vocab: Option<usize>,
    objective: &ObjectiveFlags,
    dot_mode: DotModeArg,
    boot: &BootstrapFlags,
    out: &Path,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<()> {
    let h = load_hierarchy(hierarchy)?;
    let (family, data) = load_data(&h, data, family, vocab)?;
    let layout = ParamIndex::new(&h, family)?;
    let mut config = ObjectiveConfig::new(family, objective.beta, objective.alpha);
    config.divergence = objective.divergence_spec();
    let fit = fit_with_mode(&h, &layout, &data, &mut config, dot_mode, boot, opt, seed)?;
    let dot = match dot_mode {
        DotModeArg::None => None,
        _ => Some(&fit.dot),
    };
    let provenance = serde_json::json!({
        "beta": objective.beta,
        "alpha": objective.alpha,
        "divergence": config.divergence,
        "dot_mode": format!("{dot_mode:?}").to_lowercase(),
        "seed": seed,
    });
    let model = ModelFile::new(&h, family, &fit.state, layout.node_dim(), dot, provenance)?;
    save_model(out, &model)?;
    println!(
        "objective: {:.6e} -> {:.6e} after {} iterations (converged: {})",
        fit.trace.first().copied().unwrap_or(f64::NAN),
        fit.objective_value,
        fit.iterations,
        fit.converged
    );
    println!("model written to {}", out.display());
    Ok(())
}

fn model_leaf_params(
    path: &Path,
) -> Result<(Hierarchy, Family, BTreeMap<NodeId, Vec<f64>>)> {
    let model = load_model(path)?;
    let h = model.build_hierarchy()?;
    let family = model.family();
    let params = model.node_params(&h)?;
    Ok((h, family, params))
}

fn cmd_eval(model: &Path, data: &Path, baseline: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (h, family, params) = model_leaf_params(model)?;
    let family_arg = match family {
        Family::Gaussian { .. } => FamilyArg::Gaussian,
        Family::Multinomial { vocab } => {
            // the model fixes the vocabulary; reject wider test data below
            let _ = vocab;
            FamilyArg::Multinomial
        }
    };
    let vocab_flag = match family {
        Family::Multinomial { vocab } => Some(vocab),
        Family::Gaussian { .. } => None,
    };
    let (data_family, test) = load_data(&h, data, family_arg, vocab_flag)?;
    if let (Family::Gaussian { dim }, Family::Gaussian { dim: dd }) = (family, data_family) {
        if dim != dd {
            return Err(Error::Dim(format!(
                "model dimension {dim} but data has {dd} features"
            )));
        }
    }
    if let Family::Multinomial { vocab } = family {
        for raw in test.values() {
            if let RawData::Docs(docs) = raw {
                if docs.iter().flatten().any(|&(id, _)| id >= vocab) {
                    return Err(Error::Dim(format!(
                        "document word id exceeds model vocabulary {vocab}"
                    )));
                }
            }
        }
    }
    let mut report = EvalReport::default();
    let name = file_stem(model);
    eval_model_rows(&mut report, &name, &h, family, &params, &test)?;
    let mut text = report.render();
    if let Some(base_path) = baseline {
        let (bh, bfam, bparams) = model_leaf_params(base_path)?;
        if bh.names() != h.names() || bfam != family {
            return Err(Error::Model(
                "baseline model hierarchy/family does not match".into(),
            ));
        }
        let mut base_name = file_stem(base_path);
        if base_name == name {
            base_name.push_str("-baseline");
        }
        eval_model_rows(&mut report, &base_name, &bh, bfam, &bparams, &test)?;
        text = report.render();
        text.push_str("# mean deltas vs baseline (bits)\n");
        for (method, n, delta) in report.deltas_vs(&base_name, "bits") {
            text.push_str(&format!("# {method}\t{n}\t{delta:.12e}\n"));
        }
    }
    write_or_print(out, &text)?;
    if out.is_some() {
        println!("report written");
    }
    Ok(())
}

fn cmd_classify(model: &Path, data: &Path, train_data: Option<&Path>) -> Result<()> {
    let (h, family, params) = model_leaf_params(model)?;
    let Family::Multinomial { .. } = family else {
        return Err(Error::Config("classify requires a multinomial model".into()));
    };
    let leaves = h.leaves();
    let class_logits: Vec<Vec<f64>> = leaves.iter().map(|l| params[l].clone()).collect();
    let priors = match train_data {
        None => vec![0.0; leaves.len()],
        Some(path) => {
            let docs = parse_docs(&std::fs::read_to_string(path)?)?;
            let grouped = group_by_leaf(&h, docs)?;
            let counts: Vec<usize> = leaves
                .iter()
                .map(|l| grouped.get(l).map_or(0, |d| d.len()))
                .collect();
            hbtransfer::eval::log_priors(&counts, hbtransfer::eval::ClassPriors::Empirical)
        }
    };
    let docs = parse_docs(&std::fs::read_to_string(data)?)?;
    let mut correct = 0usize;
    let mut labeled = 0usize;
    for (label, doc) in &docs {
        let pred = hbtransfer::eval::classify(doc, &class_logits, &priors)?;
        let pred_name = h.name(leaves[pred]);
        println!("{label}\t{pred_name}");
        if label == pred_name {
            correct += 1;
        }
        if h.node_by_name(label).is_some() {
            labeled += 1;
        }
    }
    if labeled > 0 {
        println!("# accuracy\t{:.6}", correct as f64 / labeled as f64);
    }
    Ok(())
}

fn data_extension(family: FamilyArg) -> &'static str {
    match family {
        FamilyArg::Gaussian => "csv",
        FamilyArg::Multinomial => "docs",
    }
}

fn render_datamap(h: &Hierarchy, data: &DataMap, family: Family) -> String {
    match family {
        Family::Gaussian { .. } => {
            let mut rows = Vec::new();
            for (&leaf, raw) in data {
                if let RawData::Gaussian(r) = raw {
                    rows.extend(r.iter().map(|row| (h.name(leaf).to_string(), row.clone())));
                }
            }
            render_gaussian_csv(&rows)
        }
        Family::Multinomial { .. } => {
            let mut docs = Vec::new();
            for (&leaf, raw) in data {
                if let RawData::Docs(d) = raw {
                    docs.extend(d.iter().map(|doc| (h.name(leaf).to_string(), doc.clone())));
                }
            }
            render_docs(&docs)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn build_synth_spec(
    family: FamilyArg,
    dim: Option<usize>,
    vocab: Option<usize>,
    depth: usize,
    branching: usize,
    perturbation: f64,
    train: usize,
    test: usize,
    tokens: usize,
    seed: u64,
) -> Result<SynthSpec> {
    let family = match family {
        FamilyArg::Gaussian => Family::Gaussian {
            dim: dim.ok_or_else(|| Error::Config("--dim is required for gaussian".into()))?,
        },
        FamilyArg::Multinomial => Family::Multinomial {
            vocab: vocab.ok_or_else(|| Error::Config("--vocab is required for multinomial".into()))?,
        },
    };
    Ok(SynthSpec {
        family,
        depth,
        branching,
        perturbation,
        train_per_leaf: train,
        test_per_leaf: test,
        tokens_per_doc: tokens,
        seed,
    })
}

fn cmd_synth(spec: &SynthSpec, family_arg: FamilyArg, out_dir: &Path) -> Result<()> {
    let out = synth_generate(spec)?;
    std::fs::create_dir_all(out_dir)?;
    let h = &out.hierarchy;
    let hier_file = HierarchyFile::from_hierarchy(h);
    let hier_json = serde_json::to_string_pretty(&hier_file)
        .map_err(|e| Error::Model(e.to_string()))?;
    std::fs::write(out_dir.join("hierarchy.json"), hier_json + "\n")?;
    let ext = data_extension(family_arg);
    std::fs::write(
        out_dir.join(format!("train.{ext}")),
        render_datamap(h, &out.train, spec.family),
    )?;
    std::fs::write(
        out_dir.join(format!("test.{ext}")),
        render_datamap(h, &out.test, spec.family),
    )?;
    let node_dim = ParamIndex::new(h, spec.family)?.node_dim();
    let mut state = Vec::new();
    for node in 0..h.len() {
        state.extend_from_slice(&out.truth[&node]);
    }
    let provenance = serde_json::json!({
        "synthetic": true,
        "seed": spec.seed,
        "perturbation": spec.perturbation,
    });
    let truth_model = ModelFile::new(h, spec.family, &state, node_dim, None, provenance)?;
    save_model(&out_dir.join("truth.json"), &truth_model)?;
    println!(
        "wrote hierarchy.json, train.{ext}, test.{ext}, truth.json to {}",
        out_dir.display()
    );
    Ok(())
}

/// One sweep cell: a (N, fold) dataset evaluated under one method.
fn run_sweep_method(
    method: MethodArg,
    h: &Hierarchy,
    layout: &ParamIndex,
    family: Family,
    train: &DataMap,
    objective: &ObjectiveFlags,
    boot: &BootstrapFlags,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    let alpha_grid = CvGrid {
        values: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
        folds: 5,
        seed,
    };
    match method {
        MethodArg::Cvreg => Ok(fit_cvreg(train, family, &alpha_grid)?.0),
        MethodArg::Likelihood => fit_likelihood(train, family),
        MethodArg::Shrinkage => {
            let grid = CvGrid {
                values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                folds: 5,
                seed,
            };
            let all = fit_shrinkage(h, train, family, &grid)?;
            Ok(h.leaves().into_iter().map(|l| (l, all[&l].clone())).collect())
        }
        MethodArg::Cvconst => {
            let grid = CvGrid {
                values: vec![1e-6, 1e-4, 1e-2, 1e-1, 1.0],
                folds: 5,
                seed,
            };
            let (fit, _beta) = fit_cvconst(h, layout, train, objective.alpha, &grid, opt)?;
            Ok(leaf_blocks(h, layout, &fit.state))
        }
        MethodArg::Hb | MethodArg::HbBootstrap | MethodArg::HbHyperprior => {
            let mut config = ObjectiveConfig::new(family, objective.beta, objective.alpha);
            config.divergence = objective.divergence_spec();
            let mode = match method {
                MethodArg::Hb => DotModeArg::None,
                MethodArg::HbBootstrap => DotModeArg::Bootstrap,
                _ => DotModeArg::Hyperprior,
            };
            let fit = fit_with_mode(h, layout, train, &mut config, mode, boot, opt, seed)?;
            Ok(leaf_blocks(h, layout, &fit.state))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    base_spec: &SynthSpec,
    family_arg: FamilyArg,
    n_list: &[usize],
    folds: usize,
    methods: &[MethodArg],
    metric: MetricArg,
    objective: &ObjectiveFlags,
    boot: &BootstrapFlags,
    opt: &OptimizerConfig,
    seed: u64,
    jobs: Option<usize>,
    out: Option<&Path>,
    plot_out: Option<&Path>,
) -> Result<()> {
    if n_list.is_empty() || folds == 0 || methods.is_empty() {
        return Err(Error::Config("sweep needs N values, folds, and methods".into()));
    }
    if metric == MetricArg::Accuracy && family_arg == FamilyArg::Gaussian {
        return Err(Error::Config("accuracy metric requires multinomial data".into()));
    }
    let _ = family_arg;
    // cells: (N, fold, method); the dataset seed ignores the method so every
    // method within a cell sees identical data
    let mut cells = Vec::new();
    for &n in n_list {
        for fold in 0..folds {
            for (mi, &method) in methods.iter().enumerate() {
                cells.push((n, fold, mi, method));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<hbtransfer::eval::EvalRow>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(n, fold, mi, method)| {
                let data_seed = mix_seed(&[seed, n as u64, fold as u64]);
                let method_seed = mix_seed(&[seed, n as u64, fold as u64, mi as u64]);
                let spec = SynthSpec {
                    train_per_leaf: n,
                    seed: data_seed,
                    ..base_spec.clone()
                };
                let data = synth_generate(&spec)?;
                let h = &data.hierarchy;
                let layout = ParamIndex::new(h, spec.family)?;
                let params = run_sweep_method(
                    method, h, &layout, spec.family, &data.train, objective, boot, opt,
                    method_seed,
                )?;
                let mut report = EvalReport::default();
                eval_model_rows(&mut report, method.name(), h, spec.family, &params, &data.test)?;
                Ok(report
                    .rows
                    .into_iter()
                    .map(|mut r| {
                        r.n = n; // report training size, not test size
                        r
                    })
                    .collect())
            })
            .collect()
    });
    let mut report = EvalReport::default();
    for rows in results {
        report.rows.extend(rows?);
    }
    let metric_name = match metric {
        MetricArg::Bits => "bits",
        MetricArg::Accuracy => "accuracy",
    };
    if let Some(path) = out {
        std::fs::write(path, report.render())?;
    }
    let baseline = methods[0].name();
    let deltas = report.deltas_vs(baseline, metric_name);
    let mut table = format!("method\tN\tmean_delta_{metric_name}_vs_{baseline}\n");
    let mut plot = String::new();
    for (method, n, delta) in &deltas {
        table.push_str(&format!("{method}\t{n}\t{delta:.12e}\n"));
        plot.push_str(&format!("{n}\t{method}\t{delta:.12e}\n"));
    }
    print!("{table}");
    if let Some(path) = plot_out {
        std::fs::write(path, plot)?;
    }
    Ok(())
}

fn cmd_bootstrap(
    hierarchy: &Path,
    data: &Path,
    family: FamilyArg,
    vocab: Option<usize>,
    alpha: f64,
    boot: &BootstrapFlags,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let h = load_hierarchy(hierarchy)?;
    let (family, data) = load_data(&h, data, family, vocab)?;
    let layout = ParamIndex::new(&h, family)?;
    let config = ObjectiveConfig::new(family, 1.0, alpha);
    let cfg = BootstrapConfig {
        resamples: boot.resamples,
        seed,
        variance_floor: boot.variance_floor,
    };
    let dot = bootstrap_dot(&h, &layout, &data, &cfg, alpha, &config.mask, boot.granularity.into())?;
    let mut text = String::from("child\tcoord\tlambda\n");
    for (child, values) in &dot.values {
        for (coord, v) in values.iter().enumerate() {
            text.push_str(&format!("{}\t{coord}\t{v:.12e}\n", h.name(*child)));
        }
    }
    write_or_print(out, &text)?;
    Ok(())
}

fn cmd_tokenize(input: &Path, out_docs: &Path, out_vocab: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| Error::Parse {
            location: format!("line {}", lineno + 1),
            message: "expected 'label<TAB>text'".into(),
        })?;
        records.push((label.to_string(), body.to_string()));
    }
    let (vocab, docs) = tokenize(&records);
    std::fs::write(out_docs, render_docs(&docs))?;
    let mut vocab_text = String::new();
    for (id, tok) in vocab.iter().enumerate() {
        vocab_text.push_str(&format!("{id}\t{tok}\n"));
    }
    std::fs::write(out_vocab, vocab_text)?;
    println!("{} tokens in vocabulary, {} documents", vocab.len(), docs.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut opt = OptimizerConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)?;
        let file: FileConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("config:{}:{}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        file.apply(&mut opt);
    }
    match &cli.command {
        Cmd::Fit {
            hierarchy,
            data,
            family,
            vocab,
            objective,
            dot_mode,
            bootstrap,
            out,
        } => cmd_fit(
            hierarchy, data, *family, *vocab, objective, *dot_mode, bootstrap, out, &opt, cli.seed,
        ),
        Cmd::Eval {
            model,
            data,
            baseline,
            out,
        } => cmd_eval(model, data, baseline.as_deref(), out.as_deref()),
        Cmd::Classify {
            model,
            data,
            train_data,
        } => cmd_classify(model, data, train_data.as_deref()),
        Cmd::Synth {
            family,
            dim,
            vocab,
            depth,
            branching,
            perturbation,
            train,
            test,
            tokens,
            out_dir,
        } => {
            let spec = build_synth_spec(
                *family,
                *dim,
                *vocab,
                *depth,
                *branching,
                *perturbation,
                *train,
                *test,
                *tokens,
                cli.seed,
            )?;
            cmd_synth(&spec, *family, out_dir)
        }
        Cmd::Sweep {
            family,
            dim,
            vocab,
            depth,
            branching,
            perturbation,
            n_list,
            test,
            tokens,
            folds,
            methods,
            metric,
            objective,
            bootstrap,
            out,
            plot_out,
        } => {
            let spec = build_synth_spec(
                *family,
                *dim,
                *vocab,
                *depth,
                *branching,
                *perturbation,
                1, // replaced per cell
                *test,
                *tokens,
                cli.seed,
            )?;
            cmd_sweep(
                &spec,
                *family,
                n_list,
                *folds,
                methods,
                *metric,
                objective,
                bootstrap,
                &opt,
                cli.seed,
                cli.jobs,
                out.as_deref(),
                plot_out.as_deref(),
            )
        }
        Cmd::Bootstrap {
            hierarchy,
            data,
            family,
            vocab,
            alpha,
            bootstrap,
            out,
        } => cmd_bootstrap(
            hierarchy,
            data,
            *family,
            *vocab,
            *alpha,
            bootstrap,
            cli.seed,
            out.as_deref(),
        ),
        Cmd::Tokenize {
            input,
            out_docs,
            out_vocab,
        } => cmd_tokenize(input, out_docs, out_vocab),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NotPositiveDefinite | Error::Optimizer(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
