//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see them on success).

use std::collections::BTreeMap;
use std::process::Command;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use hbtransfer::baselines::{fit_cvreg, fit_likelihood, fit_shrinkage, CvGrid};
use hbtransfer::estimate::{
    bootstrap_dot, build_node_data, fit_map, BootstrapConfig, DataMap, DotGranularity,
    InitPolicy, RawData,
};
use hbtransfer::eval::{accuracy, gaussian_test_bits};
use hbtransfer::gradcheck::{central_diff, max_mismatch};
use hbtransfer::hierarchy::{Family, Group, Hierarchy, ParamIndex};
use hbtransfer::io::{parse_model, render_model, ModelFile};
use hbtransfer::likelihoods::{
    gaussian_ml, gaussian_stats, multinomial_ml, ut_index, ut_len, GaussianParams, SparseDoc,
};
use hbtransfer::objective::{
    DivergenceSpec, DotCoefficients, DotMode, HyperpriorSpec, JointProblem, ObjectiveConfig,
    TyingMask,
};
use hbtransfer::optimize::{cg_minimize, cg_minimize_subset, OptimizerConfig};
use hbtransfer::synth::{synth_generate, SynthSpec};

fn verdict(criterion: usize, name: &str, ok: bool) {
    println!(
        "criterion {criterion:2} ({name}): {}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} ({name}) failed");
}

fn fork3() -> Hierarchy {
    Hierarchy::build(
        &["root".into(), "a".into(), "b".into()],
        &[("a".into(), "root".into()), ("b".into(), "root".into())],
    )
    .unwrap()
}

/// Random rooted tree on `n` nodes; parent of node i is uniform over 0..i.
fn random_tree(rng: &mut StdRng, n: usize) -> Hierarchy {
    let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let edges: Vec<(String, String)> = (1..n)
        .map(|i| (names[i].clone(), names[rng.gen_range(0..i)].clone()))
        .collect();
    Hierarchy::build(&names, &edges).unwrap()
}

/// Random feasible node block: means U(-1,1); precision diagonally dominant
/// (hence PD) with log-diagonal jitter.
fn random_gaussian_block(rng: &mut StdRng, d: usize) -> Vec<f64> {
    let mut block = vec![0.0; d + ut_len(d)];
    for v in block.iter_mut().take(d) {
        *v = rng.gen_range(-1.0..1.0);
    }
    for i in 0..d {
        for j in i..d {
            let idx = d + ut_index(i, j, d);
            block[idx] = if i == j {
                rng.gen_range(-0.3..0.3f64).exp()
            } else {
                rng.gen_range(-0.1..0.1) / d as f64
            };
        }
    }
    block
}

fn random_docs(rng: &mut StdRng, vocab: usize, n_docs: usize) -> Vec<SparseDoc> {
    (0..n_docs)
        .map(|_| {
            (0..vocab)
                .filter_map(|w| {
                    let c = rng.gen_range(0..4);
                    (c > 0).then_some((w, c as f64))
                })
                .collect()
        })
        .collect()
}

fn random_dot(rng: &mut StdRng, h: &Hierarchy, node_dim: usize) -> DotCoefficients {
    let values = (0..h.len())
        .filter(|&n| h.parent(n).is_some())
        .map(|n| {
            (
                n,
                (0..node_dim).map(|_| rng.gen_range(-2.0..1.0f64).exp()).collect(),
            )
        })
        .collect();
    DotCoefficients { values }
}

fn hbt_bin() -> &'static str {
    env!("CARGO_BIN_EXE_hbt")
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = std::time::Instant::now();
    let divergences = [
        DivergenceSpec::L2,
        DivergenceSpec::L1Smoothed { smoothing: 1e-2 },
        DivergenceSpec::EpsInsensitive { epsilon: 0.5 },
    ];
    let mut worst = 0.0f64;
    for family_case in 0..2 {
        for inst in 0..25usize {
            let mut rng = StdRng::seed_from_u64(9000 + (family_case * 100 + inst) as u64);
            let n_nodes = rng.gen_range(3..=7);
            let h = random_tree(&mut rng, n_nodes);
            let family = if family_case == 0 {
                Family::Gaussian { dim: [2, 3, 5][inst % 3] }
            } else {
                Family::Multinomial { vocab: [3, 8, 20][inst % 3] }
            };
            let layout = ParamIndex::new(&h, family).unwrap();
            let alpha = if family_case == 0 { 0.2 } else { 1.0 };
            let raw: DataMap = h
                .leaves()
                .into_iter()
                .map(|l| {
                    let d = match family {
                        Family::Gaussian { dim } => RawData::Gaussian(
                            (0..6)
                                .map(|_| (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
                                .collect(),
                        ),
                        Family::Multinomial { vocab } => RawData::Docs(random_docs(&mut rng, vocab, 4)),
                    };
                    (l, d)
                })
                .collect();
            let node_data = build_node_data(&raw, family, alpha).unwrap();
            let divergence = divergences[inst % 3].clone();
            let hyper = inst % 2 == 1;
            let mut config = ObjectiveConfig::new(family, 0.8, alpha);
            config.divergence = divergence.clone();
            config.dot_mode = if hyper { DotMode::Hyperprior } else { DotMode::Fixed };
            let dot = random_dot(&mut rng, &h, layout.node_dim());
            let prior = hyper
                .then(|| HyperpriorSpec::from_reference(&dot, HyperpriorSpec::DEFAULT_SHAPE).unwrap());
            let problem =
                JointProblem::new(&h, &layout, &node_data, &config, Some(&dot), prior.as_ref())
                    .unwrap();
            let mut theta = vec![0.0; layout.total_dim()];
            for node in 0..h.len() {
                let block = match family {
                    Family::Gaussian { dim } => random_gaussian_block(&mut rng, dim),
                    Family::Multinomial { vocab } => {
                        (0..vocab).map(|_| rng.gen_range(-1.0..1.0)).collect()
                    }
                };
                theta[layout.node_block(node)].copy_from_slice(&block);
            }
            // keep eps-insensitive kinks away from the FD stencil
            if let DivergenceSpec::EpsInsensitive { epsilon } = divergence {
                for child in h.edge_children() {
                    let parent = h.parent(child).unwrap();
                    for local in config.mask.tied_coords() {
                        let ci = layout.node_block(child).start + local;
                        let pi = layout.node_block(parent).start + local;
                        let delta = theta[ci] - theta[pi];
                        if (delta.abs() - epsilon).abs() < 1e-3 {
                            theta[ci] += 5e-3;
                        }
                    }
                }
            }
            let x = problem.initial_state(&theta);
            assert!(problem.feasible(&x), "instance {inst} infeasible");
            let analytic = problem.grad(&x).unwrap();
            let numeric = central_diff(|z| problem.value(z).unwrap(), &x, 1e-5);
            let mismatch = max_mismatch(&analytic, &numeric, 1e-8);
            worst = worst.max(mismatch);
            assert!(
                mismatch <= 1e-5,
                "family case {family_case} instance {inst}: mismatch {mismatch:.3e}"
            );
        }
    }
    let ok = worst <= 1e-5 && start.elapsed().as_secs() <= 10;
    verdict(1, "gradient correctness", ok);
}

#[test]
fn criterion_02_convexity_suite() {
    let start = std::time::Instant::now();
    let mut rng = StdRng::seed_from_u64(202);
    let tol = |avg: f64| 1e-9 * avg.abs().max(1.0);

    // (a) multinomial joint objective, fixed lambda
    let h = fork3();
    let fam_m = Family::Multinomial { vocab: 4 };
    let layout_m = ParamIndex::new(&h, fam_m).unwrap();
    let raw_m: DataMap = [
        (1usize, RawData::Docs(random_docs(&mut rng, 4, 3))),
        (2usize, RawData::Docs(random_docs(&mut rng, 4, 3))),
    ]
    .into_iter()
    .collect();
    let data_m = build_node_data(&raw_m, fam_m, 1.0).unwrap();
    let mut cfg_m = ObjectiveConfig::new(fam_m, 1.0, 1.0);
    cfg_m.dot_mode = DotMode::Fixed;
    let dot_m = random_dot(&mut rng, &h, layout_m.node_dim());
    let prob_m = JointProblem::new(&h, &layout_m, &data_m, &cfg_m, Some(&dot_m), None).unwrap();
    let mut ok_a = true;
    for _ in 0..100 {
        let x: Vec<f64> = (0..layout_m.total_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..layout_m.total_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| (a + b) / 2.0).collect();
        let avg = (prob_m.value(&x).unwrap() + prob_m.value(&y).unwrap()) / 2.0;
        ok_a &= prob_m.value(&mid).unwrap() <= avg + tol(avg);
    }

    // Gaussian problem shared by (b) and (c)
    let d = 3;
    let fam_g = Family::Gaussian { dim: d };
    let layout_g = ParamIndex::new(&h, fam_g).unwrap();
    let raw_g: DataMap = [
        (
            1usize,
            RawData::Gaussian((0..6).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()),
        ),
        (
            2usize,
            RawData::Gaussian((0..6).map(|_| (0..d).map(|_| rng.gen_range(0.0..2.0)).collect()).collect()),
        ),
    ]
    .into_iter()
    .collect();
    let data_g = build_node_data(&raw_g, fam_g, 0.2).unwrap();
    let mut cfg_g = ObjectiveConfig::new(fam_g, 1.0, 0.2);
    cfg_g.dot_mode = DotMode::Fixed;
    let dot_g = random_dot(&mut rng, &h, layout_g.node_dim());
    let prob_g = JointProblem::new(&h, &layout_g, &data_g, &cfg_g, Some(&dot_g), None).unwrap();
    let base: Vec<f64> = {
        let mut theta = vec![0.0; layout_g.total_dim()];
        for node in 0..h.len() {
            theta[layout_g.node_block(node)].copy_from_slice(&random_gaussian_block(&mut rng, d));
        }
        theta
    };

    // (b) restricted to means
    let mut ok_b = true;
    for _ in 0..100 {
        let mut x = base.clone();
        let mut y = base.clone();
        for node in 0..h.len() {
            for i in layout_g.block(node, Group::Mean) {
                x[i] = rng.gen_range(-2.0..2.0);
                y[i] = rng.gen_range(-2.0..2.0);
            }
        }
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| (a + b) / 2.0).collect();
        let avg = (prob_g.value(&x).unwrap() + prob_g.value(&y).unwrap()) / 2.0;
        ok_b &= prob_g.value(&mid).unwrap() <= avg + tol(avg);
    }

    // (c) restricted to precisions along PD-preserving segments (the PD cone
    // is convex, so the midpoint of two PD endpoints stays feasible)
    let mut ok_c = true;
    for _ in 0..100 {
        let mut x = base.clone();
        let mut y = base.clone();
        for node in 0..h.len() {
            let bx = random_gaussian_block(&mut rng, d);
            let by = random_gaussian_block(&mut rng, d);
            for (k, i) in layout_g.block(node, Group::Precision).enumerate() {
                x[i] = bx[d + k];
                y[i] = by[d + k];
            }
        }
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| (a + b) / 2.0).collect();
        assert!(prob_g.feasible(&mid));
        let avg = (prob_g.value(&x).unwrap() + prob_g.value(&y).unwrap()) / 2.0;
        ok_c &= prob_g.value(&mid).unwrap() <= avg + tol(avg);
    }

    // (d) the perspective term d^2 / lambda, jointly in (d, lambda)
    let mut ok_d = true;
    let f = |d: f64, l: f64| d * d / l;
    for _ in 0..100 {
        let (d1, l1) = (rng.gen_range(-3.0..3.0), rng.gen_range(0.05..4.0));
        let (d2, l2) = (rng.gen_range(-3.0..3.0), rng.gen_range(0.05..4.0));
        let avg = (f(d1, l1) + f(d2, l2)) / 2.0;
        ok_d &= f((d1 + d2) / 2.0, (l1 + l2) / 2.0) <= avg + tol(avg);
    }

    let ok = ok_a && ok_b && ok_c && ok_d && start.elapsed().as_secs() <= 5;
    verdict(2, "convexity suite", ok);
}

#[test]
fn criterion_03_beta_zero_reduction() {
    let start = std::time::Instant::now();
    let mut rng = StdRng::seed_from_u64(303);
    let h = fork3();
    let opt = OptimizerConfig::default();
    let mut ok = true;

    // multinomial: leaf logits equal smoothed frequencies up to gauge
    let fam_m = Family::Multinomial { vocab: 3 };
    let layout_m = ParamIndex::new(&h, fam_m).unwrap();
    let counts = [(1usize, [4.0, 1.0, 0.0]), (2usize, [0.0, 2.0, 5.0])];
    let data_m: DataMap = [
        (1usize, RawData::Docs(vec![vec![(0, 4.0), (1, 1.0)]])),
        (2usize, RawData::Docs(vec![vec![(1, 2.0), (2, 5.0)]])),
    ]
    .into_iter()
    .collect();
    let cfg = ObjectiveConfig::new(fam_m, 0.0, 1.0);
    let fit = fit_map(&h, &layout_m, &data_m, &cfg, None, None, &opt, &InitPolicy::PooledRoot)
        .unwrap();
    for (leaf, c) in counts {
        let expect = multinomial_ml(&c, 1.0);
        let block = &fit.state[layout_m.block(leaf, Group::Logits)];
        let gauge = block[0] - expect[0];
        for (b, e) in block.iter().zip(&expect) {
            ok &= (b - e - gauge).abs() <= 1e-6;
        }
    }

    // Gaussian: leaf parameters equal the ridged ML closed form
    let d = 2;
    let fam_g = Family::Gaussian { dim: d };
    let layout_g = ParamIndex::new(&h, fam_g).unwrap();
    let rows_a: Vec<Vec<f64>> =
        (0..10).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let rows_b: Vec<Vec<f64>> =
        (0..10).map(|_| (0..d).map(|_| rng.gen_range(1.0..3.0)).collect()).collect();
    let data_g: DataMap = [
        (1usize, RawData::Gaussian(rows_a.clone())),
        (2usize, RawData::Gaussian(rows_b.clone())),
    ]
    .into_iter()
    .collect();
    let cfg = ObjectiveConfig::new(fam_g, 0.0, 0.3);
    let fit = fit_map(&h, &layout_g, &data_g, &cfg, None, None, &opt, &InitPolicy::PooledRoot)
        .unwrap();
    for (leaf, rows) in [(1usize, &rows_a), (2usize, &rows_b)] {
        let expect = gaussian_ml(&gaussian_stats(rows, d).unwrap(), 0.3).unwrap().to_flat();
        let block = &fit.state[layout_g.node_block(leaf)];
        for (b, e) in block.iter().zip(&expect) {
            ok &= (b - e).abs() <= 1e-6;
        }
    }

    ok &= start.elapsed().as_secs() <= 5;
    verdict(3, "beta = 0 reduction to independent ML", ok);
}

#[test]
fn criterion_04_agreement_limit() {
    let start = std::time::Instant::now();
    let h = fork3();
    let opt = OptimizerConfig::default();
    let mut gap = 0.0f64;

    // multinomial toy
    let fam_m = Family::Multinomial { vocab: 3 };
    let layout_m = ParamIndex::new(&h, fam_m).unwrap();
    let data_m: DataMap = [
        (1usize, RawData::Docs(vec![vec![(0, 6.0), (1, 1.0)]])),
        (2usize, RawData::Docs(vec![vec![(1, 1.0), (2, 6.0)]])),
    ]
    .into_iter()
    .collect();
    let mut cfg = ObjectiveConfig::new(fam_m, 1.0, 1.0);
    cfg.dot_mode = DotMode::Fixed;
    let dot = DotCoefficients::uniform(&h, layout_m.node_dim(), 1e-8);
    let fit = fit_map(&h, &layout_m, &data_m, &cfg, Some(&dot), None, &opt, &InitPolicy::PooledRoot)
        .unwrap();
    for child in h.edge_children() {
        let cb = layout_m.node_block(child).start;
        let pb = layout_m.node_block(h.parent(child).unwrap()).start;
        for local in cfg.mask.tied_coords() {
            gap = gap.max((fit.state[cb + local] - fit.state[pb + local]).abs());
        }
    }

    // Gaussian toy (1-d): tied coordinates are the mean and the precision
    let fam_g = Family::Gaussian { dim: 1 };
    let layout_g = ParamIndex::new(&h, fam_g).unwrap();
    let data_g: DataMap = [
        (1usize, RawData::Gaussian(vec![vec![0.0], vec![1.0], vec![-0.5]])),
        (2usize, RawData::Gaussian(vec![vec![2.0], vec![3.0], vec![2.5]])),
    ]
    .into_iter()
    .collect();
    let mut cfg = ObjectiveConfig::new(fam_g, 1.0, 0.1);
    cfg.dot_mode = DotMode::Fixed;
    let dot = DotCoefficients::uniform(&h, layout_g.node_dim(), 1e-8);
    let fit = fit_map(&h, &layout_g, &data_g, &cfg, Some(&dot), None, &opt, &InitPolicy::PooledRoot)
        .unwrap();
    for child in h.edge_children() {
        let cb = layout_g.node_block(child).start;
        let pb = layout_g.node_block(h.parent(child).unwrap()).start;
        for local in cfg.mask.tied_coords() {
            gap = gap.max((fit.state[cb + local] - fit.state[pb + local]).abs());
        }
    }

    let ok = gap <= 1e-3 && start.elapsed().as_secs() <= 5;
    verdict(4, "tiny-lambda agreement limit", ok);
}

#[test]
fn criterion_05_quadratic_oracle() {
    let start = std::time::Instant::now();
    // two leaves, 1-d, unit precisions, L2, means-only tying: a pure quadratic
    let h = fork3();
    let fam = Family::Gaussian { dim: 1 };
    let layout = ParamIndex::new(&h, fam).unwrap();
    let data: DataMap = [
        (1usize, RawData::Gaussian(vec![vec![0.0], vec![2.0]])),
        (2usize, RawData::Gaussian(vec![vec![4.0], vec![6.0]])),
    ]
    .into_iter()
    .collect();
    let beta = 0.7;
    let mut config = ObjectiveConfig::new(fam, beta, 0.0);
    config.mask = TyingMask::from_coords(vec![true, false]);
    config.validate().unwrap();
    let node_data = build_node_data(&data, fam, 0.0).unwrap();
    let problem = JointProblem::new(&h, &layout, &node_data, &config, None, None).unwrap();
    // stationarity system for the means at K = 1, M = 2 per leaf
    let a_mat = nalgebra::DMatrix::from_row_slice(
        3,
        3,
        &[
            2.0 + 2.0 * beta, 0.0, -2.0 * beta,
            0.0, 2.0 + 2.0 * beta, -2.0 * beta,
            -2.0 * beta, -2.0 * beta, 4.0 * beta,
        ],
    );
    let rhs = nalgebra::DVector::from_column_slice(&[2.0, 10.0, 0.0]);
    let solution = a_mat.lu().solve(&rhs).unwrap(); // mu_a, mu_b, mu_r
    let mut x0 = vec![0.0; layout.total_dim()];
    for node in 0..3 {
        x0[layout.block(node, Group::Precision)][0] = 1.0;
    }
    let mean_coords: Vec<usize> =
        (0..3).map(|n| layout.block(n, Group::Mean).start).collect();
    let opt = OptimizerConfig {
        grad_tol: 1e-10,
        ..Default::default()
    };
    let run = cg_minimize_subset(
        |x| problem.value(x),
        |x| problem.grad(x),
        &x0,
        &mean_coords,
        &opt,
        |x| problem.feasible(x),
    )
    .unwrap();
    let got = [
        run.x[layout.block(1, Group::Mean).start],
        run.x[layout.block(2, Group::Mean).start],
        run.x[layout.block(0, Group::Mean).start],
    ];
    let ok = got
        .iter()
        .zip(solution.iter())
        .all(|(g, s)| (g - s).abs() <= 1e-6)
        && start.elapsed().as_secs() <= 1;
    verdict(5, "means-only quadratic matches linear solve", ok);
}

#[test]
fn criterion_06_bootstrap_sanity() {
    let start = std::time::Instant::now();
    let h = fork3();
    let mut ok = true;

    // constant data: lambda hits the variance floor exactly
    let fam_m = Family::Multinomial { vocab: 2 };
    let layout_m = ParamIndex::new(&h, fam_m).unwrap();
    let doc: SparseDoc = vec![(0, 2.0), (1, 1.0)];
    let const_data: DataMap = [
        (1usize, RawData::Docs(vec![doc.clone(); 5])),
        (2usize, RawData::Docs(vec![doc; 5])),
    ]
    .into_iter()
    .collect();
    let cfg = BootstrapConfig {
        resamples: 10,
        seed: 3,
        variance_floor: 1e-6,
    };
    let mask_m = TyingMask::default_for(fam_m);
    let dot = bootstrap_dot(&h, &layout_m, &const_data, &cfg, 1.0, &mask_m, DotGranularity::PerCoordinate)
        .unwrap();
    ok &= dot.values.values().all(|v| v.iter().all(|&l| l == 1e-6));

    // fixed seed: byte-identical coefficients
    let mut rng = StdRng::seed_from_u64(606);
    let fam_g = Family::Gaussian { dim: 2 };
    let layout_g = ParamIndex::new(&h, fam_g).unwrap();
    let rows = |rng: &mut StdRng, c: f64| -> Vec<Vec<f64>> {
        (0..8).map(|_| (0..2).map(|_| c + rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let data_g: DataMap = [
        (1usize, RawData::Gaussian(rows(&mut rng, 0.0))),
        (2usize, RawData::Gaussian(rows(&mut rng, 1.0))),
    ]
    .into_iter()
    .collect();
    let cfg_g = BootstrapConfig {
        resamples: 20,
        seed: 99,
        variance_floor: 1e-6,
    };
    let mask_g = TyingMask::default_for(fam_g);
    let a = bootstrap_dot(&h, &layout_g, &data_g, &cfg_g, 0.1, &mask_g, DotGranularity::PerCoordinate)
        .unwrap();
    let b = bootstrap_dot(&h, &layout_g, &data_g, &cfg_g, 0.1, &mask_g, DotGranularity::PerCoordinate)
        .unwrap();
    ok &= a
        .values
        .iter()
        .zip(&b.values)
        .all(|((n1, v1), (n2, v2))| {
            n1 == n2
                && v1.len() == v2.len()
                && v1.iter().zip(v2).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    // closed-form oracle on the 1-d two-leaf toy, K = 200:
    // delta = (xbar*_a - xbar*_b)/2, so var = (v_a + v_b)/4 with v = sigma^2_emp/M
    let fam1 = Family::Gaussian { dim: 1 };
    let layout1 = ParamIndex::new(&h, fam1).unwrap();
    let m = 40;
    let rows_a: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
    let rows_b: Vec<Vec<f64>> = (0..m).map(|_| vec![0.5 + rng.gen_range(-1.0..1.0)]).collect();
    let emp_var = |rows: &[Vec<f64>]| {
        let mean: f64 = rows.iter().map(|r| r[0]).sum::<f64>() / m as f64;
        rows.iter().map(|r| (r[0] - mean).powi(2)).sum::<f64>() / m as f64
    };
    let expect = (emp_var(&rows_a) / m as f64 + emp_var(&rows_b) / m as f64) / 4.0;
    let data1: DataMap = [
        (1usize, RawData::Gaussian(rows_a)),
        (2usize, RawData::Gaussian(rows_b)),
    ]
    .into_iter()
    .collect();
    let cfg1 = BootstrapConfig {
        resamples: 200,
        seed: 5,
        variance_floor: 1e-12,
    };
    let mask1 = TyingMask::default_for(fam1);
    let dot1 = bootstrap_dot(&h, &layout1, &data1, &cfg1, 0.1, &mask1, DotGranularity::PerCoordinate)
        .unwrap();
    let lam = dot1.values[&1][0];
    ok &= (lam - expect).abs() / expect < 0.25;

    ok &= start.elapsed().as_secs() <= 10;
    verdict(6, "bootstrap sanity", ok);
}

/// Mean test bits/instance over leaves for per-leaf parameter blocks.
fn mean_gaussian_bits(
    h: &Hierarchy,
    dim: usize,
    params: &BTreeMap<usize, Vec<f64>>,
    test: &DataMap,
) -> f64 {
    let leaves = h.leaves();
    let mut total = 0.0;
    for &leaf in &leaves {
        let RawData::Gaussian(rows) = &test[&leaf] else { panic!() };
        total += gaussian_test_bits(&GaussianParams::from_flat(&params[&leaf], dim), rows).unwrap();
    }
    total / leaves.len() as f64
}

#[test]
fn criterion_07_directional_transfer_benefit() {
    let start = std::time::Instant::now();
    let dim = 10;
    let mut boot_wins = 0;
    let mut hyper_wins = 0;
    for seed in 0..5u64 {
        let spec = SynthSpec {
            family: Family::Gaussian { dim },
            depth: 1,
            branching: 2,
            perturbation: 0.1,
            train_per_leaf: 5,
            test_per_leaf: 20,
            tokens_per_doc: 0,
            seed: 7000 + seed,
        };
        let data = synth_generate(&spec).unwrap();
        let h = &data.hierarchy;
        let layout = ParamIndex::new(h, spec.family).unwrap();

        let grid = CvGrid {
            values: vec![1e-2, 1e-1, 1.0, 10.0],
            folds: 5,
            seed,
        };
        let (cvreg_params, chosen) = fit_cvreg(&data.train, spec.family, &grid).unwrap();
        let cvreg_bits = mean_gaussian_bits(h, dim, &cvreg_params, &data.test);

        // the transfer fits reuse the cross-validated ridge so the comparison
        // isolates the hierarchy penalty
        let alpha = chosen.values().sum::<f64>() / chosen.len() as f64;
        let boot_cfg = BootstrapConfig {
            resamples: 50,
            seed,
            variance_floor: 1e-6,
        };
        let mask = TyingMask::default_for(spec.family);
        let dot = bootstrap_dot(h, &layout, &data.train, &boot_cfg, alpha, &mask, DotGranularity::PerCoordinate)
            .unwrap();
        let opt = OptimizerConfig {
            grad_tol: 1e-5,
            max_iters: 1000,
            outer_block_iters: 10,
            ..Default::default()
        };

        let mut cfg = ObjectiveConfig::new(spec.family, 1.0, alpha);
        cfg.dot_mode = DotMode::Fixed;
        let fit_b = fit_map(h, &layout, &data.train, &cfg, Some(&dot), None, &opt, &InitPolicy::IndependentMl)
            .unwrap();
        let boot_params: BTreeMap<usize, Vec<f64>> = h
            .leaves()
            .into_iter()
            .map(|l| (l, fit_b.state[layout.node_block(l)].to_vec()))
            .collect();
        let boot_bits = mean_gaussian_bits(h, dim, &boot_params, &data.test);

        cfg.dot_mode = DotMode::Hyperprior;
        let fit_h = fit_map(h, &layout, &data.train, &cfg, Some(&dot), None, &opt, &InitPolicy::IndependentMl)
            .unwrap();
        let hyper_params: BTreeMap<usize, Vec<f64>> = h
            .leaves()
            .into_iter()
            .map(|l| (l, fit_h.state[layout.node_block(l)].to_vec()))
            .collect();
        let hyper_bits = mean_gaussian_bits(h, dim, &hyper_params, &data.test);

        if boot_bits > cvreg_bits {
            boot_wins += 1;
        }
        if hyper_bits > cvreg_bits {
            hyper_wins += 1;
        }
    }
    let ok = boot_wins >= 4 && hyper_wins >= 4 && start.elapsed().as_secs() <= 120;
    println!("  transfer wins over cvreg: bootstrap {boot_wins}/5, hyperprior {hyper_wins}/5");
    verdict(7, "directional transfer benefit (bits)", ok);
}

#[test]
fn criterion_08_directional_classification_benefit() {
    let start = std::time::Instant::now();
    let vocab = 500;
    let mut vs_shrinkage = 0;
    let mut vs_likelihood = 0;
    for seed in 0..5u64 {
        let spec = SynthSpec {
            family: Family::Multinomial { vocab },
            depth: 2,
            branching: 3, // 3 branches x 3 leaves
            perturbation: 0.5,
            train_per_leaf: 10,
            test_per_leaf: 11, // 99 test documents total
            tokens_per_doc: 50,
            seed: 8000 + seed,
        };
        let data = synth_generate(&spec).unwrap();
        let h = &data.hierarchy;
        let layout = ParamIndex::new(h, spec.family).unwrap();
        let leaves = h.leaves();
        let labeled: Vec<(usize, SparseDoc)> = leaves
            .iter()
            .enumerate()
            .flat_map(|(pos, l)| {
                let RawData::Docs(docs) = &data.test[l] else { panic!() };
                docs.iter().map(move |d| (pos, d.clone())).collect::<Vec<_>>()
            })
            .collect();
        let priors = vec![0.0; leaves.len()];
        let acc_of = |params: &BTreeMap<usize, Vec<f64>>| {
            let logits: Vec<Vec<f64>> = leaves.iter().map(|l| params[l].clone()).collect();
            accuracy(&labeled, &logits, &priors).unwrap()
        };

        // simplified Undirected-HB: beta = 1, no per-parameter coefficients
        let cfg = ObjectiveConfig::new(spec.family, 1.0, 1.0);
        let opt = OptimizerConfig::default();
        let fit = fit_map(h, &layout, &data.train, &cfg, None, None, &opt, &InitPolicy::IndependentMl)
            .unwrap();
        let hb_params: BTreeMap<usize, Vec<f64>> = leaves
            .iter()
            .map(|&l| (l, fit.state[layout.node_block(l)].to_vec()))
            .collect();
        let hb_acc = acc_of(&hb_params);

        let grid = CvGrid {
            values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            folds: 5,
            seed,
        };
        let shr = fit_shrinkage(h, &data.train, spec.family, &grid).unwrap();
        let shr_params: BTreeMap<usize, Vec<f64>> =
            leaves.iter().map(|&l| (l, shr[&l].clone())).collect();
        let shr_acc = acc_of(&shr_params);

        let lik_params = fit_likelihood(&data.train, spec.family).unwrap();
        let lik_acc = acc_of(&lik_params);

        if hb_acc >= shr_acc {
            vs_shrinkage += 1;
        }
        if hb_acc > lik_acc {
            vs_likelihood += 1;
        }
    }
    let ok = vs_shrinkage >= 4 && vs_likelihood >= 4 && start.elapsed().as_secs() <= 300;
    println!("  hb >= shrinkage on {vs_shrinkage}/5 seeds, hb > likelihood on {vs_likelihood}/5");
    verdict(8, "directional classification benefit (accuracy)", ok);
}

#[test]
fn criterion_09_optimizer() {
    let start = std::time::Instant::now();
    let mut ok = true;

    // seeded SPD quadratics, n = 20, solved to 1e-6 of the LU solution
    for seed in 0..3u64 {
        let mut rng = StdRng::seed_from_u64(900 + seed);
        let n = 20;
        let m = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + nalgebra::DMatrix::identity(n, n);
        let b = nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let f = |x: &[f64]| {
            let v = nalgebra::DVector::from_column_slice(x);
            Ok(0.5 * (&a * &v).dot(&v) - b.dot(&v))
        };
        let g = |x: &[f64]| {
            let v = nalgebra::DVector::from_column_slice(x);
            Ok((&a * &v - &b).iter().cloned().collect())
        };
        let run = cg_minimize(f, g, &vec![0.0; n], &OptimizerConfig::default(), |_| true).unwrap();
        let exact = a.clone().lu().solve(&b).unwrap();
        // lambda_min(A) > 1, so a gradient below 1e-6 pins x within 1e-6
        for (x, e) in run.x.iter().zip(exact.iter()) {
            ok &= (x - e).abs() <= 1e-6;
        }
        ok &= run.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }

    // objective traces are non-increasing in accepted runs of the full driver
    let mut rng = StdRng::seed_from_u64(950);
    let h = fork3();
    let fam = Family::Gaussian { dim: 2 };
    let layout = ParamIndex::new(&h, fam).unwrap();
    let data: DataMap = [
        (
            1usize,
            RawData::Gaussian((0..8).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()),
        ),
        (
            2usize,
            RawData::Gaussian((0..8).map(|_| vec![rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)]).collect()),
        ),
    ]
    .into_iter()
    .collect();
    for mode in [DotMode::None, DotMode::Fixed, DotMode::Hyperprior] {
        let mut cfg = ObjectiveConfig::new(fam, 1.0, 0.1);
        cfg.dot_mode = mode;
        let dot = (mode != DotMode::None)
            .then(|| DotCoefficients::uniform(&h, layout.node_dim(), 0.5));
        let fit = fit_map(
            &h,
            &layout,
            &data,
            &cfg,
            dot.as_ref(),
            None,
            &OptimizerConfig::default(),
            &InitPolicy::IndependentMl,
        )
        .unwrap();
        ok &= fit.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }

    ok &= start.elapsed().as_secs() <= 5;
    verdict(9, "optimizer accuracy and monotone traces", ok);
}

#[test]
fn criterion_10_roundtrip_and_determinism() {
    let mut ok = true;

    // library-level: save -> load -> save byte-identical for a fitted model
    let h = fork3();
    let fam = Family::Multinomial { vocab: 4 };
    let layout = ParamIndex::new(&h, fam).unwrap();
    let data: DataMap = [
        (1usize, RawData::Docs(vec![vec![(0, 3.0), (1, 1.0)]])),
        (2usize, RawData::Docs(vec![vec![(2, 2.0), (3, 4.0)]])),
    ]
    .into_iter()
    .collect();
    let cfg = ObjectiveConfig::new(fam, 1.0, 1.0);
    let fit = fit_map(
        &h,
        &layout,
        &data,
        &cfg,
        None,
        None,
        &OptimizerConfig::default(),
        &InitPolicy::IndependentMl,
    )
    .unwrap();
    let model = ModelFile::new(&h, fam, &fit.state, layout.node_dim(), Some(&fit.dot),
        serde_json::json!({"beta": 1.0}))
        .unwrap();
    let text = render_model(&model).unwrap();
    let back = parse_model(&text).unwrap();
    ok &= render_model(&back).unwrap() == text;

    // binary-level: cmd_sweep byte-identical at --jobs 1 and --jobs 8
    let sweep = |jobs: &str| -> Vec<u8> {
        let out = Command::new(hbt_bin())
            .args([
                "--seed", "17", "--jobs", jobs, "sweep", "--family", "multinomial", "--vocab",
                "15", "--depth", "1", "--branching", "2", "--perturbation", "0.5", "--n-list",
                "3,5", "--test", "6", "--tokens", "15", "--folds", "2", "--methods",
                "cvreg,hb", "--metric", "bits",
            ])
            .output()
            .expect("failed to run hbt sweep");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let first = sweep("1");
    ok &= first == sweep("8");
    ok &= first == sweep("1");

    verdict(10, "round-trip and determinism", ok);
}

#[test]
fn criterion_11_newsgroups_real_data() {
    // optional: requires a prepared corpus directory with hierarchy.json,
    // train.docs, and test.docs (word-id counts, labels = leaf names)
    let Ok(dir) = std::env::var("HBT_NEWSGROUPS_DIR") else {
        println!("criterion 11 (newsgroup real data): SKIP (corpus absent)");
        return;
    };
    let dir = std::path::Path::new(&dir);
    let h = hbtransfer::io::load_hierarchy(&dir.join("hierarchy.json")).unwrap();
    let load = |name: &str| -> DataMap {
        let docs =
            hbtransfer::io::parse_docs(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap();
        hbtransfer::io::group_by_leaf(&h, docs)
            .unwrap()
            .into_iter()
            .map(|(n, d)| (n, RawData::Docs(d)))
            .collect()
    };
    let train = load("train.docs");
    let test = load("test.docs");
    let vocab = train
        .values()
        .chain(test.values())
        .flat_map(|r| {
            let RawData::Docs(docs) = r else { panic!() };
            docs.iter().flatten().map(|&(id, _)| id + 1)
        })
        .max()
        .unwrap();
    let fam = Family::Multinomial { vocab };
    let layout = ParamIndex::new(&h, fam).unwrap();
    let leaves = h.leaves();
    let labeled: Vec<(usize, SparseDoc)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(pos, l)| {
            let RawData::Docs(docs) = &test[l] else { panic!() };
            docs.iter().map(move |d| (pos, d.clone())).collect::<Vec<_>>()
        })
        .collect();
    let priors = vec![0.0; leaves.len()];

    let cfg = ObjectiveConfig::new(fam, 1.0, 1.0);
    let fit = fit_map(
        &h,
        &layout,
        &train,
        &cfg,
        None,
        None,
        &OptimizerConfig::default(),
        &InitPolicy::IndependentMl,
    )
    .unwrap();
    let hb_logits: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&l| fit.state[layout.node_block(l)].to_vec())
        .collect();
    let hb_acc = accuracy(&labeled, &hb_logits, &priors).unwrap();

    let grid = CvGrid {
        values: vec![1e-2, 1e-1, 1.0, 10.0],
        folds: 5,
        seed: 0,
    };
    let (cvreg_params, _) = fit_cvreg(&train, fam, &grid).unwrap();
    let cv_logits: Vec<Vec<f64>> = leaves.iter().map(|l| cvreg_params[l].clone()).collect();
    let cv_acc = accuracy(&labeled, &cv_logits, &priors).unwrap();

    let ok = hb_acc >= cv_acc;
    println!("  hb accuracy {hb_acc:.4} vs cvreg {cv_acc:.4}");
    verdict(11, "newsgroup real data", ok);
}
