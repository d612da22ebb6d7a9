mod common;

use common::{normal_matrix, rng};
use csscgg::cggm::CggmModel;
use csscgg::data::StandardizeRecord;
use csscgg::graph::*;
use csscgg::linalg::Mat;
use csscgg::ssanova::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Beta, Distribution};

fn beta_rows(seed: u64, n: usize, d: usize) -> Mat {
    let mut r = rng(seed);
    let b = Beta::new(2.0, 3.0).unwrap();
    Mat::from_fn(n, d, |_, _| b.sample(&mut r))
}

/// Rows with a strong dependence between the first two columns.
fn dependent_rows(seed: u64, n: usize, d: usize) -> Mat {
    let mut r = rng(seed);
    let mut x = normal_matrix(&mut r, n, d);
    for i in 0..n {
        let s = if r.gen::<bool>() { 1.5 } else { -1.5 };
        x[(i, 0)] += s;
        x[(i, 1)] = x[(i, 0)] * x[(i, 0)] * 0.5 + 0.3 * x[(i, 1)];
    }
    x
}

fn fit(x: &Mat, config: KernelConfig, base: BaseKind) -> SsAnovaModel {
    let opts = SsAnovaOptions {
        config: Some(config),
        base,
        representers: Some(20),
        ..Default::default()
    };
    fit_logistic_density(x, 1e-3, None, None, &opts).unwrap()
}

fn cggm(theta: Mat) -> CggmModel {
    let p = theta.ncols();
    let mut lambda = Mat::identity(p, p) * 2.0;
    for k in 0..p.saturating_sub(1) {
        lambda[(k, k + 1)] = 0.4;
        lambda[(k + 1, k)] = 0.4;
    }
    CggmModel::from_parts(lambda, theta, 0.0, 0.0).unwrap()
}

fn random_theta(seed: u64, d: usize, p: usize) -> Mat {
    let mut r = rng(seed);
    normal_matrix(&mut r, d, p) * 0.5
}

fn zeta_for(x: &Mat, config: KernelConfig, base: BaseKind, theta: Mat) -> ZetaModel {
    build_zeta(&fit(x, config, base), &cggm(theta), None).unwrap()
}

fn all_pairs(d: usize) -> Subspace {
    Subspace::with_pairs((0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))))
}

#[test]
fn tilde_v_examples() {
    let q = Quadrature::new(QuadratureRule::GaussLegendre { nodes_per_dim: 10 }, 1).unwrap();
    let f: Vec<f64> = (0..q.len()).map(|t| q.node(t)[0]).collect();
    assert!((tilde_v(&f, &f, &q) - 1.0 / 12.0).abs() < 1e-14);
    let ones = vec![3.0; q.len()];
    let g: Vec<f64> = f.iter().map(|u| (5.0 * u).sin()).collect();
    assert!(tilde_v(&ones, &g, &q).abs() < 1e-14);
    assert!((tilde_v(&f, &g, &q) - tilde_v(&g, &f, &q)).abs() < 1e-15);
    assert!(tilde_v(&g, &g, &q) >= 0.0);
}

#[test]
fn zero_theta_leaves_eta_unchanged() {
    let x = beta_rows(1, 80, 2);
    let z = zeta_for(
        &x,
        KernelConfig::two_way(2),
        BaseKind::MarginalKde,
        Mat::zeros(2, 4),
    );
    assert!(z.m_hat.iter().all(|&v| v == 0.0));
    for i in 0..10 {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        assert_eq!(z.eval(&row).unwrap(), z.ssanova.eval_eta(&row).unwrap());
    }
}

#[test]
fn scalar_delta_is_minus_half_square() {
    let x = beta_rows(2, 60, 1);
    let mut theta = Mat::zeros(1, 3);
    theta[(0, 0)] = 1.0;
    let m = CggmModel::from_parts(Mat::identity(3, 3), theta, 0.0, 0.0).unwrap();
    let z = build_zeta(
        &fit(&x, KernelConfig::additive(1), BaseKind::Uniform),
        &m,
        None,
    )
    .unwrap();
    for v in [-2.0, 0.3, 1.7] {
        assert!((z.delta(&[v]) + 0.5 * v * v).abs() < 1e-15);
    }
}

#[test]
fn delta_uses_the_standardized_coordinates() {
    let x = beta_rows(3, 60, 2);
    let model = cggm(random_theta(3, 2, 3));
    let rec = StandardizeRecord {
        x_mean: vec![0.4, 0.1],
        x_scale: vec![2.0, 0.5],
        ..StandardizeRecord::identity(2, 3)
    };
    let z = build_zeta(
        &fit(&x, KernelConfig::two_way(2), BaseKind::Uniform),
        &model,
        Some(&rec),
    )
    .unwrap();
    let m = model.m_hat();
    let pt = [0.9, -0.3];
    let s = rec.forward_x(&pt);
    let want =
        -0.5 * (s[0] * s[0] * m[(0, 0)] + 2.0 * s[0] * s[1] * m[(0, 1)] + s[1] * s[1] * m[(1, 1)]);
    assert!((z.delta(&pt) - want).abs() < 1e-12);
}

#[test]
fn m_hat_matches_explicit_inverse_and_is_psd() {
    let x = beta_rows(4, 60, 3);
    for seed in 0..5 {
        let model = cggm(random_theta(10 + seed, 3, 6));
        let z = build_zeta(
            &fit(&x, KernelConfig::additive(3), BaseKind::Uniform),
            &model,
            None,
        )
        .unwrap();
        let inv = model.lambda.clone().try_inverse().unwrap();
        let want = &model.theta * inv * model.theta.transpose();
        assert!((&z.m_hat - &want).amax() < 1e-12);
        assert_eq!(z.m_hat, z.m_hat.transpose());
        let min = z.m_hat.clone().symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-10, "min eigenvalue {min}");
    }
    let wrong = cggm(random_theta(1, 2, 4));
    assert!(build_zeta(
        &fit(&x, KernelConfig::additive(3), BaseKind::Uniform),
        &wrong,
        None
    )
    .is_err());
}

#[test]
fn projecting_onto_everything_leaves_no_residual() {
    for base in [BaseKind::Uniform, BaseKind::MarginalKde] {
        let x = dependent_rows(5, 120, 3);
        let z = zeta_for(&x, KernelConfig::two_way(3), base, random_theta(5, 3, 4));
        let r = project(&z, &all_pairs(3)).unwrap();
        assert!(r.ratio < 1e-8, "{base:?}: {}", r.ratio);
        let a = project(&z, &Subspace::additive()).unwrap();
        assert!(
            a.ratio > 1e-3,
            "{base:?}: dependence should show, got {}",
            a.ratio
        );
    }
}

#[test]
fn additive_zeta_projects_onto_the_additive_space() {
    for base in [BaseKind::Uniform, BaseKind::MarginalKde] {
        let x = beta_rows(6, 100, 3);
        // disjoint supports in Θ with a diagonal Λ make M̂ diagonal
        let mut theta = Mat::zeros(3, 3);
        theta[(0, 0)] = 0.8;
        theta[(1, 1)] = -0.5;
        theta[(2, 2)] = 0.3;
        let m = CggmModel::from_parts(Mat::identity(3, 3) * 1.5, theta, 0.0, 0.0).unwrap();
        let z = build_zeta(&fit(&x, KernelConfig::additive(3), base), &m, None).unwrap();
        let r = project(&z, &Subspace::additive()).unwrap();
        assert!(r.ratio < 1e-8, "{base:?}: {}", r.ratio);
        let pw = pairwise_ratios(&z).unwrap();
        assert!(pw.iter().all(|&v| v < 0.01));
        let sel = forward_select(&z, DEFAULT_CUTOFF, Ranking::Upfront).unwrap();
        assert!(sel.pi.iter().flatten().all(|&v| v == 0));
        assert!(sel.order.is_empty());
    }
}

/// Weighted least squares of the target on the basis plus a constant,
/// solved by QR on a fine grid independent of the fit quadrature.
fn dense_ratio(z: &ZetaModel, s0: &Subspace) -> f64 {
    let m = &z.ssanova;
    let fine = Quadrature::new(QuadratureRule::GaussLegendre { nodes_per_dim: 60 }, 2).unwrap();
    let t = fine.len();
    let reps: Vec<Vec<f64>> = (0..m.q())
        .map(|j| m.representers.row(j).iter().copied().collect())
        .collect();
    let pairs: Vec<(usize, usize)> = s0.pairs.iter().copied().collect();
    let mut cols: Vec<Box<dyn Fn(&[f64]) -> f64>> = vec![Box::new(|_| 1.0)];
    for k in 0..2 {
        cols.push(Box::new(move |u| k1(u[k])));
        cols.push(Box::new(move |u| k1(u[k]) * k1(u[k])));
        if !m.base.is_uniform() {
            cols.push(Box::new(move |u| m.base.marginal_log(k, u[k])));
        }
    }
    for &(a, b) in &pairs {
        cols.push(Box::new(move |u| k1(u[a]) * k1(u[b])));
    }
    for z_j in &reps {
        let z_j = z_j.clone();
        let keep: Vec<(Term, f64)> = m
            .config
            .terms
            .iter()
            .zip(&m.theta)
            .filter(|(term, _)| match term {
                Term::Main(_) => true,
                Term::Interaction(a, b) => pairs.contains(&(*a, *b)),
            })
            .map(|(term, &w)| (*term, w))
            .collect();
        cols.push(Box::new(move |u| {
            keep.iter().map(|(term, w)| w * term.kernel(u, &z_j)).sum()
        }));
    }
    let mut weights = Vec::with_capacity(t);
    let mut target = Vec::with_capacity(t);
    for i in 0..t {
        let u = fine.node(i);
        let x = m.domain.from_unit(&u);
        weights.push(fine.weights[i] * m.base.log_density(&u).exp());
        target.push(z.eval(&x).unwrap() + m.base.log_density(&u));
    }
    let total: f64 = weights.iter().sum();
    let a = Mat::from_fn(t, cols.len(), |i, c| {
        (weights[i] / total).sqrt() * cols[c](&fine.node(i))
    });
    let y = Mat::from_fn(t, 1, |i, _| (weights[i] / total).sqrt() * target[i]);
    let qr = a.clone().qr();
    let coef = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * &y))
        .unwrap();
    let resid = &y - &a * coef;
    let mean: f64 = (0..t).map(|i| weights[i] / total * target[i]).sum();
    let denom: f64 = (0..t)
        .map(|i| weights[i] / total * (target[i] - mean).powi(2))
        .sum();
    resid.norm_squared() / denom
}

#[test]
fn ratio_matches_a_dense_least_squares_oracle() {
    for base in [BaseKind::Uniform, BaseKind::MarginalKde] {
        let x = dependent_rows(7, 150, 2);
        let opts = SsAnovaOptions {
            base,
            representers: Some(20),
            quadrature: Some(QuadratureRule::GaussLegendre { nodes_per_dim: 64 }),
            ..Default::default()
        };
        let m = fit_logistic_density(&x, 1e-3, None, None, &opts).unwrap();
        let z = build_zeta(&m, &cggm(random_theta(7, 2, 3)), None).unwrap();
        let got = project(&z, &Subspace::additive()).unwrap().ratio;
        let want = dense_ratio(&z, &Subspace::additive());
        assert!((got - want).abs() < 1e-4, "{base:?}: {got} vs {want}");
    }
}

#[test]
fn pairwise_ratios_agree_with_direct_projection() {
    let x = dependent_rows(8, 120, 2);
    let z = zeta_for(
        &x,
        KernelConfig::two_way(2),
        BaseKind::MarginalKde,
        random_theta(8, 2, 3),
    );
    let pw = pairwise_ratios(&z).unwrap();
    let direct = project(&z, &Subspace::additive()).unwrap().ratio;
    assert_eq!(pw[(0, 1)], direct);
    assert_eq!(pw[(1, 0)], direct);
    assert_eq!(pw[(0, 0)], 0.0);

    let x = dependent_rows(9, 120, 3);
    let z = zeta_for(
        &x,
        KernelConfig::two_way(3),
        BaseKind::MarginalKde,
        random_theta(9, 3, 3),
    );
    let pw = pairwise_ratios(&z).unwrap();
    assert_eq!(pw, pw.transpose());
    let s0 = Subspace::with_pairs([(2, 1), (0, 2)]);
    assert_eq!(pw[(0, 1)], project(&z, &s0).unwrap().ratio);
    // the dependent pair dominates
    assert!(pw[(0, 1)] > pw[(0, 2)] && pw[(0, 1)] > pw[(1, 2)]);
}

#[test]
fn zero_cutoff_includes_every_pair() {
    let x = dependent_rows(10, 120, 3);
    let z = zeta_for(
        &x,
        KernelConfig::two_way(3),
        BaseKind::MarginalKde,
        random_theta(10, 3, 3),
    );
    for ranking in [Ranking::Upfront, Ranking::Greedy] {
        let sel = forward_select(&z, 0.0, ranking).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(sel.pi[i][j], u8::from(i != j));
            }
        }
        assert_eq!(sel.order.len(), 3);
        assert_eq!(sel.ratios.len(), 4);
        for w in sel.ratios.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{:?}", sel.ratios);
        }
    }
    let up = forward_select(&z, 0.0, Ranking::Upfront).unwrap();
    assert_eq!(up.order[0], (0, 1));
    assert!(forward_select(&z, 1.0, Ranking::Upfront).is_err());
    assert!(forward_select(&z, -0.1, Ranking::Upfront).is_err());
}

#[test]
fn forward_selection_adds_the_dependent_pair_first() {
    let x = dependent_rows(11, 200, 3);
    let z = zeta_for(
        &x,
        KernelConfig::two_way(3),
        BaseKind::MarginalKde,
        Mat::zeros(3, 3),
    );
    let sel = forward_select(&z, 1e-6, Ranking::Upfront).unwrap();
    assert_eq!(sel.order[0], (0, 1));
    assert!(sel.ratios[1] < 0.5 * sel.ratios[0], "{:?}", sel.ratios);
    let greedy = forward_select(&z, 1e-6, Ranking::Greedy).unwrap();
    assert_eq!(greedy.order[0], (0, 1));
}

#[test]
fn pythagorean_identity_holds() {
    for base in [BaseKind::Uniform, BaseKind::MarginalKde] {
        let x = dependent_rows(12, 120, 3);
        let z = zeta_for(&x, KernelConfig::two_way(3), base, random_theta(12, 3, 4));
        for s0 in [Subspace::additive(), Subspace::with_pairs([(0, 2)])] {
            let r = project(&z, &s0).unwrap();
            let b = z.basis(&s0);
            let coef = Mat::from_column_slice(b.ncols(), 1, &r.coefficients);
            let fitted: Vec<f64> = (&b * coef).iter().copied().collect();
            let v_fit = tilde_v(&fitted, &fitted, z.quadrature());
            let target = z.target_on_nodes();
            assert!(
                (tilde_v(&target, &target, z.quadrature()) - r.denominator).abs()
                    < 1e-9 * r.denominator
            );
            let lhs = r.denominator;
            let rhs = r.residual + v_fit;
            assert!((lhs - rhs).abs() < 1e-6 * lhs, "{base:?}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn enlarging_the_subspace_never_increases_the_residual() {
    let x = dependent_rows(13, 120, 3);
    let z = zeta_for(
        &x,
        KernelConfig::two_way(3),
        BaseKind::MarginalKde,
        random_theta(13, 3, 4),
    );
    let chain = [
        Subspace::additive(),
        Subspace::with_pairs([(1, 2)]),
        Subspace::with_pairs([(1, 2), (0, 2)]),
        all_pairs(3),
    ];
    let res: Vec<f64> = chain
        .iter()
        .map(|s| project(&z, s).unwrap().residual)
        .collect();
    for w in res.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-14, "{res:?}");
    }
    assert!(project(&z, &Subspace::with_pairs([(0, 3)])).is_err());
    assert!(project(&z, &Subspace::with_pairs([(1, 1)])).is_err());
}

#[test]
fn ratios_are_deterministic_under_pair_order() {
    let x = dependent_rows(14, 100, 3);
    let z = zeta_for(
        &x,
        KernelConfig::two_way(3),
        BaseKind::MarginalKde,
        random_theta(14, 3, 3),
    );
    let a = project(&z, &Subspace::with_pairs([(0, 1), (1, 2)])).unwrap();
    let b = project(&z, &Subspace::with_pairs([(2, 1), (1, 0)])).unwrap();
    assert_eq!(a, b);
    assert_eq!(pairwise_ratios(&z).unwrap(), pairwise_ratios(&z).unwrap());
}

fn names(d: usize, p: usize) -> Vec<String> {
    (0..d)
        .map(|k| format!("gene{k}"))
        .chain((0..p).map(|k| format!("prot{k}")))
        .collect()
}

#[test]
fn empty_and_complete_graphs() {
    let m = CggmModel::from_parts(Mat::identity(3, 3), Mat::zeros(2, 3), 0.0, 0.0).unwrap();
    let g = assemble_graph(&m, &[vec![0, 0], vec![0, 0]], None, None).unwrap();
    assert_eq!(g.edge_count(), 0);
    assert!(g.adjacency.iter().flatten().all(|&v| v == 0));
    assert_eq!(g.nodes, vec!["x0", "x1", "y0", "y1", "y2"]);

    let mut lambda = Mat::from_element(3, 3, 0.2);
    lambda.fill_diagonal(2.0);
    let m = CggmModel::from_parts(lambda, Mat::from_element(2, 3, -0.1), 0.0, 0.0).unwrap();
    let g = assemble_graph(&m, &[vec![0, 1], vec![1, 0]], None, None).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(g.adjacency[i][j], u8::from(i != j));
        }
    }
    assert_eq!(g.edge_count(), 10);
    assert!(g.edges[0].weight.is_nan());
}

#[test]
fn block_supports_replay_elementwise() {
    let mut r = rng(15);
    let (d, p) = (3, 6);
    for _ in 0..10 {
        let mut theta = Mat::zeros(d, p);
        let mut lambda = Mat::identity(p, p) * 3.0;
        for i in 0..d {
            for k in 0..p {
                if r.gen::<f64>() < 0.3 {
                    theta[(i, k)] = r.gen_range(-1.0..1.0);
                }
            }
        }
        for k in 0..p {
            for l in k + 1..p {
                if r.gen::<f64>() < 0.3 {
                    let v = r.gen_range(-0.4..0.4);
                    lambda[(k, l)] = v;
                    lambda[(l, k)] = v;
                }
            }
        }
        let mut pi = vec![vec![0u8; d]; d];
        pi[0][2] = 1; // one triangle only; the graph symmetrizes
        let m = CggmModel::from_parts(lambda.clone(), theta.clone(), 0.0, 0.0).unwrap();
        let pw = Mat::from_fn(d, d, |i, j| if i == j { 0.0 } else { 0.5 });
        let g = assemble_graph(&m, &pi, Some(&pw), Some(names(d, p))).unwrap();
        for a in 0..d + p {
            assert_eq!(g.adjacency[a][a], 0);
            for b in 0..d + p {
                assert_eq!(g.adjacency[a][b], g.adjacency[b][a]);
                let want = match (a < d, b < d) {
                    (true, true) => (a, b) == (0, 2) || (a, b) == (2, 0),
                    (true, false) => theta[(a, b - d)].abs() > EDGE_TOL,
                    (false, true) => theta[(b, a - d)].abs() > EDGE_TOL,
                    (false, false) => a != b && lambda[(a - d, b - d)].abs() > EDGE_TOL,
                };
                assert_eq!(g.adjacency[a][b], u8::from(want), "({a}, {b})");
            }
        }
        assert_eq!(g.pi[2][0], 1);
        let xx: Vec<&Edge> = g.edges.iter().filter(|e| e.block == Block::XX).collect();
        assert_eq!(xx.len(), 1);
        assert_eq!(xx[0].weight, 0.5);
    }
    let m = CggmModel::from_parts(Mat::identity(2, 2), Mat::zeros(2, 2), 0.0, 0.0).unwrap();
    assert!(assemble_graph(&m, &[vec![0]], None, None).is_err());
    assert!(assemble_graph(&m, &[vec![0, 0], vec![0, 0]], None, Some(names(1, 1))).is_err());
}

#[test]
fn exports_list_every_edge() {
    let mut lambda = Mat::identity(2, 2);
    lambda[(0, 1)] = 0.25;
    lambda[(1, 0)] = 0.25;
    let mut theta = Mat::zeros(2, 2);
    theta[(1, 0)] = -0.5;
    let m = CggmModel::from_parts(lambda, theta, 0.0, 0.0).unwrap();
    let mut node_names = names(2, 2);
    node_names[0] = "a \"quoted\" gene".into();
    let g = assemble_graph(&m, &[vec![0, 1], vec![1, 0]], None, Some(node_names)).unwrap();
    let tsv = g.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "node_i\tnode_j\tblock\tweight");
    assert_eq!(lines[1], "a \"quoted\" gene\tgene1\tXX\tNaN");
    assert_eq!(lines[2], "gene1\tprot0\tXY\t0.5");
    assert_eq!(lines[3], "prot0\tprot1\tYY\t0.25");
    let dot = g.to_dot();
    assert!(dot.starts_with("graph csscgg {"));
    assert!(dot.contains("\"a \\\"quoted\\\" gene\" [shape=box];"));
    assert!(dot.contains("\"prot1\" [shape=ellipse];"));
    assert!(dot.contains("\"gene1\" -- \"prot0\" [style=bold, color=blue];"));
    assert!(dot.contains("style=dashed, color=red"));
    let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["adjacency"][2][3], 1);
    assert_eq!(v["nodes"][3], "prot1");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ratios_stay_in_the_unit_interval(seed in 0u64..10_000, kde in any::<bool>()) {
        let base = if kde { BaseKind::MarginalKde } else { BaseKind::Uniform };
        let x = dependent_rows(seed, 60, 3);
        let z = zeta_for(&x, KernelConfig::two_way(3), base, random_theta(seed, 3, 3));
        for s0 in [Subspace::additive(), Subspace::with_pairs([(0, 1)]), all_pairs(3)] {
            let r = project(&z, &s0).unwrap();
            prop_assert!(r.ratio >= 0.0 && r.ratio <= 1.0 + 1e-8, "{}", r.ratio);
            prop_assert!(r.residual <= r.denominator + 1e-10);
        }
        let sel = forward_select(&z, DEFAULT_CUTOFF, Ranking::Greedy).unwrap();
        for w in sel.ratios.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8);
        }
    }
}
