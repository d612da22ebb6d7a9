mod common;

use common::rng;
use csscgg::cggm::CggmModel;
use csscgg::graph::{assemble_graph, GraphEstimate};
use csscgg::linalg::Mat;
use csscgg::sim::*;
use csscgg::ssanova::{DomainBox, Quadrature, QuadratureRule};
use csscgg::tuning::Criterion;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn stream_seeds_are_distinct_and_stable() {
    let s: Vec<u64> = (0..50).map(|k| stream_seed(7, k)).collect();
    let mut u = s.clone();
    u.sort_unstable();
    u.dedup();
    assert_eq!(u.len(), 50);
    assert_eq!(stream_seed(7, 3), s[3]);
    assert_ne!(stream_seed(8, 3), s[3]);
}

#[test]
fn mixture_mean_follows_the_law_of_large_numbers() {
    let mix = Mixture::standard(1.0, 0.5);
    let n = 10_000;
    let x = gen_mixture_x(&mix, n, &mut rng(1)).unwrap();
    let dist: f64 = (0..3)
        .map(|k| (x.column(k).mean() - mix.mu1[k]).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(dist < 4.0 * 0.5 / (n as f64).sqrt(), "{dist}");
}

#[test]
fn degenerate_mixture_rows_sit_on_the_means() {
    let mix = Mixture::standard(0.5, 1e-12);
    let x = gen_mixture_x(&mix, 500, &mut rng(2)).unwrap();
    let mut hits = [0, 0];
    for i in 0..500 {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let near = |mu: &[f64]| row.iter().zip(mu).all(|(a, b)| (a - b).abs() < 1e-6);
        if near(&mix.mu1) {
            hits[0] += 1;
        } else {
            assert!(near(&mix.mu2), "row {i}: {row:?}");
            hits[1] += 1;
        }
    }
    assert!(hits[0] > 200 && hits[1] > 200);
    assert!(gen_mixture_x(&Mixture::standard(1.5, 0.1), 5, &mut rng(0)).is_err());
    assert!(gen_mixture_x(&Mixture::standard(0.5, 0.0), 5, &mut rng(0)).is_err());
}

#[test]
fn mixture_density_and_moments_are_consistent() {
    let mix = Mixture::standard(0.9, 0.5);
    let dom = DomainBox::new(vec![-4.0; 3], vec![4.0; 3]).unwrap();
    let q = Quadrature::new(
        QuadratureRule::CompositeGaussLegendre {
            panels: 8,
            nodes_per_panel: 6,
        },
        3,
    )
    .unwrap();
    let vol = dom.volume();
    let mass: f64 = (0..q.len())
        .map(|t| q.weights[t] * vol * mix.log_density(&dom.from_unit(&q.node(t))).exp())
        .sum();
    assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    let x = gen_mixture_x(&mix, 40_000, &mut rng(3)).unwrap();
    let emp = x.tr_mul(&x) / 40_000.0;
    assert!((emp - mix.second_moment()).amax() < 0.03);
}

#[test]
fn sparse_precision_has_the_requested_edge_fraction() {
    let dim = 28;
    let pairs = dim * (dim - 1) / 2;
    let mut edges = 0;
    for seed in 0..50 {
        let om = gen_sparse_precision(dim, 3, 0.2, 0.2, &mut rng(seed)).unwrap();
        for i in 0..dim {
            for j in i + 1..dim {
                let v = om[(i, j)];
                assert_eq!(v, om[(j, i)]);
                if v != 0.0 {
                    assert!((0.1..=0.4).contains(&v.abs()));
                    edges += 1;
                }
            }
        }
        let diag = om[(0, 0)];
        assert!((0..dim).all(|k| om[(k, k)] == diag));
    }
    let frac = edges as f64 / (50 * pairs) as f64;
    assert!((frac - 0.2).abs() < 0.03, "{frac}");
}

#[test]
fn sparse_precision_is_always_positive_definite() {
    for seed in 0..100 {
        let om = gen_sparse_precision(12, 2, 0.4, 0.4, &mut rng(1000 + seed)).unwrap();
        assert!(om.clone().cholesky().is_some(), "seed {seed}");
    }
    let om = gen_sparse_precision(10, 4, 0.5, 0.0, &mut rng(5)).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert_eq!(om[(i, j)], 0.0);
            }
        }
    }
    assert!(gen_sparse_precision(1, 0, 0.2, 0.2, &mut rng(0)).is_err());
}

#[test]
fn conditional_draws_have_the_right_moments() {
    let (n, p) = (10_000, 3);
    let x = Mat::zeros(n, 2);
    let y = sample_y_given_x(&x, &Mat::zeros(2, p), &Mat::identity(p, p), &mut rng(6)).unwrap();
    let cov = y.tr_mul(&y) / n as f64;
    let dev = (cov - Mat::identity(p, p)).norm();
    assert!(dev < 5.0 * p as f64 / (n as f64).sqrt(), "{dev}");

    // X fixed at μ1, p = 1: the mean is -Λ⁻¹Θᵀμ1
    let mix = Mixture::standard(1.0, 1e-12);
    let x = gen_mixture_x(&mix, n, &mut rng(7)).unwrap();
    let theta = Mat::from_column_slice(3, 1, &[0.6, 0.0, 0.0]);
    let y = sample_y_given_x(&x, &theta, &Mat::identity(1, 1), &mut rng(8)).unwrap();
    let mean = y.column(0).mean();
    assert!((mean + 0.6).abs() < 4.0 / (n as f64).sqrt(), "{mean}");
    assert!(sample_y_given_x(&x, &Mat::zeros(2, 1), &Mat::identity(1, 1), &mut rng(0)).is_err());
}

#[test]
fn simulation_is_reproducible_per_seed() {
    let cfg = SimulationConfig {
        n: 50,
        p: 6,
        ..SimulationConfig::table1(0.9, 0.5, 3)
    };
    let (t1, d1) = simulate(&cfg).unwrap();
    let (t2, d2) = simulate(&cfg).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(d1.x, d2.x);
    assert_eq!(d1.y, d2.y);
    let (_, d3) = simulate(&SimulationConfig {
        seed: 4,
        ..cfg.clone()
    })
    .unwrap();
    assert_ne!(d1.x, d3.x);
    assert!(t1.x_adjacency.is_none());
    let (g, _) = simulate(&SimulationConfig {
        n: 50,
        p: 6,
        ..SimulationConfig::table2(50, 1)
    })
    .unwrap();
    assert!(g.x_adjacency.is_some());
    let back = GroundTruth::from_json(&g.to_json().unwrap()).unwrap();
    assert_eq!(back, g);
    assert!(simulate(&SimulationConfig {
        edge_prob: 1.0,
        ..cfg
    })
    .is_err());
}

fn random_cggm(seed: u64, d: usize, p: usize) -> CggmModel {
    let mut r = rng(seed);
    let a = Mat::from_fn(p, p, |_, _| r.gen_range(-0.5..0.5));
    let lambda = &a * a.transpose() + Mat::identity(p, p);
    let theta = Mat::from_fn(d, p, |_, _| r.gen_range(-0.8..0.8));
    CggmModel::from_parts(lambda, theta, 0.0, 0.0).unwrap()
}

fn random_spd(seed: u64, d: usize) -> Mat {
    let mut r = rng(seed);
    let a = Mat::from_fn(d, d, |_, _| r.gen_range(-0.7..0.7));
    &a * a.transpose() + Mat::identity(d, d) * 0.3
}

#[test]
fn symmetric_kl_is_zero_for_identical_models() {
    let m = random_cggm(9, 2, 3);
    let mom = random_spd(9, 2);
    let v = skl_conditional_explicit(&m.theta, &m.lambda, &m.theta, &m.lambda, &mom, &mom).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn symmetric_kl_without_covariates_is_the_gaussian_skl() {
    let a = random_cggm(10, 0, 4);
    let b = random_cggm(11, 0, 4);
    let e = Mat::zeros(0, 0);
    let v = skl_conditional_explicit(&a.theta, &a.lambda, &b.theta, &b.lambda, &e, &e).unwrap();
    let z = vec![0.0; 4];
    let want = gaussian_kl(&z, &a.sigma, &z, &b.sigma).unwrap()
        + gaussian_kl(&z, &b.sigma, &z, &a.sigma).unwrap();
    assert!((v - want).abs() < 1e-12, "{v} vs {want}");
}

/// Mean `m` and covariance of `(X, Y)` when `X ~ N(m, C)` and `Y | X`
/// follows the conditional model.
fn joint(m: &[f64], c: &Mat, model: &CggmModel) -> (Vec<f64>, Mat) {
    let (d, p) = (model.d(), model.p());
    let b = -(&model.sigma * model.theta.transpose()); // E[Y|x] = Bx
    let mv = Mat::from_column_slice(d, 1, m);
    let my = &b * &mv;
    let cxy = c * b.transpose();
    let cyy = &model.sigma + &b * c * b.transpose();
    let mut cov = Mat::zeros(d + p, d + p);
    cov.view_mut((0, 0), (d, d)).copy_from(c);
    cov.view_mut((0, d), (d, p)).copy_from(&cxy);
    cov.view_mut((d, 0), (p, d)).copy_from(&cxy.transpose());
    cov.view_mut((d, d), (p, p)).copy_from(&cyy);
    let mean = m.iter().copied().chain(my.iter().copied()).collect();
    (mean, cov)
}

#[test]
fn joint_skl_decomposes_into_marginal_and_conditional_parts() {
    for seed in 0..5 {
        let (d, p) = (2, 3);
        let m0 = random_cggm(20 + seed, d, p);
        let m1 = random_cggm(40 + seed, d, p);
        let (c0, c1) = (random_spd(60 + seed, d), random_spd(80 + seed, d));
        let (mu0, mu1) = (vec![0.3, -0.2], vec![-0.1, 0.5]);
        let mom = |c: &Mat, mu: &[f64]| {
            let v = Mat::from_column_slice(d, 1, mu);
            c + &v * v.transpose()
        };
        let cond = skl_conditional_explicit(
            &m0.theta,
            &m0.lambda,
            &m1.theta,
            &m1.lambda,
            &mom(&c0, &mu0),
            &mom(&c1, &mu1),
        )
        .unwrap();
        let marg =
            gaussian_kl(&mu0, &c0, &mu1, &c1).unwrap() + gaussian_kl(&mu1, &c1, &mu0, &c0).unwrap();
        let (j0, k0) = joint(&mu0, &c0, &m0);
        let (j1, k1) = joint(&mu1, &c1, &m1);
        let full =
            gaussian_kl(&j0, &k0, &j1, &k1).unwrap() + gaussian_kl(&j1, &k1, &j0, &k0).unwrap();
        assert!(
            (full - (cond + marg)).abs() < 1e-8,
            "{full} vs {}",
            cond + marg
        );
    }
}

#[test]
fn symmetric_kl_matches_monte_carlo() {
    let (d, p) = (2, 3);
    let m0 = random_cggm(5, d, p);
    let m1 = random_cggm(6, d, p);
    let (c0, c1) = (random_spd(7, d), random_spd(8, d));
    let cond_skl = |draws: usize| {
        let mut r = rng(99);
        let mut vals = Vec::with_capacity(draws);
        for (from, other, c) in [(&m0, &m1, &c0), (&m1, &m0, &c1)] {
            let l = c.clone().cholesky().unwrap().l();
            for i in 0..draws / 2 {
                let z = Mat::from_fn(d, 1, |_, _| r.sample::<f64, _>(StandardNormal));
                let x = &l * z;
                let xs: Vec<f64> = x.iter().copied().collect();
                let y =
                    sample_y_given_x(&x.transpose(), &from.theta, &from.lambda, &mut r).unwrap();
                let ys: Vec<f64> = y.iter().copied().collect();
                let v = from.log_density(&xs, &ys) - other.log_density(&xs, &ys);
                if vals.len() <= i {
                    vals.push(v);
                } else {
                    vals[i] += v;
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let exact =
        skl_conditional_explicit(&m0.theta, &m0.lambda, &m1.theta, &m1.lambda, &c0, &c1).unwrap();
    let (mc, se) = cond_skl(200_000);
    assert!((mc - exact).abs() < 3.0 * se, "{mc} ± {se} vs {exact}");
}

#[test]
fn empirical_conditional_kl_matches_a_per_row_oracle() {
    let (d, p) = (2, 4);
    let m0 = random_cggm(12, d, p);
    let m1 = random_cggm(13, d, p);
    let mut r = rng(14);
    let x = Mat::from_fn(30, d, |_, _| r.gen_range(-2.0..2.0));
    let got = kl_cond_empirical(&m0.theta, &m0.lambda, &m1, &x).unwrap();
    let want: f64 = (0..30)
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            gaussian_kl(
                &m0.conditional_mean(&row),
                &m0.sigma,
                &m1.conditional_mean(&row),
                &m1.sigma,
            )
            .unwrap()
        })
        .sum::<f64>()
        / 30.0;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    assert_eq!(
        kl_cond_empirical(&m0.theta, &m0.lambda, &m0, &x).unwrap(),
        0.0
    );
    // a scaled precision with equal Θ
    let scaled = CggmModel::from_parts(&m0.lambda * 2.0, m0.theta.clone(), 0.0, 0.0).unwrap();
    let v = kl_cond_empirical(&m0.theta, &m0.lambda, &scaled, &x).unwrap();
    let want: f64 = (0..30)
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            gaussian_kl(
                &m0.conditional_mean(&row),
                &m0.sigma,
                &scaled.conditional_mean(&row),
                &scaled.sigma,
            )
            .unwrap()
        })
        .sum::<f64>()
        / 30.0;
    assert!((v - want).abs() < 1e-10);
    let rev = Mat::from_fn(30, d, |i, k| x[(29 - i, k)]);
    assert!((kl_cond_empirical(&m0.theta, &m0.lambda, &m1, &rev).unwrap() - got).abs() < 1e-12);
}

#[test]
fn marginal_kl_matches_truncated_normal_monte_carlo() {
    let dom = DomainBox::new(vec![-3.0], vec![3.0]).unwrap();
    let q = Quadrature::new(QuadratureRule::GaussLegendre { nodes_per_dim: 80 }, 1).unwrap();
    let f0 = |x: &[f64]| -0.5 * x[0] * x[0];
    let f1 = |x: &[f64]| -0.5 * (x[0] - 0.1) * (x[0] - 0.1);
    assert!(kl_marginal_x(&f0, &f0, &dom, &q).unwrap().kl.abs() < 1e-8);
    let res = kl_marginal_x(&f0, &f1, &dom, &q).unwrap();
    assert!(res.kl >= -1e-6);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let z0 = (nd.cdf(3.0) - nd.cdf(-3.0)).ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    let z1 = (nd.cdf(2.9) - nd.cdf(-3.1)).ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((res.log_mass_f0 - z0).abs() < 1e-10);
    assert!((res.log_mass_fhat - z1).abs() < 1e-10);
    let mut r = rng(15);
    let mut vals = Vec::with_capacity(1_000_000);
    while vals.len() < 1_000_000 {
        let x: f64 = r.sample(StandardNormal);
        if x.abs() <= 3.0 {
            vals.push((f0(&[x]) - z0) - (f1(&[x]) - z1));
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!(
        (mean - res.kl).abs() < 3.0 * se,
        "{mean} ± {se} vs {}",
        res.kl
    );
    let bad = |_: &[f64]| f64::NEG_INFINITY;
    assert!(kl_marginal_x(&f0, &bad, &dom, &q).is_err());
}

fn yy_graph(p: usize, edges: &[(usize, usize)]) -> GraphEstimate {
    let mut lambda = Mat::identity(p, p) * 2.0;
    for &(i, j) in edges {
        lambda[(i, j)] = 0.3;
        lambda[(j, i)] = 0.3;
    }
    let m = CggmModel::from_parts(lambda, Mat::zeros(0, p), 0.0, 0.0).unwrap();
    assemble_graph(&m, &[], None, None).unwrap()
}

#[test]
fn confusion_hand_case() {
    let truth = yy_graph(4, &[(0, 1), (0, 2)]);
    let est = yy_graph(4, &[(0, 1), (1, 2)]);
    let c = confusion_metrics(&est, &truth, false).unwrap();
    assert_eq!((c.yy.tp, c.yy.fp, c.yy.fn_, c.yy.tn), (1, 1, 1, 3));
    assert_eq!(c.yy.sen, 0.5);
    assert_eq!(c.yy.spe, 0.75);
    assert_eq!(c.yy.f1, 0.5);
    assert_eq!(c.overall, c.yy);

    let perfect = confusion_metrics(&truth, &truth, false).unwrap();
    assert_eq!(
        (perfect.overall.sen, perfect.overall.spe, perfect.overall.f1),
        (1.0, 1.0, 1.0)
    );

    let truth = yy_graph(5, &[(0, 1), (2, 3), (3, 4)]);
    let empty = yy_graph(5, &[]);
    let c = confusion_metrics(&empty, &truth, false).unwrap();
    assert_eq!((c.yy.sen, c.yy.spe, c.yy.f1), (0.0, 1.0, 0.0));
    // nothing true and nothing found
    let c = confusion_metrics(&empty, &empty, false).unwrap();
    assert_eq!((c.yy.sen, c.yy.spe, c.yy.f1), (1.0, 1.0, 1.0));
    assert!(confusion_metrics(&yy_graph(4, &[]), &empty, false).is_err());
}

#[test]
fn covariate_block_is_scored_only_on_request() {
    let m = CggmModel::from_parts(Mat::identity(2, 2), Mat::zeros(2, 2), 0.0, 0.0).unwrap();
    let truth = assemble_graph(&m, &[vec![0, 1], vec![1, 0]], None, None).unwrap();
    let est = assemble_graph(&m, &[vec![0, 0], vec![0, 0]], None, None).unwrap();
    let with = confusion_metrics(&est, &truth, true).unwrap();
    assert_eq!(with.xx.unwrap().fn_, 1);
    assert_eq!(with.overall.fn_, 1);
    let without = confusion_metrics(&est, &truth, false).unwrap();
    assert!(without.xx.is_none());
    assert_eq!(without.overall.fn_, 0);
}

fn small_study(seed: u64) -> StudyReport {
    let cfg = SimulationConfig {
        n: 60,
        p: 4,
        ..SimulationConfig::table2(60, 0)
    };
    let opts = StudyOptions {
        methods: vec![
            Method::Csscgg(Criterion::Bic),
            Method::Mle,
            Method::SinglePenalty(Criterion::Bic),
        ],
        grid_size: 3,
        ..Default::default()
    };
    run_replication_study(&cfg, &opts, 2, seed).unwrap()
}

#[test]
fn studies_are_deterministic_and_aggregate_their_rows() {
    let a = small_study(5);
    let b = small_study(5);
    assert_eq!(a, b);
    assert!(a.failures.is_empty());
    assert_eq!(a.rows.len(), 6);
    assert_eq!(summarize(&a.rows), a.summary);
    let vals = a.values("csscgg_bic", "kl_cond");
    assert_eq!(vals.len(), 2);
    let mean = (vals[0] + vals[1]) / 2.0;
    let sd = ((vals[0] - mean).powi(2) + (vals[1] - mean).powi(2)).sqrt();
    let s = &a.summary["csscgg_bic"]["kl_cond"];
    assert!((s.mean - mean).abs() < 1e-15 && (s.sd - sd).abs() < 1e-15);
    assert_eq!(a.mean("csscgg_bic", "kl_cond"), Some(s.mean));
    for row in &a.rows {
        for key in [
            "kl_cond",
            "kl_x",
            "kl_overall",
            "overall_f1",
            "xx_f1",
            "xy_sen",
            "yy_spe",
        ] {
            assert!(row.metrics.contains_key(key), "{} lacks {key}", row.method);
        }
        assert!(row.metrics["kl_cond"] >= -1e-6 && row.metrics["kl_x"] >= -1e-6);
    }
    let csv = a.to_csv();
    let metric_count: usize = a.rows.iter().map(|r| r.metrics.len()).sum();
    assert_eq!(csv.lines().count(), metric_count + 1);
    assert!(csv.starts_with("replication,seed,method,metric,value\n"));
    let cfg = SimulationConfig::table2(60, 0);
    assert!(run_replication_study(&cfg, &StudyOptions::default(), 0, 1).is_err());
}
