use csscgg::data::{
    normality_rank, read_csv, shapiro_wilk, standardize, sufficient_stats, Dataset, Which, XColumns,
};
use csscgg::linalg::Mat;
use proptest::prelude::*;

fn s1(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| (1.7 * i as f64).sin() + 0.01 * i as f64)
        .collect()
}

fn s2(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| (0.05 * ((i * 37) % n) as f64).exp())
        .collect()
}

fn s3(n: usize) -> Vec<f64> {
    (1..=n).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect()
}

// Reference values from scipy.stats.shapiro 1.15.3 on the same samples.
const SW_REFERENCE: &[(&str, usize, f64, f64)] = &[
    ("s1", 3, 0.9701053669401222, 0.6681162762267705),
    ("s1", 5, 0.9084495828249511, 0.4583296001993327),
    ("s1", 11, 0.8962230841817684, 0.16613896520305343),
    ("s1", 20, 0.8903062326215383, 0.027243075592163987),
    ("s1", 50, 0.932746811779302, 0.00703080557161273),
    ("s1", 200, 0.9858834582385761, 0.043297684887314114),
    ("s2", 3, 0.9997917967990887, 0.9724412097043756),
    ("s2", 5, 0.986014202989425, 0.9639694133536159),
    ("s2", 11, 0.9647411237934965, 0.8290770821716974),
    ("s2", 20, 0.9486426173400974, 0.3469554817625443),
    ("s2", 50, 0.8902154095581389, 0.00023193735326332578),
    ("s2", 200, 0.5660004986249723, 4.169235235508063e-22),
    ("s3", 3, 0.9571074087203119, 0.6015744278829936),
    ("s3", 5, 0.9826492101273602, 0.948277556308636),
    ("s3", 11, 0.9494593881798566, 0.6370523344374004),
    ("s3", 20, 0.9398654515363669, 0.238380140580086),
    ("s3", 50, 0.9539530319177686, 0.049692792362951786),
    ("s3", 200, 0.9538475193292201, 4.513977139283256e-06),
];

#[test]
fn shapiro_wilk_matches_reference_values() {
    for &(name, n, w, p) in SW_REFERENCE {
        let sample = match name {
            "s1" => s1(n),
            "s2" => s2(n),
            _ => s3(n),
        };
        let sw = shapiro_wilk(&sample).unwrap();
        assert!((sw.w - w).abs() < 1e-6, "{name} n={n}: W {} vs {w}", sw.w);
        let p_tol = 1e-6_f64.max(1e-4 * p);
        assert!(
            (sw.p_value - p).abs() < p_tol,
            "{name} n={n}: p {} vs {p}",
            sw.p_value
        );
    }
}

#[test]
fn normality_rank_picks_least_gaussian_columns() {
    let n = 200;
    // column 0: skewed, column 1: nearly uniform ranks mapped through a
    // normal quantile approximation, column 2: heavily skewed.
    let c0 = s2(n);
    let c1: Vec<f64> = (1..=n)
        .map(|i| {
            let u = (i as f64 - 0.5) / n as f64;
            // logit is close enough to a normal quantile for this ranking
            (u / (1.0 - u)).ln() / 1.7
        })
        .collect();
    let c2: Vec<f64> = (1..=n)
        .map(|i| ((i * 13) % n) as f64)
        .map(|v| v.powi(4))
        .collect();
    let mut x = Mat::zeros(n, 3);
    for i in 0..n {
        x[(i, 0)] = c0[i];
        x[(i, 1)] = c1[i];
        x[(i, 2)] = c2[i];
    }
    let ds = Dataset::from_blocks(Mat::zeros(n, 0), x).unwrap();
    let order = normality_rank(&ds, 2).unwrap();
    assert_eq!(order.len(), 2);
    assert!(!order.contains(&1));
}

#[test]
fn csv_roundtrip_stats() {
    let text = "a,b,c\n1,2,3\n4,5,6\n-1,0,2\n";
    let ds = read_csv(text.as_bytes(), &XColumns::Names(vec!["b".into()])).unwrap();
    let st = sufficient_stats(&ds);
    assert_eq!(st.n, 3);
    assert!((st.sxx[(0, 0)] - (4.0 + 25.0) / 3.0).abs() < 1e-14);
    // y columns keep file order: a, c
    assert!((st.sxy[(0, 1)] - (2.0 * 3.0 + 5.0 * 6.0) / 3.0).abs() < 1e-14);
}

fn dataset_strategy() -> impl Strategy<Value = (Vec<f64>, usize, usize, usize)> {
    (5usize..20, 1usize..4, 1usize..4).prop_flat_map(|(n, d, p)| {
        (
            prop::collection::vec(-5.0f64..5.0, n * (d + p)),
            Just(n),
            Just(d),
            Just(p),
        )
    })
}

fn build(values: &[f64], n: usize, d: usize, p: usize) -> Dataset {
    let x = Mat::from_fn(n, d, |i, j| values[i * (d + p) + j]);
    let y = Mat::from_fn(n, p, |i, j| values[i * (d + p) + d + j]);
    Dataset::from_blocks(x, y).unwrap()
}

proptest! {
    #[test]
    fn stats_invariant_under_row_permutation((values, n, d, p) in dataset_strategy(), seed in 0u64..1000) {
        let ds = build(&values, n, d, p);
        let mut rows: Vec<usize> = (0..n).collect();
        // deterministic shuffle from the seed
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            rows.swap(i, j);
        }
        let a = sufficient_stats(&ds);
        let b = sufficient_stats(&ds.select_rows(&rows));
        prop_assert!((a.sxx - b.sxx).amax() < 1e-10);
        prop_assert!((a.syy - b.syy).amax() < 1e-10);
        prop_assert!((a.sxy - b.sxy).amax() < 1e-10);
    }

    #[test]
    fn stats_are_symmetric_psd((values, n, d, p) in dataset_strategy()) {
        let st = sufficient_stats(&build(&values, n, d, p));
        prop_assert!((&st.sxx - st.sxx.transpose()).amax() == 0.0);
        prop_assert!((&st.syy - st.syy.transpose()).amax() == 0.0);
        let ev = csscgg::linalg::sym_eigenvalues(&st.syy);
        prop_assert!(ev[0] > -1e-10);
    }

    #[test]
    fn standardized_diagonal_is_fixed((values, n, d, p) in dataset_strategy()) {
        let ds = build(&values, n, d, p);
        let Ok((z, _)) = standardize(&ds, Which::Both) else { return Ok(()); };
        let st = sufficient_stats(&z);
        let target = (n as f64 - 1.0) / n as f64;
        for i in 0..p {
            prop_assert!((st.syy[(i, i)] - target).abs() < 1e-10);
        }
        for i in 0..d {
            prop_assert!((st.sxx[(i, i)] - target).abs() < 1e-10);
        }
    }
}
