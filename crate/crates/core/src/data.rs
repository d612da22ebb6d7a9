//! Dataset ingestion, block partitioning, standardization and the sufficient
//! statistics shared by every estimator.
//!
//! All `S` matrices divide by `n`. Standardization uses the sample standard
//! deviation (divisor `n - 1`), so a standardized column has `S` diagonal
//! `(n - 1) / n`.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize_in_place, Mat};

/// `n` observations split into a nonparametric block `x` (n×d) and a
/// parametric block `y` (n×p).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub y: Mat,
    /// X names first, then Y names.
    pub column_names: Vec<String>,
}

/// Which columns are taken as the nonparametric block.
#[derive(Debug, Clone)]
pub enum XColumns {
    Names(Vec<String>),
    /// The first `k` columns of the file.
    Count(usize),
}

impl Dataset {
    pub fn new(x: Mat, y: Mat, column_names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "x has {} rows, y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if y.nrows() == 0 {
            return Err(Error::InvalidData("dataset has no observations".into()));
        }
        if y.ncols() == 0 {
            return Err(Error::InvalidData(
                "the parametric block needs at least one column".into(),
            ));
        }
        if column_names.len() != x.ncols() + y.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} column names for {} columns",
                column_names.len(),
                x.ncols() + y.ncols()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite entry".into()));
        }
        Ok(Self { x, y, column_names })
    }

    /// Builds a dataset with generated names `x1..xd, y1..yp`.
    pub fn from_blocks(x: Mat, y: Mat) -> Result<Self> {
        let names = (1..=x.ncols())
            .map(|i| format!("x{i}"))
            .chain((1..=y.ncols()).map(|j| format!("y{j}")))
            .collect();
        Self::new(x, y, names)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn x_names(&self) -> &[String] {
        &self.column_names[..self.d()]
    }

    pub fn y_names(&self) -> &[String] {
        &self.column_names[self.d()..]
    }

    /// Value of combined column `c` (X columns first) at row `i`.
    pub fn column(&self, c: usize) -> Vec<f64> {
        if c < self.d() {
            self.x.column(c).iter().copied().collect()
        } else {
            self.y.column(c - self.d()).iter().copied().collect()
        }
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let x = Mat::from_fn(rows.len(), self.d(), |i, j| self.x[(rows[i], j)]);
        let y = Mat::from_fn(rows.len(), self.p(), |i, j| self.y[(rows[i], j)]);
        Dataset {
            x,
            y,
            column_names: self.column_names.clone(),
        }
    }

    /// Repartitions the combined columns so that `x_cols` (indices into the
    /// combined X-then-Y layout) become the X block, in that order.
    pub fn repartition(&self, x_cols: &[usize]) -> Result<Dataset> {
        let total = self.d() + self.p();
        let mut seen = vec![false; total];
        for &c in x_cols {
            if c >= total {
                return Err(Error::InvalidArgument(format!(
                    "column index {c} out of range"
                )));
            }
            if seen[c] {
                return Err(Error::DuplicateColumn(self.column_names[c].clone()));
            }
            seen[c] = true;
        }
        let y_cols: Vec<usize> = (0..total).filter(|c| !seen[*c]).collect();
        let n = self.n();
        let cols: Vec<Vec<f64>> = (0..total).map(|c| self.column(c)).collect();
        let x = Mat::from_fn(n, x_cols.len(), |i, j| cols[x_cols[j]][i]);
        let y = Mat::from_fn(n, y_cols.len(), |i, j| cols[y_cols[j]][i]);
        let names = x_cols
            .iter()
            .chain(y_cols.iter())
            .map(|&c| self.column_names[c].clone())
            .collect();
        Dataset::new(x, y, names)
    }
}

/// Reads a comma-separated file with a header row.
pub fn load_csv(path: impl AsRef<Path>, x_columns: &XColumns) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, x_columns)
}

/// Parses CSV text from any reader. Rows are numbered from 1 (first data row).
pub fn read_csv<R: Read>(reader: R, x_columns: &XColumns) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() {
        return Err(Error::InvalidData("empty header".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::InvalidData(format!(
                "row {} has {} fields, header has {}",
                r + 1,
                rec.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(header.len());
        for (c, cell) in rec.iter().enumerate() {
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::BadCell {
                    row: r + 1,
                    column: header[c].clone(),
                    value: cell.to_owned(),
                })?;
            row.push(v);
        }
        rows.push(row);
    }

    let x_idx: Vec<usize> = match x_columns {
        XColumns::Count(k) => {
            if *k > header.len() {
                return Err(Error::InvalidArgument(format!(
                    "{k} X columns requested but the file has {}",
                    header.len()
                )));
            }
            (0..*k).collect()
        }
        XColumns::Names(names) => {
            let mut idx = Vec::with_capacity(names.len());
            for name in names {
                let c = header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::UnknownColumn(name.clone()))?;
                if idx.contains(&c) {
                    return Err(Error::DuplicateColumn(name.clone()));
                }
                idx.push(c);
            }
            idx
        }
    };
    let y_idx: Vec<usize> = (0..header.len()).filter(|c| !x_idx.contains(c)).collect();
    let n = rows.len();
    let x = Mat::from_fn(n, x_idx.len(), |i, j| rows[i][x_idx[j]]);
    let y = Mat::from_fn(n, y_idx.len(), |i, j| rows[i][y_idx[j]]);
    let names = x_idx
        .iter()
        .chain(y_idx.iter())
        .map(|&c| header[c].clone())
        .collect();
    Dataset::new(x, y, names)
}

/// `S_xx = XᵀX/n`, `S_yy = YᵀY/n`, `S_xy = XᵀY/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub sxx: Mat,
    pub syy: Mat,
    pub sxy: Mat,
    pub n: usize,
}

impl SufficientStats {
    pub fn d(&self) -> usize {
        self.sxx.nrows()
    }

    pub fn p(&self) -> usize {
        self.syy.nrows()
    }
}

pub fn sufficient_stats(ds: &Dataset) -> SufficientStats {
    stats_from_blocks(&ds.x, &ds.y)
}

pub(crate) fn stats_from_blocks(x: &Mat, y: &Mat) -> SufficientStats {
    let n = y.nrows();
    let inv_n = 1.0 / n as f64;
    let mut sxx = x.tr_mul(x) * inv_n;
    let mut syy = y.tr_mul(y) * inv_n;
    symmetrize_in_place(&mut sxx);
    symmetrize_in_place(&mut syy);
    let sxy = x.tr_mul(y) * inv_n;
    SufficientStats { sxx, syy, sxy, n }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    X,
    Y,
    Both,
}

/// Per-column centering and scaling applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeRecord {
    pub which: Which,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

impl StandardizeRecord {
    /// Identity record for `d` X and `p` Y columns.
    pub fn identity(d: usize, p: usize) -> Self {
        Self {
            which: Which::Both,
            x_mean: vec![0.0; d],
            x_scale: vec![1.0; d],
            y_mean: vec![0.0; p],
            y_scale: vec![1.0; p],
        }
    }

    /// Maps an X row in original units to standardized units.
    pub fn forward_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Maps a standardized X row back to original units.
    pub fn inverse_x(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.x_mean.iter().zip(&self.x_scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.d() != self.x_mean.len() || ds.p() != self.y_mean.len() {
            return Err(Error::DimensionMismatch(
                "standardization record does not match dataset".into(),
            ));
        }
        let x = Mat::from_fn(ds.n(), ds.d(), |i, j| {
            (ds.x[(i, j)] - self.x_mean[j]) / self.x_scale[j]
        });
        let y = Mat::from_fn(ds.n(), ds.p(), |i, j| {
            (ds.y[(i, j)] - self.y_mean[j]) / self.y_scale[j]
        });
        Dataset::new(x, y, ds.column_names.clone())
    }
}

fn column_moments(m: &Mat, names: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = m.nrows();
    let mut means = Vec::with_capacity(m.ncols());
    let mut scales = Vec::with_capacity(m.ncols());
    for (j, name) in names.iter().enumerate().take(m.ncols()) {
        let col = m.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let sd = if n > 1 {
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        if !(sd > 0.0) || sd <= 1e-14 * mean.abs() {
            return Err(Error::ConstantColumn(name.clone()));
        }
        means.push(mean);
        scales.push(sd);
    }
    Ok((means, scales))
}

/// Centers and scales the chosen block(s) to mean 0 and sample sd 1.
pub fn standardize(ds: &Dataset, which: Which) -> Result<(Dataset, StandardizeRecord)> {
    let mut rec = StandardizeRecord::identity(ds.d(), ds.p());
    rec.which = which;
    if matches!(which, Which::X | Which::Both) {
        let (m, s) = column_moments(&ds.x, ds.x_names())?;
        rec.x_mean = m;
        rec.x_scale = s;
    }
    if matches!(which, Which::Y | Which::Both) {
        let (m, s) = column_moments(&ds.y, ds.y_names())?;
        rec.y_mean = m;
        rec.y_scale = s;
    }
    let out = rec.apply(ds)?;
    Ok((out, rec))
}

/// Shapiro–Wilk statistic and p-value (Royston's AS R94 approximation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
}

fn poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "Shapiro-Wilk needs 3 <= n <= 5000, got {n}"
        )));
    }
    let mut x = sample.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let range = x[n - 1] - x[0];
    if !(range > 1e-19) {
        return Err(Error::InvalidData("Shapiro-Wilk sample is constant".into()));
    }

    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let an = n as f64;
    let half = n / 2;
    // a[0..half] are the coefficients of the largest order statistics.
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = 0.5_f64.sqrt();
    } else {
        let an25 = an + 0.25;
        let m: Vec<f64> = (1..=half)
            .map(|i| std_normal.inverse_cdf((i as f64 - 0.375) / an25))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (start, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        a[0] = a1;
        for i in start..half {
            a[i] = -m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / an;
    let ssq: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let num: f64 = (0..half).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ssq).min(1.0);

    if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::PI / 3.0;
        let p = (pi6 * (w.sqrt().asin() - stqr)).max(0.0);
        return Ok(ShapiroWilk { w, p_value: p });
    }
    let w1 = 1.0 - w;
    if w1 <= 0.0 {
        return Ok(ShapiroWilk { w, p_value: 1.0 });
    }
    let mut y = w1.ln();
    let (mu, sigma) = if n <= 11 {
        let gamma = poly(&G, an);
        if y >= gamma {
            return Ok(ShapiroWilk { w, p_value: 1e-99 });
        }
        y = -(gamma - y).ln();
        (poly(&C3, an), poly(&C4, an).exp())
    } else {
        let xx = an.ln();
        (poly(&C5, xx), poly(&C6, xx).exp())
    };
    let p = 1.0 - Normal::new(mu, sigma).expect("positive sigma").cdf(y);
    Ok(ShapiroWilk { w, p_value: p })
}

/// Indices (over the combined X-then-Y columns) of the `d` columns with the
/// smallest Shapiro–Wilk p-values, ascending by p-value, ties by index.
pub fn normality_rank(ds: &Dataset, d: usize) -> Result<Vec<usize>> {
    let total = ds.d() + ds.p();
    if d > total {
        return Err(Error::InvalidArgument(format!(
            "cannot select {d} of {total} columns"
        )));
    }
    let mut scored = Vec::with_capacity(total);
    for c in 0..total {
        let sw = shapiro_wilk(&ds.column(c))?;
        scored.push((sw.p_value, c));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(d).map(|(_, c)| c).collect())
}
