//! Row-major JSON encoding for dense matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Dense {
        rows: m.nrows(),
        cols: m.ncols(),
        data,
    }
    .serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let dense = Dense::deserialize(d)?;
    let expected = dense.rows.checked_mul(dense.cols);
    if expected != Some(dense.data.len()) {
        return Err(serde::de::Error::custom(format!(
            "matrix data has {} entries, expected {}x{}",
            dense.data.len(),
            dense.rows,
            dense.cols
        )));
    }
    Ok(DMatrix::from_row_slice(dense.rows, dense.cols, &dense.data))
}
