use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fraction of entries with `|a| > tau`.
pub fn nsar<T: Scalar>(a: &Tensor<T>, tau: f64) -> Result<f64> {
    nsar_slice(a.data(), tau)
}

pub fn nsar_slice<T: Scalar>(values: &[T], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("activation matrix is empty".into()));
    }
    if !(tau >= 0.0) {
        return Err(Error::Input(format!("threshold must be non-negative, got {tau}")));
    }
    let above = values.iter().filter(|v| v.as_f64().abs() > tau).count();
    Ok(above as f64 / values.len() as f64)
}

/// Counts per bin. With edges `e_0 < ... < e_n` there are `n` bins, bin `i`
/// covering `[e_i, e_{i+1})`; the first bin also takes everything below
/// `e_0` and the last everything at or above `e_{n-1}`.
pub fn activation_histogram<T: Scalar>(a: &Tensor<T>, edges: &[f64]) -> Result<Vec<u64>> {
    if edges.len() < 2 {
        return Err(Error::Input(format!("need at least 2 bin edges, got {}", edges.len())));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Input("bin edges must be strictly increasing".into()));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    for &v in a.data() {
        let v = v.as_f64();
        if v.is_nan() {
            return Err(Error::Input("NaN activation".into()));
        }
        // Number of interior edges <= v.
        let idx = edges[1..bins].partition_point(|&e| e <= v);
        counts[idx] += 1;
    }
    Ok(counts)
}

/// One row of an NSAR report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NsarEntry {
    pub layer: usize,
    /// `None` for dense layers.
    pub sublayer: Option<usize>,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NsarReport {
    pub tau: f64,
    pub entries: Vec<NsarEntry>,
}

impl NsarReport {
    pub fn mean_rate(&self) -> f64 {
        self.entries.iter().map(|e| e.rate).sum::<f64>() / self.entries.len().max(1) as f64
    }
}
