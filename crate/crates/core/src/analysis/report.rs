//! CSV reports with the header `layer,sublayer,metric,tau,value`.
//!
//! Dense layers leave `sublayer` empty. Histogram rows use the metric
//! `hist_count` with the bin's left edge in the `tau` column; the first
//! bin's edge is written as `-inf` since it is open-ended.

use std::io::Write;

use crate::error::Result;

use super::capture::ActivationCapture;
use super::sparsity::{activation_histogram, NsarReport};

pub const CSV_HEADER: &str = "layer,sublayer,metric,tau,value";

fn sublayer_field(s: Option<usize>) -> String {
    s.map(|j| j.to_string()).unwrap_or_default()
}

pub fn write_nsar_csv<W: Write>(mut w: W, reports: &[NsarReport]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        for e in &r.entries {
            writeln!(w, "{},{},nsar,{},{}", e.layer, sublayer_field(e.sublayer), r.tau, e.rate)?;
        }
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(mut w: W, captures: &[ActivationCapture], edges: &[f64]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for c in captures {
        let counts = activation_histogram(&c.values, edges)?;
        for (i, n) in counts.iter().enumerate() {
            let left = if i == 0 { "-inf".to_string() } else { edges[i].to_string() };
            writeln!(w, "{},{},hist_count,{left},{n}", c.layer, sublayer_field(c.sublayer))?;
        }
    }
    Ok(())
}
