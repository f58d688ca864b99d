use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One row of the metrics trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: u64,
    pub federation_count: usize,
    pub region_accuracy: Vec<f64>,
    pub region_loss: Vec<f64>,
    /// Sum over subregions of the mean test loss.
    pub objective: f64,
    pub bytes_round: u64,
    pub bytes_total: u64,
    /// Nonzero weights of a representative shared model.
    pub macs: u64,
    /// Zero unless the run was timed.
    pub wall_ms: u64,
}

/// Format like C's `%g`: 6 significant digits, trailing zeros dropped.
pub fn format_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.into();
    }
    const P: i32 = 6;
    // the exponent after rounding to P digits decides the style
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..P).contains(&exp) {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn csv_header(k: usize) -> String {
    let mut cols = vec!["round".to_string(), "federations".into(), "objective".into()];
    cols.extend((0..k).map(|j| format!("acc_region_{j}")));
    cols.extend((0..k).map(|j| format!("loss_region_{j}")));
    cols.extend(["bytes_round", "bytes_total", "macs", "wall_ms"].map(String::from));
    cols.join(",")
}

/// The whole CSV as text, header first, LF line endings.
pub fn render_metrics_csv(records: &[MetricsRecord], k: usize) -> Result<String> {
    let mut out = csv_header(k);
    out.push('\n');
    for r in records {
        if r.region_accuracy.len() != k || r.region_loss.len() != k {
            return Err(Error::Shape(format!(
                "round {} has {} accuracy and {} loss columns, expected {k}",
                r.round,
                r.region_accuracy.len(),
                r.region_loss.len()
            )));
        }
        let _ = write!(out, "{},{},{}", r.round, r.federation_count, format_g(r.objective));
        for v in r.region_accuracy.iter().chain(&r.region_loss) {
            let _ = write!(out, ",{}", format_g(*v));
        }
        let _ = writeln!(out, ",{},{},{},{}", r.bytes_round, r.bytes_total, r.macs, r.wall_ms);
    }
    Ok(out)
}

/// Write the trace for `k` subregions to `path`.
pub fn write_metrics_csv(records: &[MetricsRecord], k: usize, path: &Path) -> Result<()> {
    let text = render_metrics_csv(records, k)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
