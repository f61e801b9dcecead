use serde::Serialize;

use crate::data::{Cell, Report};

/// Bit operations in G: `flops_g · kw · ka`.
pub fn bops(flops_g: f64, weight_bits: u8, act_bits: u8) -> f64 {
    flops_g * weight_bits as f64 * act_bits as f64
}

/// BOPS as printed in result tables: whole G, truncated.
pub fn bops_reported(flops_g: f64, weight_bits: u8, act_bits: u8) -> u64 {
    // nudge so products like 11.94·64 that land a hair under an integer in
    // binary do not truncate one too low
    (bops(flops_g, weight_bits, act_bits) + 1e-9).floor() as u64
}

/// Model size in MB (10⁶ bytes) with `weight_bits` per parameter.
pub fn model_size_mb(params: u64, weight_bits: u8) -> f64 {
    params as f64 * weight_bits as f64 / 8e6
}

/// Size as printed in result tables: whole MB, rounded.
pub fn model_size_reported(params: u64, weight_bits: u8) -> u64 {
    model_size_mb(params, weight_bits).round() as u64
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub model: String,
    /// `"WxAy"`.
    pub precision: String,
    pub size_mb: f64,
    pub bops_g: f64,
    pub top1: f64,
}

impl MetricRow {
    pub const COLUMNS: [&'static str; 5] = ["model", "precision", "size_mb", "bops_g", "top1"];

    /// Size and BOPS are derived from the model's parameter count and
    /// per-sample FLOPs.
    pub fn new(model: &str, params: u64, flops: u64, weight_bits: u8, act_bits: u8, top1: f64) -> Self {
        MetricRow {
            model: model.to_string(),
            precision: format!("W{weight_bits}A{act_bits}"),
            size_mb: model_size_mb(params, weight_bits),
            bops_g: bops(flops as f64 / 1e9, weight_bits, act_bits),
            top1,
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        vec![
            self.model.as_str().into(),
            self.precision.as_str().into(),
            Cell::Float(self.size_mb),
            Cell::Float(self.bops_g),
            Cell::Float(self.top1),
        ]
    }

    pub fn report(rows: &[MetricRow]) -> Report {
        let mut r = Report::new(&Self::COLUMNS);
        for m in rows {
            r.push(m.cells()).expect("row width matches");
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_cells() {
        assert_eq!(bops_reported(11.94, 8, 8), 764);
        assert_eq!(bops_reported(11.94, 4, 8), 382);
        assert_eq!(bops_reported(11.94, 32, 32), 12226);
        assert_eq!(model_size_reported(30_000_000, 32), 120);
        assert_eq!(model_size_reported(30_000_000, 8), 30);
        assert_eq!(model_size_reported(30_000_000, 4), 15);
        assert!((bops(11.94, 8, 8) - 764.16).abs() < 1e-9);
    }

    #[test]
    fn metric_row_is_computed() {
        let r = MetricRow::new("toy", 1_000_000, 2_000_000_000, 4, 8, 0.5);
        assert_eq!(r.precision, "W4A8");
        assert_eq!(r.size_mb, 0.5);
        assert_eq!(r.bops_g, 64.0);
        assert_eq!(MetricRow::report(&[r]).rows.len(), 1);
    }
}
