//! Inference latency of one full-graph forward pass.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::count_graph_ops;
use crate::models::{GraphContext, Model};
use crate::trainer::Summary;

pub const WARMUP_PASSES: usize = 10;
pub const MIN_REPS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub dataset: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
    /// Sparse graph operations (propagation, gathers, scatters) in one
    /// forward pass.
    pub spmm_ops: u64,
}

/// Times `reps` evaluation-mode forward passes over every node of `ctx`,
/// after [`WARMUP_PASSES`] untimed ones.
pub fn measure_inference(model: &Model, ctx: &GraphContext, dataset: &str, reps: usize) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(Error::invalid(format!("at least {MIN_REPS} repetitions are required, got {reps}")));
    }
    for _ in 0..WARMUP_PASSES {
        std::hint::black_box(model.logits(ctx)?);
    }
    let (logits, spmm_ops) = count_graph_ops(|| model.logits(ctx));
    std::hint::black_box(logits?);

    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(model.logits(ctx)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let s = Summary::of(&times);
    Ok(BenchReport { model: model.arch().to_string(), dataset: dataset.to_string(), mean_ms: s.mean, std_ms: s.std, reps, spmm_ops })
}

/// Aligned plain-text table, one row per report.
pub fn format_table(reports: &[BenchReport]) -> String {
    let mw = reports.iter().map(|r| r.model.len()).chain([5]).max().unwrap_or(5);
    let dw = reports.iter().map(|r| r.dataset.len()).chain([7]).max().unwrap_or(7);
    let mut out = String::new();
    let _ = writeln!(out, "{:<mw$}  {:<dw$}  {:>10}  {:>9}  {:>5}  {:>8}", "model", "dataset", "mean_ms", "std_ms", "reps", "spmm_ops");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<mw$}  {:<dw$}  {:>10.3}  {:>9.3}  {:>5}  {:>8}",
            r.model, r.dataset, r.mean_ms, r.std_ms, r.reps, r.spmm_ops
        );
    }
    out
}
