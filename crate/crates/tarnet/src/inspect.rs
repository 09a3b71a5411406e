//! Architecture summaries and parameter-budget search.

use std::fmt::Write as _;

use tarnet_core::model::{ModelConfig, TarnetModel};

use crate::config::RunConfig;
use crate::error::Result;

/// Widths tried by the parameter search.
pub const SEARCH_CHANNELS: [usize; 9] = [64, 96, 128, 192, 256, 320, 384, 448, 512];
pub const SEARCH_HIDDEN: [usize; 10] = [128, 256, 384, 512, 640, 768, 896, 1024, 1280, 1536];
pub const SEARCH_FUSION: [usize; 7] = [128, 192, 256, 384, 512, 640, 768];
pub const SEARCH_EMBEDDING: [usize; 6] = [128, 192, 256, 384, 512, 768];
pub const SEARCH_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub text: String,
    pub total: usize,
    pub receptive_field: usize,
    pub receptive_field_ms: f64,
}

/// Per-layer shapes, total count and receptive field of the configured
/// model. The total is counted over the instantiated arrays.
pub fn summarize(cfg: &RunConfig, classes: usize) -> Result<Summary> {
    let model_cfg = cfg.model_config(classes)?;
    let model = TarnetModel::new(&model_cfg, cfg.seed)?;
    let total = model.count_params();
    let rf = model_cfg.receptive_field();
    let rf_ms = rf as f64 * cfg.frontend_config().hop_seconds() * 1000.0;
    let mut text = String::new();
    let width = model.layers().iter().map(|l| l.name.len()).max().unwrap_or(0);
    for l in model.layers() {
        let shape: Vec<String> = l.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(text, "{:<width$}  {:<12}  {:>10}", l.name, shape.join("x"), l.count);
    }
    let _ = writeln!(text, "total parameters  {total}");
    let _ = writeln!(text, "receptive field   {rf} frames = {rf_ms:.0} ms");
    Ok(Summary {
        text,
        total,
        receptive_field: rf,
        receptive_field_ms: rf_ms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub channels: usize,
    pub hidden: usize,
    pub fusion: usize,
    pub embedding: usize,
    pub params: usize,
    pub rel_error: f64,
}

/// Grid configurations whose parameter count is within 1% of `target`,
/// closest first. Everything not on the grid is taken from `base`.
pub fn search_params(base: &ModelConfig, target: f64) -> Vec<Candidate> {
    let mut out = Vec::new();
    for &c in &SEARCH_CHANNELS {
        for &h in &SEARCH_HIDDEN {
            for &d in &SEARCH_FUSION {
                for &e in &SEARCH_EMBEDDING {
                    let mut cfg = base.clone();
                    cfg.encoder.channels = c;
                    cfg.encoder.hidden = h;
                    cfg.encoder.fusion = d;
                    cfg.embedding = e;
                    let params = cfg.param_count();
                    let rel_error = (params as f64 - target).abs() / target;
                    if rel_error <= SEARCH_TOLERANCE {
                        out.push(Candidate {
                            channels: c,
                            hidden: h,
                            fusion: d,
                            embedding: e,
                            params,
                            rel_error,
                        });
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    out
}

pub fn candidates_table(target: f64, cands: &[Candidate]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} configurations within 1% of {target}", cands.len());
    let _ = writeln!(s, "{:>5} {:>5} {:>5} {:>5} {:>10} {:>8}", "C", "H", "D", "E", "params", "rel_err");
    for c in cands {
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>5} {:>5} {:>10} {:>8.5}",
            c.channels, c.hidden, c.fusion, c.embedding, c.params, c.rel_error
        );
    }
    s
}
