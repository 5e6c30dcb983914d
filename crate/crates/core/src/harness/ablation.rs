//! Baseline / CpA-only / SpA-only / DpA comparison on one dataset.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::config::RunConfig;
use super::run_eval::evaluate_model;
use super::train::{train, write_train_artifacts};
use crate::attention::AttentionVariant;
use crate::data::Dataset;
use crate::error::{DpaError, Result};

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_METHODS: [&str; 4] = ["baseline", "cpa", "spa", "dpa"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub minp: f64,
}

pub fn write_ablation_csv<W: Write>(out: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(out, "method,mAP,rank1,rank5,mINP")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.method, r.map, r.rank1, r.rank5, r.minp)?;
    }
    Ok(())
}

/// The run config of one ablation method. Attention placement comes from
/// `base`; the baseline drops it.
pub fn variant_config(base: &RunConfig, method: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    if cfg.backbone.dpa_after_stage.is_empty() && method != "baseline" {
        return Err(DpaError::config("ablation needs model.attention_after to place the attention units"));
    }
    match method {
        "baseline" => cfg.backbone.dpa_after_stage.clear(),
        "cpa" => cfg.backbone.attention = AttentionVariant::ChannelOnly,
        "spa" => cfg.backbone.attention = AttentionVariant::SpatialOnly,
        "dpa" => cfg.backbone.attention = AttentionVariant::Dual,
        other => {
            return Err(DpaError::config(format!(
                "unknown ablation method `{other}` (expected one of {ABLATION_METHODS:?})"
            )))
        }
    }
    Ok(cfg)
}

/// Trains and evaluates every method in turn, writing each run into
/// `out_dir/<method>/` and the comparison into `out_dir/ablation.csv`.
pub fn run_ablation(base: &RunConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let dataset = Dataset::open(&base.data_dir.join("manifest.json"))?;
    let configs = ABLATION_METHODS
        .iter()
        .map(|m| variant_config(base, m))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (method, cfg) in ABLATION_METHODS.iter().zip(&configs) {
        log::info!("ablation: training {method}");
        let dir = out_dir.join(method);
        fs::create_dir_all(&dir)?;
        let mut outcome = train(cfg, &dataset, |r| {
            log::debug!("{method} epoch {} total {:.4}", r.epoch, r.total);
        })?;
        write_train_artifacts(&dir, cfg, &outcome)?;
        let eval = evaluate_model(&mut outcome.model, &dataset, &cfg.eval)?;
        eval.write(&dir)?;
        let r = &eval.report;
        log::info!("ablation: {method} mAP {:.4} rank1 {:.4}", r.map, r.rank1);
        rows.push(AblationRow {
            method: method.to_string(),
            map: r.map,
            rank1: r.rank1,
            rank5: r.rank5,
            minp: r.minp,
        });
    }
    let mut f = BufWriter::new(File::create(out_dir.join(ABLATION_FILE))?);
    write_ablation_csv(&mut f, &rows)?;
    f.flush()?;
    Ok(rows)
}
