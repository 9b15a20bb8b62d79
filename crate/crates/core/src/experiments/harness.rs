use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{load_data, train_on, RunRecord};
use crate::error::Result;
use crate::io::write_atomic;
use crate::metrics::CSV_COLUMNS;
use crate::model::Toggles;

/// The full model followed by the five ablations.
pub const VARIANTS: [&str; 6] = ["full", "w/o-PF", "w/o-BF", "w/o-EF", "w/o-Lps", "w/o-Lclm"];

/// Toggles for a named variant applied on top of `base`.
pub fn variant_toggles(base: Toggles, variant: &str) -> Option<Toggles> {
    let mut t = base;
    match variant {
        "full" => {}
        "w/o-PF" => t.use_personality = false,
        "w/o-BF" => t.use_prefusion = false,
        "w/o-EF" => t.use_enhanced_fusion = false,
        "w/o-Lps" => t.use_align_ps = false,
        "w/o-Lclm" => t.use_clm = false,
        _ => return None,
    }
    Some(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub record: RunRecord,
}

/// Trains the full model and every ablation on the same data and seed.
pub fn ablate(config: &RunConfig) -> Result<Vec<VariantRun>> {
    let archive = load_data(&config.data)?;
    VARIANTS
        .par_iter()
        .map(|&v| {
            let mut c = config.clone();
            c.toggles = variant_toggles(config.toggles, v).expect("known variant");
            Ok(VariantRun { variant: v.to_string(), record: train_on(&c, &archive)?.record })
        })
        .collect()
}

/// Comparison table: one row per variant with test metrics, the final
/// training-split MAE and the last epoch's mean total loss.
pub fn ablation_csv(runs: &[VariantRun]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant"];
    header.extend(CSV_COLUMNS);
    header.extend(["train_mae", "final_l_total"]);
    w.write_record(&header)?;
    for r in runs {
        let mut row = vec![r.variant.clone()];
        row.extend(r.record.test.csv_row());
        row.push(r.record.train.mae.to_string());
        row.push(r.record.epochs.last().map(|e| e.losses.l_total.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRun {
    pub layer: usize,
    pub record: RunRecord,
}

/// One run per alignment layer `1..=L+2`.
pub fn layer_sweep(config: &RunConfig) -> Result<Vec<LayerRun>> {
    let archive = load_data(&config.data)?;
    (1..=config.model.layers + 2)
        .into_par_iter()
        .map(|k| {
            let mut c = config.clone();
            c.alignment_layer = Some(k);
            Ok(LayerRun { layer: k, record: train_on(&c, &archive)?.record })
        })
        .collect()
}

/// Plot-ready `(layer, acc2, f1)` table from the test reports, using the
/// zero-excluded convention (empty when undefined).
pub fn layer_sweep_csv(runs: &[LayerRun]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "acc2", "f1"])?;
    for r in runs {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([r.layer.to_string(), opt(r.record.test.acc2_excl_zero), opt(r.record.test.f1_excl_zero)])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv is utf-8"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
