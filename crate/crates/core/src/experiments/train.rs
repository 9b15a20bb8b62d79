use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig, Selection};
use crate::data::{eval_batches, generate_synthetic, load_archive, make_batches, Batch, FeatureArchive};
use crate::error::{Error, Result};
use crate::io::write_json_atomic;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Mode, Model, PERSONALITY_PREFIX};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tape::Graph;
use crate::tensor::Matrix;

/// Loss components of one step, or their mean over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_ccl: f64,
    pub l_ps: f64,
    pub l_clm: f64,
    pub l_task: f64,
    pub l_total: f64,
}

impl LossComponents {
    /// `(l_ccl + l_ps) + l_clm + l_task`, in the order the model sums them.
    pub fn resum(&self) -> f64 {
        (self.l_ccl + self.l_ps) + self.l_clm + self.l_task
    }

    fn mean(items: &[LossComponents]) -> LossComponents {
        let n = items.len() as f64;
        let avg = |f: fn(&LossComponents) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossComponents {
            l_ccl: avg(|c| c.l_ccl),
            l_ps: avg(|c| c.l_ps),
            l_clm: avg(|c| c.l_clm),
            l_task: avg(|c| c.l_task),
            l_total: avg(|c| c.l_total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub losses: LossComponents,
    pub valid: EvalReport,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: RunConfig,
    pub step_losses: Vec<LossComponents>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters produced `test`.
    pub best_epoch: usize,
    pub test: EvalReport,
    /// Training split scored with the final parameters.
    pub train: EvalReport,
    pub total_steps: usize,
    pub final_checksum: String,
    pub personality_checksum_start: String,
    pub personality_checksum_end: String,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The record with wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord { wall_clock_secs: 0.0, ..self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }
}

/// Run outputs beyond the record: the model and its selected and final
/// parameters.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: RunRecord,
    pub model: Model,
    pub best_params: ParamStore,
    pub final_params: ParamStore,
}

pub fn load_data(source: &DataSource) -> Result<FeatureArchive> {
    match source {
        DataSource::Archive { path } => load_archive(path),
        DataSource::Synthetic { seed, n_per_split, spec } => generate_synthetic(*seed, *n_per_split, spec),
    }
}

pub fn build_model(config: &RunConfig, archive: &FeatureArchive) -> Result<Model> {
    if archive.manifest.vocab > config.model.vocab {
        return Err(Error::InvalidConfig(format!(
            "archive vocabulary {} exceeds model vocabulary {}",
            archive.manifest.vocab, config.model.vocab
        )));
    }
    Model::new(config.model.clone(), config.toggles, config.alignment_layer(), archive.manifest.d_v, archive.manifest.d_a)
}

/// Initial parameters, with optional imported weights laid over them.
pub fn initial_params(config: &RunConfig, model: &Model) -> Result<ParamStore> {
    let mut store = model.init_params(config.seed);
    if let Some(path) = &config.init_weights {
        store.load_jsonl(path)?;
    }
    Ok(store)
}

/// Predictions for a whole split, in file order.
pub fn predict_split(
    model: &Model,
    store: &ParamStore,
    archive: &FeatureArchive,
    split: &str,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for b in eval_batches(archive, split, batch_size, model.config.pad_limits())? {
        preds.extend(model.predict(store, &b)?);
        labels.extend_from_slice(&b.labels);
    }
    Ok((preds, labels))
}

pub fn evaluate_split(model: &Model, store: &ParamStore, archive: &FeatureArchive, split: &str, batch_size: usize) -> Result<EvalReport> {
    let (p, y) = predict_split(model, store, archive, split, batch_size)?;
    evaluate(&p, &y)
}

/// Forward and backward on one batch; returns the components and the
/// gradients of every trainable bound parameter.
pub fn probe_step(
    model: &Model,
    store: &ParamStore,
    batch: &Batch,
    rng: Option<&mut ChaCha8Rng>,
    step: usize,
) -> Result<(LossComponents, BTreeMap<String, Matrix>)> {
    let mut g = Graph::new();
    let mode = match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Probe,
    };
    let out = model.forward(&mut g, store, batch, mode)?;
    let terms = out.losses.expect("training forward computes losses");
    let v = |x| g.value(x).item();
    let comps = LossComponents {
        l_ccl: v(terms.l_ccl),
        l_ps: v(terms.l_ps),
        l_clm: v(terms.l_clm),
        l_task: v(terms.l_task),
        l_total: v(terms.l_total),
    };
    for (name, value) in
        [("l_ccl", comps.l_ccl), ("l_ps", comps.l_ps), ("l_clm", comps.l_clm), ("l_task", comps.l_task), ("l_total", comps.l_total)]
    {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { component: name, step });
        }
    }
    let resummed = comps.resum();
    if (resummed - comps.l_total).abs() > 1e-9 {
        return Err(Error::LossDecomposition { step, logged: comps.l_total, resummed });
    }
    let grads = g.backward(terms.l_total);
    let named = grads
        .bound_names()
        .filter(|n| store.get(n).is_some_and(|p| p.trainable))
        .filter_map(|n| grads.param(n).map(|m| (n.to_string(), m)))
        .collect();
    Ok((comps, named))
}

fn better(selection: Selection, candidate: &EvalReport, best: Option<&EvalReport>) -> bool {
    let Some(best) = best else { return true };
    match selection {
        Selection::Mae => candidate.mae < best.mae,
        Selection::Acc2 => {
            candidate.acc2_excl_zero.unwrap_or(candidate.acc2_incl_zero) > best.acc2_excl_zero.unwrap_or(best.acc2_incl_zero)
        }
    }
}

/// Trains on `archive` and keeps the model and parameters.
pub fn train_on(config: &RunConfig, archive: &FeatureArchive) -> Result<TrainedRun> {
    let started = Instant::now();
    let config = config.clone().resolved()?;
    let model = build_model(&config, archive)?;
    let mut store = initial_params(&config, &model)?;
    let personality_prefix = format!("{PERSONALITY_PREFIX}.");
    let personality_checksum_start = store.checksum(&personality_prefix);

    let limits = config.model.pad_limits();
    let batches = make_batches(archive, "train", config.batch_size, config.seed, limits)?;
    if batches.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut adam = Adam::new(config.adam());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d00d);
    let mut order: Vec<usize> = (0..batches.len()).collect();

    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, EvalReport, ParamStore)> = None;
    let mut step = 0usize;
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let mut epoch_losses = Vec::with_capacity(order.len());
        for &bi in &order {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let (comps, grads) = probe_step(&model, &store, &batches[bi], Some(&mut dropout_rng), step)?;
            adam.step(&mut store, &grads);
            step += 1;
            epoch_losses.push(comps);
        }
        if epoch_losses.is_empty() {
            break 'epochs;
        }
        step_losses.extend_from_slice(&epoch_losses);
        let valid = evaluate_split(&model, &store, archive, "valid", config.eval_batch_size)?;
        if better(config.selection, &valid, best.as_ref().map(|b| &b.1)) {
            best = Some((epoch, valid.clone(), store.clone()));
        }
        epochs.push(EpochRecord { epoch, steps: epoch_losses.len(), losses: LossComponents::mean(&epoch_losses), valid });
        if config.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    let test = evaluate_split(&model, &best_params, archive, "test", config.eval_batch_size)?;
    let train = evaluate_split(&model, &store, archive, "train", config.eval_batch_size)?;
    let record = RunRecord {
        config_hash: config.hash(),
        personality_checksum_end: store.checksum(&personality_prefix),
        personality_checksum_start,
        final_checksum: store.checksum(""),
        config,
        step_losses,
        epochs,
        best_epoch,
        test,
        train,
        total_steps: step,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun { record, model, best_params, final_params: store })
}

/// Loads the configured data and trains.
pub fn train(config: &RunConfig) -> Result<RunRecord> {
    let archive = load_data(&config.data)?;
    Ok(train_on(config, &archive)?.record)
}

/// Total loss as logged: `l_align + l_clm + l_task` with disabled terms at
/// zero.
pub fn total_loss(l_align: f64, l_clm: f64, l_task: f64, use_align: bool, use_clm: bool) -> f64 {
    let align = if use_align { l_align } else { 0.0 };
    let clm = if use_clm { l_clm } else { 0.0 };
    align + clm + l_task
}
