//! The training loop.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use super::checkpoint::save_checkpoint;
use super::config::RunConfig;
use super::optim::Optimizer;
use crate::autodiff::{Ctx, Mode, Tape};
use crate::data::{Dataset, PkSampler, Split};
use crate::error::{DpaError, Result};
use crate::losses::total_loss;
use crate::model::{BackboneConfig, Model};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "train_timing.csv";
pub const CONFIG_FILE: &str = "config.conf";

/// Seed of an independent random stream derived from the run seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-epoch means over all batches.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lsce: f64,
    pub hmt: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Loss columns only, so that repeated runs give identical files.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "epoch,lr,lsce,hmt,total")?;
        for r in &self.records {
            writeln!(out, "{},{:.6e},{:.9},{:.9},{:.9}", r.epoch, r.lr, r.lsce, r.hmt, r.total)?;
        }
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "epoch,seconds")?;
        for r in &self.records {
            writeln!(out, "{},{:.3}", r.epoch, r.seconds)?;
        }
        Ok(())
    }

    /// Whether the last epoch's mean total loss is below the first's.
    pub fn loss_decreased(&self) -> bool {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => self.records.len() > 1 && b.total < a.total,
            _ => false,
        }
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }
}

/// The run's backbone with the dataset-dependent fields filled in.
pub fn backbone_for(cfg: &RunConfig, dataset: &Dataset) -> BackboneConfig {
    BackboneConfig {
        input_size: dataset.image_size(),
        num_classes: dataset.manifest.train_identities().len(),
        ..cfg.backbone.clone()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Trains a freshly built model. `on_epoch` sees every record as it is
/// produced.
pub fn train(cfg: &RunConfig, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let backbone = backbone_for(cfg, dataset);
    let mut model = Model::build(&backbone, cfg.seed)?;
    let classes: BTreeMap<usize, usize> = dataset
        .manifest
        .train_identities()
        .into_iter()
        .enumerate()
        .map(|(class, id)| (id, class))
        .collect();
    let mut sampler = PkSampler::new(&dataset.by_identity(Split::Train), cfg.p, cfg.k, stream_seed(cfg.seed, 1))?;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), &model.store);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.schedule.epochs {
        let start = Instant::now();
        let lr = cfg.schedule.lr_at(epoch);
        let batches = sampler.epoch();
        let (mut lsce, mut hmt, mut total) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let images = dataset.batch(&batch.indices)?;
            let labels: Vec<usize> = batch.identities.iter().map(|id| classes[id]).collect();
            let tape = Tape::new();
            let mut cx = Ctx::new(&tape, &mut model.store, Mode::Train);
            let x = tape.constant(images);
            let out = model.net.forward(&mut cx, x)?;
            let parts = total_loss(
                &tape,
                out.logits,
                out.embedding,
                &labels,
                &cfg.lsce,
                &cfg.hmt,
                &cfg.weights,
            )?;
            let grads = tape.backward(parts.total)?;
            cx.accumulate(&grads);
            let value = tape.value(parts.total).item();
            if !value.is_finite() {
                return Err(DpaError::NonFiniteValue {
                    op: format!("training loss at epoch {epoch}"),
                });
            }
            total += value;
            lsce += tape.value(parts.lsce).item();
            hmt += tape.value(parts.hmt).item();
            optimizer.step(&mut model.store, lr);
        }
        let n = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            lsce: lsce / n,
            hmt: hmt / n,
            total: total / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(TrainOutcome { model, log })
}

/// Writes the checkpoint, loss log, timing log and resolved config.
pub fn write_train_artifacts(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.model)?;
    let mut f = BufWriter::new(File::create(dir.join(TRAIN_LOG_FILE))?);
    outcome.log.write_csv(&mut f)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(dir.join(TIMING_FILE))?);
    outcome.log.write_timing_csv(&mut f)?;
    f.flush()?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

/// Trains and writes the checkpoint, loss log, timing log and resolved
/// config into `out_dir`.
pub fn run_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let dataset = Dataset::open(&cfg.data_dir.join("manifest.json"))?;
    fs::create_dir_all(out_dir)?;
    let outcome = train(cfg, &dataset, |r| {
        log::info!(
            "epoch {:>3}  lr {:.2e}  lsce {:.4}  hmt {:.4}  total {:.4}  ({:.1}s)",
            r.epoch,
            r.lr,
            r.lsce,
            r.hmt,
            r.total,
            r.seconds
        );
    })?;
    write_train_artifacts(out_dir, cfg, &outcome)?;
    if !outcome.log.loss_decreased() {
        log::warn!("final epoch loss is not below the first epoch's");
    }
    Ok(outcome)
}
