//! Retrieval evaluation of a model on a dataset's query and gallery splits.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::load_checkpoint_for;
use super::config::{EvalConfig, RunConfig};
use super::train::backbone_for;
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::eval::{distance_matrix, evaluate, ranked_rows, write_ranks_csv, EvalReport, Labels, Metric, RankRow};
use crate::model::Model;
use crate::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RANKS_FILE: &str = "ranks.csv";

/// Identities and cameras of the query and gallery entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLabels {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub query_cams: Vec<usize>,
    pub gallery_ids: Vec<usize>,
    pub gallery_cams: Vec<usize>,
}

impl SplitLabels {
    pub fn of(dataset: &Dataset) -> Self {
        let m = &dataset.manifest;
        let query = m.indices(Split::Query);
        let gallery = m.indices(Split::Gallery);
        let ids = |v: &[usize]| v.iter().map(|&i| m.entries[i].id).collect();
        let cams = |v: &[usize]| v.iter().map(|&i| m.entries[i].cam).collect();
        SplitLabels {
            query_ids: ids(&query),
            query_cams: cams(&query),
            gallery_ids: ids(&gallery),
            gallery_cams: cams(&gallery),
            query,
            gallery,
        }
    }

    pub fn labels(&self) -> Labels<'_> {
        Labels {
            query_ids: &self.query_ids,
            query_cams: &self.query_cams,
            gallery_ids: &self.gallery_ids,
            gallery_cams: &self.gallery_cams,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub rows: Vec<RankRow>,
}

impl EvalOutcome {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let mut f = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
        self.report.write_metrics_csv(&mut f)?;
        f.flush()?;
        let mut f = BufWriter::new(File::create(out_dir.join(RANKS_FILE))?);
        write_ranks_csv(&mut f, &self.rows)?;
        f.flush()?;
        Ok(())
    }
}

fn score(query: &Tensor, gallery: &Tensor, split: &SplitLabels, cfg: &EvalConfig) -> Result<EvalOutcome> {
    let dist = distance_matrix(query, gallery, cfg.metric)?;
    let labels = split.labels();
    let report = evaluate(&dist, &labels, cfg.cross_camera_filter)?;
    let rows = ranked_rows(&dist, cfg.top_k, &labels)?;
    Ok(EvalOutcome { report, rows })
}

/// Embeds query and gallery in eval mode and scores the retrieval.
pub fn evaluate_model(model: &mut Model, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalOutcome> {
    let split = SplitLabels::of(dataset);
    let query = model.embed(&dataset.batch(&split.query)?, cfg.batch_size)?;
    let gallery = model.embed(&dataset.batch(&split.gallery)?, cfg.batch_size)?;
    score(&query, &gallery, &split, cfg)
}

/// Mean mAP of `trials` independent draws of i.i.d. Gaussian embeddings.
pub fn chance_map(split: &SplitLabels, dim: usize, trials: usize, seed: u64, cfg: &EvalConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Result<Tensor> {
        let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(&[n, dim], data)
    };
    let mut sum = 0.0;
    for _ in 0..trials {
        let q = draw(split.query.len())?;
        let g = draw(split.gallery.len())?;
        let dist = distance_matrix(&q, &g, Metric::Euclidean)?;
        sum += evaluate(&dist, &split.labels(), cfg.cross_camera_filter)?.map;
    }
    Ok(sum / trials as f64)
}

/// Loads `checkpoint` (which must match the run's backbone), evaluates it
/// and writes `metrics.csv` and `ranks.csv` into `out_dir`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<EvalOutcome> {
    let dataset = Dataset::open(&cfg.data_dir.join("manifest.json"))?;
    let mut model = load_checkpoint_for(checkpoint, &backbone_for(cfg, &dataset))?;
    let outcome = evaluate_model(&mut model, &dataset, &cfg.eval)?;
    outcome.write(out_dir)?;
    Ok(outcome)
}
