//! Query/gallery distances, mAP, CMC and mINP, and ranked-list export.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{DpaError, Result};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos`, in `[0, 2]`.
    Cosine,
}

impl FromStr for Metric {
    type Err = DpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(DpaError::config(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

/// Row-major `Q×G` distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Vec<f64>,
    pub queries: usize,
    pub gallery: usize,
    pub metric: Metric,
}

impl DistanceMatrix {
    pub fn new(values: Vec<f64>, queries: usize, gallery: usize, metric: Metric) -> Result<Self> {
        if values.len() != queries * gallery {
            return Err(DpaError::DimensionMismatch(format!(
                "{} distances for a {queries}×{gallery} matrix",
                values.len()
            )));
        }
        Ok(DistanceMatrix {
            values,
            queries,
            gallery,
            metric,
        })
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.gallery..(q + 1) * self.gallery]
    }

    /// Gallery indices of query `q` by ascending distance, ties by index.
    pub fn order(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut idx: Vec<usize> = (0..self.gallery).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        idx
    }
}

fn rows_of(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(DpaError::DimensionMismatch(format!("{what} embeddings must be N×D, got {s:?}"))),
    }
}

fn normalized(t: &Tensor, n: usize, d: usize) -> Vec<f64> {
    let mut out = t.data().to_vec();
    for r in 0..n {
        let row = &mut out[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

pub fn distance_matrix(query: &Tensor, gallery: &Tensor, metric: Metric) -> Result<DistanceMatrix> {
    let (q, dq) = rows_of(query, "query")?;
    let (g, dg) = rows_of(gallery, "gallery")?;
    if dq != dg {
        return Err(DpaError::DimensionMismatch(format!(
            "query dimension {dq} differs from gallery dimension {dg}"
        )));
    }
    let d = dq;
    let mut values = Vec::with_capacity(q * g);
    match metric {
        Metric::Euclidean => {
            let (a, b) = (query.data(), gallery.data());
            for i in 0..q {
                for j in 0..g {
                    let s: f64 = a[i * d..(i + 1) * d]
                        .iter()
                        .zip(&b[j * d..(j + 1) * d])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    values.push(s.sqrt());
                }
            }
        }
        Metric::Cosine => {
            let (a, b) = (normalized(query, q, d), normalized(gallery, g, d));
            for i in 0..q {
                for j in 0..g {
                    let c: f64 = a[i * d..(i + 1) * d]
                        .iter()
                        .zip(&b[j * d..(j + 1) * d])
                        .map(|(x, y)| x * y)
                        .sum();
                    values.push((1.0 - c).clamp(0.0, 2.0));
                }
            }
        }
    }
    DistanceMatrix::new(values, q, g, metric)
}

/// Identity and camera labels of both sides.
#[derive(Debug, Clone, Copy)]
pub struct Labels<'a> {
    pub query_ids: &'a [usize],
    pub query_cams: &'a [usize],
    pub gallery_ids: &'a [usize],
    pub gallery_cams: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryResult {
    pub ap: f64,
    pub inp: f64,
    /// 1-based rank of the first correct match among kept gallery items.
    pub first_match_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub minp: f64,
    /// `cmc[k-1]`: fraction of queries with a match in the top `k`.
    pub cmc: Vec<f64>,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }

    pub fn write_metrics_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "mAP,rank1,rank5,rank10,rank20,mINP")?;
        writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.map, self.rank1, self.rank5, self.rank10, self.rank20, self.minp
        )?;
        Ok(())
    }
}

fn check_labels(dist: &DistanceMatrix, l: &Labels) -> Result<()> {
    if l.query_ids.len() != dist.queries
        || l.query_cams.len() != dist.queries
        || l.gallery_ids.len() != dist.gallery
        || l.gallery_cams.len() != dist.gallery
    {
        return Err(DpaError::DimensionMismatch(format!(
            "labels ({}/{} query, {}/{} gallery) do not match a {}×{} distance matrix",
            l.query_ids.len(),
            l.query_cams.len(),
            l.gallery_ids.len(),
            l.gallery_cams.len(),
            dist.queries,
            dist.gallery
        )));
    }
    Ok(())
}

/// Scores every query. With `cross_camera_filter`, gallery items sharing both
/// identity and camera with the query are removed before ranking.
pub fn evaluate(dist: &DistanceMatrix, labels: &Labels, cross_camera_filter: bool) -> Result<EvalReport> {
    check_labels(dist, labels)?;
    let g = dist.gallery;
    let mut per_query = Vec::with_capacity(dist.queries);
    let mut hits = vec![0usize; g];
    let mut invalid = Vec::new();
    for q in 0..dist.queries {
        let (qid, qcam) = (labels.query_ids[q], labels.query_cams[q]);
        let mut rank = 0;
        let mut match_ranks = Vec::new();
        for j in dist.order(q) {
            let same_id = labels.gallery_ids[j] == qid;
            if cross_camera_filter && same_id && labels.gallery_cams[j] == qcam {
                continue;
            }
            rank += 1;
            if same_id {
                match_ranks.push(rank);
            }
        }
        let Some(&first) = match_ranks.first() else {
            invalid.push(q);
            continue;
        };
        let mut ap = 0.0;
        for (i, &r) in match_ranks.iter().enumerate() {
            ap += (i + 1) as f64 / r as f64;
        }
        ap /= match_ranks.len() as f64;
        let last = match_ranks[match_ranks.len() - 1];
        let inp = match_ranks.len() as f64 / last as f64;
        hits[first - 1] += 1;
        per_query.push(QueryResult {
            ap,
            inp,
            first_match_rank: first,
        });
    }
    if !invalid.is_empty() {
        return Err(DpaError::NoValidMatch(invalid));
    }
    let nq = per_query.len().max(1) as f64;
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / nq);
    }
    let map = per_query.iter().map(|r| r.ap).sum::<f64>() / nq;
    let minp = per_query.iter().map(|r| r.inp).sum::<f64>() / nq;
    let mut report = EvalReport {
        map,
        rank1: 0.0,
        rank5: 0.0,
        rank10: 0.0,
        rank20: 0.0,
        minp,
        cmc,
        per_query,
    };
    report.rank1 = report.rank(1);
    report.rank5 = report.rank(5);
    report.rank10 = report.rank(10);
    report.rank20 = report.rank(20);
    Ok(report)
}

/// One row of a ranked retrieval list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankRow {
    pub query: usize,
    /// 1-based.
    pub rank: usize,
    pub gallery: usize,
    pub distance: f64,
    pub correct: bool,
}

/// Top-`k` gallery indices of each query (ascending distance, ties by index).
/// `k` is clamped to the gallery size.
pub fn ranked_list(dist: &DistanceMatrix, k: usize) -> Vec<Vec<usize>> {
    (0..dist.queries)
        .map(|q| dist.order(q).into_iter().take(k).collect())
        .collect()
}

/// [`ranked_list`] with distances and correctness flags.
pub fn ranked_rows(dist: &DistanceMatrix, k: usize, labels: &Labels) -> Result<Vec<RankRow>> {
    check_labels(dist, labels)?;
    let mut rows = Vec::new();
    for (q, top) in ranked_list(dist, k).into_iter().enumerate() {
        for (r, j) in top.into_iter().enumerate() {
            rows.push(RankRow {
                query: q,
                rank: r + 1,
                gallery: j,
                distance: dist.values[q * dist.gallery + j],
                correct: labels.gallery_ids[j] == labels.query_ids[q],
            });
        }
    }
    Ok(rows)
}

pub fn write_ranks_csv<W: Write>(out: &mut W, rows: &[RankRow]) -> Result<()> {
    writeln!(out, "query,rank,gallery,distance,correct")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{}",
            r.query,
            r.rank,
            r.gallery,
            r.distance,
            u8::from(r.correct)
        )?;
    }
    Ok(())
}
