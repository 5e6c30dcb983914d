//! Shared test oracles.
#![allow(dead_code)]

use dpa_core::eval::{DistanceMatrix, Labels, Metric};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub dist: Vec<f64>,
    pub q: usize,
    pub g: usize,
    pub qid: Vec<usize>,
    pub qcam: Vec<usize>,
    pub gid: Vec<usize>,
    pub gcam: Vec<usize>,
}

impl Instance {
    pub fn labels(&self) -> Labels<'_> {
        Labels {
            query_ids: &self.qid,
            query_cams: &self.qcam,
            gallery_ids: &self.gid,
            gallery_cams: &self.gcam,
        }
    }

    pub fn matrix(&self) -> DistanceMatrix {
        DistanceMatrix::new(self.dist.clone(), self.q, self.g, Metric::Euclidean).unwrap()
    }
}

/// Rank-counting evaluator: a kept item's rank is one plus the number of kept
/// items strictly before it (smaller distance, or equal distance and lower
/// index). Returns (mAP, mINP, cmc).
pub fn brute_force(inst: &Instance, filter: bool) -> Option<(f64, f64, Vec<f64>)> {
    let (mut ap_sum, mut inp_sum) = (0.0, 0.0);
    let mut first_ranks = Vec::new();
    for q in 0..inst.q {
        let d = |j: usize| inst.dist[q * inst.g + j];
        let kept: Vec<usize> = (0..inst.g)
            .filter(|&j| !(filter && inst.gid[j] == inst.qid[q] && inst.gcam[j] == inst.qcam[q]))
            .collect();
        let mut ranks: Vec<usize> = Vec::new();
        for &j in &kept {
            if inst.gid[j] != inst.qid[q] {
                continue;
            }
            let before = kept.iter().filter(|&&o| d(o) < d(j) || (d(o) == d(j) && o < j)).count();
            ranks.push(before + 1);
        }
        ranks.sort();
        if ranks.is_empty() {
            return None;
        }
        let mut ap = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            ap += (i + 1) as f64 / *r as f64;
        }
        ap_sum += ap / ranks.len() as f64;
        inp_sum += ranks.len() as f64 / *ranks.last().unwrap() as f64;
        first_ranks.push(ranks[0]);
    }
    let n = inst.q as f64;
    let cmc = (1..=inst.g)
        .map(|k| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    Some((ap_sum / n, inp_sum / n, cmc))
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let q = rng.gen_range(1..=30);
    let g = rng.gen_range(2..=30);
    let ids = rng.gen_range(1..=6);
    // Coarse integer distances make ties common.
    let dist = (0..q * g).map(|_| rng.gen_range(0..8) as f64).collect();
    let mut gid: Vec<usize> = (0..g).map(|_| rng.gen_range(0..ids)).collect();
    let gcam: Vec<usize> = (0..g).map(|_| rng.gen_range(0..3)).collect();
    let qid: Vec<usize> = (0..q).map(|_| rng.gen_range(0..ids)).collect();
    let qcam: Vec<usize> = (0..q).map(|_| rng.gen_range(0..3)).collect();
    // Guarantee one cross-camera match per query.
    for &id in &qid {
        let j = rng.gen_range(0..g);
        gid[j] = id;
    }
    let mut inst = Instance {
        dist,
        q,
        g,
        qid,
        qcam,
        gid,
        gcam,
    };
    for i in 0..inst.q {
        // A later query may have overwritten this query's planted match.
        if !inst.gid.contains(&inst.qid[i]) {
            inst.qid[i] = inst.gid[rng.gen_range(0..g)];
        }
        if !(0..g).any(|j| inst.gid[j] == inst.qid[i] && inst.gcam[j] != inst.qcam[i]) {
            inst.qcam[i] = (0..3).find(|c| (0..g).any(|j| inst.gid[j] == inst.qid[i] && inst.gcam[j] != *c)).unwrap();
        }
    }
    inst
}

