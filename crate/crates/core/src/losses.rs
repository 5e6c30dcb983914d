//! Label-smoothed cross-entropy, batch-hard triplet loss and their weighted sum.

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{DpaError, Result};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsceParams {
    pub epsilon: f64,
}

impl Default for LsceParams {
    fn default() -> Self {
        LsceParams { epsilon: 0.1 }
    }
}

impl LsceParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(DpaError::config(format!("smoothing factor {epsilon} outside [0, 1)")));
        }
        Ok(LsceParams { epsilon })
    }

    /// Smoothed target distribution for `label` among `classes` classes.
    pub fn targets(&self, label: usize, classes: usize) -> Vec<f64> {
        let off = self.epsilon / classes as f64;
        let mut q = vec![off; classes];
        q[label] = 1.0 - self.epsilon * (classes - 1) as f64 / classes as f64;
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmtParams {
    pub margin: f64,
    /// L2-normalize embeddings before measuring distances.
    pub normalize: bool,
}

impl Default for HmtParams {
    fn default() -> Self {
        HmtParams {
            margin: 0.3,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

fn check_labels(n: usize, labels: &[usize], what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(DpaError::shape(format!(
            "{what}: {n} rows but {} labels",
            labels.len()
        )));
    }
    Ok(())
}

/// Batch-mean cross-entropy of `logits` (`N×classes`) against smoothed targets.
pub fn lsce_loss(tape: &Tape, logits: Var, labels: &[usize], params: &LsceParams) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[1] < 2 {
        return Err(DpaError::shape(format!(
            "cross-entropy expects N×classes logits with at least two classes, got {shape:?}"
        )));
    }
    let (n, classes) = (shape[0], shape[1]);
    check_labels(n, labels, "cross-entropy")?;
    let mut q = Vec::with_capacity(n * classes);
    for &label in labels {
        if label >= classes {
            return Err(DpaError::LabelOutOfRange { label, classes });
        }
        q.extend(params.targets(label, classes));
    }
    let q = tape.constant(Tensor::new(&[n, classes], q)?);
    let logp = tape.log_softmax(logits, 1)?;
    let weighted = tape.mul(q, logp)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Hardest positive and negative of every anchor with both; `None` for
/// anchors lacking either.
pub fn hard_pairs(dist: &[f64], labels: &[usize]) -> Vec<Option<(usize, usize)>> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| d > dist[a * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| d < dist[a * n + q]) {
                    neg = Some(j);
                }
            }
            pos.zip(neg)
        })
        .collect()
}

fn pairwise_distances(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[i * n + j] = s.sqrt();
            out[j * n + i] = out[i * n + j];
        }
    }
    out
}

struct HardTriplet {
    /// `(anchor, positive, negative)` of every active hinge term.
    active: Vec<(usize, usize, usize)>,
    dist: Vec<f64>,
    n: usize,
    d: usize,
}

impl Backward for HardTriplet {
    fn name(&self) -> &'static str {
        "hard_triplet"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad.item();
        let x = inputs[0].data();
        let (n, d) = (self.n, self.d);
        let mut gx = vec![0.0; n * d];
        // d|a-b|/da = (a-b)/|a-b|, taken as 0 when the points coincide.
        let mut pull = |i: usize, j: usize, sign: f64| {
            let dist = self.dist[i * n + j];
            if dist == 0.0 {
                return;
            }
            for k in 0..d {
                let u = sign * g * (x[i * d + k] - x[j * d + k]) / dist;
                gx[i * d + k] += u;
                gx[j * d + k] -= u;
            }
        };
        for &(a, p, q) in &self.active {
            pull(a, p, 1.0);
            pull(a, q, -1.0);
        }
        Ok(vec![Some(Tensor::new(&[n, d], gx)?)])
    }
}

fn l2_normalize_rows(tape: &Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let norm2 = tape.sum(sq, &[1], true)?;
    let norm2 = tape.clamp_min(norm2, 1e-24)?;
    let norm = tape.pow(norm2, 0.5)?;
    tape.div(x, norm)
}

/// Sum over valid anchors of `max(0, d(a, hardest positive) - d(a, hardest negative) + m)`
/// with plain Euclidean distances. Anchors without a positive or a negative
/// in the batch are skipped.
pub fn hmt_loss(tape: &Tape, embeddings: Var, labels: &[usize], params: &HmtParams) -> Result<Var> {
    let shape = tape.shape(embeddings);
    if shape.len() != 2 {
        return Err(DpaError::shape(format!(
            "triplet loss expects N×D embeddings, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    check_labels(n, labels, "triplet loss")?;
    let x = if params.normalize {
        l2_normalize_rows(tape, embeddings)?
    } else {
        embeddings
    };
    let value = tape.value(x);
    let dist = pairwise_distances(value.data(), n, d);
    let pairs = hard_pairs(&dist, labels);
    if pairs.iter().all(Option::is_none) {
        return Err(DpaError::DegenerateBatch);
    }
    let mut loss = 0.0;
    let mut active = Vec::new();
    for (a, pair) in pairs.iter().enumerate() {
        if let Some((p, q)) = *pair {
            let term = dist[a * n + p] - dist[a * n + q] + params.margin;
            if term > 0.0 {
                loss += term;
                active.push((a, p, q));
            }
        }
    }
    tape.record(HardTriplet { active, dist, n, d }, &[x], Tensor::scalar(loss))
}

/// The weighted objective and its two parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub lsce: Var,
    pub hmt: Var,
}

pub fn total_loss(
    tape: &Tape,
    logits: Var,
    embeddings: Var,
    labels: &[usize],
    lsce: &LsceParams,
    hmt: &HmtParams,
    weights: &LossWeights,
) -> Result<LossParts> {
    if weights.lambda1 < 0.0 || weights.lambda2 < 0.0 {
        return Err(DpaError::config("loss weights must be non-negative"));
    }
    let l1 = lsce_loss(tape, logits, labels, lsce)?;
    let l2 = hmt_loss(tape, embeddings, labels, hmt)?;
    let a = tape.scale(l1, weights.lambda1)?;
    let b = tape.scale(l2, weights.lambda2)?;
    let total = tape.add(a, b)?;
    Ok(LossParts {
        total,
        lsce: l1,
        hmt: l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    fn lsce_value(logits: Tensor, labels: &[usize], eps: f64) -> f64 {
        let tape = Tape::new();
        let x = tape.constant(logits);
        let l = lsce_loss(&tape, x, labels, &LsceParams::new(eps).unwrap()).unwrap();
        scalar(&tape, l)
    }

    fn hmt_value(points: &[f64], labels: &[usize], margin: f64) -> f64 {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[points.len(), 1], points.to_vec()).unwrap());
        let params = HmtParams {
            margin,
            normalize: false,
        };
        let l = hmt_loss(&tape, x, labels, &params).unwrap();
        scalar(&tape, l)
    }

    #[test]
    fn targets_sum_to_one() {
        for classes in [2, 3, 10, 751] {
            for eps in [0.0, 0.1, 0.5, 0.99] {
                let p = LsceParams::new(eps).unwrap();
                let s: f64 = p.targets(classes - 1, classes).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_predictions_give_log_n() {
        for classes in [2usize, 10, 100] {
            let v = lsce_value(Tensor::zeros(&[3, classes]).unwrap(), &[0, 1, 1], 0.1);
            assert!((v - (classes as f64).ln()).abs() < 1e-9, "{classes}: {v}");
        }
    }

    #[test]
    fn confident_prediction_example() {
        // p_true = 0.99 and 0.01/9 elsewhere, written as logits of log p.
        let mut logits = vec![(0.01f64 / 9.0).ln(); 10];
        logits[3] = 0.99f64.ln();
        let v = lsce_value(Tensor::new(&[1, 10], logits).unwrap(), &[3], 0.1);
        let q_true = 1.0 - 0.1 * 9.0 / 10.0;
        let oracle = -(q_true * 0.99f64.ln() + 9.0 * 0.01 * (0.01f64 / 9.0).ln());
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.6214).abs() < 1e-4);
    }

    #[test]
    fn zero_smoothing_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let c = rng.gen_range(2..8);
            let data: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let mut ce = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let row = &data[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                ce += lse - row[y];
            }
            ce /= n as f64;
            let v = lsce_value(Tensor::new(&[n, c], data).unwrap(), &labels, 0.0);
            assert!((v - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn lsce_bounded_below_by_target_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let c = rng.gen_range(2..12);
            let eps = rng.gen_range(0.0..0.9);
            let p = LsceParams::new(eps).unwrap();
            let y = rng.gen_range(0..c);
            let data: Vec<f64> = (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let entropy: f64 = p
                .targets(y, c)
                .iter()
                .filter(|&&q| q > 0.0)
                .map(|&q| -q * q.ln())
                .sum();
            let v = lsce_value(Tensor::new(&[1, c], data).unwrap(), &[y], eps);
            assert!(v >= entropy - 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
        let err = lsce_loss(&tape, x, &[1, 4], &LsceParams::default()).unwrap_err();
        assert!(matches!(err, DpaError::LabelOutOfRange { label: 4, classes: 4 }));
    }

    #[test]
    fn hmt_hand_examples() {
        assert_eq!(hmt_value(&[0.0, 0.1, 1.0, 1.2], &[0, 0, 1, 1], 0.3), 0.0);
        let v = hmt_value(&[0.0, 0.5, 0.6, 1.5], &[0, 0, 1, 1], 0.3);
        assert!((v - 2.2).abs() < 1e-9, "{v}");
        // Every term is exactly m; the sum accumulates in anchor order.
        let all_equal = hmt_value(&[0.7; 6], &[0, 0, 1, 1, 2, 2], 0.3);
        assert_eq!(all_equal, (0..6).map(|_| 0.3).sum::<f64>());
        assert!((all_equal - 6.0 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn hmt_skips_anchors_without_positive() {
        // Label 2 has a single sample: it contributes nothing.
        let with = hmt_value(&[0.0, 0.5, 0.6, 1.5, 9.0], &[0, 0, 1, 1, 2], 0.3);
        assert!((with - 2.2).abs() < 1e-9);
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 1], vec![0.0, 1.0, 2.0]).unwrap());
        let err = hmt_loss(&tape, x, &[0, 1, 2], &HmtParams::default()).unwrap_err();
        assert!(matches!(err, DpaError::DegenerateBatch));
    }

    #[test]
    fn hmt_invariant_to_order_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [0, 0, 1, 1, 2, 2, 2];
        let pts: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |pts: &[f64], labels: &[usize]| {
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(&[labels.len(), 2], pts.to_vec()).unwrap());
            let l = hmt_loss(&tape, x, labels, &HmtParams::default()).unwrap();
            scalar(&tape, l)
        };
        let base = eval(&pts, &labels);
        let order = [6, 2, 0, 5, 1, 3, 4];
        let perm_pts: Vec<f64> = order.iter().flat_map(|&i| [pts[2 * i], pts[2 * i + 1]]).collect();
        let perm_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        assert!((eval(&perm_pts, &perm_labels) - base).abs() < 1e-10);
        let (s, c) = 0.7f64.sin_cos();
        let rot: Vec<f64> = pts
            .chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect();
        assert!((eval(&rot, &labels) - base).abs() < 1e-10);
    }

    #[test]
    fn lsce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let point = Tensor::new(&[4, 5], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let err = grad_check(
            |t, x| lsce_loss(t, x, &[0, 4, 2, 2], &LsceParams::default()),
            &point,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn hmt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = [0, 0, 1, 1, 2, 2];
        let point = Tensor::new(&[6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for normalize in [false, true] {
            let params = HmtParams {
                margin: 0.3,
                normalize,
            };
            let err = grad_check(|t, x| hmt_loss(t, x, &labels, &params), &point, &GradCheckOptions::default())
                .unwrap();
            assert!(err < 1e-4, "normalize={normalize}: {err}");
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = [0, 0, 1, 1];
        let logits = Tensor::new(&[4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let emb = Tensor::new(&[4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let run = |l1: f64, l2: f64| {
            let tape = Tape::new();
            let lg = tape.constant(logits.clone());
            let em = tape.constant(emb.clone());
            let w = LossWeights {
                lambda1: l1,
                lambda2: l2,
            };
            let parts =
                total_loss(&tape, lg, em, &labels, &LsceParams::default(), &HmtParams::default(), &w).unwrap();
            (scalar(&tape, parts.total), scalar(&tape, parts.lsce), scalar(&tape, parts.hmt))
        };
        let (t, a, b) = run(1.0, 0.0);
        assert_eq!(t, a);
        let (t, _, b2) = run(0.0, 1.0);
        assert_eq!(t, b2);
        let (t, _, _) = run(1.0, 1.0);
        assert!((t - (a + b)).abs() < 1e-12);
    }
}
