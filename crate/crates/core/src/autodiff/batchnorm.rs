use super::tape::{Backward, Tape, Var};
use crate::error::{DpaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormSpec {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormSpec {
    fn default() -> Self {
        BatchNormSpec {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Running statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

struct BatchNormBack {
    /// Normalized input `x̂`.
    x_hat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    let d = |i: usize| shape.get(i).copied().unwrap_or(1);
    (d(0), d(1), shape.iter().skip(2).product::<usize>().max(1))
}

impl Backward for BatchNormBack {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let gamma = inputs[1].data();
        let (n, c, plane) = layout(inputs[0].shape());
        let (g, xh) = (grad.data(), self.x_hat.data());
        let count = (n * plane) as f64;
        let mut gx = vec![0.0; g.len()];
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    sum_g += g[i];
                    sum_gx += g[i] * xh[i];
                }
            }
            gg[ch] = sum_gx;
            gb[ch] = sum_g;
            let scale = gamma[ch] * self.inv_std[ch];
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    gx[i] = match self.mode {
                        Mode::Train => scale * (g[i] - sum_g / count - xh[i] * sum_gx / count),
                        Mode::Eval => scale * g[i],
                    };
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gg)),
            Some(Tensor::from_parts(inputs[2].shape().to_vec(), gb)),
        ])
    }
}

impl Tape {
    /// Batch normalization over every axis except the channel axis 1.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased variance into `stats`; eval mode reads `stats` only.
    pub fn batchnorm2d(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        spec: BatchNormSpec,
    ) -> Result<Var> {
        let x = self.value(input);
        let (gm, bt) = (self.value(gamma), self.value(beta));
        if x.rank() < 2 {
            return Err(DpaError::shape(format!(
                "batchnorm expects at least N×C, got {:?}",
                x.shape()
            )));
        }
        let (n, c, plane) = layout(x.shape());
        if gm.numel() != c || bt.numel() != c || stats.mean.len() != c || stats.var.len() != c {
            return Err(DpaError::shape(format!(
                "batchnorm over {c} channels with gamma {:?}, beta {:?}, stats {}",
                gm.shape(),
                bt.shape(),
                stats.mean.len()
            )));
        }
        let d = x.data();
        let count = n * plane;
        let mut x_hat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; c];
        for (ch, inv) in inv_std.iter_mut().enumerate() {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        sum += d[base..base + plane].iter().sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        sq += d[base..base + plane]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let unbiased = if count > 1 {
                        sq / (count - 1) as f64
                    } else {
                        var
                    };
                    let m = spec.momentum;
                    stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean;
                    stats.var[ch] = (1.0 - m) * stats.var[ch] + m * unbiased;
                    (mean, var)
                }
                Mode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = 1.0 / (var + spec.eps).sqrt();
            *inv = is;
            let (gv, bv) = (gm.data()[ch], bt.data()[ch]);
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    x_hat[i] = (d[i] - mean) * is;
                    out[i] = gv * x_hat[i] + bv;
                }
            }
        }
        let back = BatchNormBack {
            x_hat: Tensor::from_parts(x.shape().to_vec(), x_hat),
            inv_std,
            mode,
        };
        self.record(
            back,
            &[input, gamma, beta],
            Tensor::from_parts(x.shape().to_vec(), out),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_moments(t: &Tensor, ch: usize) -> (f64, f64) {
        let (n, c, plane) = layout(t.shape());
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| t.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    fn input_mean5_var4() -> Tensor {
        // Per channel: values 5 ± 2 in equal numbers → mean 5, variance 4.
        let mut data = Vec::new();
        for b in 0..2 {
            for _ch in 0..2 {
                for i in 0..4 {
                    data.push(if (i + b) % 2 == 0 { 7.0 } else { 3.0 });
                }
            }
        }
        Tensor::new(&[2, 2, 2, 2], data).unwrap()
    }

    fn run(x: Tensor, gamma: f64, beta: f64, stats: &mut RunningStats, mode: Mode, eps: f64) -> Tensor {
        let tape = Tape::new();
        let c = x.shape()[1];
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[c], gamma).unwrap());
        let b = tape.constant(Tensor::full(&[c], beta).unwrap());
        let spec = BatchNormSpec { eps, momentum: 0.1 };
        let y = tape.batchnorm2d(xv, g, b, stats, mode, spec).unwrap();
        (*tape.value(y)).clone()
    }

    #[test]
    fn train_mode_standardizes() {
        let mut stats = RunningStats::new(2);
        let y = run(input_mean5_var4(), 1.0, 0.0, &mut stats, Mode::Train, 1e-12);
        for ch in 0..2 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-10);
        }
        // running update with momentum 0.1 from (0, 1); unbiased var = 4·8/7
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1 * 32.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn affine_parameters_apply() {
        let mut stats = RunningStats::new(2);
        let y = run(input_mean5_var4(), 2.0, 3.0, &mut stats, Mode::Train, 1e-12);
        for ch in 0..2 {
            let (m, v) = channel_moments(&y, ch);
            assert!((m - 3.0).abs() < 1e-12);
            assert!((v.sqrt() - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_mode_with_identity_stats_is_affine() {
        let mut stats = RunningStats::new(2);
        let x = input_mean5_var4();
        let y = run(x.clone(), 1.5, -0.5, &mut stats, Mode::Eval, 0.0);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (1.5 * b - 0.5)).abs() < 1e-12);
        }
        assert_eq!(stats, RunningStats::new(2));
    }
}
