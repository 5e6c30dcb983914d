//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batchnorm::Mode;
use super::param::{Ctx, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{DpaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many coordinates, chosen uniformly at random.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn sampled(max_coords: usize, seed: u64) -> Self {
        GradCheckOptions {
            max_coords: Some(max_coords),
            seed,
            ..Self::default()
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn coordinates(total: usize, opts: &GradCheckOptions) -> Vec<usize> {
    match opts.max_coords {
        Some(m) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, total, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    }
}

fn scalar_value(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(DpaError::NotScalarLoss(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(DpaError::NonFiniteValue {
            op: "gradient probe".into(),
        });
    }
    Ok(x)
}

/// Max relative error between the taped gradient of `f` at `point` and a
/// central difference with step `opts.step`.
pub fn grad_check<F>(mut f: F, point: &Tensor, opts: &GradCheckOptions) -> Result<f64>
where
    F: FnMut(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&tape, x)?;
    scalar_value(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| point.zeros_like());

    let mut worst: f64 = 0.0;
    for i in coordinates(point.numel(), opts) {
        let mut probe = |delta: f64| -> Result<f64> {
            let mut p = point.clone();
            p.data_mut()[i] += delta;
            let tape = Tape::new();
            let x = tape.leaf(p, false);
            let out = f(&tape, x)?;
            scalar_value(&tape, out)
        };
        let numeric = (probe(opts.step)? - probe(-opts.step)?) / (2.0 * opts.step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks gradients of `f` with respect to every parameter in `store` and to
/// `input`, returning the max relative error over all probed coordinates.
///
/// `f` is re-run for each probe; batch-norm running statistics may drift
/// between probes, which only matters for eval-mode closures that are never
/// given train-mode contexts.
pub fn grad_check_module<F>(
    store: &mut ParamStore,
    input: &Tensor,
    mode: Mode,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<f64>
where
    F: FnMut(&mut Ctx, Var) -> Result<Var>,
{
    let saved_stats = store.clone();
    let tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let (analytic_params, analytic_input) = {
        let mut cx = Ctx::new(&tape, store, mode);
        let out = f(&mut cx, x)?;
        scalar_value(&tape, out)?;
        let grads = tape.backward(out)?;
        let mut per_param = Vec::new();
        for id in cx.store.ids() {
            let g = cx
                .bindings()
                .get(&id)
                .and_then(|&v| grads.get(v).cloned())
                .unwrap_or_else(|| cx.store.param(id).value.zeros_like());
            per_param.push(g);
        }
        let gi = grads.get(x).cloned().unwrap_or_else(|| input.zeros_like());
        (per_param, gi)
    };

    // One flat coordinate space: all parameters, then the input.
    let sizes: Vec<usize> = store.params().iter().map(|p| p.value.numel()).collect();
    let total: usize = sizes.iter().sum::<usize>() + input.numel();
    let mut worst: f64 = 0.0;
    for flat in coordinates(total, opts) {
        let mut rest = flat;
        let mut target = None;
        for (pi, &sz) in sizes.iter().enumerate() {
            if rest < sz {
                target = Some(pi);
                break;
            }
            rest -= sz;
        }
        let mut probe = |store: &mut ParamStore, delta: f64| -> Result<f64> {
            let mut x_val = input.clone();
            let id = match target {
                Some(pi) => {
                    let id = store.ids().nth(pi).expect("param index");
                    store.param_mut(id).value.data_mut()[rest] += delta;
                    Some(id)
                }
                None => {
                    x_val.data_mut()[rest] += delta;
                    None
                }
            };
            let tape = Tape::new();
            let xv = tape.leaf(x_val, false);
            let result = {
                let mut cx = Ctx::frozen(&tape, store, mode);
                f(&mut cx, xv).and_then(|out| scalar_value(&tape, out))
            };
            if let Some(id) = id {
                store.param_mut(id).value.data_mut()[rest] -= delta;
            }
            result
        };
        let plus = probe(store, opts.step)?;
        let minus = probe(store, -opts.step)?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let analytic = match target {
            Some(pi) => analytic_params[pi].data()[rest],
            None => analytic_input.data()[rest],
        };
        worst = worst.max(relative_error(analytic, numeric));
    }
    // Restore running statistics touched by train-mode probes.
    for ((_, dst), (_, src)) in store
        .all_stats_mut()
        .iter_mut()
        .zip(saved_stats.all_stats())
    {
        *dst = src.clone();
    }
    Ok(worst)
}
