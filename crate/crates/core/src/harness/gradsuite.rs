//! The gradient-check suite: every differentiable primitive, every pooling
//! on both axes, the attention blocks, both losses and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{CpaModule, DpaConfig, DpaModule, ObrBlock, SpaModule};
use crate::autodiff::{
    grad_check, grad_check_module, BatchNormSpec, Conv2dSpec, Ctx, GradCheckOptions, Mode, ParamStore, RunningStats,
    Tape, Var,
};
use crate::error::Result;
use crate::losses::{hmt_loss, lsce_loss, HmtParams, LsceParams};
use crate::model::{BackboneConfig, Model};
use crate::pooling::{GemParams, PoolAxis, PoolKind, SoftMode};
use crate::Tensor;

/// Error bound for every item except the full model.
pub const ITEM_TOLERANCE: f64 = 1e-4;
pub const FULL_MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Max relative error, or `None` if the check itself errored.
    pub error: Option<f64>,
    pub tolerance: f64,
    pub message: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        matches!(self.error, Some(e) if e < self.tolerance)
    }
}

type Check = Box<dyn Fn() -> Result<f64>>;

pub struct SuiteItem {
    pub name: String,
    pub tolerance: f64,
    check: Check,
}

impl SuiteItem {
    pub fn run(&self) -> CheckResult {
        let (error, message) = match (self.check)() {
            Ok(e) => (Some(e), None),
            Err(e) => (None, Some(e.to_string())),
        };
        CheckResult {
            name: self.name.clone(),
            error,
            tolerance: self.tolerance,
            message,
        }
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Values in `[-1, 1]` kept at least 0.1 away from zero.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed, -1.0, 1.0).map(|v| v + 0.1 * v.signum())
}

/// `Σ y ⊙ w` with a fixed random `w`, so every output coordinate matters.
fn weighted(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(&tape.shape(y), seed ^ 0xABCD, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn unary(name: &str, point: Tensor, f: impl Fn(&Tape, Var) -> Result<Var> + 'static) -> SuiteItem {
    SuiteItem {
        name: name.to_string(),
        tolerance: ITEM_TOLERANCE,
        check: Box::new(move || {
            grad_check(
                |tape, x| {
                    let y = f(tape, x)?;
                    weighted(tape, y, 1)
                },
                &point,
                &GradCheckOptions::default(),
            )
        }),
    }
}

fn module(name: &str, tolerance: f64, build: impl Fn() -> Result<f64> + 'static) -> SuiteItem {
    SuiteItem {
        name: name.to_string(),
        tolerance,
        check: Box::new(build),
    }
}

fn primitives() -> Vec<SuiteItem> {
    let m = [2, 3];
    let c23 = random(&m, 50, -1.0, 1.0);
    let pos = random(&m, 51, 0.5, 2.0);
    let img = random(&[2, 2, 4, 4], 52, -1.0, 1.0);
    vec![
        unary("add", random(&[1, 3], 1, -1.0, 1.0), move |t, x| {
            let c = t.constant(c23.clone());
            t.add(c, x)
        }),
        unary("sub", random(&[1, 3], 2, -1.0, 1.0), |t, x| {
            let c = t.constant(random(&[2, 3], 60, -1.0, 1.0));
            t.sub(c, x)
        }),
        unary("mul", random(&m, 3, -1.0, 1.0), |t, x| {
            let y = t.exp(x)?;
            t.mul(x, y)
        }),
        unary("div", pos.clone(), |t, x| {
            let y = t.add_scalar(x, 3.0)?;
            t.div(x, y)
        }),
        unary("neg", random(&m, 5, -1.0, 1.0), |t, x| t.neg(x)),
        unary("exp", random(&m, 6, -1.0, 1.0), |t, x| t.exp(x)),
        unary("log", pos.clone(), |t, x| t.log(x)),
        unary("sigmoid", random(&m, 8, -2.0, 2.0), |t, x| t.sigmoid(x)),
        unary("relu", off_zero(&m, 9), |t, x| t.relu(x)),
        unary("pow", pos.clone(), |t, x| t.pow(x, 2.5)),
        unary("clamp_min", off_zero(&m, 11), |t, x| t.clamp_min(x, 0.0)),
        unary("scale", random(&m, 12, -1.0, 1.0), |t, x| t.scale(x, -1.7)),
        unary("add_scalar", random(&m, 13, -1.0, 1.0), |t, x| t.add_scalar(x, 0.4)),
        unary("sum", img.clone(), |t, x| t.sum(x, &[1, 3], true)),
        unary("mean", img.clone(), |t, x| t.mean(x, &[0, 2], false)),
        unary("sum_all", img.clone(), |t, x| t.sum_all(x)),
        unary("max", img.clone(), |t, x| t.max(x, 2, false)),
        unary("min", img.clone(), |t, x| t.min(x, 3, true)),
        unary("reshape", img.clone(), |t, x| t.reshape(x, &[4, 16])),
        unary("permute", img.clone(), |t, x| t.permute(x, &[2, 0, 3, 1])),
        unary("concat", img.clone(), |t, x| {
            let y = t.exp(x)?;
            t.concat(&[x, y], 1)
        }),
        unary("narrow", img.clone(), |t, x| t.narrow(x, 2, 1, 2)),
        unary("softmax", random(&[3, 5], 22, -2.0, 2.0), |t, x| t.softmax(x, 1)),
        unary("log_softmax", random(&[3, 5], 23, -2.0, 2.0), |t, x| t.log_softmax(x, 1)),
        unary("matmul", random(&[3, 4], 24, -1.0, 1.0), |t, x| {
            let w = t.constant(random(&[4, 2], 61, -1.0, 1.0));
            let l = t.constant(random(&[5, 3], 62, -1.0, 1.0));
            let y = t.matmul(x, w)?;
            t.matmul(l, y)
        }),
        unary("conv2d", img.clone(), |t, x| {
            let w = t.constant(random(&[3, 2, 3, 3], 63, -1.0, 1.0));
            let b = t.constant(random(&[3], 64, -1.0, 1.0));
            t.conv2d(x, w, Some(b), Conv2dSpec::new(2, 1))
        }),
        unary("conv2d_weight", random(&[3, 2, 3, 3], 26, -1.0, 1.0), |t, w| {
            let x = t.constant(random(&[2, 2, 5, 5], 65, -1.0, 1.0));
            t.conv2d(x, w, None, Conv2dSpec::new(1, 1))
        }),
        unary("batched_conv2d", random(&[2, 2 * 2 * 9], 27, -1.0, 1.0), |t, k| {
            let x = t.constant(random(&[2, 2, 4, 4], 66, -1.0, 1.0));
            t.batched_conv2d(x, k, 2, 3, Conv2dSpec::new(1, 1))
        }),
        unary("batchnorm2d", random(&[3, 2, 2, 2], 28, -1.0, 1.0), |t, x| {
            let g = t.constant(random(&[2], 67, 0.5, 1.5));
            let b = t.constant(random(&[2], 68, -0.5, 0.5));
            let mut stats = RunningStats::new(2);
            t.batchnorm2d(x, g, b, &mut stats, Mode::Train, BatchNormSpec::default())
        }),
    ]
}

fn poolings() -> Vec<SuiteItem> {
    let kinds = [
        PoolKind::Avg,
        PoolKind::Min,
        PoolKind::Gem(GemParams::default()),
        PoolKind::Soft(SoftMode::Scalar),
    ];
    let mut items = Vec::new();
    for kind in kinds {
        for (axis, label) in [(PoolAxis::Spatial, "spatial"), (PoolAxis::Channel, "channel")] {
            let point = random(&[2, 3, 3, 4], 70, 0.1, 2.0);
            items.push(unary(&format!("{}/{label}", kind.name()), point, move |t, x| {
                t.pool(x, kind, axis)
            }));
        }
    }
    items
}

fn sum_of_squares(cx: &mut Ctx, y: Var) -> Result<Var> {
    let sq = cx.tape.mul(y, y)?;
    cx.tape.sum_all(sq)
}

fn attention_items() -> Vec<SuiteItem> {
    vec![
        module("obr", ITEM_TOLERANCE, || {
            let mut rng = ChaCha8Rng::seed_from_u64(80);
            let mut store = ParamStore::new();
            let obr = ObrBlock::new(&mut store, "obr", 3, 2, 4, &mut rng)?;
            let x = random(&[2, 3, 4, 4], 81, -1.0, 1.0);
            grad_check_module(
                &mut store,
                &x,
                Mode::Eval,
                |cx, v| {
                    let y = obr.forward(cx, v)?;
                    sum_of_squares(cx, y)
                },
                &GradCheckOptions::default(),
            )
        }),
        module("cpa", ITEM_TOLERANCE, || {
            let mut rng = ChaCha8Rng::seed_from_u64(82);
            let mut store = ParamStore::new();
            let cpa = CpaModule::new(&mut store, "cpa", 4, 4, GemParams::default(), &mut rng)?;
            let x = random(&[1, 4, 5, 5], 83, 0.1, 2.0);
            grad_check_module(
                &mut store,
                &x,
                Mode::Eval,
                |cx, v| {
                    let y = cpa.forward(cx, v)?;
                    sum_of_squares(cx, y)
                },
                &GradCheckOptions::default(),
            )
        }),
        module("spa", ITEM_TOLERANCE, || {
            let mut rng = ChaCha8Rng::seed_from_u64(84);
            let mut store = ParamStore::new();
            let spa = SpaModule::new(&mut store, "spa", 4, (3, 3), 4, GemParams::default(), &mut rng)?;
            let x = random(&[1, 4, 3, 3], 85, 0.1, 2.0);
            grad_check_module(
                &mut store,
                &x,
                Mode::Eval,
                |cx, v| {
                    let y = spa.forward(cx, v)?;
                    sum_of_squares(cx, y)
                },
                &GradCheckOptions::default(),
            )
        }),
        module("dpa", ITEM_TOLERANCE, || {
            let mut rng = ChaCha8Rng::seed_from_u64(86);
            let mut store = ParamStore::new();
            let dpa = DpaModule::new(&mut store, "dpa", 3, (3, 3), &DpaConfig::default(), &mut rng)?;
            let x = random(&[3, 3, 3, 3], 87, 0.1, 2.0);
            grad_check_module(
                &mut store,
                &x,
                Mode::Train,
                |cx, v| {
                    let y = dpa.forward(cx, v)?;
                    sum_of_squares(cx, y)
                },
                &GradCheckOptions::default(),
            )
        }),
    ]
}

fn loss_items() -> Vec<SuiteItem> {
    vec![
        module("lsce", ITEM_TOLERANCE, || {
            let logits = random(&[4, 6], 90, -2.0, 2.0);
            grad_check(
                |t, x| lsce_loss(t, x, &[0, 3, 5, 3], &LsceParams::default()),
                &logits,
                &GradCheckOptions::default(),
            )
        }),
        module("hmt", ITEM_TOLERANCE, || {
            let emb = random(&[8, 5], 91, -1.0, 1.0);
            let labels = [0, 0, 1, 1, 2, 2, 3, 3];
            let params = HmtParams {
                margin: 1.0,
                ..HmtParams::default()
            };
            grad_check(|t, x| hmt_loss(t, x, &labels, &params), &emb, &GradCheckOptions::default())
        }),
    ]
}

fn full_model_item() -> SuiteItem {
    module("full_model", FULL_MODEL_TOLERANCE, || {
        let cfg = BackboneConfig::default();
        let mut model = Model::build(&cfg, 92)?;
        let (h, w) = cfg.input_size;
        let x = random(&[2, 3, h, w], 93, 0.0, 1.0);
        let net = model.net.clone();
        grad_check_module(
            &mut model.store,
            &x,
            Mode::Eval,
            |cx, v| {
                let out = net.forward(cx, v)?;
                lsce_loss(cx.tape, out.logits, &[3, 11], &LsceParams::default())
            },
            &GradCheckOptions::sampled(200, 94),
        )
    })
}

/// All items in report order.
pub fn suite() -> Vec<SuiteItem> {
    let mut items = primitives();
    items.extend(poolings());
    items.extend(attention_items());
    items.extend(loss_items());
    items.push(full_model_item());
    items
}

/// Runs every item, reporting each result to `on_result` as it finishes.
pub fn run_suite(mut on_result: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    suite()
        .iter()
        .map(|item| {
            let r = item.run();
            on_result(&r);
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn names_are_unique() {
        let names: Vec<String> = suite().iter().map(|i| i.name.clone()).collect();
        let set: BTreeSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        for pool in ["avg_pool", "min_pool", "gem_pool", "soft_pool"] {
            for axis in ["spatial", "channel"] {
                assert!(names.contains(&format!("{pool}/{axis}")));
            }
        }
    }

    #[test]
    fn primitives_and_poolings_pass() {
        for item in primitives().iter().chain(poolings().iter()) {
            let r = item.run();
            assert!(r.passed(), "{r:?}");
        }
    }
}
