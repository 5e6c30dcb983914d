//! Small residual backbone with optional attention after any stage, and the
//! GeM → BN neck → linear classifier head.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionUnit, AttentionVariant, DpaConfig};
use crate::autodiff::{Conv2dSpec, Ctx, Mode, ParamId, ParamStore, StatsId, Tape, Var};
use crate::error::{DpaError, Result};
use crate::pooling::{GemParams, PoolAxis};
use crate::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// `(H, W)` of the input images.
    pub input_size: (usize, usize),
    /// Zero-based stages followed by an attention unit.
    pub dpa_after_stage: BTreeSet<usize>,
    pub attention: AttentionVariant,
    pub dpa: DpaConfig,
    /// GeM exponent of the global head pooling.
    pub gem_alpha: f64,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: vec![1, 1, 1, 1],
            input_size: (32, 32),
            dpa_after_stage: BTreeSet::from([2]),
            attention: AttentionVariant::Dual,
            dpa: DpaConfig::default(),
            gem_alpha: GemParams::DEFAULT_ALPHA,
            num_classes: 20,
        }
    }
}

impl BackboneConfig {
    pub fn embed_dim(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(0)
    }

    /// Feature-map size after `stage`; stage 0 keeps the input size and every
    /// later stage halves it.
    pub fn stage_hw(&self, stage: usize) -> (usize, usize) {
        let f = 1 << stage;
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 {
            return Err(DpaError::config("at least one stage is required"));
        }
        if self.blocks_per_stage.len() != n {
            return Err(DpaError::config(format!(
                "{} stage channel entries but {} block counts",
                n,
                self.blocks_per_stage.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(DpaError::config("stage channels and block counts must be positive"));
        }
        if let Some(&s) = self.dpa_after_stage.iter().find(|&&s| s >= n) {
            return Err(DpaError::config(format!(
                "attention after stage {s}, but the backbone has {n} stages"
            )));
        }
        let f = 1 << (n - 1);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(DpaError::config(format!(
                "input size {h}×{w} must be divisible by {f} for {n} stages"
            )));
        }
        if self.num_classes < 2 {
            return Err(DpaError::config("at least two classes are required"));
        }
        GemParams::new(self.gem_alpha)?;
        GemParams::new(self.dpa.gem.alpha)?;
        if self.dpa.num_kernels == 0 {
            return Err(DpaError::config("attention needs at least one candidate kernel"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
    spec: Conv2dSpec,
}

impl ConvBn {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(
            format!("{name}.weight"),
            &[c_out, c_in, k, k],
            c_in * k * k,
            2f64.sqrt(),
            rng,
        )?;
        let gamma = store.add(format!("{name}.bn.weight"), Tensor::ones(&[c_out])?);
        let beta = store.add(format!("{name}.bn.bias"), Tensor::zeros(&[c_out])?);
        let stats = store.add_stats(format!("{name}.bn"), c_out);
        Ok(ConvBn {
            weight,
            gamma,
            beta,
            stats,
            spec: Conv2dSpec::new(stride, k / 2),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let y = cx.tape.conv2d(x, w, None, self.spec)?;
        cx.batchnorm(y, self.gamma, self.beta, self.stats)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv1 = ConvBn::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, rng)?;
        let conv2 = ConvBn::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng)?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, rng)?)
        } else {
            None
        };
        Ok(BasicBlock {
            conv1,
            conv2,
            shortcut,
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = cx.tape.relu(y)?;
        let y = self.conv2.forward(cx, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x)?,
            None => x,
        };
        let y = cx.tape.add(y, skip)?;
        cx.tape.relu(y)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<BasicBlock>,
    attention: Option<AttentionUnit>,
}

/// Forward-pass outputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// Pooled features before the BN neck, `N×D`.
    pub features: Var,
    /// BN-neck output, `N×D`; used for the triplet loss and for retrieval.
    pub embedding: Var,
    /// `N×num_classes`.
    pub logits: Var,
}

/// Module structure with parameter handles; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    cfg: BackboneConfig,
    stem: ConvBn,
    stages: Vec<Stage>,
    neck_gamma: ParamId,
    neck_beta: ParamId,
    neck_stats: StatsId,
    classifier: ParamId,
    head_gem: GemParams,
}

impl Network {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward(&self, cx: &mut Ctx, images: Var) -> Result<ModelOutput> {
        let shape = cx.tape.shape(images);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(DpaError::shape(format!("expected N×3×H×W images, got {shape:?}")));
        }
        if (shape[2], shape[3]) != self.cfg.input_size {
            return Err(DpaError::SpatialSizeMismatch {
                expected: self.cfg.input_size,
                got: (shape[2], shape[3]),
            });
        }
        let n = shape[0];
        let x = self.stem.forward(cx, images)?;
        let mut x = cx.tape.relu(x)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(cx, x)?;
            }
            if let Some(att) = &stage.attention {
                x = att.forward(cx, x)?;
            }
        }
        let pooled = cx.tape.gem_pool(x, PoolAxis::Spatial, self.head_gem)?;
        let d = self.cfg.embed_dim();
        let features = cx.tape.reshape(pooled, &[n, d])?;
        let neck = cx.batchnorm(pooled, self.neck_gamma, self.neck_beta, self.neck_stats)?;
        let embedding = cx.tape.reshape(neck, &[n, d])?;
        let w = cx.param(self.classifier);
        let logits = cx.tape.matmul(embedding, w)?;
        Ok(ModelOutput {
            features,
            embedding,
            logits,
        })
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    /// Builds and initializes a model; the same config and seed always give
    /// the same parameters.
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c0 = cfg.stage_channels[0];
        let stem = ConvBn::new(&mut store, "stem", 3, c0, 3, 1, &mut rng)?;
        let mut stages = Vec::new();
        let mut c_in = c0;
        for (s, (&c_out, &nblocks)) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..nblocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("stage{s}.block{b}");
                blocks.push(BasicBlock::new(&mut store, &name, c_in, c_out, stride, &mut rng)?);
                c_in = c_out;
            }
            let attention = if cfg.dpa_after_stage.contains(&s) {
                Some(AttentionUnit::new(
                    &mut store,
                    &format!("stage{s}.attention"),
                    cfg.attention,
                    c_out,
                    cfg.stage_hw(s),
                    &cfg.dpa,
                    &mut rng,
                )?)
            } else {
                None
            };
            stages.push(Stage { blocks, attention });
        }
        let d = cfg.embed_dim();
        let neck_gamma = store.add("neck.bn.weight", Tensor::ones(&[d])?);
        let neck_beta = store.add("neck.bn.bias", Tensor::zeros(&[d])?);
        let neck_stats = store.add_stats("neck.bn", d);
        let classifier = store.add_normal("classifier.weight", &[d, cfg.num_classes], d, 1.0, &mut rng)?;
        let net = Network {
            cfg: cfg.clone(),
            stem,
            stages,
            neck_gamma,
            neck_beta,
            neck_stats,
            classifier,
            head_gem: GemParams::new(cfg.gem_alpha)?,
        };
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.net.config()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Eval-mode embeddings for `images`, processed in chunks of `batch`.
    pub fn embed(&mut self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 {
            return Err(DpaError::shape(format!("expected N×3×H×W images, got {shape:?}")));
        }
        let n = shape[0];
        let d = self.config().embed_dim();
        let mut out = Vec::with_capacity(n * d);
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            let chunk = crate::autodiff::narrow_tensor(images, 0, start, len)?;
            let tape = Tape::new();
            let mut cx = Ctx::frozen(&tape, &mut self.store, Mode::Eval);
            let x = tape.constant(chunk);
            let o = self.net.forward(&mut cx, x)?;
            out.extend_from_slice(tape.value(o.embedding).data());
            start += len;
        }
        Tensor::new(&[n, d], out)
    }
}
