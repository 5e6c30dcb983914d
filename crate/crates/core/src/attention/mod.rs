//! Channel-pooling (CpA), spatial-pooling (SpA) and dual-pooling (DpA)
//! attention, and the dynamic-convolution OBR block they share.

mod cpa;
mod obr;
mod spa;

pub use cpa::{CpaModule, CpaParts};
pub use obr::ObrBlock;
pub use spa::{SpaModule, SpaParts};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, ParamStore, Var};
use crate::error::{DpaError, Result};
use crate::pooling::GemParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Sum,
    #[default]
    Mean,
}

impl FromStr for Fusion {
    type Err = DpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Fusion::Sum),
            "mean" => Ok(Fusion::Mean),
            other => Err(DpaError::config(format!("unknown fusion `{other}`"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Sum => "sum",
            Fusion::Mean => "mean",
        })
    }
}

/// Which branches an attention unit carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[default]
    #[serde(rename = "dpa")]
    Dual,
    #[serde(rename = "cpa")]
    ChannelOnly,
    #[serde(rename = "spa")]
    SpatialOnly,
}

impl FromStr for AttentionVariant {
    type Err = DpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpa" => Ok(AttentionVariant::Dual),
            "cpa" => Ok(AttentionVariant::ChannelOnly),
            "spa" => Ok(AttentionVariant::SpatialOnly),
            other => Err(DpaError::config(format!(
                "unknown attention variant `{other}` (expected dpa, cpa or spa)"
            ))),
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::Dual => "dpa",
            AttentionVariant::ChannelOnly => "cpa",
            AttentionVariant::SpatialOnly => "spa",
        })
    }
}

/// Attention hyperparameters left open by the method description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpaConfig {
    pub gem: GemParams,
    pub num_kernels: usize,
    pub fusion: Fusion,
}

impl Default for DpaConfig {
    fn default() -> Self {
        DpaConfig {
            gem: GemParams::default(),
            num_kernels: 4,
            fusion: Fusion::Mean,
        }
    }
}

/// Both branches run on the same input and are fused elementwise.
#[derive(Debug, Clone)]
pub struct DpaModule {
    pub cpa: CpaModule,
    pub spa: SpaModule,
    pub fusion: Fusion,
}

impl DpaModule {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hw: (usize, usize),
        cfg: &DpaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let cpa = CpaModule::new(store, &format!("{name}.cpa"), channels, cfg.num_kernels, cfg.gem, rng)?;
        let spa = SpaModule::new(store, &format!("{name}.spa"), channels, hw, cfg.num_kernels, cfg.gem, rng)?;
        Ok(DpaModule {
            cpa,
            spa,
            fusion: cfg.fusion,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let c = self.cpa.forward(cx, x)?;
        let s = self.spa.forward(cx, x)?;
        fuse(cx, self.fusion, c, s)
    }
}

pub fn fuse(cx: &mut Ctx, fusion: Fusion, a: Var, b: Var) -> Result<Var> {
    let sum = cx.tape.add(a, b)?;
    match fusion {
        Fusion::Sum => Ok(sum),
        Fusion::Mean => cx.tape.scale(sum, 0.5),
    }
}

/// One attention insertion: a full DpA module or a single branch.
#[derive(Debug, Clone)]
pub enum AttentionUnit {
    Dual(DpaModule),
    Channel(CpaModule),
    Spatial(SpaModule),
}

impl AttentionUnit {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        variant: AttentionVariant,
        channels: usize,
        hw: (usize, usize),
        cfg: &DpaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match variant {
            AttentionVariant::Dual => {
                AttentionUnit::Dual(DpaModule::new(store, name, channels, hw, cfg, rng)?)
            }
            AttentionVariant::ChannelOnly => AttentionUnit::Channel(CpaModule::new(
                store,
                &format!("{name}.cpa"),
                channels,
                cfg.num_kernels,
                cfg.gem,
                rng,
            )?),
            AttentionVariant::SpatialOnly => AttentionUnit::Spatial(SpaModule::new(
                store,
                &format!("{name}.spa"),
                channels,
                hw,
                cfg.num_kernels,
                cfg.gem,
                rng,
            )?),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            AttentionUnit::Dual(m) => m.forward(cx, x),
            AttentionUnit::Channel(m) => m.forward(cx, x),
            AttentionUnit::Spatial(m) => m.forward(cx, x),
        }
    }
}
