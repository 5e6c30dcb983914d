//! Synthetic data generation, dataset ingestion and P×K sampling.

mod manifest;
mod ppm;
mod sampler;
mod synth;

pub use manifest::{Dataset, Entry, Manifest, Split, MANIFEST_VERSION};
pub use ppm::{decode_ppm, read_ppm, write_ppm};
pub use sampler::{PkBatch, PkSampler};
pub use synth::{latent, render, split_of, synth_generate, Latent, Nuisance, SynthSpec};
