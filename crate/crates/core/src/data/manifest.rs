//! `manifest.json` dataset description and a lazily decoding image loader.

use std::cell::OnceCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ppm::decode_ppm;
use crate::error::{DpaError, Result};
use crate::tensor::read_tensor;
use crate::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub id: usize,
    pub cam: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub num_identities: usize,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| {
            DpaError::parse(
                source_name,
                format!("line {}, column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        m.validate(source_name)?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DpaError::Format(e.to_string()))
    }

    /// Checks everything that does not need the filesystem.
    pub fn validate(&self, source_name: &str) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(DpaError::parse(
                source_name,
                "field `version`",
                format!("unsupported version {} (expected {MANIFEST_VERSION})", self.version),
            ));
        }
        if self.image_size.contains(&0) {
            return Err(DpaError::parse(source_name, "field `image_size`", "extents must be positive"));
        }
        let present: BTreeSet<usize> = self.entries.iter().map(|e| e.id).collect();
        let upper = present
            .last()
            .map_or(self.num_identities, |&m| self.num_identities.max(m + 1));
        let missing: Vec<usize> = (0..upper).filter(|i| !present.contains(i)).collect();
        if !missing.is_empty() || upper != self.num_identities {
            return Err(DpaError::NonDenseIdentityIds {
                expected: self.num_identities,
                missing,
            });
        }
        let gallery: BTreeSet<usize> = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Gallery)
            .map(|e| e.id)
            .collect();
        if let Some(q) = self
            .entries
            .iter()
            .find(|e| e.split == Split::Query && !gallery.contains(&e.id))
        {
            return Err(DpaError::Format(format!(
                "query identity {} has no gallery image",
                q.id
            )));
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    /// Training identities in ascending order; position is the class index.
    pub fn train_identities(&self) -> Vec<usize> {
        let ids: BTreeSet<usize> = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.id)
            .collect();
        ids.into_iter().collect()
    }
}

/// A validated manifest plus image access. Images are decoded on first use
/// and kept.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    root: PathBuf,
    cache: Vec<OnceCell<Tensor>>,
}

impl Dataset {
    /// Reads and validates `path`, and checks that every image exists.
    pub fn open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest = Manifest::from_json(&text, &path.display().to_string())?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::with_root(manifest, root)
    }

    pub fn with_root(manifest: Manifest, root: PathBuf) -> Result<Self> {
        manifest.validate("manifest")?;
        for e in &manifest.entries {
            let p = root.join(&e.path);
            if !p.is_file() {
                return Err(DpaError::MissingImage(p));
            }
        }
        let cache = (0..manifest.entries.len()).map(|_| OnceCell::new()).collect();
        Ok(Dataset {
            manifest,
            root,
            cache,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.manifest.image_size[0], self.manifest.image_size[1])
    }

    pub fn entry(&self, index: usize) -> &Entry {
        &self.manifest.entries[index]
    }

    /// `3×H×W` image of entry `index`, values in `[0, 1]`.
    pub fn image(&self, index: usize) -> Result<&Tensor> {
        if let Some(t) = self.cache[index].get() {
            return Ok(t);
        }
        let t = self.decode(index)?;
        Ok(self.cache[index].get_or_init(|| t))
    }

    fn decode(&self, index: usize) -> Result<Tensor> {
        let e = &self.manifest.entries[index];
        let path = self.root.join(&e.path);
        let bytes = fs::read(&path).map_err(|err| match err.kind() {
            std::io::ErrorKind::NotFound => DpaError::MissingImage(path.clone()),
            _ => DpaError::Io(err),
        })?;
        let name = path.display().to_string();
        let t = if bytes.starts_with(b"P6") {
            decode_ppm(&bytes, &name)?
        } else {
            let t = read_tensor(&mut bytes.as_slice())?;
            let s = t.shape().to_vec();
            match s.as_slice() {
                [3, _, _] => t,
                [1, 3, h, w] => t.reshape(&[3, *h, *w])?,
                _ => return Err(DpaError::shape(format!("{name}: expected a 3×H×W tensor, got {s:?}"))),
            }
        };
        let (h, w) = self.image_size();
        if t.shape() != [3, h, w] {
            return Err(DpaError::shape(format!(
                "{name}: image is {:?}, manifest declares 3×{h}×{w}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Stacks the images of `indices` into `N×3×H×W`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let (h, w) = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i)?.data());
        }
        Tensor::new(&[indices.len(), 3, h, w], data)
    }

    /// Entry indices of every identity in `split`.
    pub fn by_identity(&self, split: Split) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in self.manifest.indices(split) {
            map.entry(self.manifest.entries[i].id).or_default().push(i);
        }
        map
    }
}
