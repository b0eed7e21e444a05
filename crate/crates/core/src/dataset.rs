//! On-disk phantom datasets: `<root>/<split>/<id>_m{1..4}.vol`,
//! `<id>_lbl.vol` and one `manifest.json` per split.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MODALITIES;
use crate::phantom::{generate_phantom, Sample};
use crate::volume::{labels_to_tensor, read_labels, read_volume, write_volume, Dtype};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Paths relative to the dataset root, canonical modality order.
    pub images: Vec<String>,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub root: String,
    pub split: Split,
    pub seed: u64,
    pub dims: [usize; 3],
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(root: &Path, split: Split) -> PathBuf {
        root.join(split.dir_name()).join(MANIFEST_NAME)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
    }

    /// Loads `<root>/<split>/manifest.json`.
    pub fn open(root: &Path, split: Split) -> Result<Self> {
        let mut m = Self::load(&Self::path(root, split))?;
        m.root = root.display().to_string();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        let root = Path::new(&self.root);
        self.samples
            .iter()
            .map(|e| {
                if e.images.len() != MODALITIES {
                    return Err(Error::parse(format!("{}: expected {MODALITIES} images", e.id)));
                }
                let volumes = e
                    .images
                    .iter()
                    .map(|p| {
                        let (t, dtype) = read_volume(&root.join(p))?;
                        if dtype != Dtype::F32 || t.shape()[0] != 1 {
                            return Err(Error::parse(format!("{p}: expected a single-channel f32 volume")));
                        }
                        Ok(t)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let labels = read_labels(&root.join(&e.label))?;
                if volumes.iter().any(|v| v.shape()[1..] != labels.dims()) {
                    return Err(Error::parse(format!("{}: image and label extents differ", e.id)));
                }
                Ok(Sample {
                    id: e.id.clone(),
                    volumes,
                    labels,
                })
            })
            .collect()
    }
}

/// `n` distinct per-sample seeds drawn from a generator seeded with `seed`.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s: u64 = rng.random();
        if seen.insert(s) {
            out.push(s);
        }
    }
    out
}

/// Generates both splits under `out_dir` and returns their manifests
/// (train, test). Train and test seeds come from one sequence, so they are
/// disjoint.
pub fn make_dataset(
    n_train: usize,
    n_test: usize,
    seed: u64,
    dims: [usize; 3],
    out_dir: &Path,
) -> Result<(Manifest, Manifest)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::config("each split needs at least one sample"));
    }
    let seeds = sample_seeds(seed, n_train + n_test);
    let (train_seeds, test_seeds) = seeds.split_at(n_train);
    let train = write_split(out_dir, Split::Train, seed, dims, train_seeds)?;
    let test = write_split(out_dir, Split::Test, seed, dims, test_seeds)?;
    Ok((train, test))
}

fn write_split(root: &Path, split: Split, seed: u64, dims: [usize; 3], seeds: &[u64]) -> Result<Manifest> {
    let dir = root.join(split.dir_name());
    fs::create_dir_all(&dir)?;
    let mut samples = Vec::with_capacity(seeds.len());
    for (i, &s) in seeds.iter().enumerate() {
        let id = format!("{}-{i:04}", split.dir_name());
        let sample = generate_phantom(s, dims)?;
        let mut images = Vec::with_capacity(MODALITIES);
        for (m, v) in sample.volumes.iter().enumerate() {
            let rel = format!("{}/{id}_m{}.vol", split.dir_name(), m + 1);
            write_volume(&root.join(&rel), v, Dtype::F32)?;
            images.push(rel);
        }
        let label = format!("{}/{id}_lbl.vol", split.dir_name());
        write_volume(&root.join(&label), &labels_to_tensor(&sample.labels), Dtype::U8)?;
        samples.push(ManifestEntry {
            id,
            seed: s,
            images,
            label,
        });
    }
    let manifest = Manifest {
        root: root.display().to_string(),
        split,
        seed,
        dims,
        samples,
    };
    manifest.save(&dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
