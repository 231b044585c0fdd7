//! Synthetic shapes detection data and jittered proposals.

mod proposals;
mod render;

pub use proposals::{jitter_proposals, JitterConfig};
pub use render::{shape_mask, Shape};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::GroundTruth;
use crate::eval::{GtIndex, SimilarityMap};
use crate::region::Region;
use crate::tensor::{
    read_tensor_file, read_tensor_header_file, write_tensor_file, Tensor, TensorError,
};

pub const MANIFEST_VERSION: u32 = 1;
const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("image {image}: could not place object {object} after {tries} tries")]
    Unplaceable {
        image: usize,
        object: usize,
        tries: usize,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// At most 8; categories `2k` and `2k + 1` are similar.
    pub n_categories: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object side lengths in pixels, inclusive.
    pub size_min: usize,
    pub size_max: usize,
    /// Largest width/height ratio (and its inverse).
    pub max_aspect: f64,
    /// Std of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Objects may touch but never overlap by more than this IoU.
    pub max_overlap: f64,
    /// The small training split is the first `train_small` images of the
    /// large one.
    pub train_small: usize,
    pub train_large: usize,
    pub test: usize,
    pub max_tries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_categories: 6,
            objects_min: 1,
            objects_max: 3,
            size_min: 14,
            size_max: 30,
            max_aspect: 1.4,
            noise: 0.08,
            max_overlap: 0.0,
            train_small: 60,
            train_large: 240,
            test: 80,
            max_tries: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_categories == 0 || self.n_categories > Shape::ALL.len() {
            return bad(format!(
                "n_categories {} not in 1..={}",
                self.n_categories,
                Shape::ALL.len()
            ));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad(format!(
                "objects range {}..={} is empty or zero",
                self.objects_min, self.objects_max
            ));
        }
        if self.size_min < 2 || self.size_min > self.size_max {
            return bad(format!(
                "size range {}..={} invalid",
                self.size_min, self.size_max
            ));
        }
        if !(self.max_aspect >= 1.0 && self.max_aspect.is_finite()) {
            return bad(format!("max_aspect {} must be >= 1", self.max_aspect));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return bad(format!("max_overlap {} not in [0, 1)", self.max_overlap));
        }
        if self.train_small > self.train_large {
            return bad(format!(
                "train_small {} exceeds train_large {}",
                self.train_small, self.train_large
            ));
        }
        if self.train_large == 0 || self.test == 0 {
            return bad("train_large and test must be positive".into());
        }
        if self.max_tries == 0 {
            return bad("max_tries must be positive".into());
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        Shape::ALL[..self.n_categories]
            .iter()
            .map(|s| s.name().to_string())
            .collect()
    }

    pub fn similarity(&self) -> SimilarityMap {
        (0..self.n_categories)
            .map(|c| {
                let partner = c ^ 1;
                let set = if partner < self.n_categories {
                    BTreeSet::from([partner])
                } else {
                    BTreeSet::new()
                };
                (c, set)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: usize,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub blob: String,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub categories: Vec<String>,
    pub similarity: SimilarityMap,
    pub train_small: usize,
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(move |e| e.split == split)
    }

    /// Training images; the first `train_small` only when `small`.
    pub fn train_images(&self, small: bool) -> Vec<&ImageEntry> {
        let all = self.split(Split::Train);
        if small {
            all.take(self.train_small).collect()
        } else {
            all.collect()
        }
    }

    pub fn ground_truth(&self, split: Split) -> GtIndex {
        self.split(split)
            .map(|e| (e.id, e.objects.clone()))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }

    /// Reads `manifest.json` (a directory or the file itself) and checks
    /// that every blob exists with the recorded shape.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), SynthError> {
        let file = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let m: Self = serde_json::from_str(&fs::read_to_string(&file)?)?;
        m.validate(&root)?;
        Ok((m, root))
    }

    fn validate(&self, root: &Path) -> Result<(), SynthError> {
        if self.version != MANIFEST_VERSION {
            return Err(SynthError::Manifest(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let n = self.n_categories();
        for c in 0..n {
            match self.similarity.get(&c) {
                Some(s) if s.iter().all(|&o| o < n && o != c) => {}
                _ => {
                    return Err(SynthError::Manifest(format!(
                        "bad similarity entry for category {c}"
                    )))
                }
            }
        }
        let mut ids = BTreeSet::new();
        for e in &self.images {
            if !ids.insert(e.id) {
                return Err(SynthError::Manifest(format!("duplicate image id {}", e.id)));
            }
            let shape = read_tensor_header_file(root.join(&e.blob)).map_err(|err| {
                SynthError::Manifest(format!("image {}: {} ({err})", e.id, e.blob))
            })?;
            if shape != [CHANNELS, e.height, e.width] {
                return Err(SynthError::Manifest(format!(
                    "image {}: blob shape {shape:?}, manifest says [{CHANNELS}, {}, {}]",
                    e.id, e.height, e.width
                )));
            }
            if let Some(g) = e.objects.iter().find(|g| g.category >= n) {
                return Err(SynthError::Manifest(format!(
                    "image {}: category {} out of range",
                    e.id, g.category
                )));
            }
        }
        Ok(())
    }

    pub fn load_image(&self, root: &Path, entry: &ImageEntry) -> Result<Tensor, SynthError> {
        Ok(read_tensor_file(root.join(&entry.blob))?)
    }
}

/// One rendered image with its objects.
pub struct Sample {
    pub image: Tensor,
    pub objects: Vec<GroundTruth>,
}

fn place_objects<R: Rng>(
    cfg: &SynthConfig,
    image: usize,
    rng: &mut R,
) -> Result<Vec<GroundTruth>, SynthError> {
    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(n);
    for object in 0..n {
        let mut placed = false;
        for _ in 0..cfg.max_tries {
            let w = rng.random_range(cfg.size_min..=cfg.size_max);
            let h = rng.random_range(cfg.size_min..=cfg.size_max);
            if (w.max(h) as f64) > cfg.max_aspect * w.min(h) as f64
                || w > cfg.width
                || h > cfg.height
            {
                continue;
            }
            let x = rng.random_range(0..=cfg.width - w);
            let y = rng.random_range(0..=cfg.height - h);
            let region = Region::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
                .expect("positive size");
            let clear = objects.iter().all(|o| {
                let v = o.region.iou(&region);
                if cfg.max_overlap == 0.0 {
                    o.region.intersection(&region) == 0.0
                } else {
                    v <= cfg.max_overlap
                }
            });
            if clear {
                let category = rng.random_range(0..cfg.n_categories);
                objects.push(GroundTruth { region, category });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Unplaceable {
                image,
                object,
                tries: cfg.max_tries,
            });
        }
    }
    Ok(objects)
}

/// Renders one image: a flat random dark background, bright objects of a
/// random color, Gaussian pixel noise, values clamped to `[0, 1]`.
pub fn render_sample<R: Rng>(
    cfg: &SynthConfig,
    image: usize,
    rng: &mut R,
) -> Result<Sample, SynthError> {
    let objects = place_objects(cfg, image, rng)?;
    let (h, w) = (cfg.height, cfg.width);
    let bg: [f32; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
    let mut data = vec![0f32; CHANNELS * h * w];
    for c in 0..CHANNELS {
        data[c * h * w..(c + 1) * h * w].fill(bg[c]);
    }
    for o in &objects {
        let color: [f32; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
        let (x0, y0) = (o.region.x1 as usize, o.region.y1 as usize);
        let (ow, oh) = (o.region.width() as usize, o.region.height() as usize);
        let mask = shape_mask(Shape::ALL[o.category], ow, oh);
        for i in 0..oh {
            for j in 0..ow {
                if mask[i * ow + j] {
                    for c in 0..CHANNELS {
                        data[c * h * w + (y0 + i) * w + x0 + j] = color[c];
                    }
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise as f32).expect("finite noise");
        for v in &mut data {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new(vec![CHANNELS, h, w], data)?;
    Ok(Sample { image, objects })
}

/// Renders the whole dataset into `out` (blobs under `images/`) and writes
/// `manifest.json`. Each image draws from its own generator seeded by
/// `(seed, id)`, so the output is a pure function of the config.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(out.join("images"))?;
    let total = cfg.train_large + cfg.test;
    let mut images = Vec::with_capacity(total);
    for id in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64 + 1);
        let sample = render_sample(cfg, id, &mut rng)?;
        let blob = format!("images/{id:05}.noct");
        write_tensor_file(out.join(&blob), &sample.image)?;
        images.push(ImageEntry {
            id,
            split: if id < cfg.train_large {
                Split::Train
            } else {
                Split::Test
            },
            blob,
            height: cfg.height,
            width: cfg.width,
            objects: sample.objects,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        categories: cfg.category_names(),
        similarity: cfg.similarity(),
        train_small: cfg.train_small,
        images,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// Per-category ground-truth counts, useful for logging.
pub fn category_counts(manifest: &DatasetManifest, split: Split) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for e in manifest.split(split) {
        for o in &e.objects {
            *m.entry(o.category).or_insert(0) += 1;
        }
    }
    m
}
