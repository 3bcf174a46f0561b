//! On-disk dataset: `manifest.json` plus one PPM per sample.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::mask::BinaryMask;
use super::raster::RgbImage;
use super::scene::{generate_sample, GenConfig, Label, PairSample, Scene};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_VERSION: u32 = 1;

/// Split assignment of one sample; validation folds are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val(usize),
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val(k) => write!(f, "val-fold-{k}"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "train" {
            return Ok(Split::Train);
        }
        s.strip_prefix("val-fold-")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(Split::Val)
            .ok_or_else(|| Error::Dataset(format!("unknown split {s:?}")))
    }
}

impl Serialize for Split {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub config: GenConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: usize,
    pub scene_id: usize,
    pub seed: u64,
    /// Path relative to the manifest.
    pub image: String,
    pub s_mask: BinaryMask,
    pub o_mask: BinaryMask,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator: GeneratorInfo,
    pub folds: usize,
    pub samples: Vec<SampleRecord>,
}

/// A manifest with its rasters loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
}

/// Borrowed view of one sample, ready for the model.
#[derive(Clone, Copy, Debug)]
pub struct SampleRef<'a> {
    pub image: &'a RgbImage,
    pub s_mask: &'a BinaryMask,
    pub o_mask: &'a BinaryMask,
    pub label: Label,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> SampleRef<'_> {
        let rec = &self.manifest.samples[i];
        SampleRef {
            image: &self.images[i],
            s_mask: &rec.s_mask,
            o_mask: &rec.o_mask,
            label: rec.label,
        }
    }

    pub fn indices(&self, pred: impl Fn(Split) -> bool) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r.split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(|s| s == Split::Train)
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.indices(|s| s == Split::Val(fold))
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let worn = self
            .manifest
            .samples
            .iter()
            .filter(|s| s.label == Label::Worn)
            .count();
        (worn, self.len() - worn)
    }
}

/// Fold sizes when `n` entries are dealt round-robin into `k` folds.
pub fn fold_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|f| n / k + usize::from(f < n % k)).collect()
}

/// Seeded shuffle; the first `val_count` shuffled positions are dealt
/// round-robin into folds `1..=folds`, the rest go to training.
pub fn assign_splits(n: usize, val_count: usize, folds: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f01d_5eed_f01d);
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; n];
    for (pos, &i) in order.iter().take(val_count.min(n)).enumerate() {
        splits[i] = Split::Val(pos % folds + 1);
    }
    splits
}

/// Number of validation samples for a dataset of `n`.
pub fn val_count(n: usize, cfg: &GenConfig) -> usize {
    let want = (n as f64 * cfg.val_fraction).round() as usize;
    if n >= 2 * cfg.folds {
        want.max(cfg.folds).min(n)
    } else {
        want.min(n)
    }
}

fn image_path(id: usize) -> String {
    format!("images/{id:05}.ppm")
}

/// Bundle generated samples into a dataset with split assignments.
pub fn assemble_dataset(samples: Vec<PairSample>, seed: u64, cfg: &GenConfig) -> Result<Dataset> {
    if samples.is_empty() {
        return Err(Error::Dataset("dataset needs at least one sample".into()));
    }
    let splits = assign_splits(samples.len(), val_count(samples.len(), cfg), cfg.folds, seed);
    let mut records = Vec::with_capacity(samples.len());
    let mut images = Vec::with_capacity(samples.len());
    for (s, split) in samples.into_iter().zip(splits) {
        records.push(SampleRecord {
            id: s.id,
            scene_id: s.scene_id,
            seed: s.seed,
            image: image_path(s.id),
            s_mask: s.s_mask,
            o_mask: s.o_mask,
            label: s.label,
            split,
        });
        images.push(s.image);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            generator: GeneratorInfo {
                seed,
                config: cfg.clone(),
            },
            folds: cfg.folds,
            samples: records,
        },
        images,
    })
}

/// Generate `count` samples sequentially.
pub fn generate_dataset(seed: u64, count: usize, cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..count)
        .map(|i| generate_sample(seed, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    assemble_dataset(samples, seed, cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    img.write_ppm(BufWriter::new(fs::File::create(path)?))
}

fn read_ppm(path: &Path) -> Result<RgbImage> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
    RgbImage::read_ppm(BufReader::new(f))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    for (rec, img) in dataset.manifest.samples.iter().zip(&dataset.images) {
        write_ppm(&dir.join(&rec.image), img)?;
    }
    write_json(&dir.join(MANIFEST_FILE), &dataset.manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    // check the version before the strict schema so old files get a clear message
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != MANIFEST_VERSION {
        return Err(Error::Version {
            found,
            expected: MANIFEST_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(probe)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut images = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let img = read_ppm(&dir.join(&rec.image))?;
        if img.dims() != rec.s_mask.dims() || img.dims() != rec.o_mask.dims() {
            return Err(Error::Dataset(format!(
                "sample {}: image {:?} and masks {:?}/{:?} disagree",
                rec.id,
                img.dims(),
                rec.s_mask.dims(),
                rec.o_mask.dims()
            )));
        }
        if rec.s_mask.is_empty() {
            return Err(Error::Dataset(format!("sample {} has an empty person mask", rec.id)));
        }
        images.push(img);
    }
    Ok(Dataset { manifest, images })
}

/// Scene description consumed by pairwise prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    /// Path relative to the scene file.
    pub image: String,
    pub persons: Vec<BinaryMask>,
    pub clothes: Vec<BinaryMask>,
    /// Ground-truth wearer index per clothing item, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wearers: Option<Vec<Option<usize>>>,
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::InvalidArgument(format!("bad scene path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&dir)?;
    let image = format!("{stem}.ppm");
    write_ppm(&dir.join(&image), &scene.image)?;
    let file = SceneFile {
        version: SCENE_VERSION,
        image,
        persons: scene.persons.clone(),
        clothes: scene.garments.iter().map(|g| g.mask.clone()).collect(),
        wearers: Some(scene.garments.iter().map(|g| g.wearer).collect()),
    };
    write_json(path, &file)
}

/// Load a scene file and its image.
pub fn read_scene(path: &Path) -> Result<(SceneFile, RgbImage)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let file: SceneFile = serde_json::from_str(&text)?;
    if file.version != SCENE_VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: SCENE_VERSION,
        });
    }
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let img = read_ppm(&dir.join(&file.image))?;
    for m in file.persons.iter().chain(&file.clothes) {
        if m.dims() != img.dims() {
            return Err(Error::Dataset(format!(
                "scene mask {:?} does not match image {:?}",
                m.dims(),
                img.dims()
            )));
        }
    }
    Ok((file, img))
}
