use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pnm::{read_sample, write_sample};
use super::synth::{synthesize, Style, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mixing::LabelMap;
use crate::numerics::Tensor;
use crate::util::{sha256_hex, substream, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    LabeledTrain,
    UnlabeledTrain,
    Test,
}

impl SplitTag {
    pub fn is_train(self) -> bool {
        self != SplitTag::Test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub image: String,
    pub label: String,
    pub split: SplitTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: usize,
    pub class_names: Vec<String>,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub seed: u64,
    pub spec: SyntheticSpec,
    /// Per-class pixel fractions over all samples, tallied by the generator.
    pub achieved_ratios: Vec<f64>,
    /// Samples containing each class, tallied by the generator.
    pub class_presence: Vec<usize>,
    pub labeled_ratio: Option<f64>,
    pub split_seed: Option<u64>,
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// An image with its label, loaded from disk.
pub type Sample = (Tensor, LabelMap);

impl DatasetManifest {
    pub fn to_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s.into_bytes()
    }

    /// sha256 of the serialized manifest.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.clone(),
            offset: byte_offset(&bytes, e.line(), e.column()),
            msg: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    /// Writes `manifest.json` under `dir` and points `root` there.
    pub fn save(&mut self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, &self.to_json())?;
        self.root = dir.to_path_buf();
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.class_names.len() != self.classes {
            return Err(Error::config("classes", "class count and names disagree"));
        }
        if self.samples.is_empty() {
            return Err(Error::config("samples", "manifest lists no samples"));
        }
        for s in &self.samples {
            for p in [&s.image, &s.label] {
                if Path::new(p).is_absolute() || p.contains("..") {
                    return Err(Error::config("samples", format!("path {p} must stay inside the dataset")));
                }
            }
        }
        Ok(())
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == tag).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split.is_train()).collect()
    }

    pub fn paths(&self, i: usize) -> (PathBuf, PathBuf) {
        let s = &self.samples[i];
        (self.root.join(&s.image), self.root.join(&s.label))
    }

    pub fn read(&self, i: usize) -> Result<Sample> {
        let (ip, lp) = self.paths(i);
        let (image, label) = read_sample(&ip, &lp, Some((self.image_size[0], self.image_size[1])))?;
        label.validate(self.classes)?;
        Ok((image, label))
    }

    pub fn read_split(&self, tag: SplitTag) -> Result<Vec<Sample>> {
        self.indices(tag).into_iter().map(|i| self.read(i)).collect()
    }
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut cur = 1;
    for (i, &b) in bytes.iter().enumerate() {
        if cur == line {
            return i + column.saturating_sub(1);
        }
        if b == b'\n' {
            cur += 1;
        }
    }
    bytes.len()
}

pub fn image_name(i: usize) -> String {
    format!("img_{i:04}.ppm")
}

pub fn label_name(i: usize) -> String {
    format!("lbl_{i:04}.pgm")
}

/// Generates every sample in memory, then writes files and the manifest.
/// Nothing is written when validation or generation fails.
pub fn generate_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = synthesize(spec)?;
    let classes = spec.classes();
    let mut totals = vec![0u64; classes];
    let mut presence = vec![0usize; classes];
    for s in &samples {
        for c in 0..classes {
            totals[c] += s.class_pixels[c];
            presence[c] += (s.class_pixels[c] > 0) as usize;
        }
    }
    let all: u64 = totals.iter().sum();
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (img, lbl) = (image_name(i), label_name(i));
        write_sample(&out_dir.join(&img), &out_dir.join(&lbl), &s.image, &s.label)?;
        entries.push(SampleEntry {
            image: img,
            label: lbl,
            split: if i < spec.train_samples { SplitTag::UnlabeledTrain } else { SplitTag::Test },
        });
    }
    let mut manifest = DatasetManifest {
        name: spec.name.clone(),
        classes,
        class_names: spec.class_names(),
        image_size: spec.image_size,
        seed: spec.seed,
        spec: spec.clone(),
        achieved_ratios: totals.iter().map(|&t| t as f64 / all as f64).collect(),
        class_presence: presence,
        labeled_ratio: None,
        split_seed: None,
        samples: entries,
        root: PathBuf::new(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn require_style(spec: &SyntheticSpec, style: Style) -> Result<()> {
    if spec.style != style {
        return Err(Error::config("style", format!("expected {style:?}, got {:?}", spec.style)));
    }
    Ok(())
}

pub fn generate_vessel_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    require_style(spec, Style::VesselLike)?;
    generate_dataset(spec, out_dir)
}

pub fn generate_blob_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    require_style(spec, Style::BlobMulticlass)?;
    generate_dataset(spec, out_dir)
}

/// Labeled count for `train` samples at `ratio`: `⌊train·ratio⌋`, at least 1.
pub fn labeled_count(train: usize, ratio: f64) -> usize {
    (((train as f64) * ratio + 1e-9).floor() as usize).clamp(1, train)
}

/// Re-tags the train samples: a seeded uniform subset becomes labeled.
pub fn split_dataset(manifest: &DatasetManifest, labeled_ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::config("labeled_ratio", format!("{labeled_ratio} outside (0, 1]")));
    }
    let mut train = manifest.train_indices();
    if train.is_empty() {
        return Err(Error::config("samples", "no train samples to split"));
    }
    let k = labeled_count(train.len(), labeled_ratio);
    train.shuffle(&mut substream(seed, "split", &[]));
    let mut out = manifest.clone();
    for (rank, &i) in train.iter().enumerate() {
        out.samples[i].split = if rank < k { SplitTag::LabeledTrain } else { SplitTag::UnlabeledTrain };
    }
    out.labeled_ratio = Some(labeled_ratio);
    out.split_seed = Some(seed);
    Ok(out)
}
