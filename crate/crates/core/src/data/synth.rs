//! Synthetic class-imbalanced datasets: thin vessels on a textured fundus-like
//! background, and multi-class amoeboid blobs on a CT-like background.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::LabelMap;
use crate::numerics::Tensor;
use crate::util::substream;

/// Background / vessel pixel fractions of the retinal-vessel set.
pub const CHASE_RATIOS: [f64; 2] = [0.9336, 0.0664];
/// Background / ground-glass / consolidation / pleural-effusion fractions.
pub const COVID_RATIOS: [f64; 4] = [0.9324, 0.0214, 0.0450, 0.0012];
/// Per-sample absolute tolerance on the vessel fraction.
pub const VESSEL_TOLERANCE: f64 = 0.02;
/// Dataset-level relative tolerance on each blob-class fraction.
pub const BLOB_RELATIVE_TOLERANCE: f64 = 0.2;
pub const MAX_ATTEMPTS: usize = 100;
/// Classes below this fraction are only drawn into some of the samples.
pub const RARE_CLASS_FRACTION: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    #[serde(alias = "vessel")]
    VesselLike,
    #[serde(alias = "blob")]
    BlobMulticlass,
}

fn default_rare_presence() -> f64 {
    0.25
}
fn default_noise() -> f64 {
    0.06
}
fn default_contrast() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub style: Style,
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub train_samples: usize,
    #[serde(default)]
    pub test_samples: usize,
    pub seed: u64,
    /// Fraction of samples that contain a rare class.
    #[serde(default = "default_rare_presence")]
    pub rare_presence: f64,
    /// Std of additive per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Scales the class-to-background intensity gap.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Per-image illumination spread: gain in `1 ± illumination`, offset in
    /// `± illumination / 2`, per-channel cast in `1 ± illumination / 2`.
    #[serde(default)]
    pub illumination: f64,
}

impl SyntheticSpec {
    pub fn chase_like(train_samples: usize, test_samples: usize, seed: u64) -> Self {
        Self {
            name: "chase-like".into(),
            style: Style::VesselLike,
            ratios: CHASE_RATIOS.to_vec(),
            class_names: vec!["background".into(), "vessel".into()],
            image_size: [64, 64],
            train_samples,
            test_samples,
            seed,
            rare_presence: default_rare_presence(),
            noise: default_noise(),
            contrast: default_contrast(),
            illumination: 0.0,
        }
    }

    pub fn covid_like(train_samples: usize, test_samples: usize, seed: u64) -> Self {
        Self {
            name: "covid-like".into(),
            style: Style::BlobMulticlass,
            ratios: COVID_RATIOS.to_vec(),
            class_names: vec![
                "background".into(),
                "ground-glass".into(),
                "consolidation".into(),
                "pleural-effusion".into(),
            ],
            ..Self::chase_like(train_samples, test_samples, seed)
        }
    }

    pub fn classes(&self) -> usize {
        self.ratios.len()
    }

    /// Allowed absolute deviation of each achieved class ratio from its target.
    pub fn ratio_tolerances(&self) -> Vec<f64> {
        match self.style {
            Style::VesselLike => vec![VESSEL_TOLERANCE; self.ratios.len()],
            Style::BlobMulticlass => self.ratios.iter().map(|r| r * BLOB_RELATIVE_TOLERANCE).collect(),
        }
    }

    pub fn total_samples(&self) -> usize {
        self.train_samples + self.test_samples
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            (0..self.classes()).map(|c| format!("class{c}")).collect()
        } else {
            self.class_names.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::config("ratios", "every ratio must be positive"));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config("ratios", format!("ratios sum to {sum}, expected 1")));
        }
        match self.style {
            Style::VesselLike if self.classes() != 2 => {
                return Err(Error::config("ratios", "vessel style needs exactly 2 classes"));
            }
            Style::BlobMulticlass if self.classes() < 3 => {
                return Err(Error::config("ratios", "blob style needs at least 3 classes"));
            }
            _ => {}
        }
        if self.classes() > 255 {
            return Err(Error::config("ratios", "at most 255 classes"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.classes() {
            return Err(Error::config("class_names", "length differs from ratios"));
        }
        let [h, w] = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::config("image_size", "extents must be at least 8"));
        }
        if self.train_samples == 0 {
            return Err(Error::config("train_samples", "must be positive"));
        }
        if !(self.rare_presence > 0.0 && self.rare_presence <= 1.0) {
            return Err(Error::config("rare_presence", "must be in (0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be non-negative"));
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::config("contrast", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.illumination) {
            return Err(Error::config("illumination", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One generated sample with the generator's own per-class pixel tally.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: Tensor,
    pub label: LabelMap,
    pub class_pixels: Vec<u64>,
}

/// Smooth low-frequency field in roughly `[-1, 1]`.
fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let f = rng.gen_range(0.05..0.25);
            let a = rng.gen_range(0.0..2.0 * PI);
            (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = waves
                .iter()
                .map(|(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum::<f64>()
                / 2.0;
        }
    }
    out
}

fn render(
    label: &[u8],
    h: usize,
    w: usize,
    palette: &[[f64; 3]],
    bg_texture: f64,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let tex = texture(h, w, rng);
    let (gain, offset, cast) = if spec.illumination > 0.0 {
        let i = spec.illumination;
        let gain = rng.gen_range(1.0 - i..=1.0 + i);
        let offset = rng.gen_range(-i / 2.0..=i / 2.0);
        let cast: [f64; 3] = std::array::from_fn(|_| rng.gen_range(1.0 - i / 2.0..=1.0 + i / 2.0));
        (gain, offset, cast)
    } else {
        (1.0, 0.0, [1.0; 3])
    };
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        let c = label[p] as usize;
        for ch in 0..3 {
            let bg = palette[0][ch];
            let base = bg + spec.contrast * (palette[c][ch] - bg);
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            let lit = gain * cast[ch] * (base + bg_texture * tex[p]) + offset;
            data[ch * hw + p] = (lit + n).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

const VESSEL_PALETTE: [[f64; 3]; 2] = [[0.62, 0.32, 0.16], [0.40, 0.14, 0.08]];

/// Stamps a disc of the given pixel width; returns newly covered pixels.
fn stamp(mask: &mut [bool], h: usize, w: usize, cy: f64, cx: f64, width: u32, budget: usize) -> usize {
    let r = width as f64 / 2.0;
    let mut added = 0;
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
    for y in y0..y1 {
        for x in x0..x1 {
            let inside = if width == 1 {
                y == cy.floor() as usize && x == cx.floor() as usize
            } else {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            };
            if inside && !mask[y * w + x] && added < budget {
                mask[y * w + x] = true;
                added += 1;
            }
        }
    }
    added
}

fn vessel_attempt(h: usize, w: usize, goal: usize, rng: &mut ChaCha8Rng) -> (Vec<bool>, usize) {
    let mut mask = vec![false; h * w];
    let mut count = 0;
    let turn = Normal::new(0.0, 0.08).expect("valid std");
    for _ in 0..400 {
        if count >= goal {
            break;
        }
        let (mut y, mut x) = if count > 0 && rng.gen_bool(0.6) {
            let on: Vec<usize> = (0..h * w).filter(|&p| mask[p]).collect();
            let p = *on.choose(rng).expect("non-empty");
            ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5)
        } else {
            (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64))
        };
        let mut theta = rng.gen_range(0.0..2.0 * PI);
        let width = rng.gen_range(1..=3u32);
        let length = rng.gen_range(h.min(w) as f64 / 4.0..h.max(w) as f64);
        let mut travelled = 0.0;
        while travelled < length && count < goal {
            if !(0.0..h as f64).contains(&y) || !(0.0..w as f64).contains(&x) {
                break;
            }
            count += stamp(&mut mask, h, w, y, x, width, goal - count);
            theta += turn.sample(rng);
            y += 0.5 * theta.sin();
            x += 0.5 * theta.cos();
            travelled += 0.5;
        }
    }
    (mask, count)
}

/// Runs `attempt` up to `MAX_ATTEMPTS` times on one stream.
fn retry<T>(
    index: usize,
    what: &str,
    rng: &mut ChaCha8Rng,
    mut attempt: impl FnMut(&mut ChaCha8Rng) -> Result<Option<T>>,
) -> Result<T> {
    for _ in 0..MAX_ATTEMPTS {
        if let Some(v) = attempt(rng)? {
            return Ok(v);
        }
    }
    Err(Error::Generation {
        sample: index,
        msg: format!("{what} not reached in {MAX_ATTEMPTS} attempts"),
    })
}

fn vessel_sample(spec: &SyntheticSpec, index: usize) -> Result<SynthSample> {
    let [h, w] = spec.image_size;
    let hw = h * w;
    let target = spec.ratios[1];
    let goal = ((target * hw as f64).round() as usize).max(1);
    let (lo, hi) = (target - VESSEL_TOLERANCE, target + VESSEL_TOLERANCE);
    let mut rng = substream(spec.seed, "vessel", &[index as u64]);
    let what = format!("vessel fraction {target} ± {VESSEL_TOLERANCE}");
    retry(index, &what, &mut rng, |rng| {
        let (mask, count) = vessel_attempt(h, w, goal, rng);
        let frac = count as f64 / hw as f64;
        if frac < lo || frac > hi {
            return Ok(None);
        }
        let label: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        let image = render(&label, h, w, &VESSEL_PALETTE, 0.07, spec, rng)?;
        Ok(Some(SynthSample {
            image,
            label: LabelMap::new(h, w, label)?,
            class_pixels: vec![(hw - count) as u64, count as u64],
        }))
    })
}

fn blob_palette(classes: usize) -> Vec<[f64; 3]> {
    let mut p = vec![[0.22, 0.22, 0.24]];
    for c in 1..classes {
        let v = 0.40 + 0.45 * (c - 1) as f64 / (classes - 2).max(1) as f64;
        p.push([v, v * 0.97, v * 0.94]);
    }
    p
}

/// Claims exactly `area` background pixels nearest (in a wobbly radial
/// metric) to a random centre.
fn place_blob(label: &mut [u8], h: usize, w: usize, class: u8, area: usize, rng: &mut ChaCha8Rng) -> usize {
    let free: Vec<usize> = (0..h * w).filter(|&p| label[p] == 0).collect();
    if free.is_empty() || area == 0 {
        return 0;
    }
    let centre = *free.choose(rng).expect("non-empty");
    let (cy, cx) = ((centre / w) as f64 + 0.5, (centre % w) as f64 + 0.5);
    let harmonics: Vec<(f64, f64)> = (2..=4)
        .map(|_| (rng.gen_range(0.0..0.25), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let stretch = rng.gen_range(0.6..1.6);
    let mut scored: Vec<(f64, usize)> = free
        .iter()
        .map(|&p| {
            let dy = (p / w) as f64 + 0.5 - cy;
            let dx = ((p % w) as f64 + 0.5 - cx) * stretch;
            let theta = dy.atan2(dx);
            let radial = 1.0
                + harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, (a, ph))| a * ((k + 2) as f64 * theta + ph).cos())
                    .sum::<f64>();
            ((dy * dy + dx * dx).sqrt() / radial, p)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let take = area.min(scored.len());
    for &(_, p) in &scored[..take] {
        label[p] = class;
    }
    take
}

/// Which samples of a split of size `n` carry each rare class.
fn rare_presence(spec: &SyntheticSpec, split: &str, offset: usize, n: usize) -> Vec<Vec<bool>> {
    (0..spec.classes())
        .map(|c| {
            if c == 0 || spec.ratios[c] >= RARE_CLASS_FRACTION {
                return vec![true; n];
            }
            let k = ((n as f64 * spec.rare_presence).round() as usize).clamp(1, n.max(1));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut substream(spec.seed, split, &[c as u64, offset as u64]));
            let mut present = vec![false; n];
            for &i in &order[..k.min(n)] {
                present[i] = true;
            }
            present
        })
        .collect()
}

fn blob_sample(spec: &SyntheticSpec, index: usize, present: &[bool], presence_frac: &[f64]) -> Result<SynthSample> {
    let [h, w] = spec.image_size;
    let hw = h * w;
    let classes = spec.classes();
    let mut rng = substream(spec.seed, "blob", &[index as u64]);
    let mut areas = vec![0usize; classes];
    for c in 1..classes {
        let jitter = rng.gen_range(0.6..1.4);
        if present[c] {
            areas[c] = ((spec.ratios[c] / presence_frac[c] * hw as f64 * jitter).round() as usize).max(1);
        }
    }
    if areas.iter().sum::<usize>() >= hw {
        return Err(Error::Generation {
            sample: index,
            msg: "foreground areas exceed the image".into(),
        });
    }
    let mut order: Vec<usize> = (1..classes).collect();
    order.sort_by_key(|&c| std::cmp::Reverse(areas[c]));
    let palette = blob_palette(classes);
    retry(index, "exact blob areas", &mut rng, |rng| {
        let mut label = vec![0u8; hw];
        let mut counts = vec![0u64; classes];
        for &c in &order {
            if areas[c] == 0 {
                continue;
            }
            let blobs = if areas[c] >= 24 { rng.gen_range(1..=2) } else { 1 };
            let mut left = areas[c];
            for b in 0..blobs {
                let part = if b + 1 == blobs { left } else { left / 2 };
                counts[c] += place_blob(&mut label, h, w, c as u8, part, rng) as u64;
                left -= part;
            }
            if counts[c] as usize != areas[c] {
                return Ok(None);
            }
        }
        counts[0] = hw as u64 - counts[1..].iter().sum::<u64>();
        let image = render(&label, h, w, &palette, 0.05, spec, rng)?;
        Ok(Some(SynthSample {
            image,
            label: LabelMap::new(h, w, label)?,
            class_pixels: counts,
        }))
    })
}

/// Generates train samples followed by test samples, all in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    match spec.style {
        Style::VesselLike => (0..spec.total_samples()).map(|i| vessel_sample(spec, i)).collect(),
        Style::BlobMulticlass => {
            let mut out = Vec::with_capacity(spec.total_samples());
            for (split, offset, n) in [
                ("presence-train", 0, spec.train_samples),
                ("presence-test", spec.train_samples, spec.test_samples),
            ] {
                let presence = rare_presence(spec, split, offset, n);
                let frac: Vec<f64> = presence
                    .iter()
                    .map(|p| p.iter().filter(|&&b| b).count().max(1) as f64 / n.max(1) as f64)
                    .collect();
                for i in 0..n {
                    let present: Vec<bool> = presence.iter().map(|p| p[i]).collect();
                    out.push(blob_sample(spec, offset + i, &present, &frac)?);
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vessel_fraction_in_band() {
        let spec = SyntheticSpec::chase_like(6, 2, 3);
        for s in synthesize(&spec).unwrap() {
            let fg = s.label.data().iter().filter(|&&v| v == 1).count() as f64 / 4096.0;
            assert!((fg - CHASE_RATIOS[1]).abs() <= VESSEL_TOLERANCE, "{fg}");
            assert!(s.label.data().iter().all(|&v| v <= 1));
            assert_eq!(s.class_pixels[1], s.label.data().iter().filter(|&&v| v == 1).count() as u64);
        }
    }

    #[test]
    fn exhausted_retries_name_the_sample() {
        let mut rng = substream(0, "t", &[]);
        let r: Result<()> = retry(17, "x", &mut rng, |_| Ok(None));
        match r {
            Err(Error::Generation { sample, .. }) => assert_eq!(sample, 17),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_rejects_bad_ratios() {
        let mut spec = SyntheticSpec::covid_like(4, 0, 0);
        spec.ratios = vec![0.9, 0.05, 0.04, 0.001];
        assert!(matches!(spec.validate(), Err(Error::Config { .. })));
        spec.ratios = vec![0.5, 0.5];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn blob_rare_class_presence() {
        let spec = SyntheticSpec::covid_like(16, 4, 9);
        let samples = synthesize(&spec).unwrap();
        let with3 = samples[..16].iter().filter(|s| s.class_pixels[3] > 0).count();
        assert_eq!(with3, 4);
        assert!(samples[16..].iter().any(|s| s.class_pixels[3] > 0));
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::covid_like(3, 1, 5);
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn illumination_varies_images_not_labels() {
        let mut spec = SyntheticSpec::chase_like(4, 0, 2);
        spec.image_size = [16, 16];
        spec.noise = 0.0;
        let flat = synthesize(&spec).unwrap();
        spec.illumination = 0.4;
        let lit = synthesize(&spec).unwrap();
        let mut means = Vec::new();
        for (a, b) in flat.iter().zip(&lit) {
            assert_eq!(a.label, b.label);
            assert_ne!(a.image, b.image);
            means.push(b.image.mean() - a.image.mean());
        }
        assert!(means.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-3), "{means:?}");
        spec.illumination = 1.0;
        assert!(matches!(spec.validate(), Err(Error::Config { key, .. }) if key == "illumination"));
    }
}
