//! Label-aware mixing: class selection, binary masks and image/label
//! composition for CutMix, ClassMix and SupMix.
//!
//! All mixes share one rule: `out = M ⊙ src + (1 − M) ⊙ dst`, applied to the
//! image channels and the label map alike. They differ only in where `M`
//! comes from:
//!
//! * ClassMix draws half of the classes predicted on the source image and
//!   masks those predicted regions.
//! * SupMix draws from the ground-truth classes of a labeled image, with the
//!   background removed, so the mask is exact whatever the model predicts.
//!   Pasted pixels carry ground-truth classes and are always trainable.
//! * CutMix pastes a random rectangle.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::segnet::SegModel;

pub const IGNORE_INDEX: u8 = 255;

pub type ClassSet = BTreeSet<u8>;

/// Per-pixel class indices; `IGNORE_INDEX` marks untrainable pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}×{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Distinct non-ignored classes.
    pub fn present_classes(&self) -> ClassSet {
        let mut seen = [false; 256];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..=254u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn ignored_count(&self) -> usize {
        self.data.iter().filter(|&&c| c == IGNORE_INDEX).count()
    }

    /// Every entry is below `classes` or is the ignore index.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&c| c != IGNORE_INDEX && c as usize >= classes)
        {
            Some(p) => Err(Error::Domain(format!(
                "label {} at pixel {p} outside [0, {classes})",
                self.data[p]
            ))),
            None => Ok(()),
        }
    }
}

/// Per-pixel binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape("mask length does not match extents".into()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub image: Tensor,
    pub label: LabelMap,
    pub mask: ClassMask,
    pub selected: ClassSet,
}

fn sample_subset<R: Rng + ?Sized>(pool: &ClassSet, k: usize, rng: &mut R) -> ClassSet {
    let items: Vec<u8> = pool.iter().copied().collect();
    items.choose_multiple(rng, k).copied().collect()
}

/// Uniform subset of ⌊n/2⌋ of the present classes.
pub fn select_classmix_classes<R: Rng + ?Sized>(present: &ClassSet, rng: &mut R) -> ClassSet {
    sample_subset(present, present.len() / 2, rng)
}

/// Background removed, then a uniform subset of `max(1, ⌊n/2⌋)` of the rest.
pub fn select_supmix_classes<R: Rng + ?Sized>(
    present: &ClassSet,
    background: u8,
    rng: &mut R,
) -> ClassSet {
    let mut remaining = present.clone();
    remaining.remove(&background);
    if remaining.is_empty() {
        return ClassSet::new();
    }
    let k = (remaining.len() / 2).max(1);
    sample_subset(&remaining, k, rng)
}

/// 1 exactly where the label is in `selected`; ignored pixels are 0.
pub fn build_mask(label: &LabelMap, selected: &ClassSet) -> ClassMask {
    let mut lut = [false; 256];
    for &c in selected {
        lut[c as usize] = true;
    }
    lut[IGNORE_INDEX as usize] = false;
    ClassMask {
        height: label.height,
        width: label.width,
        bits: label.data.iter().map(|&c| lut[c as usize]).collect(),
    }
}

fn check_dims(img: &Tensor, lbl: &LabelMap, mask: &ClassMask, what: &str) -> Result<()> {
    let (_, h, w) = img.chw()?;
    if (h, w) != lbl.dims() || (h, w) != mask.dims() {
        return Err(Error::Shape(format!(
            "{what}: image {h}×{w}, label {:?}, mask {:?} disagree",
            lbl.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

/// `out = M ⊙ src + (1 − M) ⊙ dst` for image and label.
pub fn compose(
    src_img: &Tensor,
    src_lbl: &LabelMap,
    dst_img: &Tensor,
    dst_lbl: &LabelMap,
    mask: &ClassMask,
) -> Result<MixResult> {
    check_dims(src_img, src_lbl, mask, "compose source")?;
    check_dims(dst_img, dst_lbl, mask, "compose destination")?;
    if src_img.shape() != dst_img.shape() {
        return Err(Error::Shape(format!(
            "compose: source image {:?} vs destination {:?}",
            src_img.shape(),
            dst_img.shape()
        )));
    }
    let hw = mask.bits.len();
    let mut image = dst_img.clone();
    for (c, plane) in image.data_mut().chunks_mut(hw).enumerate() {
        let src = &src_img.data()[c * hw..(c + 1) * hw];
        for ((d, &s), &m) in plane.iter_mut().zip(src).zip(&mask.bits) {
            if m {
                *d = s;
            }
        }
    }
    let mut label = dst_lbl.clone();
    for ((d, &s), &m) in label.data.iter_mut().zip(&src_lbl.data).zip(&mask.bits) {
        if m {
            *d = s;
        }
    }
    Ok(MixResult {
        image,
        label,
        mask: mask.clone(),
        selected: ClassSet::new(),
    })
}

/// ClassMix from precomputed labels: the mask comes from `mask_src`
/// (typically the arg-max prediction on `x_a`), the pasted labels from
/// `lbl_a`.
pub fn classmix_from_labels<R: Rng + ?Sized>(
    x_a: &Tensor,
    mask_src: &LabelMap,
    lbl_a: &LabelMap,
    x_b: &Tensor,
    lbl_b: &LabelMap,
    rng: &mut R,
) -> Result<MixResult> {
    let selected = select_classmix_classes(&mask_src.present_classes(), rng);
    let mask = build_mask(mask_src, &selected);
    let mut out = compose(x_a, lbl_a, x_b, lbl_b, &mask)?;
    out.selected = selected;
    Ok(out)
}

/// Full ClassMix: arg-max pseudo-labels of both images from `model`, half the
/// classes of `x_a` pasted onto `x_b`.
pub fn classmix<R: Rng + ?Sized>(
    x_a: &Tensor,
    x_b: &Tensor,
    model: &SegModel,
    rng: &mut R,
) -> Result<MixResult> {
    let y_a = crate::trainer::argmax_labels(&model.seg_forward(x_a)?.0)?;
    let y_b = crate::trainer::argmax_labels(&model.seg_forward(x_b)?.0)?;
    classmix_from_labels(x_a, &y_a, &y_a, x_b, &y_b, rng)
}

/// SupMix: ground-truth regions of the labeled image pasted onto the
/// strong-augmented unlabeled image and its pseudo-label.
pub fn supmix<R: Rng + ?Sized>(
    x_l: &Tensor,
    y_l: &LabelMap,
    x_strong: &Tensor,
    y_pseudo: &LabelMap,
    background: u8,
    rng: &mut R,
) -> Result<MixResult> {
    if let Some(p) = y_l.data.iter().position(|&c| c == IGNORE_INDEX) {
        return Err(Error::Domain(format!(
            "supmix ground truth has ignore index at pixel {p}"
        )));
    }
    let selected = select_supmix_classes(&y_l.present_classes(), background, rng);
    let mask = build_mask(y_l, &selected);
    let mut out = compose(x_l, y_l, x_strong, y_pseudo, &mask)?;
    out.selected = selected;
    Ok(out)
}

pub const CUTMIX_AREA_RANGE: (f64, f64) = (0.1, 0.5);

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn mask(&self, h: usize, w: usize) -> ClassMask {
        let mut bits = vec![false; h * w];
        for y in self.y0..self.y1 {
            bits[y * w + self.x0..y * w + self.x1].fill(true);
        }
        ClassMask {
            height: h,
            width: w,
            bits,
        }
    }
}

/// A `√r·H × √r·W` box centred uniformly in the image, clipped to bounds.
pub fn sample_cut_box<R: Rng + ?Sized>(h: usize, w: usize, area_ratio: f64, rng: &mut R) -> CutBox {
    let cut_h = (h as f64 * area_ratio.sqrt()).round() as isize;
    let cut_w = (w as f64 * area_ratio.sqrt()).round() as isize;
    let cy = rng.gen_range(0..h) as isize;
    let cx = rng.gen_range(0..w) as isize;
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    CutBox {
        y0: clip(cy - cut_h / 2, h),
        y1: clip(cy - cut_h / 2 + cut_h, h),
        x0: clip(cx - cut_w / 2, w),
        x1: clip(cx - cut_w / 2 + cut_w, w),
    }
}

/// CutMix with a given area ratio: a rectangle of `x_a` pasted onto `x_b`.
pub fn cutmix_with_ratio<R: Rng + ?Sized>(
    x_a: &Tensor,
    y_a: &LabelMap,
    x_b: &Tensor,
    y_b: &LabelMap,
    area_ratio: f64,
    rng: &mut R,
) -> Result<(MixResult, CutBox)> {
    let (h, w) = y_b.dims();
    let cut = sample_cut_box(h, w, area_ratio, rng);
    let out = compose(x_a, y_a, x_b, y_b, &cut.mask(h, w))?;
    Ok((out, cut))
}

/// CutMix with the area ratio drawn uniformly from `CUTMIX_AREA_RANGE`.
pub fn cutmix<R: Rng + ?Sized>(
    x_a: &Tensor,
    y_a: &LabelMap,
    x_b: &Tensor,
    y_b: &LabelMap,
    rng: &mut R,
) -> Result<MixResult> {
    let ratio = rng.gen_range(CUTMIX_AREA_RANGE.0..=CUTMIX_AREA_RANGE.1);
    Ok(cutmix_with_ratio(x_a, y_a, x_b, y_b, ratio, rng)?.0)
}
