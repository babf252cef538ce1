//! Weak (crop + flip) and strong (jitter, grayscale, blur) augmentations.
//!
//! Strong augmentation is photometric only and runs on the weak view, so the
//! two views share their geometry pixel for pixel. Photometric order is fixed:
//! color jitter (brightness, contrast, saturation, hue) → grayscale → blur.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::LabelMap;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.5,
            hue: 0.25,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentConfig {
    /// No strong perturbation at all.
    pub fn photometric_off(mut self) -> Self {
        self.jitter_p = 0.0;
        self.grayscale_p = 0.0;
        self.blur_p = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
        ];
        for (k, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{k}"), "probability outside [0, 1]"));
            }
        }
        for (k, m) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::config(format!("augment.{k}"), "magnitude outside [0, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config("augment.hue", "magnitude outside [0, 0.5]"));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("augment.blur_sigma", "need 0 < min ≤ max"));
        }
        Ok(())
    }
}

/// Geometric parameters shared by every view of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    /// Reflect padding added before cropping, per side.
    pub pad: (usize, usize),
    pub offset: (usize, usize),
    pub size: (usize, usize),
    pub flip: bool,
}

impl Geometry {
    /// Source pixel in the unpadded input for output pixel `(y, x)`.
    pub fn source_pixel(&self, y: usize, x: usize, in_h: usize, in_w: usize) -> (usize, usize) {
        let xf = if self.flip { self.size.1 - 1 - x } else { x };
        let py = (y + self.offset.0) as isize - self.pad.0 as isize;
        let px = (xf + self.offset.1) as isize - self.pad.1 as isize;
        (reflect(py, in_h), reflect(px, in_w))
    }
}

/// Reflect an index into `[0, n)` without repeating the edge.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn sample_geometry<R: Rng + ?Sized>(
    in_h: usize,
    in_w: usize,
    crop: (usize, usize),
    flip_p: f64,
    rng: &mut R,
) -> Result<Geometry> {
    let (ch, cw) = crop;
    if ch == 0 || cw == 0 {
        return Err(Error::Shape("crop size must be positive".into()));
    }
    let pad_h = ch.saturating_sub(in_h).div_ceil(2);
    let pad_w = cw.saturating_sub(in_w).div_ceil(2);
    let (ph, pw) = (in_h + 2 * pad_h, in_w + 2 * pad_w);
    let oy = rng.gen_range(0..=ph - ch);
    let ox = rng.gen_range(0..=pw - cw);
    let flip = rng.gen_bool(flip_p);
    Ok(Geometry {
        pad: (pad_h, pad_w),
        offset: (oy, ox),
        size: crop,
        flip,
    })
}

pub fn apply_geometry_image(image: &Tensor, g: &Geometry) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let (oh, ow) = g.size;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = g.source_pixel(y, x, h, w);
            for ch in 0..c {
                out.set3(ch, y, x, image.at3(ch, sy, sx));
            }
        }
    }
    Ok(out)
}

pub fn apply_geometry_label(label: &LabelMap, g: &Geometry) -> Result<LabelMap> {
    let (h, w) = label.dims();
    let (oh, ow) = g.size;
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = g.source_pixel(y, x, h, w);
            data.push(label.get(sy, sx));
        }
    }
    LabelMap::new(oh, ow, data)
}

/// Random crop (reflect-padded when the image is smaller) and horizontal flip.
pub fn weak_augment<R: Rng + ?Sized>(
    image: &Tensor,
    label: &LabelMap,
    crop: (usize, usize),
    rng: &mut R,
) -> Result<(Tensor, LabelMap)> {
    let (_, h, w) = image.chw()?;
    if label.dims() != (h, w) {
        return Err(Error::Shape("image and label extents differ".into()));
    }
    let g = sample_geometry(h, w, crop, AugmentConfig::default().flip_p, rng)?;
    Ok((apply_geometry_image(image, &g)?, apply_geometry_label(label, &g)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Concrete draw of the strong pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongParams {
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

fn factor<R: Rng + ?Sized>(m: f64, rng: &mut R) -> f64 {
    if m == 0.0 {
        1.0
    } else {
        rng.gen_range(1.0 - m..=1.0 + m)
    }
}

pub fn sample_strong<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> StrongParams {
    let jitter = rng.gen_bool(cfg.jitter_p).then(|| Jitter {
        brightness: factor(cfg.brightness, rng),
        contrast: factor(cfg.contrast, rng),
        saturation: factor(cfg.saturation, rng),
        hue: if cfg.hue == 0.0 {
            0.0
        } else {
            rng.gen_range(-cfg.hue..=cfg.hue)
        },
    });
    let grayscale = rng.gen_bool(cfg.grayscale_p);
    let blur_sigma = rng
        .gen_bool(cfg.blur_p)
        .then(|| rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1));
    StrongParams {
        jitter,
        grayscale,
        blur_sigma,
    }
}

pub fn apply_strong(image: &Tensor, p: &StrongParams) -> Result<Tensor> {
    let (c, _, _) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("strong augmentation needs RGB, got {c} channels")));
    }
    let mut img = image.clone();
    if let Some(j) = p.jitter {
        img = adjust_brightness(&img, j.brightness);
        img = adjust_contrast(&img, j.contrast)?;
        img = adjust_saturation(&img, j.saturation)?;
        img = adjust_hue(&img, j.hue)?;
    }
    if p.grayscale {
        img = to_grayscale(&img)?;
    }
    if let Some(s) = p.blur_sigma {
        img = gaussian_blur(&img, s)?;
    }
    Ok(img.map(|v| v.clamp(0.0, 1.0)))
}

pub fn strong_augment_with<R: Rng + ?Sized>(
    image: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let p = sample_strong(cfg, rng);
    apply_strong(image, &p)
}

/// Strong photometric augmentation with the default magnitudes.
pub fn strong_augment<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Result<Tensor> {
    strong_augment_with(image, &AugmentConfig::default(), rng)
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma_plane(img: &Tensor) -> Result<Vec<f64>> {
    let (_, h, w) = img.chw()?;
    let hw = h * w;
    let d = img.data();
    Ok((0..hw)
        .map(|p| LUMA[0] * d[p] + LUMA[1] * d[hw + p] + LUMA[2] * d[2 * hw + p])
        .collect())
}

pub fn adjust_brightness(img: &Tensor, f: f64) -> Tensor {
    img.map(|v| (v * f).clamp(0.0, 1.0))
}

pub fn adjust_contrast(img: &Tensor, f: f64) -> Result<Tensor> {
    let l = luma_plane(img)?;
    let mean = l.iter().sum::<f64>() / l.len().max(1) as f64;
    Ok(img.map(|v| (f * v + (1.0 - f) * mean).clamp(0.0, 1.0)))
}

pub fn adjust_saturation(img: &Tensor, f: f64) -> Result<Tensor> {
    let l = luma_plane(img)?;
    let hw = l.len();
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = l[i % hw];
        *v = (f * *v + (1.0 - f) * g).clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn to_grayscale(img: &Tensor) -> Result<Tensor> {
    let l = luma_plane(img)?;
    let mut data = Vec::with_capacity(3 * l.len());
    for _ in 0..3 {
        data.extend_from_slice(&l);
    }
    Tensor::new(img.shape().to_vec(), data)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `delta` turns.
pub fn adjust_hue(img: &Tensor, delta: f64) -> Result<Tensor> {
    if delta == 0.0 {
        return Ok(img.clone());
    }
    let (_, h, w) = img.chw()?;
    let hw = h * w;
    let mut out = img.clone();
    let d = out.data_mut();
    for p in 0..hw {
        let (hh, s, v) = rgb_to_hsv(d[p], d[hw + p], d[2 * hw + p]);
        let (r, g, b) = hsv_to_rgb(hh + delta, s, v);
        d[p] = r;
        d[hw + p] = g;
        d[2 * hw + p] = b;
    }
    Ok(out)
}

/// Separable Gaussian blur, kernel size `2⌈2σ⌉ + 1`, reflect borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    let radius = (2.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|v| v / norm).collect();
    let mut tmp = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - radius, w);
                    s += wt * img.at3(ch, y, sx);
                }
                tmp.set3(ch, y, x, s);
            }
        }
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - radius, h);
                    s += wt * tmp.at3(ch, sy, x);
                }
                out.set3(ch, y, x, s);
            }
        }
    }
    Ok(out)
}

/// Weak and strong views of one sample with their shared geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedViews {
    pub weak: Tensor,
    pub strong: Tensor,
    pub label: Option<LabelMap>,
    pub geometry: Geometry,
}

/// Weak view via `geo_rng`, strong view of it via `photo_rng`.
pub fn augment_views<R: Rng + ?Sized, Q: Rng + ?Sized>(
    image: &Tensor,
    label: Option<&LabelMap>,
    crop: (usize, usize),
    cfg: &AugmentConfig,
    geo_rng: &mut R,
    photo_rng: &mut Q,
) -> Result<AugmentedViews> {
    let (_, h, w) = image.chw()?;
    let geometry = sample_geometry(h, w, crop, cfg.flip_p, geo_rng)?;
    let weak = apply_geometry_image(image, &geometry)?;
    let label = label.map(|l| apply_geometry_label(l, &geometry)).transpose()?;
    let strong = strong_augment_with(&weak, cfg, photo_rng)?;
    Ok(AugmentedViews {
        weak,
        strong,
        label,
        geometry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    fn rand_label(h: usize, w: usize, rng: &mut ChaCha8Rng) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..4)).collect()).unwrap()
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = rand_image(5, 7, &mut rng);
        let g = Geometry { pad: (0, 0), offset: (0, 0), size: (5, 7), flip: true };
        let once = apply_geometry_image(&img, &g).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_geometry_image(&once, &g).unwrap(), img);
    }

    #[test]
    fn top_left_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(6, 6, &mut rng);
        let g = Geometry { pad: (0, 0), offset: (0, 0), size: (3, 4), flip: false };
        let out = apply_geometry_image(&img, &g).unwrap();
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(out.at3(c, y, x), img.at3(c, y, x));
                }
            }
        }
    }

    #[test]
    fn label_follows_coordinate_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (h, w) = (rng.gen_range(4..20), rng.gen_range(4..20));
            let img = rand_image(h, w, &mut rng);
            let lbl = rand_label(h, w, &mut rng);
            let crop = (rng.gen_range(1..=3 * h - 3), rng.gen_range(1..=3 * w - 3));
            let mut r1 = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut r2 = r1.clone();
            let (oi, ol) = weak_augment(&img, &lbl, crop, &mut r1).unwrap();
            let g = sample_geometry(h, w, crop, 0.5, &mut r2).unwrap();
            assert_eq!(ol.dims(), crop);
            let (y, x) = (rng.gen_range(0..crop.0), rng.gen_range(0..crop.1));
            // independent mapping: undo flip, add offset, remove pad, reflect
            let xs = if g.flip { crop.1 - 1 - x } else { x };
            let mut sy = (y + g.offset.0) as isize - g.pad.0 as isize;
            let mut sx = (xs + g.offset.1) as isize - g.pad.1 as isize;
            if sy < 0 { sy = -sy; }
            if sx < 0 { sx = -sx; }
            if sy >= h as isize { sy = 2 * (h as isize - 1) - sy; }
            if sx >= w as isize { sx = 2 * (w as isize - 1) - sx; }
            assert_eq!(ol.get(y, x), lbl.get(sy as usize, sx as usize));
            assert_eq!(oi.at3(1, y, x), img.at3(1, sy as usize, sx as usize));
        }
    }

    #[test]
    fn all_probabilities_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = rand_image(8, 8, &mut rng);
        let cfg = AugmentConfig::default().photometric_off();
        assert_eq!(strong_augment_with(&img, &cfg, &mut rng).unwrap(), img);
    }

    #[test]
    fn grayscale_channels_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = to_grayscale(&rand_image(5, 5, &mut rng)).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(g.at3(0, y, x), g.at3(1, y, x));
                assert_eq!(g.at3(1, y, x), g.at3(2, y, x));
            }
        }
    }

    #[test]
    fn brightness_on_solid_gray() {
        let img = Tensor::full(&[3, 4, 4], 0.5);
        let p = StrongParams {
            jitter: Some(Jitter { brightness: 1.3, contrast: 1.0, saturation: 1.0, hue: 0.0 }),
            grayscale: false,
            blur_sigma: None,
        };
        let out = apply_strong(&img, &p).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.65).abs() < 1e-12));
    }

    #[test]
    fn hue_roundtrip_full_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = rand_image(4, 4, &mut rng);
        let back = adjust_hue(&adjust_hue(&img, 0.2).unwrap(), -0.2).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Tensor::full(&[3, 3, 5], 0.3);
        let out = gaussian_blur(&img, 2.0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn reflect_padding_for_small_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = rand_image(3, 3, &mut rng);
        let lbl = rand_label(3, 3, &mut rng);
        let (oi, ol) = weak_augment(&img, &lbl, (8, 8), &mut rng).unwrap();
        assert_eq!(oi.shape(), &[3, 8, 8]);
        assert_eq!(ol.dims(), (8, 8));
    }

    #[test]
    fn views_are_replayable_and_share_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rand_image(12, 12, &mut rng);
        let lbl = rand_label(12, 12, &mut rng);
        let cfg = AugmentConfig::default();
        let run = || {
            let mut g = ChaCha8Rng::seed_from_u64(1);
            let mut p = ChaCha8Rng::seed_from_u64(2);
            augment_views(&img, Some(&lbl), (8, 8), &cfg, &mut g, &mut p).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let mut p = ChaCha8Rng::seed_from_u64(99);
        let c = augment_views(&img, Some(&lbl), (8, 8), &cfg, &mut g, &mut p).unwrap();
        assert_eq!(c.weak, a.weak);
        assert_eq!(c.label, a.label);
    }

    proptest! {
        #[test]
        fn strong_output_in_unit_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = rand_image(6, 6, &mut rng);
            let out = strong_augment(&img, &mut rng).unwrap();
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
