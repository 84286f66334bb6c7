//! Two-view augmentation.
//!
//! Image views go through random resized crop, horizontal flip, color
//! jitter (brightness/contrast/saturation/hue in random order), grayscale,
//! Gaussian blur and solarization, in that order, and are clamped to
//! `[0, 1]`. Vector examples get independent additive Gaussian noise.

use super::{Example, Layout};
use crate::error::{Error, Result};
use crate::numcore::{ImageShape, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the image, `(min, max)`.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub solarize_prob: f64,
    pub solarize_threshold: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.08, 1.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            solarize_prob: 0.1,
            solarize_threshold: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Policy that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
            ("solarize_threshold", self.solarize_threshold),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} out of [0,1]: {p}")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("crop_scale must satisfy 0 < min <= max <= 1, got {lo},{hi}")));
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} strength must be >= 0, got {s}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::InvalidArgument(format!("hue strength out of [0,0.5]: {}", self.hue)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    Image(AugmentPolicy),
    /// Additive isotropic Gaussian noise for vector data.
    Noise { sigma: f64 },
}

/// Two independent augmentations of `ex`.
pub fn two_views(ex: &Example, layout: Layout, aug: &Augmentation, rng: &mut Rng) -> Result<(Example, Example)> {
    let view = |rng: &mut Rng| -> Result<Example> {
        let features = match (aug, layout) {
            (Augmentation::Image(policy), Layout::Image(shape)) => augment_image(&ex.features, shape, policy, rng)?,
            (Augmentation::Noise { sigma }, Layout::Vector(_)) => {
                ex.features.iter().map(|x| x + sigma * rng.normal()).collect()
            }
            (Augmentation::Image(_), Layout::Vector(_)) => {
                return Err(Error::InvalidArgument("image augmentation on vector data".into()))
            }
            (Augmentation::Noise { .. }, Layout::Image(_)) => {
                return Err(Error::InvalidArgument("noise augmentation on image data".into()))
            }
        };
        Ok(Example { features, label: ex.label, coarse_label: ex.coarse_label })
    };
    let a = view(rng)?;
    let b = view(rng)?;
    Ok((a, b))
}

/// One augmented copy of a channel-major image.
pub fn augment_image(pixels: &[f64], shape: ImageShape, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Vec<f64>> {
    policy.validate()?;
    if pixels.len() != shape.len() {
        return Err(Error::InvalidArgument(format!("{} pixels for {shape:?}", pixels.len())));
    }
    let mut img = random_resized_crop(pixels, shape, policy.crop_scale, rng)?;
    if rng.bernoulli(policy.flip_prob) {
        hflip(&mut img, shape);
    }
    if rng.bernoulli(policy.jitter_prob) {
        let mut order = [0usize, 1, 2, 3];
        rng.shuffle(&mut order);
        for op in order {
            match op {
                0 => {
                    let f = jitter_factor(policy.brightness, rng);
                    img.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
                }
                1 => {
                    let f = jitter_factor(policy.contrast, rng);
                    adjust_contrast(&mut img, shape, f);
                }
                2 => {
                    let f = jitter_factor(policy.saturation, rng);
                    adjust_saturation(&mut img, shape, f);
                }
                _ => {
                    let h = rng.uniform_range(-policy.hue, policy.hue);
                    adjust_hue(&mut img, shape, h);
                }
            }
        }
    }
    if rng.bernoulli(policy.grayscale_prob) {
        grayscale(&mut img, shape);
    }
    if rng.bernoulli(policy.blur_prob) {
        let sigma = rng.uniform_range(0.1, 2.0);
        gaussian_blur(&mut img, shape, sigma);
    }
    if rng.bernoulli(policy.solarize_prob) {
        let t = policy.solarize_threshold;
        img.iter_mut().for_each(|v| {
            if *v >= t {
                *v = 1.0 - *v
            }
        });
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

fn jitter_factor(strength: f64, rng: &mut Rng) -> f64 {
    rng.uniform_range((1.0 - strength).max(0.0), 1.0 + strength)
}

fn random_resized_crop(px: &[f64], s: ImageShape, scale: (f64, f64), rng: &mut Rng) -> Result<Vec<f64>> {
    let area = (s.height * s.width) as f64;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut crop = None;
    for _ in 0..10 {
        let target = area * rng.uniform_range(scale.0, scale.1);
        let ratio = rng.uniform_range(log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w == 0 || h == 0 {
            return Err(Error::CropTooSmall { width: w, height: h });
        }
        if w <= s.width && h <= s.height {
            let top = rng.below(s.height - h + 1);
            let left = rng.below(s.width - w + 1);
            crop = Some((top, left, h, w));
            break;
        }
    }
    // fallback: the largest centered crop within the ratio bounds
    let (top, left, h, w) = crop.unwrap_or_else(|| {
        let ar = s.width as f64 / s.height as f64;
        let (h, w) = if ar < 0.75 {
            ((s.width as f64 / 0.75).round() as usize, s.width)
        } else if ar > 4.0 / 3.0 {
            (s.height, (s.height as f64 * 4.0 / 3.0).round() as usize)
        } else {
            (s.height, s.width)
        };
        ((s.height - h) / 2, (s.width - w) / 2, h, w)
    });
    if h == s.height && w == s.width {
        return Ok(px.to_vec());
    }
    let mut out = vec![0.0; s.len()];
    let (sy, sx) = (h as f64 / s.height as f64, w as f64 / s.width as f64);
    for c in 0..s.channels {
        let plane = &px[c * s.height * s.width..(c + 1) * s.height * s.width];
        for i in 0..s.height {
            let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64) + top as f64;
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(top + h - 1);
            let fy = y - y0 as f64;
            for j in 0..s.width {
                let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64) + left as f64;
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(left + w - 1);
                let fx = x - x0 as f64;
                let at = |yy: usize, xx: usize| plane[yy * s.width + xx];
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                out[c * s.height * s.width + i * s.width + j] = v;
            }
        }
    }
    Ok(out)
}

pub(crate) fn hflip(img: &mut [f64], s: ImageShape) {
    for row in img.chunks_exact_mut(s.width) {
        row.reverse();
    }
}

fn luma(img: &[f64], s: ImageShape, p: usize) -> f64 {
    let hw = s.height * s.width;
    if s.channels >= 3 {
        0.299 * img[p] + 0.587 * img[hw + p] + 0.114 * img[2 * hw + p]
    } else {
        img[p]
    }
}

fn adjust_contrast(img: &mut [f64], s: ImageShape, f: f64) {
    let hw = s.height * s.width;
    let mean = (0..hw).map(|p| luma(img, s, p)).sum::<f64>() / hw as f64;
    img.iter_mut().for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
}

fn adjust_saturation(img: &mut [f64], s: ImageShape, f: f64) {
    if s.channels < 3 {
        return;
    }
    let hw = s.height * s.width;
    for p in 0..hw {
        let g = luma(img, s, p);
        for c in 0..3 {
            let v = &mut img[c * hw + p];
            *v = ((*v - g) * f + g).clamp(0.0, 1.0);
        }
    }
}

fn adjust_hue(img: &mut [f64], s: ImageShape, shift: f64) {
    if s.channels < 3 || shift == 0.0 {
        return;
    }
    let hw = s.height * s.width;
    for p in 0..hw {
        let (r, g, b) = (img[p], img[hw + p], img[2 * hw + p]);
        let (h, sat, val) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), sat, val);
        img[p] = r;
        img[hw + p] = g;
        img[2 * hw + p] = b;
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (sector as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn grayscale(img: &mut [f64], s: ImageShape) {
    if s.channels < 3 {
        return;
    }
    let hw = s.height * s.width;
    for p in 0..hw {
        let g = luma(img, s, p);
        for c in 0..s.channels {
            img[c * hw + p] = g;
        }
    }
}

fn gaussian_blur(img: &mut [f64], s: ImageShape, sigma: f64) {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let d = k as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / total).collect();
    let (h, w) = (s.height as isize, s.width as isize);
    let clamp = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; s.height * s.width];
    for plane in img.chunks_exact_mut(s.height * s.width) {
        for i in 0..h {
            for j in 0..w {
                tmp[(i * w + j) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[(i * w) as usize + clamp(j + k as isize - radius as isize, w)])
                    .sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                plane[(i * w + j) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[clamp(i + k as isize - radius as isize, h) * w as usize + j as usize])
                    .sum();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: ImageShape = ImageShape { channels: 3, height: 8, width: 8 };

    fn image(rng: &mut Rng) -> Example {
        Example { features: (0..SHAPE.len()).map(|_| rng.uniform()).collect(), label: 3, coarse_label: None }
    }

    #[test]
    fn identity_policy_returns_input() {
        let mut rng = Rng::new(1);
        let ex = image(&mut rng);
        let aug = Augmentation::Image(AugmentPolicy::identity());
        let (a, b) = two_views(&ex, Layout::Image(SHAPE), &aug, &mut rng).unwrap();
        assert_eq!(a, ex);
        assert_eq!(b, ex);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut rng = Rng::new(2);
        let ex = image(&mut rng);
        let policy = AugmentPolicy { flip_prob: 1.0, ..AugmentPolicy::identity() };
        let (a, _) = two_views(&ex, Layout::Image(SHAPE), &Augmentation::Image(policy), &mut rng).unwrap();
        assert_ne!(a.features, ex.features);
        let mut back = a.features.clone();
        hflip(&mut back, SHAPE);
        assert_eq!(back, ex.features);
    }

    #[test]
    fn views_are_reproducible() {
        let ex = image(&mut Rng::new(3));
        let aug = Augmentation::Image(AugmentPolicy::default());
        let run = |seed| two_views(&ex, Layout::Image(SHAPE), &aug, &mut Rng::new(seed)).unwrap();
        let (a1, b1) = run(10);
        let (a2, b2) = run(10);
        let bits = |e: &Example| e.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a2));
        assert_eq!(bits(&b1), bits(&b2));
        assert_ne!(bits(&a1), bits(&b1));
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let mut rng = Rng::new(4);
        let policy = AugmentPolicy {
            jitter_prob: 1.0,
            brightness: 2.0,
            contrast: 2.0,
            saturation: 2.0,
            hue: 0.5,
            blur_prob: 1.0,
            solarize_prob: 1.0,
            ..AugmentPolicy::default()
        };
        for _ in 0..20 {
            let ex = image(&mut rng);
            let v = augment_image(&ex.features, SHAPE, &policy, &mut rng).unwrap();
            assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn crop_below_one_pixel_errors() {
        let mut rng = Rng::new(5);
        let ex = image(&mut rng);
        let policy = AugmentPolicy { crop_scale: (1e-4, 1e-4), ..AugmentPolicy::identity() };
        assert!(matches!(
            augment_image(&ex.features, SHAPE, &policy, &mut rng),
            Err(Error::CropTooSmall { .. })
        ));
    }

    #[test]
    fn invalid_policy_rejected() {
        let p = AugmentPolicy { flip_prob: 1.5, ..AugmentPolicy::default() };
        assert!(p.validate().is_err());
        let p = AugmentPolicy { crop_scale: (0.6, 0.5), ..AugmentPolicy::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for (r, g, b) in [(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_views_differ_and_keep_label() {
        let ex = Example { features: vec![0.0; 6], label: 2, coarse_label: None };
        let mut rng = Rng::new(6);
        let (a, b) = two_views(&ex, Layout::Vector(6), &Augmentation::Noise { sigma: 0.1 }, &mut rng).unwrap();
        assert_ne!(a.features, b.features);
        assert_eq!((a.label, b.label), (2, 2));
        assert!(two_views(&ex, Layout::Vector(6), &Augmentation::Image(AugmentPolicy::default()), &mut rng).is_err());
    }
}
