//! Resizing, cropping, augmentation and channel centering on `[H×W×3]`
//! float images.

use image::RgbImage;

use super::image::to_tensor;
use crate::autodiff::Mode;
use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Bilinear sample at continuous pixel coordinates with edge replication.
fn sample(img: &Tensor<f32>, y: f64, x: f64, out: &mut [f32]) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let d = img.data();
    for (c, o) in out.iter_mut().enumerate() {
        let at = |r: usize, col: usize| d[(r * w + col) * 3 + c] as f64;
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        *o = (top * (1.0 - fy) + bottom * fy) as f32;
    }
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(img: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if (h, w) == (height, width) {
        return img.clone();
    }
    let (sy, sx) = (h as f64 / height as f64, w as f64 / width as f64);
    let mut out = vec![0f32; height * width * 3];
    for r in 0..height {
        for c in 0..width {
            let y = (r as f64 + 0.5) * sy - 0.5;
            let x = (c as f64 + 0.5) * sx - 0.5;
            sample(img, y, x, &mut out[(r * width + c) * 3..][..3]);
        }
    }
    Tensor::new([height, width, 3], out).expect("sized above")
}

/// Scales so the shorter side equals `size`, keeping the aspect ratio.
pub fn resize_shorter(img: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (nh, nw) = if h <= w {
        (size, ((w as f64 * size as f64 / h as f64).round() as usize).max(size))
    } else {
        (((h as f64 * size as f64 / w as f64).round() as usize).max(size), size)
    };
    resize_bilinear(img, nh, nw)
}

pub fn crop(img: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if top + size > h || left + size > w {
        return Err(Error::dim(format!("crop {size} at ({top},{left}) exceeds {h}×{w}")));
    }
    let d = img.data();
    Ok(Tensor::from_fn([size, size, 3], |i| {
        let (r, rest) = (i / (size * 3), i % (size * 3));
        d[((top + r) * w + left) * 3 + rest]
    }))
}

/// Offset of a centered `size` crop.
pub fn center_offset(h: usize, w: usize, size: usize) -> (usize, usize) {
    ((h - size) / 2, (w - size) / 2)
}

fn flip_horizontal(img: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let d = img.data();
    Tensor::from_fn([h, w, 3], |i| {
        let (r, c, ch) = (i / (w * 3), (i / 3) % w, i % 3);
        d[(r * w + (w - 1 - c)) * 3 + ch]
    })
}

/// Rotation by `degrees` and zoom by `scale` about the image center.
fn affine(img: &Tensor<f32>, degrees: f64, scale: f64) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = vec![0f32; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            // inverse map: rotate back by the angle, then undo the zoom
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            sample(img, sy, sx, &mut out[(r * w + c) * 3..][..3]);
        }
    }
    Tensor::new([h, w, 3], out).expect("sized above")
}

/// Separable Gaussian blur, radius `ceil(3σ)`, edge replication.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (h, w) = (img.shape()[0] as isize, img.shape()[1] as isize);
    let pass = |src: &[f32], vertical: bool| -> Vec<f32> {
        let mut out = vec![0f32; src.len()];
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let o = j as isize - radius;
                        let (rr, cc) = if vertical {
                            ((r + o).clamp(0, h - 1), c)
                        } else {
                            (r, (c + o).clamp(0, w - 1))
                        };
                        acc += kv * src[((rr * w + cc) * 3 + ch) as usize] as f64;
                    }
                    out[((r * w + c) * 3 + ch) as usize] = acc as f32;
                }
            }
        }
        out
    };
    let horizontal = pass(img.data(), false);
    Tensor::new(img.shape().to_vec(), pass(&horizontal, true)).expect("same extents")
}

/// Random flip, rotation, zoom and blur, drawn in that order.
pub fn augment(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor<f32> {
    let flip = rng.bernoulli(cfg.flip);
    let degrees = rng.uniform_range(-cfg.rotation, cfg.rotation);
    let scale = rng.uniform_range(1.0 - cfg.scale, 1.0 + cfg.scale);
    let blur = rng.bernoulli(cfg.blur);
    let mut out = if flip { flip_horizontal(img) } else { img.clone() };
    if degrees != 0.0 || scale != 1.0 {
        out = affine(&out, degrees, scale);
    }
    if blur {
        out = gaussian_blur(&out, cfg.blur_sigma);
    }
    out
}

/// Geometry and augmentation settings for [`preprocess`].
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub input_size: usize,
    pub resize_size: usize,
    pub means: [f64; 3],
    pub augment: AugmentConfig,
}

/// Resize, augment and crop (train) or center crop (eval), then subtract
/// the channel means.
pub fn preprocess(img: &RgbImage, p: &Preprocess, mode: Mode, rng: &mut Rng) -> Result<Tensor<f32>> {
    let resized = resize_shorter(&to_tensor(img), p.resize_size);
    let (h, w) = (resized.shape()[0], resized.shape()[1]);
    let s = p.input_size;
    if h < s || w < s {
        return Err(Error::dim(format!("resized image {h}×{w} smaller than the {s} crop")));
    }
    let cropped = match mode {
        Mode::Train => {
            let aug = augment(&resized, &p.augment, rng);
            let top = rng.below(h - s + 1);
            let left = rng.below(w - s + 1);
            crop(&aug, top, left, s)?
        }
        Mode::Eval => {
            let (top, left) = center_offset(h, w, s);
            crop(&resized, top, left, s)?
        }
    };
    let mut out = cropped;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v as f64 - p.means[i % 3]) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn([h, w, 3], |_| (rng.uniform() * 255.0) as f32)
    }

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, 7]))
    }

    #[test]
    fn center_crop_of_256_starts_at_16() {
        assert_eq!(center_offset(256, 256, 224), (16, 16));
        let img = gradient_image(256, 256);
        let p = Preprocess {
            input_size: 224,
            resize_size: 256,
            means: [0.0; 3],
            augment: AugmentConfig::default(),
        };
        let t = preprocess(&img, &p, Mode::Eval, &mut Rng::new(0)).unwrap();
        assert_eq!(t.shape(), &[224, 224, 3]);
        assert_eq!(t.get(&[0, 0, 0]), 16.0);
        assert_eq!(t.get(&[0, 0, 1]), 16.0);
        assert_eq!(t.get(&[223, 223, 0]), 239.0);
    }

    #[test]
    fn constant_image_minus_means() {
        let img = RgbImage::from_pixel(40, 30, image::Rgb([100, 50, 200]));
        let p = Preprocess {
            input_size: 24,
            resize_size: 28,
            means: [90.0, 60.0, 150.0],
            augment: AugmentConfig::default(),
        };
        for mode in [Mode::Train, Mode::Eval] {
            let t = preprocess(&img, &p, mode, &mut Rng::new(1)).unwrap();
            for (i, v) in t.data().iter().enumerate() {
                let expect = [10.0, -10.0, 50.0][i % 3];
                assert!((v - expect).abs() < 1e-3, "{mode:?} {v}");
            }
        }
    }

    #[test]
    fn train_mode_is_seeded() {
        let img = gradient_image(50, 40);
        let p = Preprocess {
            input_size: 32,
            resize_size: 36,
            means: [1.0, 2.0, 3.0],
            augment: AugmentConfig::default(),
        };
        let a = preprocess(&img, &p, Mode::Train, &mut Rng::new(5)).unwrap();
        let b = preprocess(&img, &p, Mode::Train, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resize_shorter_keeps_aspect() {
        let t = resize_shorter(&noise(30, 60, 1), 15);
        assert_eq!(t.shape(), &[15, 30, 3]);
        let t = resize_shorter(&noise(45, 30, 1), 20);
        assert_eq!(t.shape(), &[30, 20, 3]);
        let same = noise(8, 8, 2);
        assert_eq!(resize_shorter(&same, 8), same);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = noise(20, 24, 3);
        let mut rng = Rng::new(4);
        assert_eq!(augment(&img, &AugmentConfig::none(), &mut rng), img);
        // the affine path itself is exact at zero angle and unit scale
        assert_eq!(affine(&img, 0.0, 1.0), img);
    }

    #[test]
    fn flips_and_full_turns_are_invertible() {
        let img = noise(6, 6, 5);
        let f = flip_horizontal(&img);
        assert_eq!(f.get(&[2, 0, 1]), img.get(&[2, 5, 1]));
        assert_eq!(flip_horizontal(&f), img);
        let r4 = (0..4).fold(img.clone(), |acc, _| affine(&acc, 90.0, 1.0));
        assert!(r4.max_abs_diff(&img) < 1e-2);
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let c = Tensor::full([9, 9, 3], 42.0f32);
        assert!(gaussian_blur(&c, 1.5).max_abs_diff(&c) < 1e-4);
        let img = noise(12, 12, 6);
        let b = gaussian_blur(&img, 1.0);
        let var = |t: &Tensor<f32>| {
            let m = t.sum() as f64 / t.len() as f64;
            t.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
        };
        assert!(var(&b) < var(&img));
    }

    #[test]
    fn augmented_values_stay_within_input_range() {
        let mut rng = Rng::new(7);
        let cfg = AugmentConfig {
            flip: 0.5,
            rotation: 25.0,
            scale: 0.25,
            blur: 0.5,
            blur_sigma: 1.0,
        };
        for i in 0..100 {
            let img = noise(16, 20, 100 + i);
            let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let out = augment(&img, &cfg, &mut rng);
            assert_eq!(out.shape(), img.shape());
            for &v in out.data() {
                assert!(v >= lo - 1e-3 && v <= hi + 1e-3, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn crop_bounds_are_checked() {
        let img = noise(10, 10, 8);
        assert!(crop(&img, 2, 2, 9).is_err());
        let c = crop(&img, 1, 2, 4).unwrap();
        assert_eq!(c.get(&[0, 0, 2]), img.get(&[1, 2, 2]));
    }
}
