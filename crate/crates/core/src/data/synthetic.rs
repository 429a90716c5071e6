//! Generated corpora: one colored geometric blob per image on a noisy
//! gray background. The class decides color and shape, so the classes are
//! separable by construction.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::dataset::{Dataset, Sample};
use super::image::write_ppm;
use crate::error::{Error, Result};
use crate::rng::Rng;

const COLORS: [[u8; 3]; 8] = [
    [230, 40, 40],
    [40, 210, 40],
    [40, 70, 235],
    [235, 220, 40],
    [220, 40, 220],
    [40, 220, 220],
    [250, 140, 20],
    [250, 250, 250],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Anywhere,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    Quadrant(usize),
}

fn inside(shape: usize, dy: f64, dx: f64, r: f64) -> bool {
    match shape % 4 {
        0 => dy * dy + dx * dx <= r * r,
        1 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        // upward triangle
        2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        _ => (dy.abs() <= r * 0.35 && dx.abs() <= r) || (dx.abs() <= r * 0.35 && dy.abs() <= r),
    }
}

/// One `size×size` image of class `class` (< 8).
pub fn blob_image(class: usize, size: usize, placement: Placement, rng: &mut Rng) -> RgbImage {
    let mut img = RgbImage::new(size as u32, size as u32);
    for px in img.pixels_mut() {
        let base = rng.uniform_range(70.0, 150.0);
        *px = Rgb([0, 1, 2].map(|_| (base + rng.uniform_range(-25.0, 25.0)) as u8));
    }
    let r = rng.uniform_range(size as f64 / 8.0, size as f64 / 5.0);
    let (lo_y, hi_y, lo_x, hi_x) = match placement {
        Placement::Anywhere => (0.0, size as f64, 0.0, size as f64),
        Placement::Quadrant(q) => {
            let half = size as f64 / 2.0;
            let (oy, ox) = ((q / 2) as f64 * half, (q % 2) as f64 * half);
            (oy, oy + half, ox, ox + half)
        }
    };
    let cy = rng.uniform_range(lo_y + r, hi_y - r);
    let cx = rng.uniform_range(lo_x + r, hi_x - r);
    let color = COLORS[class % COLORS.len()];
    for y in 0..size {
        for x in 0..size {
            if inside(class, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                let jitter = rng.uniform_range(-12.0, 12.0);
                let px = color.map(|c| (c as f64 + jitter).clamp(0.0, 255.0) as u8);
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
    }
    img
}

pub fn class_name(class: usize) -> String {
    format!("class{class}")
}

/// `per_class` images for each of `classes` classes, class-major order.
pub fn blob_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=COLORS.len()).contains(&classes) {
        return Err(Error::arg(format!("blob corpus supports 2..=8 classes, got {classes}")));
    }
    let mut rng = Rng::new(seed);
    let root = PathBuf::from(format!("synthetic-blobs-{seed}"));
    let mut ds = Dataset {
        root: root.clone(),
        classes: (0..classes).map(class_name).collect(),
        samples: Vec::new(),
        images: Vec::new(),
    };
    for c in 0..classes {
        for i in 0..per_class {
            ds.images.push(blob_image(c, size, Placement::Anywhere, &mut rng));
            ds.samples.push(Sample {
                path: root.join(class_name(c)).join(format!("{i:04}.ppm")),
                label: c,
            });
        }
    }
    Ok(ds)
}

/// Writes a dataset as `root/<class>/<name>.ppm`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for (s, img) in ds.samples.iter().zip(&ds.images) {
        let dir = root.join(&ds.classes[s.label]);
        std::fs::create_dir_all(&dir)?;
        let name = s.path.file_name().ok_or_else(|| Error::arg("sample without file name"))?;
        write_ppm(img, &dir.join(name))?;
    }
    Ok(())
}
