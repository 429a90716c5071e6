//! Directory-per-class image corpora.

use std::path::{Path, PathBuf};

use image::RgbImage;

use super::image::read_image;
use crate::error::{Error, Result};

const EXTENSIONS: &[&str] = &["ppm", "png"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
}

/// Samples ordered by class, then path; images decoded at load time.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub images: Vec<RgbImage>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)
        .map_err(|e| Error::ingest(dir, e.to_string()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::ingest(dir, e.to_string()))?;
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::ingest(root, "no class directories found"));
    }
    let mut ds = Dataset {
        root: root.to_path_buf(),
        classes: Vec::new(),
        samples: Vec::new(),
        images: Vec::new(),
    };
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::ingest(dir, "class directory name is not UTF-8"))?
            .to_string();
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::ingest(dir, format!("class {name:?} contains no images")));
        }
        for path in files {
            ds.images.push(read_image(&path)?);
            ds.samples.push(Sample { path, label });
        }
        ds.classes.push(name);
    }
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Per-channel mean of raw pixel values over the given samples.
    pub fn channel_means(&self, indices: &[usize]) -> [f64; 3] {
        let mut sum = [0.0f64; 3];
        let mut count = 0u64;
        for &i in indices {
            for px in self.images[i].pixels() {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
            }
            count += self.images[i].pixels().len() as u64;
        }
        sum.map(|s| if count == 0 { 0.0 } else { s / count as f64 })
    }
}
