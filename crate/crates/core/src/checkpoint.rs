//! Binary weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PNDW" | version | config length | config text (key=value lines)
//! tensor count | per tensor: name length, name, rank, extents..., dtype u8 (0 = f32), f32 data
//! ```

use std::path::Path;

use image::RgbImage;

use crate::autodiff::Mode;
use crate::config::{AugmentConfig, Config};
use crate::data::{preprocess, Preprocess};
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;
use crate::rng::{Rng, RNG_ALGORITHM};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PNDW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A trained model together with everything needed to preprocess inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: Config,
    pub classes: Vec<String>,
    /// Channel means subtracted from every input.
    pub means: [f64; 3],
    pub model: Model<f32>,
}

impl Classifier {
    pub fn preprocessor(&self) -> Preprocess {
        Preprocess {
            input_size: self.config.model.input_size,
            resize_size: self.config.train.resize_size,
            means: self.means,
            augment: self.config.train.augment.clone(),
        }
    }

    /// Eval-mode input tensor for one image.
    pub fn prepare(&self, img: &RgbImage) -> Result<Tensor<f32>> {
        let p = Preprocess {
            augment: AugmentConfig::none(),
            ..self.preprocessor()
        };
        preprocess(img, &p, Mode::Eval, &mut Rng::new(0))
    }

    /// Class probabilities for each image.
    pub fn predict(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let inputs = images.iter().map(|i| self.prepare(i)).collect::<Result<Vec<_>>>()?;
        self.model.predict(&inputs.iter().collect::<Vec<_>>())
    }

    /// The config block: every config key, then the RNG name, means and
    /// class names.
    pub fn config_text(&self) -> String {
        let mut s = self.config.to_text();
        s.push_str(&format!("rng={RNG_ALGORITHM}\n"));
        s.push_str(&format!(
            "means={},{},{}\n",
            self.means[0], self.means[1], self.means[2]
        ));
        for (i, c) in self.classes.iter().enumerate() {
            s.push_str(&format!("class.{i}={c}\n"));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let state = self.model.state();
        out.extend_from_slice(&(state.len() as u32).to_le_bytes());
        for (name, t) in state {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config block")?)
            .map_err(|_| malformed("config block is not UTF-8"))?;
        let (config, classes, means) = parse_block(text)?;
        let mut model = Model::<f32>::new(config.model.clone(), classes.len(), &mut Rng::new(0))
            .map_err(|e| malformed(format!("config does not describe a model: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut slots = model.state_mut();
        if count != slots.len() {
            return Err(malformed(format!("{count} tensors, model has {}", slots.len())));
        }
        for (expect_name, slot) in slots.iter_mut() {
            let n = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "tensor name")?)
                .map_err(|_| malformed("tensor name is not UTF-8"))?;
            if name != expect_name {
                return Err(malformed(format!("expected tensor {expect_name}, found {name}")));
            }
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor extents").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(malformed(format!("{name}: shape {shape:?}, model expects {:?}", slot.shape())));
            }
            let dtype = r.take(1, "tensor dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(malformed(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let raw = r.take(slot.len() * 4, "tensor data")?;
            for (d, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        drop(slots);
        if r.pos != bytes.len() {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            classes,
            means,
            model,
        })
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    CheckpointError::Malformed(msg.into()).into()
}

fn parse_block(text: &str) -> Result<(Config, Vec<String>, [f64; 3])> {
    let mut config_lines = String::new();
    let mut classes = Vec::new();
    let mut means = None;
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("config line {line:?}")))?;
        if k == "rng" {
            if v != RNG_ALGORITHM {
                return Err(malformed(format!("weights were produced with rng {v}")));
            }
        } else if k == "means" {
            let m: Vec<f64> = v
                .split(',')
                .map(|x| x.parse().map_err(|_| malformed(format!("means {v:?}"))))
                .collect::<Result<_>>()?;
            means = Some(<[f64; 3]>::try_from(m).map_err(|_| malformed("means need 3 values"))?);
        } else if let Some(i) = k.strip_prefix("class.") {
            if i.parse::<usize>().ok() != Some(classes.len()) {
                return Err(malformed(format!("class key {k} out of order")));
            }
            classes.push(v.to_string());
        } else {
            config_lines.push_str(line);
            config_lines.push('\n');
        }
    }
    let config = Config::parse(&config_lines).map_err(|e| malformed(e.to_string()))?;
    let means = means.ok_or_else(|| malformed("missing means"))?;
    Ok((config, classes, means))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(c: &Classifier, path: &Path) -> Result<()> {
    std::fs::write(path, c.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    Classifier::from_bytes(&std::fs::read(path)?)
}
