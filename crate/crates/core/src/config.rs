//! `key=value` configuration for the model and the training recipe.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! Lists are comma separated. [`Config::to_text`] writes every key in a fixed
//! order, so parsing its output reproduces the config exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::Propagation;
use crate::head::HeadNorm;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Side of the square network input.
    pub input_size: usize,
    pub backbone: BackboneConfig,
    /// Integer factor applied to the feature map before pooling.
    pub upsample: usize,
    pub use_regions: bool,
    /// Regions per side.
    pub grid: usize,
    pub use_spp: bool,
    pub spp_levels: Vec<usize>,
    pub gcn_layers: usize,
    /// 0 means "same as the backbone channels".
    pub gcn_width: usize,
    pub propagation: Propagation,
    pub head_norm: HeadNorm,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            backbone: BackboneConfig::default(),
            upsample: 2,
            use_regions: true,
            grid: 2,
            use_spp: true,
            spp_levels: vec![2, 3],
            gcn_layers: 2,
            gcn_width: 0,
            propagation: Propagation::Rank1,
            head_norm: HeadNorm::Layer,
            dropout: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: f64,
    /// Maximum rotation in degrees, sampled uniformly in `±rotation`.
    pub rotation: f64,
    /// Scale factor sampled uniformly in `1 ± scale`.
    pub scale: f64,
    pub blur: f64,
    pub blur_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: 0.5,
            rotation: 25.0,
            scale: 0.25,
            blur: 0.3,
            blur_sigma: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: 0.0,
            rotation: 0.0,
            scale: 0.0,
            blur: 0.0,
            blur_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// The rate is divided by `lr_decay_factor` once this many epochs are done.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// Shorter side after resizing, before cropping to the input size.
    pub resize_size: usize,
    pub split_ratio: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 12,
            epochs: 150,
            lr_decay_epoch: 100,
            lr_decay_factor: 5.0,
            seed: 0,
            resize_size: 256,
            split_ratio: 0.7,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_epoch {
            self.lr / self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "input_size",
    "widths",
    "kernel",
    "pool",
    "channels",
    "upsample",
    "use_regions",
    "grid",
    "use_spp",
    "spp_levels",
    "gcn_layers",
    "gcn_width",
    "propagation",
    "head_norm",
    "dropout",
    "lr",
    "batch",
    "epochs",
    "lr_decay_epoch",
    "lr_decay_factor",
    "seed",
    "resize_size",
    "split_ratio",
    "flip",
    "rotation",
    "scale",
    "blur",
    "blur_sigma",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "input_size" => m.input_size = num(key, v)?,
            "widths" => m.backbone.widths = list(key, v)?,
            "kernel" => m.backbone.kernel = num(key, v)?,
            "pool" => m.backbone.pool = num(key, v)?,
            "channels" => m.backbone.channels = num(key, v)?,
            "upsample" => m.upsample = num(key, v)?,
            "use_regions" => m.use_regions = flag(key, v)?,
            "grid" => m.grid = num(key, v)?,
            "use_spp" => m.use_spp = flag(key, v)?,
            "spp_levels" => m.spp_levels = list(key, v)?,
            "gcn_layers" => m.gcn_layers = num(key, v)?,
            "gcn_width" => m.gcn_width = num(key, v)?,
            "propagation" => {
                m.propagation = match v {
                    "rank1" => Propagation::Rank1,
                    "dense" => Propagation::Dense,
                    _ => return Err(Error::config(format!("propagation: expected rank1|dense, got {v:?}"))),
                }
            }
            "head_norm" => {
                m.head_norm = match v {
                    "layer" => HeadNorm::Layer,
                    "batch" => HeadNorm::Batch,
                    _ => return Err(Error::config(format!("head_norm: expected layer|batch, got {v:?}"))),
                }
            }
            "dropout" => m.dropout = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "lr_decay_epoch" => t.lr_decay_epoch = num(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "resize_size" => t.resize_size = num(key, v)?,
            "split_ratio" => t.split_ratio = num(key, v)?,
            "flip" => t.augment.flip = num(key, v)?,
            "rotation" => t.augment.rotation = num(key, v)?,
            "scale" => t.augment.scale = num(key, v)?,
            "blur" => t.augment.blur = num(key, v)?,
            "blur_sigma" => t.augment.blur_sigma = num(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (m, t) = (&self.model, &self.train);
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("{name}={p} is not a probability")))
            }
        };
        prob("flip", t.augment.flip)?;
        prob("blur", t.augment.blur)?;
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::config(format!("dropout={} outside [0, 1)", m.dropout)));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config(format!("lr={} must be finite and non-negative", t.lr)));
        }
        if t.batch == 0 || t.epochs == 0 {
            return Err(Error::config("batch and epochs must be at least 1"));
        }
        if t.lr_decay_factor.is_nan() || t.lr_decay_factor <= 0.0 {
            return Err(Error::config("lr_decay_factor must be positive"));
        }
        if !(t.split_ratio > 0.0 && t.split_ratio < 1.0) {
            return Err(Error::config(format!("split_ratio={} outside (0, 1)", t.split_ratio)));
        }
        if !(0.0..=180.0).contains(&t.augment.rotation) || !(0.0..1.0).contains(&t.augment.scale) {
            return Err(Error::config("rotation must lie in [0, 180] and scale in [0, 1)"));
        }
        if t.augment.blur_sigma.is_nan() || t.augment.blur_sigma <= 0.0 {
            return Err(Error::config("blur_sigma must be positive"));
        }
        if m.gcn_layers > 2 {
            return Err(Error::config(format!("gcn_layers={} not in {{0, 1, 2}}", m.gcn_layers)));
        }
        if m.upsample == 0 || m.grid == 0 {
            return Err(Error::config("upsample and grid must be at least 1"));
        }
        if m.spp_levels.is_empty() || m.spp_levels.contains(&0) {
            return Err(Error::config(format!("spp_levels {:?} must be non-empty and positive", m.spp_levels)));
        }
        if t.resize_size < m.input_size {
            return Err(Error::config(format!(
                "resize_size {} smaller than input_size {}",
                t.resize_size, m.input_size
            )));
        }
        let (h, w) = m.backbone.output_extent(m.input_size, m.input_size)?;
        let (uh, uw) = (h * m.upsample, w * m.upsample);
        if m.use_regions && m.grid > uh.min(uw) {
            return Err(Error::config(format!("grid {} exceeds the {uh}×{uw} map", m.grid)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("input_size", m.input_size.to_string());
        put("widths", join(&m.backbone.widths));
        put("kernel", m.backbone.kernel.to_string());
        put("pool", m.backbone.pool.to_string());
        put("channels", m.backbone.channels.to_string());
        put("upsample", m.upsample.to_string());
        put("use_regions", m.use_regions.to_string());
        put("grid", m.grid.to_string());
        put("use_spp", m.use_spp.to_string());
        put("spp_levels", join(&m.spp_levels));
        put("gcn_layers", m.gcn_layers.to_string());
        put("gcn_width", m.gcn_width.to_string());
        put(
            "propagation",
            match m.propagation {
                Propagation::Rank1 => "rank1",
                Propagation::Dense => "dense",
            }
            .into(),
        );
        put(
            "head_norm",
            match m.head_norm {
                HeadNorm::Layer => "layer",
                HeadNorm::Batch => "batch",
            }
            .into(),
        );
        put("dropout", m.dropout.to_string());
        put("lr", t.lr.to_string());
        put("batch", t.batch.to_string());
        put("epochs", t.epochs.to_string());
        put("lr_decay_epoch", t.lr_decay_epoch.to_string());
        put("lr_decay_factor", t.lr_decay_factor.to_string());
        put("seed", t.seed.to_string());
        put("resize_size", t.resize_size.to_string());
        put("split_ratio", t.split_ratio.to_string());
        put("flip", t.augment.flip.to_string());
        put("rotation", t.augment.rotation.to_string());
        put("scale", t.augment.scale.to_string());
        put("blur", t.augment.blur.to_string());
        put("blur_sigma", t.augment.blur_sigma.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        assert_eq!(Config::parse(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), KEYS.len());
        for (line, key) in text.lines().zip(KEYS) {
            assert!(line.starts_with(&format!("{key}=")));
        }
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = Config::parse(
            "# small run\nlr = 0.007  # table value\nbatch=8\nspp_levels=1,2,4\npropagation=dense\n\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.007);
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.model.spp_levels, vec![1, 2, 4]);
        assert_eq!(cfg.model.propagation, Propagation::Dense);
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "nonsense=1",
            "lr",
            "dropout=1.0",
            "flip=1.5",
            "gcn_layers=3",
            "epochs=0",
            "use_spp=maybe",
            "spp_levels=",
            "input_size=8",
            "resize_size=100",
        ] {
            assert!(matches!(Config::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn lr_schedule_divides_after_decay_epoch() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(1), 1e-3);
        assert_eq!(t.lr_at(100), 1e-3);
        assert_eq!(t.lr_at(101), 1e-3 / 5.0);
    }
}
