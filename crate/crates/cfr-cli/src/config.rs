//! One flat `key = value` configuration namespace shared by the config file
//! and the command-line flags; flags win.

use std::path::{Path, PathBuf};

use cfr_core::data::SyntheticSpec;
use cfr_core::model::{ModelConfig, TrainHyper};
use cfr_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,

    pub num_images: usize,
    pub image_size: usize,
    pub num_land_classes: usize,
    pub planted_class: u16,
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    pub gen_seed: u64,

    pub patch_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub model_seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_seed: u64,

    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub split_seed: u64,

    pub ridge_lambda: f64,
    pub epsilon: f64,
    pub thresholds: Vec<f64>,
    pub ece_bins: usize,
    pub external_index: Option<PathBuf>,
    pub use_ranks: bool,

    pub threads: usize,
    pub heatmaps: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            num_images: 240,
            image_size: 32,
            num_land_classes: 4,
            planted_class: 0,
            texture_amplitude: 0.25,
            noise_sigma: 0.02,
            gen_seed: 42,
            patch_size: 8,
            num_blocks: 2,
            num_heads: 2,
            embed_dim: 16,
            mlp_dim: 32,
            num_classes: 2,
            model_seed: 1,
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.1,
            train_seed: 0,
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            split_seed: 7,
            ridge_lambda: 1e-3,
            epsilon: 1e-6,
            thresholds: vec![10.0, 30.0, 50.0, 100.0],
            ece_bins: 10,
            external_index: None,
            use_ranks: false,
            threads: 1,
            heatmaps: false,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parameter(format!("bad value {value:?} for {key}")))
}

pub fn parse_thresholds(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("bad threshold {t:?}")))
        })
        .collect()
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset_dir" => self.dataset_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "num_images" => self.num_images = parse_as(key, value)?,
            "image_size" => self.image_size = parse_as(key, value)?,
            "num_land_classes" => self.num_land_classes = parse_as(key, value)?,
            "planted_class" => self.planted_class = parse_as(key, value)?,
            "texture_amplitude" => self.texture_amplitude = parse_as(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_as(key, value)?,
            "gen_seed" => self.gen_seed = parse_as(key, value)?,
            "patch_size" => self.patch_size = parse_as(key, value)?,
            "num_blocks" => self.num_blocks = parse_as(key, value)?,
            "num_heads" => self.num_heads = parse_as(key, value)?,
            "embed_dim" => self.embed_dim = parse_as(key, value)?,
            "mlp_dim" => self.mlp_dim = parse_as(key, value)?,
            "num_classes" => self.num_classes = parse_as(key, value)?,
            "model_seed" => self.model_seed = parse_as(key, value)?,
            "epochs" => self.epochs = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "learning_rate" => self.learning_rate = parse_as(key, value)?,
            "train_seed" => self.train_seed = parse_as(key, value)?,
            "train_frac" => self.train_frac = parse_as(key, value)?,
            "val_frac" => self.val_frac = parse_as(key, value)?,
            "test_frac" => self.test_frac = parse_as(key, value)?,
            "split_seed" => self.split_seed = parse_as(key, value)?,
            "ridge_lambda" => self.ridge_lambda = parse_as(key, value)?,
            "epsilon" => self.epsilon = parse_as(key, value)?,
            "thresholds" => self.thresholds = parse_thresholds(value)?,
            "ece_bins" => self.ece_bins = parse_as(key, value)?,
            "external_index" => self.external_index = Some(PathBuf::from(value)),
            "use_ranks" => self.use_ranks = parse_as(key, value)?,
            "threads" => self.threads = parse_as(key, value)?,
            "heatmaps" => self.heatmaps = parse_as(key, value)?,
            _ => return Err(Error::Parameter(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Layer a `key = value` file over the current values. Blank lines and
    /// `#` comments are skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Parameter(msg) => {
                        Error::Parameter(format!("config line {}: {msg}", lineno + 1))
                    }
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_images: self.num_images,
            image_size: self.image_size,
            num_land_classes: self.num_land_classes,
            planted_class_id: self.planted_class,
            texture_amplitude: self.texture_amplitude,
            noise_sigma: self.noise_sigma,
            seed: self.gen_seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            num_channels: 1,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            embed_dim: self.embed_dim,
            mlp_dim: self.mlp_dim,
            num_classes: self.num_classes,
            seed: self.model_seed,
        }
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.train_seed,
        }
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train_frac, self.val_frac, self.test_frac)
    }
}
