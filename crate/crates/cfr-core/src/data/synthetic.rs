//! Seeded planted-texture dataset generator.
//!
//! Each image is a Voronoi mosaic of land-cover regions. Images labeled
//! natural carry a high-frequency checker texture on the planted class;
//! non-natural images carry a regular grid artifact on a randomly chosen
//! other class. The mosaic itself is label-independent, so with zero
//! amplitude and zero noise both labels render identical pixels, which gives
//! the pipeline a controllable ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::raster::{
    read_manifest, read_raster, write_manifest, write_raster, LabelRaster,
};
use crate::data::tensor_file::{read_tensors, write_tensors};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Grid artifact period in pixels for non-natural images.
const GRID_PERIOD: usize = 4;

/// Stream ids: 0 drives the label shuffle, image i draws from stream i + 1.
const IMAGE_STREAM_OFFSET: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub num_land_classes: usize,
    pub planted_class_id: u16,
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_images: 240,
            image_size: 32,
            num_land_classes: 4,
            planted_class_id: 0,
            texture_amplitude: 0.25,
            noise_sigma: 0.02,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Input("num_images must be positive".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Input("image_size must be positive".into()));
        }
        if self.num_land_classes < 2 {
            return Err(Error::Input(
                "need at least 2 land classes (the grid artifact targets a non-planted class)"
                    .into(),
            ));
        }
        if self.num_land_classes > u16::MAX as usize {
            return Err(Error::Input("too many land classes".into()));
        }
        if (self.planted_class_id as usize) >= self.num_land_classes {
            return Err(Error::Input(format!(
                "planted_class_id {} out of range for {} classes",
                self.planted_class_id, self.num_land_classes
            )));
        }
        if self.texture_amplitude < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Input("amplitude and sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// One generated sample: grayscale image, binary label (1 = natural), mosaic.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
    pub raster: LabelRaster,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub samples: Vec<LoadedSample>,
    pub class_names: BTreeMap<u16, String>,
}

/// Land-cover flavored names for up to eight classes; beyond that, numbered.
pub fn default_class_names(num_classes: usize) -> BTreeMap<u16, String> {
    const NAMES: [&str; 8] = [
        "forest",
        "shrubland",
        "wetland",
        "grassland",
        "water",
        "urban",
        "cropland",
        "bare",
    ];
    (0..num_classes)
        .map(|c| {
            let name = NAMES
                .get(c)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class{c}"));
            (c as u16, name)
        })
        .collect()
}

/// Render the image and raster for one sample index under the given label.
///
/// The mosaic and all random draws depend only on (spec, index), never on the
/// label, so the two label variants of one index differ only by the overlay.
pub fn render_sample(spec: &SyntheticSpec, index: usize, label: usize) -> (Tensor, LabelRaster) {
    let s = spec.image_size;
    let k = spec.num_land_classes;
    let mut rng = DetRng::from_seed_stream(spec.seed, IMAGE_STREAM_OFFSET + index as u64);

    // One Voronoi site per land class.
    let sites: Vec<(f64, f64)> = (0..k)
        .map(|_| (rng.range_f64(0.0, s as f64), rng.range_f64(0.0, s as f64)))
        .collect();
    // Grid-artifact class is drawn whether or not this image uses it, so the
    // draw sequence is label-independent.
    let draw = rng.below(k - 1) as u16;
    let grid_class = if draw >= spec.planted_class_id {
        draw + 1
    } else {
        draw
    };

    let mut ids = vec![0u16; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut best = 0usize;
            let mut best_d2 = f64::INFINITY;
            for (c, &(sx, sy)) in sites.iter().enumerate() {
                let dx = x as f64 + 0.5 - sx;
                let dy = y as f64 + 0.5 - sy;
                let d2 = dx * dx + dy * dy;
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = c;
                }
            }
            ids[y * s + x] = best as u16;
        }
    }

    let mut pixels = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let class = ids[y * s + x];
            // Distinct base gray level per class.
            let mut v = (class as f64 + 1.0) / (k as f64 + 1.0);
            if label == 1 {
                if class == spec.planted_class_id && (x + y) % 2 == 0 {
                    v += spec.texture_amplitude;
                }
            } else if class == grid_class && (x % GRID_PERIOD == 0 || y % GRID_PERIOD == 0) {
                v += spec.texture_amplitude;
            }
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * rng.normal();
            }
            pixels[y * s + x] = v.clamp(0.0, 1.0);
        }
    }

    let image = Tensor::new(vec![1, s, s], pixels).expect("generated image is well-formed");
    let raster = LabelRaster::new(s as u32, s as u32, ids).expect("raster matches image size");
    (image, raster)
}

/// Generate the full dataset: balanced natural / non-natural labels in a
/// seeded shuffle, one rendered sample per index.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n = spec.num_images;
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < n.div_ceil(2))).collect();
    let mut rng = DetRng::from_seed_stream(spec.seed, 0);
    rng.shuffle(&mut labels);

    let samples = (0..n)
        .map(|i| {
            let (image, raster) = render_sample(spec, i, labels[i]);
            LoadedSample {
                id: format!("{i:04}"),
                image,
                label: labels[i],
                raster,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        samples,
        class_names: default_class_names(spec.num_land_classes),
    })
}

/// Write a dataset directory: images.cfrt, rasters/<id>.lcr, classes.txt,
/// labels.csv.
pub fn write_dataset(dir: &Path, dataset: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::create_dir_all(dir.join("rasters"))?;
    let entries: Vec<(String, Tensor)> = dataset
        .samples
        .iter()
        .map(|s| (format!("image/{}", s.id), s.image.clone()))
        .collect();
    write_tensors(&dir.join("images.cfrt"), &entries)?;
    for sample in &dataset.samples {
        write_raster(&dir.join("rasters").join(format!("{}.lcr", sample.id)), &sample.raster)?;
    }
    write_manifest(&dir.join("classes.txt"), &dataset.class_names)?;
    let mut labels = String::new();
    for sample in &dataset.samples {
        labels.push_str(&format!("{},{}\n", sample.id, sample.label));
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`], validating that
/// every raster id appears in the class manifest.
pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let class_names = read_manifest(&dir.join("classes.txt"))?;
    let mut labels: Vec<(String, usize)> = Vec::new();
    let labels_text = std::fs::read_to_string(dir.join("labels.csv"))?;
    for (lineno, line) in labels_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("labels.csv line {} lacks a comma", lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Format(format!("labels.csv line {}: bad label {label:?}", lineno + 1))
        })?;
        labels.push((id.to_string(), label));
    }
    let tensors = read_tensors(&dir.join("images.cfrt"))?;
    let mut samples = Vec::with_capacity(labels.len());
    for (id, label) in labels {
        let key = format!("image/{id}");
        let image = tensors
            .iter()
            .find(|(name, _)| *name == key)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Input(format!("images.cfrt lacks entry {key:?}")))?;
        let raster = read_raster(&dir.join("rasters").join(format!("{id}.lcr")))?;
        raster.validate_against_manifest(&class_names)?;
        samples.push(LoadedSample {
            id,
            image,
            label,
            raster,
        });
    }
    Ok(SyntheticDataset {
        samples,
        class_names,
    })
}
