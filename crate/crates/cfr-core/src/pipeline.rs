//! End-to-end orchestration: train, fit the uncertainty model, rank, explain,
//! aggregate, and report. Every stage failure is tagged with the stage name.
//!
//! Each helper is also usable on its own so a front end can run the stages
//! separately against on-disk artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    aggregate_by_class, partition, pearson, profile, relevance_entropy, ExternalIndex,
};
use crate::data::{read_dataset, split, write_tensors, LoadedSample, SyntheticDataset};
use crate::ddu::{
    self, fit, rank_by_confidence, save_discriminant, uncertainty, UncertaintyScore,
};
use crate::error::{Error, Result};
use crate::model::{
    accuracy, attention_gradients, forward, lrp_relevance, save_model, train, ModelConfig,
    ModelParams, TrainHyper,
};
use crate::rollout::{
    extract_patch_relevance, fuse_block, rollout_chain, to_pixel_map, write_pgm, Normalization,
    RelevanceMap,
};
use crate::tensor::{softmax_vec, Tensor};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub ridge_lambda: f64,
    pub epsilon: f64,
    pub thresholds: Vec<f64>,
    pub fractions: (f64, f64, f64),
    pub split_seed: u64,
    pub ece_bins: usize,
    pub external_index: Option<PathBuf>,
    pub use_ranks: bool,
    pub threads: usize,
    pub write_heatmaps: bool,
}

impl PipelineConfig {
    pub fn new(dataset_dir: &Path, output_dir: &Path, model: ModelConfig) -> PipelineConfig {
        PipelineConfig {
            dataset_dir: dataset_dir.to_path_buf(),
            output_dir: output_dir.to_path_buf(),
            model,
            hyper: TrainHyper::default(),
            ridge_lambda: 1e-3,
            epsilon: 1e-6,
            thresholds: vec![10.0, 30.0, 50.0, 100.0],
            fractions: (0.8, 0.1, 0.1),
            split_seed: 7,
            ece_bins: 10,
            external_index: None,
            use_ranks: false,
            threads: 1,
            write_heatmaps: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassRow {
    pub class_id: u16,
    pub class_name: String,
    pub mean_relevance: f64,
    pub total_relevance: f64,
    pub total_pixels: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub subset_size: usize,
    pub entropy: f64,
    pub pearson: Option<f64>,
    pub classes: Vec<ClassRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CfrReport {
    pub num_samples: usize,
    pub test_accuracy: f64,
    pub ece: f64,
    pub ece_bins: usize,
    pub external_index: Option<String>,
    pub thresholds: Vec<ThresholdReport>,
}

fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| e.in_stage(name)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Forward activations the pipeline reuses across stages.
#[derive(Debug, Clone)]
pub struct EmbedOutputs {
    pub embeddings: Tensor,
    pub probabilities: Tensor,
    pub predictions: Vec<usize>,
}

pub fn embed_dataset(
    dataset: &SyntheticDataset,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<EmbedOutputs> {
    let n = dataset.samples.len();
    let mut embeddings = Tensor::zeros(vec![n, config.embed_dim]);
    let mut probabilities = Tensor::zeros(vec![n, config.num_classes]);
    let mut predictions = Vec::with_capacity(n);
    for (i, sample) in dataset.samples.iter().enumerate() {
        let (logits, cache) = forward(&sample.image, params, config)?;
        embeddings.row_mut(i).copy_from_slice(&cache.cls_embedding);
        probabilities.row_mut(i).copy_from_slice(&softmax_vec(&logits));
        predictions.push(argmax(&logits));
    }
    Ok(EmbedOutputs {
        embeddings,
        probabilities,
        predictions,
    })
}

/// One forward pass plus attribution: gradient-weighted LRP rollout read out
/// as a raw pixel map. With `target` unset the predicted class is explained.
pub fn explain_sample(
    image: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    target: Option<usize>,
    epsilon: f64,
) -> Result<(usize, RelevanceMap)> {
    let (logits, cache) = forward(image, params, config)?;
    let target = target.unwrap_or_else(|| argmax(&logits));
    let grads = attention_gradients(params, config, &cache, target)?;
    let rel = lrp_relevance(params, config, &cache, target, epsilon)?;
    let fused = cache
        .blocks
        .iter()
        .zip(grads.iter().zip(&rel.per_block))
        .map(|(block, (g, r))| fuse_block(&block.attention, g, r))
        .collect::<Result<Vec<_>>>()?;
    let m = rollout_chain(&fused)?;
    let patch_rel = extract_patch_relevance(&m, 0)?;
    let map = to_pixel_map(&patch_rel, config.image_size, config.patch_size, false)?;
    Ok((target, map))
}

/// Explain every sample against its predicted class. With `threads > 1` the
/// samples are split into contiguous chunks, one worker each; results land in
/// sample order either way.
pub fn explain_dataset(
    dataset: &SyntheticDataset,
    params: &ModelParams,
    config: &ModelConfig,
    epsilon: f64,
    threads: usize,
) -> Result<Vec<(usize, RelevanceMap)>> {
    let n = dataset.samples.len();
    if n == 0 {
        return Err(Error::Input("nothing to explain".into()));
    }
    let threads = threads.clamp(1, n);
    if threads == 1 {
        return dataset
            .samples
            .iter()
            .map(|s| explain_sample(&s.image, params, config, None, epsilon))
            .collect();
    }
    let mut out: Vec<Option<(usize, RelevanceMap)>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (ci, slots) in out.chunks_mut(chunk).enumerate() {
            let start = ci * chunk;
            handles.push(scope.spawn(move || -> Result<()> {
                for (off, slot) in slots.iter_mut().enumerate() {
                    let sample = &dataset.samples[start + off];
                    *slot = Some(explain_sample(&sample.image, params, config, None, epsilon)?);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join()
                .map_err(|_| Error::Input("explain worker panicked".into()))??;
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|o| o.unwrap()).collect())
}

pub fn write_scores_csv(path: &Path, scores: &[UncertaintyScore]) -> Result<()> {
    let mut text = String::from("sample_id,uncertainty,nearest_class\n");
    for s in scores {
        text.push_str(&format!("{},{},{}\n", s.sample_id, s.u, s.nearest_class));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<UncertaintyScore>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "scores line {} has {} fields, expected 3",
                lineno + 1,
                fields.len()
            )));
        }
        let u: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("scores line {}: bad uncertainty", lineno + 1)))?;
        let nearest_class: usize = fields[2].parse().map_err(|_| {
            Error::Format(format!("scores line {}: bad nearest class", lineno + 1))
        })?;
        out.push(UncertaintyScore {
            sample_id: fields[0].to_string(),
            u,
            nearest_class,
        });
    }
    Ok(out)
}

/// Store raw relevance maps as `map/{id}` entries in sample order.
pub fn write_maps(path: &Path, samples: &[LoadedSample], maps: &[RelevanceMap]) -> Result<()> {
    if samples.len() != maps.len() {
        return Err(Error::Input(format!(
            "{} samples but {} maps",
            samples.len(),
            maps.len()
        )));
    }
    let entries: Vec<(String, Tensor)> = samples
        .iter()
        .zip(maps)
        .map(|(s, m)| (format!("map/{}", s.id), m.values.clone()))
        .collect();
    write_tensors(path, &entries)
}

pub fn read_maps(path: &Path, samples: &[LoadedSample]) -> Result<Vec<RelevanceMap>> {
    let entries = crate::data::read_tensors(path)?;
    if entries.len() != samples.len() {
        return Err(Error::Format(format!(
            "map store has {} entries for {} samples",
            entries.len(),
            samples.len()
        )));
    }
    samples
        .iter()
        .zip(entries)
        .map(|(s, (name, values))| {
            let expected = format!("map/{}", s.id);
            if name != expected {
                return Err(Error::Format(format!(
                    "map entry {name:?} where {expected:?} was expected"
                )));
            }
            if !values.is_matrix() || values.rows() != values.cols() {
                return Err(Error::Format(format!(
                    "map {name:?} has dims {:?}",
                    values.dims()
                )));
            }
            Ok(RelevanceMap {
                width: values.cols(),
                height: values.rows(),
                values,
                normalization: Normalization::Raw,
            })
        })
        .collect()
}

/// Aggregate, partition, and correlate already-computed maps and rankings
/// into the final report.
#[allow(clippy::too_many_arguments)]
pub fn analyze_maps(
    dataset: &SyntheticDataset,
    ranked: &[UncertaintyScore],
    maps: &[RelevanceMap],
    probabilities: &Tensor,
    test_accuracy: f64,
    thresholds: &[f64],
    ece_bins: usize,
    index: Option<&ExternalIndex>,
    use_ranks: bool,
) -> Result<CfrReport> {
    let n = dataset.samples.len();
    if maps.len() != n {
        return Err(Error::Input(format!("{} maps for {n} samples", maps.len())));
    }
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let ece = ddu::ece(probabilities, &labels, ece_bins)?;
    let mut aggregates = BTreeMap::new();
    for (sample, map) in dataset.samples.iter().zip(maps) {
        aggregates.insert(sample.id.clone(), aggregate_by_class(map, &sample.raster)?);
    }
    let subsets = partition(ranked, thresholds)?;
    let mut reports = Vec::with_capacity(subsets.len());
    for subset in &subsets {
        let p = profile(subset, &aggregates)?;
        let entropy = relevance_entropy(&p)?;
        let r = match index {
            Some(idx) => Some(pearson(&p, idx, use_ranks)?),
            None => None,
        };
        let classes = p
            .per_class
            .iter()
            .map(|(&class_id, stat)| ClassRow {
                class_id,
                class_name: dataset
                    .class_names
                    .get(&class_id)
                    .cloned()
                    .unwrap_or_else(|| format!("class{class_id}")),
                mean_relevance: stat.mean_relevance,
                total_relevance: stat.total_relevance,
                total_pixels: stat.total_pixels,
            })
            .collect();
        reports.push(ThresholdReport {
            threshold: subset.threshold,
            subset_size: subset.sample_ids.len(),
            entropy,
            pearson: r,
            classes,
        });
    }
    Ok(CfrReport {
        num_samples: n,
        test_accuracy,
        ece,
        ece_bins,
        external_index: index.map(|i| i.name.clone()),
        thresholds: reports,
    })
}

/// Write `report.csv` and `summary.json` into `dir`.
pub fn write_report(dir: &Path, report: &CfrReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("threshold,class_id,class_name,mean_relevance,total_pixels\n");
    for t in &report.thresholds {
        for row in &t.classes {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                t.threshold, row.class_id, row.class_name, row.mean_relevance, row.total_pixels
            ));
        }
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("summary serialization failed: {e}")))?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

fn validate_config(config: &PipelineConfig) -> Result<()> {
    config.model.validate()?;
    if config.thresholds.is_empty() {
        return Err(Error::Parameter("no thresholds given".into()));
    }
    let mut prev = 0.0;
    for &t in &config.thresholds {
        if !(t > prev && t <= 100.0) {
            return Err(Error::Parameter(format!(
                "thresholds must be strictly increasing in (0, 100], got {:?}",
                config.thresholds
            )));
        }
        prev = t;
    }
    if !(config.epsilon > 0.0) || !config.epsilon.is_finite() {
        return Err(Error::Parameter(format!(
            "epsilon must be positive, got {}",
            config.epsilon
        )));
    }
    if !config.ridge_lambda.is_finite() || config.ridge_lambda < 0.0 {
        return Err(Error::Parameter(format!(
            "ridge lambda must be non-negative, got {}",
            config.ridge_lambda
        )));
    }
    if config.ece_bins == 0 {
        return Err(Error::Parameter("ece_bins must be at least 1".into()));
    }
    if config.threads == 0 {
        return Err(Error::Parameter("threads must be at least 1".into()));
    }
    Ok(())
}

/// Run every stage against the dataset directory and write all artifacts
/// (model, discriminant, scores, report, optional heatmaps) to `output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<CfrReport> {
    validate_config(config).map_err(stage("config"))?;
    let dataset = read_dataset(&config.dataset_dir).map_err(stage("load"))?;
    let n = dataset.samples.len();
    std::fs::create_dir_all(&config.output_dir).map_err(|e| stage("load")(e.into()))?;

    let (train_idx, _val_idx, test_idx) =
        split(n, config.fractions, config.split_seed).map_err(stage("split"))?;
    let gather = |idx: &[usize]| -> (Vec<Tensor>, Vec<usize>) {
        (
            idx.iter().map(|&i| dataset.samples[i].image.clone()).collect(),
            idx.iter().map(|&i| dataset.samples[i].label).collect(),
        )
    };
    let (train_images, train_labels) = gather(&train_idx);
    let (test_images, test_labels) = gather(&test_idx);

    let outcome =
        train(&train_images, &train_labels, &config.model, &config.hyper).map_err(stage("train"))?;
    let params = outcome.params;
    save_model(&config.output_dir.join("model.cfrt"), &params, &config.model)
        .map_err(stage("train"))?;
    let test_accuracy =
        accuracy(&test_images, &test_labels, &params, &config.model).map_err(stage("evaluate"))?;

    let embed = embed_dataset(&dataset, &params, &config.model).map_err(stage("embed"))?;

    let mut train_embeddings = Tensor::zeros(vec![train_idx.len(), config.model.embed_dim]);
    for (r, &i) in train_idx.iter().enumerate() {
        train_embeddings
            .row_mut(r)
            .copy_from_slice(embed.embeddings.row(i));
    }
    let gd =
        fit(&train_embeddings, &train_labels, config.ridge_lambda).map_err(stage("uncertainty"))?;
    save_discriminant(&config.output_dir.join("ddu.cfrt"), &gd).map_err(stage("uncertainty"))?;
    let mut scores = Vec::with_capacity(n);
    for (i, sample) in dataset.samples.iter().enumerate() {
        scores.push(
            uncertainty(&gd, &sample.id, embed.embeddings.row(i)).map_err(stage("uncertainty"))?,
        );
    }
    let ranked = rank_by_confidence(&scores);
    write_scores_csv(&config.output_dir.join("scores.csv"), &ranked)
        .map_err(stage("uncertainty"))?;

    let explained = explain_dataset(
        &dataset,
        &params,
        &config.model,
        config.epsilon,
        config.threads,
    )
    .map_err(stage("explain"))?;
    let maps: Vec<RelevanceMap> = explained.into_iter().map(|(_, m)| m).collect();
    write_maps(&config.output_dir.join("maps.cfrt"), &dataset.samples, &maps)
        .map_err(stage("explain"))?;
    if config.write_heatmaps {
        let dir = config.output_dir.join("maps");
        std::fs::create_dir_all(&dir).map_err(|e| stage("explain")(e.into()))?;
        for (sample, map) in dataset.samples.iter().zip(&maps) {
            write_pgm(&dir.join(format!("{}.pgm", sample.id)), map).map_err(stage("explain"))?;
        }
    }

    let index = match &config.external_index {
        Some(path) => Some(ExternalIndex::from_csv(path).map_err(stage("analyze"))?),
        None => None,
    };
    let report = analyze_maps(
        &dataset,
        &ranked,
        &maps,
        &embed.probabilities,
        test_accuracy,
        &config.thresholds,
        config.ece_bins,
        index.as_ref(),
        config.use_ranks,
    )
    .map_err(stage("analyze"))?;
    write_report(&config.output_dir, &report).map_err(stage("report"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, write_dataset, SyntheticSpec};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_images: 32,
            image_size: 8,
            num_land_classes: 3,
            planted_class_id: 0,
            texture_amplitude: 0.3,
            noise_sigma: 0.01,
            seed: 11,
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            num_channels: 1,
            num_blocks: 1,
            num_heads: 2,
            embed_dim: 8,
            mlp_dim: 16,
            num_classes: 2,
            seed: 5,
        }
    }

    fn tiny_pipeline(root: &Path, out_name: &str) -> PipelineConfig {
        let data_dir = root.join("data");
        if !data_dir.exists() {
            let dataset = generate_synthetic(&tiny_spec()).unwrap();
            write_dataset(&data_dir, &dataset).unwrap();
        }
        let mut config = PipelineConfig::new(&data_dir, &root.join(out_name), tiny_model());
        config.hyper = TrainHyper {
            epochs: 8,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 3,
        };
        config
    }

    fn temp_root(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("cfr-pipeline-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn tiny_run_produces_consistent_report() {
        let root = temp_root("tiny");
        let config = tiny_pipeline(&root, "out");
        let report = run_pipeline(&config).unwrap();
        assert_eq!(report.num_samples, 32);
        assert_eq!(report.thresholds.len(), 4);
        let sizes: Vec<usize> = report.thresholds.iter().map(|t| t.subset_size).collect();
        assert_eq!(sizes, [4, 10, 16, 32]);
        for t in &report.thresholds {
            assert!(t.entropy >= 0.0);
            assert!(t.pearson.is_none());
            let pixels: u64 = t.classes.iter().map(|c| c.total_pixels).sum();
            assert_eq!(pixels, t.subset_size as u64 * 64);
        }
        for name in ["model.cfrt", "ddu.cfrt", "scores.csv", "maps.cfrt", "report.csv", "summary.json"] {
            assert!(config.output_dir.join(name).exists(), "{name} missing");
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let root = temp_root("rerun");
        let first = tiny_pipeline(&root, "out-a");
        let second = tiny_pipeline(&root, "out-b");
        run_pipeline(&first).unwrap();
        run_pipeline(&second).unwrap();
        for name in ["model.cfrt", "ddu.cfrt", "scores.csv", "maps.cfrt", "report.csv", "summary.json"] {
            let a = std::fs::read(first.output_dir.join(name)).unwrap();
            let b = std::fs::read(second.output_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
    }

    #[test]
    fn threshold_100_profile_matches_unfiltered_aggregation() {
        let root = temp_root("full");
        let mut config = tiny_pipeline(&root, "out");
        config.thresholds = vec![100.0];
        let report = run_pipeline(&config).unwrap();
        let t = &report.thresholds[0];
        assert_eq!(t.subset_size, 32);

        let dataset = read_dataset(&config.dataset_dir).unwrap();
        let maps = read_maps(&config.output_dir.join("maps.cfrt"), &dataset.samples).unwrap();
        let mut totals: BTreeMap<u16, (f64, u64)> = BTreeMap::new();
        for (sample, map) in dataset.samples.iter().zip(&maps) {
            for (class, (s, c)) in aggregate_by_class(map, &sample.raster).unwrap() {
                let e = totals.entry(class).or_insert((0.0, 0));
                e.0 += s;
                e.1 += c;
            }
        }
        // The on-disk maps are f32-rounded, so compare loosely.
        for row in &t.classes {
            let (_, pixels) = totals[&row.class_id];
            assert_eq!(pixels, row.total_pixels);
            let disk_mean = totals[&row.class_id].0 / pixels as f64;
            assert!((disk_mean - row.mean_relevance).abs() < 1e-4);
        }
    }

    #[test]
    fn explain_is_thread_count_invariant() {
        let root = temp_root("threads");
        let config = tiny_pipeline(&root, "out");
        let dataset = read_dataset(&config.dataset_dir).unwrap();
        let params = ModelParams::init(&config.model).unwrap();
        let one = explain_dataset(&dataset, &params, &config.model, 1e-6, 1).unwrap();
        let three = explain_dataset(&dataset, &params, &config.model, 1e-6, 3).unwrap();
        assert_eq!(one.len(), three.len());
        for ((ta, ma), (tb, mb)) in one.iter().zip(&three) {
            assert_eq!(ta, tb);
            assert_eq!(ma.values.data(), mb.values.data());
        }
    }

    #[test]
    fn explicit_target_matches_default_prediction() {
        let root = temp_root("target");
        let config = tiny_pipeline(&root, "out");
        let dataset = read_dataset(&config.dataset_dir).unwrap();
        let params = ModelParams::init(&config.model).unwrap();
        let image = &dataset.samples[0].image;
        let (pred, default_map) =
            explain_sample(image, &params, &config.model, None, 1e-6).unwrap();
        let (_, explicit_map) =
            explain_sample(image, &params, &config.model, Some(pred), 1e-6).unwrap();
        assert_eq!(default_map.values.data(), explicit_map.values.data());
    }

    #[test]
    fn config_errors_are_tagged_with_the_config_stage() {
        let root = temp_root("badcfg");
        let mut config = tiny_pipeline(&root, "out");
        config.epsilon = 0.0;
        let err = run_pipeline(&config).unwrap_err();
        assert!(err.to_string().contains("config"), "{err}");

        let mut config = tiny_pipeline(&root, "out");
        config.thresholds = vec![30.0, 10.0];
        let err = run_pipeline(&config).unwrap_err();
        assert!(err.to_string().contains("config"), "{err}");
    }

    #[test]
    fn missing_dataset_is_tagged_with_the_load_stage() {
        let root = temp_root("missing");
        let config = PipelineConfig::new(&root.join("nowhere"), &root.join("out"), tiny_model());
        let err = run_pipeline(&config).unwrap_err();
        assert!(err.to_string().contains("load"), "{err}");
    }

    #[test]
    fn scores_csv_round_trips() {
        let root = temp_root("scores");
        let scores = vec![
            UncertaintyScore {
                sample_id: "0001".into(),
                u: 0.517_382_194_712_3,
                nearest_class: 1,
            },
            UncertaintyScore {
                sample_id: "0002".into(),
                u: 2.25,
                nearest_class: 0,
            },
        ];
        let path = root.join("scores.csv");
        write_scores_csv(&path, &scores).unwrap();
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(back, scores);
    }

    #[test]
    fn map_store_round_trips_at_f32() {
        let root = temp_root("maps");
        let config = tiny_pipeline(&root, "out");
        let dataset = read_dataset(&config.dataset_dir).unwrap();
        let maps: Vec<RelevanceMap> = dataset
            .samples
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let patch = Tensor::new(vec![4], vec![i as f64, 1.5, 2.25, 0.0]).unwrap();
                to_pixel_map(&patch, 8, 4, false).unwrap()
            })
            .collect();
        let path = root.join("maps.cfrt");
        write_maps(&path, &dataset.samples, &maps).unwrap();
        let back = read_maps(&path, &dataset.samples).unwrap();
        // Dyadic values survive the f32 round trip bit-exactly.
        for (a, b) in maps.iter().zip(&back) {
            assert_eq!(a.values.data(), b.values.data());
            assert_eq!(b.normalization, Normalization::Raw);
        }
    }
}
