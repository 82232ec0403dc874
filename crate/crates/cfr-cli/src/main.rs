//! `cfr` command line: gen → train → uncertainty → explain → analyze, plus a
//! `report` digest of an existing run. Every stage reads its inputs from the
//! shared flat config (file plus flag overrides) and fails with a
//! stage-tagged message.

mod config;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cfr_core::analysis::ExternalIndex;
use cfr_core::data::{generate_synthetic, read_dataset, split, write_dataset, SyntheticDataset};
use cfr_core::ddu::{fit, rank_by_confidence, save_discriminant, uncertainty};
use cfr_core::model::{accuracy, load_model, save_model, train, ModelConfig, ModelParams};
use cfr_core::pipeline::{
    analyze_maps, embed_dataset, explain_dataset, read_maps, read_scores_csv, write_maps,
    write_report, write_scores_csv,
};
use cfr_core::rollout::{write_pgm, RelevanceMap};
use cfr_core::{Error, Result, Tensor};

use config::{parse_thresholds, RunConfig};

#[derive(Parser)]
#[command(
    name = "cfr",
    version,
    about = "Confidence-filtered relevance analysis for a small transformer classifier"
)]
struct Cli {
    /// `key = value` config file, applied before any flags.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic planted-texture dataset.
    Gen(Overrides),
    /// Train the transformer classifier and write the model artifact.
    Train(Overrides),
    /// Fit the Gaussian discriminant and write ranked uncertainty scores.
    Uncertainty(Overrides),
    /// Write a relevance map for every sample.
    Explain(Overrides),
    /// Aggregate maps over confidence subsets into the report files.
    Analyze(Overrides),
    /// Print a digest of an existing summary.
    Report(Overrides),
}

/// Every config key as an optional flag; set ones override the file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, value_name = "DIR")]
    dataset_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_land_classes: Option<usize>,
    #[arg(long)]
    planted_class: Option<u16>,
    #[arg(long)]
    texture_amplitude: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    gen_seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    mlp_dim: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    test_frac: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    ridge_lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated percentiles, e.g. 10,30,50,100.
    #[arg(long, value_name = "LIST")]
    thresholds: Option<String>,
    #[arg(long)]
    ece_bins: Option<usize>,
    #[arg(long, value_name = "FILE")]
    external_index: Option<PathBuf>,
    #[arg(long, value_name = "BOOL")]
    use_ranks: Option<bool>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    heatmaps: Option<bool>,
}

fn merge(config: &mut RunConfig, o: &Overrides) -> Result<()> {
    macro_rules! set {
        ($($field:ident),* $(,)?) => {
            $(if let Some(v) = &o.$field { config.$field = v.clone(); })*
        };
    }
    set!(
        dataset_dir,
        out_dir,
        num_images,
        image_size,
        num_land_classes,
        planted_class,
        texture_amplitude,
        noise_sigma,
        gen_seed,
        patch_size,
        num_blocks,
        num_heads,
        embed_dim,
        mlp_dim,
        num_classes,
        model_seed,
        epochs,
        batch_size,
        learning_rate,
        train_seed,
        train_frac,
        val_frac,
        test_frac,
        split_seed,
        ridge_lambda,
        epsilon,
        ece_bins,
        use_ranks,
        threads,
        heatmaps,
    );
    if let Some(t) = &o.thresholds {
        config.thresholds = parse_thresholds(t)?;
    }
    if let Some(p) = &o.external_index {
        config.external_index = Some(p.clone());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.load_file(path).map_err(|e| e.in_stage("config"))?;
    }
    let overrides = match &cli.command {
        Command::Gen(o)
        | Command::Train(o)
        | Command::Uncertainty(o)
        | Command::Explain(o)
        | Command::Analyze(o)
        | Command::Report(o) => o,
    };
    merge(&mut config, overrides).map_err(|e| e.in_stage("config"))?;
    match &cli.command {
        Command::Gen(_) => cmd_gen(&config).map_err(|e| e.in_stage("gen")),
        Command::Train(_) => cmd_train(&config).map_err(|e| e.in_stage("train")),
        Command::Uncertainty(_) => cmd_uncertainty(&config).map_err(|e| e.in_stage("uncertainty")),
        Command::Explain(_) => cmd_explain(&config).map_err(|e| e.in_stage("explain")),
        Command::Analyze(_) => cmd_analyze(&config).map_err(|e| e.in_stage("analyze")),
        Command::Report(_) => report::print_digest(&config.out_dir).map_err(|e| e.in_stage("report")),
    }
}

fn model_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("model.cfrt")
}

fn load_inputs(config: &RunConfig) -> Result<(SyntheticDataset, ModelParams, ModelConfig)> {
    let dataset = read_dataset(&config.dataset_dir)?;
    let (params, model) = load_model(&model_path(config))?;
    Ok((dataset, params, model))
}

fn gather(
    dataset: &SyntheticDataset,
    idx: &[usize],
) -> (Vec<Tensor>, Vec<usize>) {
    (
        idx.iter().map(|&i| dataset.samples[i].image.clone()).collect(),
        idx.iter().map(|&i| dataset.samples[i].label).collect(),
    )
}

fn cmd_gen(config: &RunConfig) -> Result<()> {
    let spec = config.synthetic_spec();
    let dataset = generate_synthetic(&spec)?;
    write_dataset(&config.dataset_dir, &dataset)?;
    println!(
        "wrote {} images ({}x{}, {} land classes) to {}",
        dataset.samples.len(),
        spec.image_size,
        spec.image_size,
        spec.num_land_classes,
        config.dataset_dir.display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let model = config.model_config();
    model.validate()?;
    let dataset = read_dataset(&config.dataset_dir)?;
    let (train_idx, _, test_idx) =
        split(dataset.samples.len(), config.fractions(), config.split_seed)?;
    let (train_images, train_labels) = gather(&dataset, &train_idx);
    let (test_images, test_labels) = gather(&dataset, &test_idx);
    let outcome = train(&train_images, &train_labels, &model, &config.train_hyper())?;
    let test_accuracy = accuracy(&test_images, &test_labels, &outcome.params, &model)?;
    std::fs::create_dir_all(&config.out_dir)?;
    save_model(&model_path(config), &outcome.params, &model)?;
    println!(
        "trained {} epochs on {} images; test accuracy {:.3}; model at {}",
        config.epochs,
        train_images.len(),
        test_accuracy,
        model_path(config).display()
    );
    Ok(())
}

fn cmd_uncertainty(config: &RunConfig) -> Result<()> {
    let (dataset, params, model) = load_inputs(config)?;
    let (train_idx, _, _) =
        split(dataset.samples.len(), config.fractions(), config.split_seed)?;
    let embed = embed_dataset(&dataset, &params, &model)?;
    let mut train_embeddings = Tensor::zeros(vec![train_idx.len(), model.embed_dim]);
    let mut train_labels = Vec::with_capacity(train_idx.len());
    for (r, &i) in train_idx.iter().enumerate() {
        train_embeddings
            .row_mut(r)
            .copy_from_slice(embed.embeddings.row(i));
        train_labels.push(dataset.samples[i].label);
    }
    let gd = fit(&train_embeddings, &train_labels, config.ridge_lambda)?;
    let mut scores = Vec::with_capacity(dataset.samples.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        scores.push(uncertainty(&gd, &sample.id, embed.embeddings.row(i))?);
    }
    let ranked = rank_by_confidence(&scores);
    save_discriminant(&config.out_dir.join("ddu.cfrt"), &gd)?;
    write_scores_csv(&config.out_dir.join("scores.csv"), &ranked)?;
    println!(
        "fitted {}-class discriminant (lambda {}); ranked {} samples",
        gd.num_classes,
        gd.ridge_lambda,
        ranked.len()
    );
    Ok(())
}

fn cmd_explain(config: &RunConfig) -> Result<()> {
    let (dataset, params, model) = load_inputs(config)?;
    let explained = explain_dataset(&dataset, &params, &model, config.epsilon, config.threads)?;
    let maps: Vec<RelevanceMap> = explained.into_iter().map(|(_, m)| m).collect();
    write_maps(&config.out_dir.join("maps.cfrt"), &dataset.samples, &maps)?;
    if config.heatmaps {
        let dir = config.out_dir.join("maps");
        std::fs::create_dir_all(&dir)?;
        for (sample, map) in dataset.samples.iter().zip(&maps) {
            write_pgm(&dir.join(format!("{}.pgm", sample.id)), map)?;
        }
    }
    println!("explained {} samples", maps.len());
    Ok(())
}

fn cmd_analyze(config: &RunConfig) -> Result<()> {
    let (dataset, params, model) = load_inputs(config)?;
    let ranked = read_scores_csv(&config.out_dir.join("scores.csv"))?;
    if ranked.len() != dataset.samples.len() {
        return Err(Error::Input(format!(
            "{} scores for {} samples; rerun `cfr uncertainty`",
            ranked.len(),
            dataset.samples.len()
        )));
    }
    let maps = read_maps(&config.out_dir.join("maps.cfrt"), &dataset.samples)?;
    let embed = embed_dataset(&dataset, &params, &model)?;
    let (_, _, test_idx) =
        split(dataset.samples.len(), config.fractions(), config.split_seed)?;
    let (test_images, test_labels) = gather(&dataset, &test_idx);
    let test_accuracy = accuracy(&test_images, &test_labels, &params, &model)?;
    let index = match &config.external_index {
        Some(path) => Some(ExternalIndex::from_csv(path)?),
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
    )?;
    write_report(&config.out_dir, &report)?;
    println!(
        "analyzed {} thresholds over {} samples; report at {}",
        report.thresholds.len(),
        report.num_samples,
        config.out_dir.join("report.csv").display()
    );
    Ok(())
}
