//! `xir` — generate synthetic embedding datasets, train the text-side
//! projection head, and evaluate zero-shot cross-lingual retrieval.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use xir_core::data_io::{
    join_pairs, load_checkpoint, read_embedding_file, read_manifest, save_checkpoint,
    write_embedding_file, write_manifest, EmbeddingSet, ManifestRecord,
};
use xir_core::eval::{
    alignment_score, evaluate_zero_shot, export_projection_csv, AlignmentEntry, AlignmentReport,
    Distance,
};
use xir_core::losses::{LossConfig, LossKind};
use xir_core::projection::ProjectionConfig;
use xir_core::synth::{generate, split_items, SynthConfig, SynthOutput};
use xir_core::train::{project_texts, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "xir",
    version,
    about = "Cross-lingual image retrieval: train a text projection head into a frozen image space and evaluate Recall@K"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic multi-language dataset
    GenSynthetic(GenArgs),
    /// Train the projection head on text-image pairs
    Train(TrainArgs),
    /// Evaluate Recall@K per language against an image gallery
    Eval(EvalArgs),
    /// Cross-lingual alignment diagnostics between text embedding sets
    Diag(DiagArgs),
    /// Export projected text embeddings as CSV
    ExportProj(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Total items to generate (training + holdout)
    #[arg(long, default_value_t = 2000)]
    n_items: usize,
    /// Items reserved as a held-out eval split (written as heldout.*)
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Comma-separated language codes
    #[arg(long, value_delimiter = ',', default_value = "en,xx")]
    languages: Vec<String>,
    #[arg(long, default_value_t = 32)]
    latent_dim: usize,
    #[arg(long, default_value_t = 512)]
    text_dim: usize,
    #[arg(long, default_value_t = 256)]
    image_dim: usize,
    /// Per-language map perturbation (cross-lingual misalignment)
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    /// Relative additive noise scale
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    text_emb: PathBuf,
    #[arg(long)]
    text_manifest: PathBuf,
    #[arg(long)]
    img_emb: PathBuf,
    #[arg(long)]
    img_manifest: PathBuf,
    /// Language filter for training pairs ("all" trains on every language)
    #[arg(long, default_value = "en")]
    train_lang: String,
    #[arg(long, default_value = "m3l")]
    loss: LossKind,
    #[arg(long, default_value_t = 4.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha1: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha2: f64,
    #[arg(long, default_value_t = 1100.0)]
    eta: f64,
    #[arg(long, default_value_t = 1e-8)]
    denom_eps: f64,
    #[arg(long, default_value_t = 50)]
    epochs: u64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.99)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Comma-separated block output dimensions
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,2048")]
    dims: Vec<usize>,
    /// Comma-separated per-block dropout rates
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.0")]
    dropout: Vec<f64>,
    /// l2-normalize input text embeddings before the head
    #[arg(long, default_value_t = false)]
    normalize_inputs: bool,
    /// Where to write the trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the loss log CSV (skipped if absent)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log every Nth batch
    #[arg(long, default_value_t = 1)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text embedding file; repeat for several languages
    #[arg(long, required = true)]
    text_emb: Vec<PathBuf>,
    /// Manifest for each --text-emb, in the same order
    #[arg(long, required = true)]
    text_manifest: Vec<PathBuf>,
    #[arg(long)]
    img_emb: PathBuf,
    #[arg(long)]
    img_manifest: PathBuf,
    /// Comma-separated recall cutoffs
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    #[arg(long, default_value = "sqeuclidean")]
    distance: Distance,
    /// Where to write the JSON report (skipped if absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagArgs {
    /// Text embedding file; repeat (at least two), row-paired across sets
    #[arg(long, required = true)]
    text_emb: Vec<PathBuf>,
    /// Manifest for each --text-emb, in the same order
    #[arg(long, required = true)]
    text_manifest: Vec<PathBuf>,
    /// Project sets through this checkpoint before scoring (raw if absent)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where to write the JSON report (skipped if absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true)]
    text_emb: Vec<PathBuf>,
    #[arg(long, required = true)]
    text_manifest: Vec<PathBuf>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Data(xir_core::Error),
}

impl From<xir_core::Error> for CliError {
    fn from(e: xir_core::Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Command::GenSynthetic(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diag(args) => cmd_diag(args),
        Command::ExportProj(args) => cmd_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn write_part(part: &SynthOutput, dir: &Path, prefix: &str) -> Result<(), xir_core::Error> {
    write_embedding_file(&part.images, dir.join(format!("{prefix}.images.xemb")))?;
    write_manifest(
        &part.image_manifest,
        dir.join(format!("{prefix}.images.manifest.jsonl")),
    )?;
    for lang in &part.languages {
        write_embedding_file(
            &lang.embeddings,
            dir.join(format!("{prefix}.text.{}.xemb", lang.lang)),
        )?;
        write_manifest(
            &lang.manifest,
            dir.join(format!("{prefix}.text.{}.manifest.jsonl", lang.lang)),
        )?;
    }
    Ok(())
}

fn cmd_gen(args: GenArgs) -> CliResult {
    if args.holdout >= args.n_items {
        return Err(usage(format!(
            "--holdout {} must be smaller than --n-items {}",
            args.holdout, args.n_items
        )));
    }
    let cfg = SynthConfig {
        n_items: args.n_items,
        latent_dim: args.latent_dim,
        text_dim: args.text_dim,
        image_dim: args.image_dim,
        languages: args.languages,
        gamma: args.gamma,
        sigma: args.sigma,
        seed: args.seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let out = generate(&cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| xir_core::Error::io(&args.out, e))?;

    let recipe = serde_json::json!({ "config": cfg, "holdout": args.holdout });
    let recipe_path = args.out.join("recipe.json");
    std::fs::write(&recipe_path, format!("{:#}\n", recipe))
        .map_err(|e| xir_core::Error::io(&recipe_path, e))?;

    if args.holdout > 0 {
        let (train_part, heldout) = split_items(&out, args.n_items - args.holdout)?;
        write_part(&train_part, &args.out, "train")?;
        write_part(&heldout, &args.out, "heldout")?;
        println!(
            "wrote {} train + {} heldout items for {} languages to {}",
            train_part.images.count(),
            heldout.images.count(),
            train_part.languages.len(),
            args.out.display()
        );
    } else {
        write_part(&out, &args.out, "train")?;
        println!(
            "wrote {} items for {} languages to {}",
            out.images.count(),
            out.languages.len(),
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult {
    if args.dims.len() != args.dropout.len() {
        return Err(usage(format!(
            "--dims has {} entries but --dropout has {}",
            args.dims.len(),
            args.dropout.len()
        )));
    }
    let loss = LossConfig {
        kind: args.loss,
        rho: args.rho,
        alpha1: args.alpha1,
        alpha2: args.alpha2,
        eta: args.eta,
        denom_eps: args.denom_eps,
    };
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        beta1: args.beta1,
        beta2: args.beta2,
        adam_eps: args.adam_eps,
        seed: args.seed,
        loss,
        normalize_inputs: args.normalize_inputs,
        log_every: args.log_every,
    };
    train_cfg.validate().map_err(|e| usage(e.to_string()))?;
    // validate the architecture lists before any file is opened; the input
    // width is bound to the text file after loading
    ProjectionConfig::new(1, args.dims.clone(), args.dropout.clone())
        .map_err(|e| usage(e.to_string()))?;

    let texts = read_embedding_file(&args.text_emb)?;
    let text_manifest = read_manifest(&args.text_manifest)?;
    let images = read_embedding_file(&args.img_emb)?;
    let image_manifest = read_manifest(&args.img_manifest)?;

    let filter = if args.train_lang == "all" {
        None
    } else {
        Some(args.train_lang.as_str())
    };
    let proj_cfg = ProjectionConfig::new(texts.dim(), args.dims, args.dropout)?;
    let dataset = join_pairs(texts, &text_manifest, images, &image_manifest, filter)?;

    let (ckpt, log) = train(&dataset, &proj_cfg, &train_cfg)?;
    save_checkpoint(&ckpt, &args.checkpoint)?;

    if let Some(out) = &args.out {
        std::fs::write(out, log.to_csv()).map_err(|e| xir_core::Error::io(out, e))?;
    }
    println!(
        "trained {} epochs on {} pairs ({} steps)",
        train_cfg.epochs,
        dataset.pairs.len(),
        log.entries.len()
    );
    if let (Some(first), Some(last)) = (
        log.epoch_mean_loss(0),
        log.epoch_mean_loss(train_cfg.epochs.saturating_sub(1)),
    ) {
        println!("mean loss: first epoch {first:.6}, final epoch {last:.6}");
    }
    println!("checkpoint written to {}", args.checkpoint.display());
    Ok(())
}

fn load_text_sets(
    embs: &[PathBuf],
    manifests: &[PathBuf],
) -> Result<Vec<(EmbeddingSet, Vec<ManifestRecord>)>, CliError> {
    if embs.len() != manifests.len() {
        return Err(usage(format!(
            "{} --text-emb flags but {} --text-manifest flags",
            embs.len(),
            manifests.len()
        )));
    }
    let mut sets = Vec::with_capacity(embs.len());
    for (e, m) in embs.iter().zip(manifests) {
        sets.push((read_embedding_file(e)?, read_manifest(m)?));
    }
    Ok(sets)
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    if args.text_emb.len() != args.text_manifest.len() {
        return Err(usage(format!(
            "{} --text-emb flags but {} --text-manifest flags",
            args.text_emb.len(),
            args.text_manifest.len()
        )));
    }
    if args.k.is_empty() {
        return Err(usage("--k needs at least one value"));
    }

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let sets = load_text_sets(&args.text_emb, &args.text_manifest)?;
    let gallery = read_embedding_file(&args.img_emb)?;
    let gallery_manifest = read_manifest(&args.img_manifest)?;

    let set_refs: Vec<(&EmbeddingSet, &[ManifestRecord])> =
        sets.iter().map(|(e, m)| (e, m.as_slice())).collect();
    let report = evaluate_zero_shot(
        &ckpt,
        &set_refs,
        &gallery,
        &gallery_manifest,
        &args.k,
        args.distance,
        &args.checkpoint.display().to_string(),
    )?;

    print!("{}", report.render_table());
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_json()).map_err(|e| xir_core::Error::io(out, e))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_diag(args: DiagArgs) -> CliResult {
    if args.text_emb.len() != args.text_manifest.len() {
        return Err(usage(format!(
            "{} --text-emb flags but {} --text-manifest flags",
            args.text_emb.len(),
            args.text_manifest.len()
        )));
    }
    if args.text_emb.len() < 2 {
        return Err(usage("diag needs at least two --text-emb sets"));
    }

    let ckpt = args.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let sets = load_text_sets(&args.text_emb, &args.text_manifest)?;

    let mut labeled: Vec<(String, EmbeddingSet)> = Vec::with_capacity(sets.len());
    for (i, (set, manifest)) in sets.into_iter().enumerate() {
        let label = manifest
            .first()
            .map(|r| r.lang.clone())
            .unwrap_or_else(|| format!("set{i}"));
        let set = match &ckpt {
            Some(c) => project_texts(c, &set)?,
            None => set,
        };
        labeled.push((label, set));
    }

    let mut report = AlignmentReport::default();
    for i in 0..labeled.len() {
        for j in (i + 1)..labeled.len() {
            let score = alignment_score(&labeled[i].1, &labeled[j].1)?;
            report.entries.push(AlignmentEntry {
                lang_a: labeled[i].0.clone(),
                lang_b: labeled[j].0.clone(),
                paired_mean: score.paired_mean,
                mismatched_mean: score.mismatched_mean,
                ratio: score.ratio,
            });
        }
    }

    print!("{}", report.render_table());
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_json()).map_err(|e| xir_core::Error::io(out, e))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> CliResult {
    if args.text_emb.len() != args.text_manifest.len() {
        return Err(usage(format!(
            "{} --text-emb flags but {} --text-manifest flags",
            args.text_emb.len(),
            args.text_manifest.len()
        )));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let sets = load_text_sets(&args.text_emb, &args.text_manifest)?;
    let set_refs: Vec<(&EmbeddingSet, &[ManifestRecord])> =
        sets.iter().map(|(e, m)| (e, m.as_slice())).collect();
    export_projection_csv(&ckpt, &set_refs, &args.out)?;
    println!("projections written to {}", args.out.display());
    Ok(())
}
