//! Command-line driver: synthesize data, train, evaluate, predict.
//!
//! Exit codes: 0 success; 2 I/O, input, or configuration problems; 3 data
//! invariant violations (including corrupt artifacts); 4 numerical
//! failures; 5 format or artifact version mismatches.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use aclip_core::checkpoint::load_checkpoint;
use aclip_core::config::RunConfig;
use aclip_core::dataset::{load_manifest, load_meta, META_FILE};
use aclip_core::encoders::Params;
use aclip_core::eval::{build_label_bank, classify, embed_images, embed_texts, evaluate, logit_scale_value};
use aclip_core::image::GrayImage;
use aclip_core::labels::OrganStationMap;
use aclip_core::prompts::{LabelKind, TemplateBank};
use aclip_core::report::{emit_report, render_summary};
use aclip_core::tokenizer::Vocabulary;
use aclip_core::train::{train_loop, TrainSession};
use aclip_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "aclip",
    version,
    about = "Contrastive vision-language training and zero-shot anatomy \
             classification on synthetic scans"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scan dataset with captions and a manifest.
    GenData(GenDataArgs),
    /// Contrastively train the two encoders over a manifest.
    Train(TrainArgs),
    /// Zero-shot evaluation of a checkpoint over a manifest split.
    Eval(EvalArgs),
    /// Classify one image, or score a set of captions against it.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Optional `key = value` settings file applied before flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Fewest organs per scene.
    #[arg(long)]
    organs_min: Option<usize>,
    /// Most organs per scene.
    #[arg(long)]
    organs_max: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Optional `key = value` settings file applied before flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training mode: m, ms, or msa.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Loss mix weight between the two contrastive directions.
    #[arg(long)]
    lambda: Option<f32>,
    /// Same-caption pair handling: mask or allow.
    #[arg(long)]
    duplicate_policy: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest whose split will be evaluated.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for CSV/SVG/summary artifacts.
    #[arg(long)]
    report: PathBuf,
    /// Also print the fractional multi-label accuracy variant.
    #[arg(long)]
    fractional: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PNG to classify.
    #[arg(long)]
    image: PathBuf,
    /// Optional caption file (one per line) to score against the image.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Input(_)
        | Error::Config(_)
        | Error::Param { .. }
        | Error::MissingSlot { .. }
        | Error::Index { .. }
        | Error::Shape { .. } => 2,
        Error::Data(_) | Error::Format(_) => 3,
        Error::Numeric(_) | Error::NonScalarLoss { .. } | Error::TapeConsumed => 4,
        Error::Version(_) => 5,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
    };
    if let Err(err) = result {
        eprintln!("aclip: {err}");
        std::process::exit(exit_code(&err));
    }
}

/// Defaults, then the config file, then CLI flags.
fn layered_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        cfg.apply_file(path)?;
    }
    Ok(cfg)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = layered_config(args.config.as_deref())?;
    if let Some(v) = args.train {
        cfg.gen.n_train = v;
    }
    if let Some(v) = args.val {
        cfg.gen.n_val = v;
    }
    if let Some(v) = args.test {
        cfg.gen.n_test = v;
    }
    if let Some(v) = args.seed {
        cfg.gen.seed = v;
    }
    if let Some(v) = args.image_size {
        cfg.gen.image_size = v;
    }
    if let Some(v) = args.organs_min {
        cfg.gen.organs_min = v;
    }
    if let Some(v) = args.organs_max {
        cfg.gen.organs_max = v;
    }

    let bank = TemplateBank::default_bank();
    let map = OrganStationMap::default_map();
    let manifest = aclip_core::dataset::generate_dataset(&cfg.gen, &bank, &map, &args.out)?;
    let meta = load_meta(&args.out.join(META_FILE))?;
    println!("manifest: {}", manifest.display());
    println!(
        "records: {} (train {}, val {}, test {})",
        cfg.gen.n_train + cfg.gen.n_val + cfg.gen.n_test,
        cfg.gen.n_train,
        cfg.gen.n_val,
        cfg.gen.n_test
    );
    let mut stations: Vec<_> = meta.station_counts.iter().collect();
    stations.sort();
    for (station, count) in stations {
        println!("station {station}: {count}");
    }
    Ok(())
}

/// Vocabulary corpus: every stored caption in the training split plus the
/// fixed label-bank prompts, so zero-shot class names always tokenize
/// without unknowns.
fn build_vocab(
    records: &[aclip_core::dataset::ManifestRecord],
    vocab_max: usize,
) -> Result<Vocabulary> {
    let mut corpus: Vec<String> =
        records.iter().flat_map(|r| r.captions.iter().cloned()).collect();
    for kind in [LabelKind::Organ, LabelKind::Station] {
        corpus.extend(aclip_core::prompts::label_prompt_bank(kind).into_iter().map(|(_, c)| c));
    }
    Vocabulary::build(&corpus, vocab_max)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = layered_config(args.config.as_deref())?;
    if let Some(v) = &args.mode {
        cfg.train.mode = aclip_core::train::AblationMode::parse(v)?;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = &args.duplicate_policy {
        cfg.train.duplicate_policy = aclip_core::train::DuplicatePolicy::parse(v)?;
    }

    let map = OrganStationMap::default_map();
    let bank = TemplateBank::default_bank();
    let records = load_manifest(&args.data, &map)?;
    let data_root = args.data.parent().unwrap_or_else(|| Path::new("."));

    // When generation metadata sits next to the manifest, catch an encoder
    // sized for the wrong images before the first forward pass.
    let meta_path = data_root.join(META_FILE);
    if meta_path.exists() {
        let meta = load_meta(&meta_path)?;
        if meta.image_size != cfg.image_size {
            return Err(Error::Config(format!(
                "dataset images are {0}x{0} but the encoder is configured for {1}x{1}",
                meta.image_size, cfg.image_size
            )));
        }
    }

    let train_records: Vec<_> =
        records.iter().filter(|r| r.split == "train").cloned().collect();
    let val_records: Vec<_> = records.iter().filter(|r| r.split == "val").cloned().collect();
    if train_records.is_empty() {
        return Err(Error::Input("manifest has no train split".into()));
    }

    let vocab = build_vocab(&train_records, cfg.vocab_max)?;
    let model_cfg = cfg.model_config(vocab.len());
    model_cfg.validate()?;
    cfg.train.validate()?;

    let config_text = cfg.to_text();
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let config_echo = args.out.join("config.txt");
    std::fs::write(&config_echo, &config_text).map_err(|e| Error::io(&config_echo, e))?;

    println!(
        "training: mode {}, {} records, {} epochs, batch {}, seed {}",
        cfg.train.mode,
        train_records.len(),
        cfg.train.epochs,
        cfg.train.batch_size,
        cfg.train.seed
    );
    let session = TrainSession {
        model_cfg: &model_cfg,
        train_cfg: &cfg.train,
        vocab: &vocab,
        bank: &bank,
        map: &map,
        config_text,
    };
    let mut params = Params::<f32>::init(&model_cfg, cfg.train.seed)?;
    let outcome = train_loop(
        &session,
        &train_records,
        &val_records,
        data_root,
        &mut params,
        &args.out,
        |row| {
            if let (Some(organ), Some(station)) = (row.val_organ_acc, row.val_station_acc) {
                println!(
                    "epoch {} step {}: loss {:.4}, val organ {:.4}, val station {:.4}",
                    row.epoch, row.step, row.total, organ, station
                );
            }
        },
    )?;
    println!("steps: {}", outcome.steps);
    println!("metrics: {}", outcome.metrics_path.display());
    if let Some(path) = &outcome.final_checkpoint {
        println!("checkpoint: {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let map = OrganStationMap::default_map();
    if ckpt.organ_map_hash != map.hash() {
        return Err(Error::Version(format!(
            "checkpoint was trained against organ-station map {}, this build ships {}",
            ckpt.organ_map_hash,
            map.hash()
        )));
    }
    let records = load_manifest(&args.data, &map)?;
    let data_root = args.data.parent().unwrap_or_else(|| Path::new("."));
    let split: Vec<_> = records.iter().filter(|r| r.split == args.split).cloned().collect();
    if split.is_empty() {
        return Err(Error::Input(format!(
            "manifest has no records in split {:?}",
            args.split
        )));
    }

    let report = evaluate(
        &ckpt.params,
        &ckpt.config,
        &ckpt.vocab,
        &split,
        data_root,
        &map,
        &ckpt.tag(),
    )?;
    let paths = emit_report(&report, &args.report)?;
    print!("{}", render_summary(&report));
    if args.fractional {
        println!(
            "fractional variant: organ {:.6}, station {:.6}",
            report.organ.fractional_accuracy, report.station.fractional_accuracy
        );
    }
    println!("report: {}", paths.summary.parent().unwrap_or(&args.report).display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let image = GrayImage::load_png(&args.image)?;
    let emb = embed_images(&ckpt.params, &ckpt.config, std::slice::from_ref(&image))?;
    let scale = logit_scale_value(&ckpt.params)?;

    match &args.prompts {
        None => {
            for kind in [LabelKind::Organ, LabelKind::Station] {
                let bank = build_label_bank(&ckpt.params, &ckpt.config, &ckpt.vocab, kind)?;
                let pred = classify(&emb, &bank, scale)?;
                let name = match kind {
                    LabelKind::Organ => "organ",
                    LabelKind::Station => "station",
                };
                println!(
                    "{name}: {} ({:.6})",
                    pred.top_label, pred.scores[pred.top_index]
                );
            }
        }
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let captions: Vec<&str> =
                text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            if captions.is_empty() {
                return Err(Error::Input(format!(
                    "no captions in {}",
                    path.display()
                )));
            }
            let seqs: Vec<_> = captions.iter().map(|c| ckpt.vocab.encode(c)).collect();
            let txt = embed_texts(&ckpt.params, &ckpt.config, &seqs)?;
            let dim = ckpt.config.text.embed_dim;
            let logits: Vec<f64> = (0..captions.len())
                .map(|i| {
                    let mut dot = 0.0f64;
                    for d in 0..dim {
                        dot += emb[d] as f64 * txt[i * dim + d] as f64;
                    }
                    scale * dot
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let mut top = 0;
            for (i, caption) in captions.iter().enumerate() {
                let score = (logits[i] - mx).exp() / z;
                println!("{score:.6}\t{caption}");
                if logits[i] > logits[top] {
                    top = i;
                }
            }
            println!("top: {}", captions[top]);
        }
    }
    Ok(())
}
