//! Contrastive training over manifest records.
//!
//! The loop shuffles the train split each epoch with a seeded stream,
//! assembles
//! batches of (image, caption) pairs according to the active training mode,
//! and runs forward/backward/update steps. Caption and augmentation draws
//! use per-sample RNG streams derived from (seed, epoch, sample index), so
//! batch assembly could run on any number of workers without changing what
//! gets sampled.
//!
//! Training modes form a ladder:
//! - `m`: captions rendered without the station slot.
//! - `ms`: complete captions including the station.
//! - `msa`: one of the record's stored prompt variants per epoch, plus one
//!   sampled image augmentation per sample per epoch.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::augment::{sample_policy, AugmentSpec, PolicyConfig};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::contrastive::{symmetric_loss, SCALE_MAX, SCALE_MIN};
use crate::dataset::ManifestRecord;
use crate::encoders::{bind, encode_images, encode_texts, grads_into, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::image::GrayImage;
use crate::labels::OrganStationMap;
use crate::optim::{AdamW, AdamWConfig};
use crate::prompts::{render, PromptFacts, Slot, TemplateBank};
use crate::rng::derive_rng;
use crate::tensor::Tape;
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Stream tag for per-epoch shuffles ("ORDR").
pub const STREAM_ORDER: u64 = 0x4f52_4452;
/// Stream tag for per-sample caption/augment draws ("TRAI").
pub const STREAM_SAMPLE: u64 = 0x5452_4149;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str =
    "epoch,step,total_loss,vision_loss,text_loss,logit_scale,val_organ_acc,val_station_acc";
/// Extra provenance log written in augmented mode: which variant hit which
/// sample each epoch.
pub const AUGMENT_LOG_FILE: &str = "augment_log.csv";

// ── mode and config ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Captions without station names.
    Modality,
    /// Complete captions including the station.
    ModalityStation,
    /// Stored prompt variants plus image augmentation.
    ModalityStationAugment,
}

impl AblationMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text.to_ascii_lowercase().as_str() {
            "m" => Ok(AblationMode::Modality),
            "ms" => Ok(AblationMode::ModalityStation),
            "msa" => Ok(AblationMode::ModalityStationAugment),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?}, expected m, ms, or msa"
            ))),
        }
    }

    pub fn augments(self) -> bool {
        self == AblationMode::ModalityStationAugment
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Modality => "m",
            AblationMode::ModalityStation => "ms",
            AblationMode::ModalityStationAugment => "msa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuplicatePolicy {
    /// Remove same-caption cross pairs from both softmax directions.
    Mask,
    /// Treat every off-diagonal pair as a negative.
    Allow,
}

impl DuplicatePolicy {
    pub fn parse(text: &str) -> Result<Self> {
        match text.to_ascii_lowercase().as_str() {
            "mask" => Ok(DuplicatePolicy::Mask),
            "allow" => Ok(DuplicatePolicy::Allow),
            other => Err(Error::Config(format!(
                "unknown duplicate policy {other:?}, expected mask or allow"
            ))),
        }
    }
}

impl fmt::Display for DuplicatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DuplicatePolicy::Mask => "mask",
            DuplicatePolicy::Allow => "allow",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub mode: AblationMode,
    pub duplicate_policy: DuplicatePolicy,
    pub augment: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            batch_size: 32,
            epochs: 10,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            grad_clip_norm: Some(1.0),
            seed: 17,
            mode: AblationMode::ModalityStationAugment,
            duplicate_policy: DuplicatePolicy::Mask,
            augment: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} too small: contrastive steps need at least 2 pairs",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        self.augment.validate()?;
        self.optimizer_config().validate()
    }

    pub fn optimizer_config(&self) -> AdamWConfig<f32> {
        let mut cfg = AdamWConfig::with_lr(self.learning_rate);
        cfg.weight_decay = self.weight_decay as f32;
        cfg.clip_norm = self.grad_clip_norm.map(|c| c as f32);
        cfg
    }
}

// ── batch assembly ──

/// One training batch of matched pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<GrayImage>,
    pub seqs: Vec<TokenSequence>,
    pub captions: Vec<String>,
    pub sample_ids: Vec<usize>,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if n < 2 {
            return Err(Error::Input(format!(
                "contrastive batch needs at least 2 pairs, got {n}"
            )));
        }
        if self.seqs.len() != n || self.captions.len() != n || self.sample_ids.len() != n {
            return Err(Error::Input(format!(
                "ragged batch: {n} images, {} sequences, {} captions, {} ids",
                self.seqs.len(),
                self.captions.len(),
                self.sample_ids.len()
            )));
        }
        Ok(())
    }
}

/// A mode's caption for one record under one per-sample RNG stream.
pub fn caption_for(
    record: &ManifestRecord,
    mode: AblationMode,
    bank: &TemplateBank,
    map: &OrganStationMap,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<String> {
    use rand::Rng;
    match mode {
        AblationMode::Modality => {
            let pool = bank.missing(Slot::Station);
            if pool.is_empty() {
                return Err(Error::Config(
                    "template bank has no station-free template".into(),
                ));
            }
            let t = pool[rng.random_range(0..pool.len())];
            let facts =
                PromptFacts::from_record(&record.label_record(map)?).drop_slot(Slot::Station)?;
            render(t, &facts)
        }
        AblationMode::ModalityStation => {
            let pool = bank.complete();
            if pool.is_empty() {
                return Err(Error::Config("template bank has no complete template".into()));
            }
            let t = pool[rng.random_range(0..pool.len())];
            let facts = PromptFacts::from_record(&record.label_record(map)?);
            render(t, &facts)
        }
        AblationMode::ModalityStationAugment => {
            if record.captions.is_empty() {
                return Err(Error::Data(format!(
                    "record {} has no stored captions",
                    record.image_path
                )));
            }
            Ok(record.captions[rng.random_range(0..record.captions.len())].clone())
        }
    }
}

/// The training view of one image: in augmented mode, one variant drawn
/// from the sampled policy; otherwise the base image untouched.
pub fn training_image(
    base: &GrayImage,
    mode: AblationMode,
    policy: &PolicyConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(GrayImage, Option<AugmentSpec>)> {
    use rand::Rng;
    if !mode.augments() {
        return Ok((base.clone(), None));
    }
    let variants = sample_policy(rng, policy)?;
    let pick = rng.random_range(0..variants.len());
    let spec = variants.into_iter().nth(pick).expect("pick < variants");
    let img = spec.apply(base, policy.translate_max)?;
    Ok((img, Some(spec)))
}

// ── single step ──

/// Plain-value losses and diagnostics from one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub total: f64,
    pub vision: f64,
    pub text: f64,
    pub grad_norm: f64,
    /// log of the temperature after the post-step clamp.
    pub log_scale: f64,
}

/// One forward/backward/update pass over a batch. After the update the
/// temperature is clamped back into its legal range in parameter space.
pub fn train_step(
    params: &mut Params<f32>,
    opt: &mut AdamW<f32>,
    model_cfg: &ModelConfig,
    batch: &Batch,
    lambda: f32,
    duplicate_policy: DuplicatePolicy,
) -> Result<StepOutcome> {
    batch.validate()?;
    let mut tape: Tape<f32> = Tape::new();
    let binding = bind(&mut tape, params)?;
    let img_emb = encode_images(&mut tape, &binding, &model_cfg.vision, &batch.images)?;
    let txt_emb = encode_texts(&mut tape, &binding, &model_cfg.text, &batch.seqs)?;
    let caption_refs: Vec<&str> = batch.captions.iter().map(|s| s.as_str()).collect();
    let captions = match duplicate_policy {
        DuplicatePolicy::Mask => Some(caption_refs.as_slice()),
        DuplicatePolicy::Allow => None,
    };
    let loss = symmetric_loss(
        &mut tape,
        img_emb,
        txt_emb,
        binding.var("logit_scale")?,
        captions,
        lambda,
    )?;

    let total = tape.value_scalar(loss.total) as f64;
    let vision = tape.value_scalar(loss.vision_term) as f64;
    let text = tape.value_scalar(loss.text_term) as f64;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {total} at optimizer step {}",
            opt.steps() + 1
        )));
    }

    tape.backward(loss.total)?;
    grads_into(&tape, &binding, params)?;
    let stats = opt.step(params)?;
    params.zero_grads();

    let ls = params.get_mut("logit_scale")?;
    let clamped = ls.data()[0].clamp(SCALE_MIN.ln() as f32, SCALE_MAX.ln() as f32);
    ls.data_mut()[0] = clamped;

    Ok(StepOutcome {
        total,
        vision,
        text,
        grad_norm: stats.grad_norm as f64,
        log_scale: clamped as f64,
    })
}

// ── metrics log ──

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub vision: f64,
    pub text: f64,
    pub log_scale: f64,
    pub val_organ_acc: Option<f64>,
    pub val_station_acc: Option<f64>,
}

impl MetricsRow {
    fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.step,
            self.total,
            self.vision,
            self.text,
            self.log_scale,
            opt(self.val_organ_acc),
            opt(self.val_station_acc),
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ── full loop ──

/// Immutable context shared across the loop.
pub struct TrainSession<'a> {
    pub model_cfg: &'a ModelConfig,
    pub train_cfg: &'a TrainConfig,
    pub vocab: &'a Vocabulary,
    pub bank: &'a TemplateBank,
    pub map: &'a OrganStationMap,
    /// Canonical settings echo embedded into every checkpoint.
    pub config_text: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Copy of the last epoch's checkpoint, if any epochs ran.
    pub final_checkpoint: Option<PathBuf>,
    pub final_val_organ_acc: Option<f64>,
    pub final_val_station_acc: Option<f64>,
}

/// Seeded epoch loop: shuffle, batch, step, validate, checkpoint.
/// A trailing single sample joins the previous batch rather than being
/// dropped or trained alone. Validation runs after every epoch; its
/// accuracies land on the epoch's last metrics row. `on_row` fires after
/// every appended row (the epoch's last row fires again once validation
/// fills it in).
pub fn train_loop(
    session: &TrainSession,
    train_records: &[ManifestRecord],
    val_records: &[ManifestRecord],
    data_root: &Path,
    params: &mut Params<f32>,
    out_dir: &Path,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    use rand::seq::SliceRandom;
    let cfg = session.train_cfg;
    cfg.validate()?;
    session.model_cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut outcome = TrainOutcome {
        steps: 0,
        rows: Vec::new(),
        metrics_path: metrics_path.clone(),
        checkpoints: Vec::new(),
        final_checkpoint: None,
        final_val_organ_acc: None,
        final_val_station_acc: None,
    };
    if cfg.epochs == 0 {
        write_metrics(&metrics_path, &[])?;
        return Ok(outcome);
    }
    if train_records.len() < 2 {
        return Err(Error::Input(format!(
            "training needs at least 2 records, got {}",
            train_records.len()
        )));
    }

    // Base images stay resident; they are small and reread per epoch.
    let base_images: Vec<GrayImage> = train_records
        .par_iter()
        .map(|r| GrayImage::load_png(&data_root.join(&r.image_path)))
        .collect::<Result<_>>()?;

    let mut opt = AdamW::new(cfg.optimizer_config())?;
    let mut augment_log = String::from("epoch,sample_id,augment_spec\n");

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        let mut epoch_rng = derive_rng(cfg.seed, &[STREAM_ORDER, epoch as u64]);
        order.shuffle(&mut epoch_rng);

        let mut batches: Vec<Vec<usize>> =
            order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        if batches.len() > 1 && batches.last().map_or(false, |b| b.len() < 2) {
            let orphan = batches.pop().expect("checked non-empty");
            batches.last_mut().expect("previous batch exists").extend(orphan);
        }

        for ids in &batches {
            let mut batch = Batch {
                images: Vec::with_capacity(ids.len()),
                seqs: Vec::with_capacity(ids.len()),
                captions: Vec::with_capacity(ids.len()),
                sample_ids: ids.clone(),
            };
            for &id in ids {
                let record = &train_records[id];
                let mut rng =
                    derive_rng(cfg.seed, &[STREAM_SAMPLE, epoch as u64, id as u64]);
                let caption =
                    caption_for(record, cfg.mode, session.bank, session.map, &mut rng)?;
                let (img, spec) =
                    training_image(&base_images[id], cfg.mode, &cfg.augment, &mut rng)?;
                if let Some(spec) = &spec {
                    augment_log.push_str(&format!("{epoch},{id},{spec}\n"));
                }
                batch.seqs.push(session.vocab.encode(&caption));
                batch.captions.push(caption);
                batch.images.push(img);
            }

            let step = train_step(
                params,
                &mut opt,
                session.model_cfg,
                &batch,
                cfg.lambda,
                cfg.duplicate_policy,
            )?;
            outcome.steps = opt.steps();
            outcome.rows.push(MetricsRow {
                epoch,
                step: outcome.steps,
                total: step.total,
                vision: step.vision,
                text: step.text,
                log_scale: step.log_scale,
                val_organ_acc: None,
                val_station_acc: None,
            });
            on_row(outcome.rows.last().expect("just pushed"));
        }

        if !val_records.is_empty() {
            let report = evaluate(
                params,
                session.model_cfg,
                session.vocab,
                val_records,
                data_root,
                session.map,
                &format!("epoch {epoch}"),
            )?;
            let last = outcome.rows.last_mut().expect("epoch produced steps");
            last.val_organ_acc = Some(report.organ.accuracy);
            last.val_station_acc = Some(report.station.accuracy);
            outcome.final_val_organ_acc = Some(report.organ.accuracy);
            outcome.final_val_station_acc = Some(report.station.accuracy);
            on_row(outcome.rows.last().expect("epoch produced steps"));
        }

        let ckpt = Checkpoint {
            config: session.model_cfg.clone(),
            config_text: session.config_text.clone(),
            vocab: session.vocab.clone(),
            template_bank_hash: session.bank.hash().to_string(),
            organ_map_hash: session.map.hash().to_string(),
            params: params.clone(),
        };
        let path = out_dir.join(format!("epoch_{epoch:03}.ckpt"));
        save_checkpoint(&path, &ckpt)?;
        outcome.checkpoints.push(path.clone());
        let final_path = out_dir.join("model.ckpt");
        save_checkpoint(&final_path, &ckpt)?;
        outcome.final_checkpoint = Some(final_path);
    }

    write_metrics(&metrics_path, &outcome.rows)?;
    if cfg.mode.augments() {
        let log_path = out_dir.join(AUGMENT_LOG_FILE);
        std::fs::write(&log_path, augment_log).map_err(|e| Error::io(&log_path, e))?;
    }
    Ok(outcome)
}
