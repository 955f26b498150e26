//! Zero-shot classification against organ and station label banks.
//!
//! A bank holds one unit-norm text embedding per label. An image is
//! classified by dotting its embedding with every bank row, softmaxing with
//! the model's learned temperature, and taking the argmax (lowest index on
//! ties). Accuracy counts an image correct when the top label belongs to the
//! image's target set. Per-class one-vs-rest AUC comes from the rank
//! statistic over the class's softmax scores.

use std::path::Path;

use rayon::prelude::*;

use crate::contrastive::{SCALE_MAX, SCALE_MIN};
use crate::dataset::ManifestRecord;
use crate::encoders::{bind, encode_images, encode_texts, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::labels::OrganStationMap;
use crate::prompts::{label_prompt_bank, LabelKind};
use crate::tensor::{Real, Tape};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Batch width for forward-only embedding passes; bounds tape memory.
const EMBED_CHUNK: usize = 64;

// ── forward-only embedding ──

/// Embeds images in chunks on throwaway tapes; returns row-major `[N, D]`.
pub fn embed_images<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    images: &[GrayImage],
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(images.len() * cfg.vision.embed_dim);
    for chunk in images.chunks(EMBED_CHUNK) {
        let mut tape: Tape<T> = Tape::new();
        let binding = bind(&mut tape, params)?;
        let emb = encode_images(&mut tape, &binding, &cfg.vision, chunk)?;
        out.extend_from_slice(tape.value(emb));
    }
    Ok(out)
}

/// Embeds token sequences in chunks; returns row-major `[N, D]`.
pub fn embed_texts<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    seqs: &[TokenSequence],
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(seqs.len() * cfg.text.embed_dim);
    for chunk in seqs.chunks(EMBED_CHUNK) {
        let mut tape: Tape<T> = Tape::new();
        let binding = bind(&mut tape, params)?;
        let emb = encode_texts(&mut tape, &binding, &cfg.text, chunk)?;
        out.extend_from_slice(tape.value(emb));
    }
    Ok(out)
}

/// The model's temperature as a plain value, clamped like the loss clamps it.
pub fn logit_scale_value<T: Real>(params: &Params<T>) -> Result<f64> {
    let raw = params.get("logit_scale")?.data()[0].to_f64();
    Ok(raw.exp().clamp(SCALE_MIN, SCALE_MAX))
}

// ── label banks ──

/// Ordered labels with one unit-norm text embedding per label.
#[derive(Debug, Clone)]
pub struct LabelBank<T: Real = f32> {
    pub kind: LabelKind,
    pub labels: Vec<String>,
    /// Row-major `[K, D]`.
    pub emb: Vec<T>,
    pub dim: usize,
}

/// Encodes the canonical single-label prompts for `kind` through the text
/// encoder.
pub fn build_label_bank<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    kind: LabelKind,
) -> Result<LabelBank<T>> {
    let entries = label_prompt_bank(kind);
    let labels: Vec<String> = entries.iter().map(|(l, _)| l.clone()).collect();
    let seqs: Vec<TokenSequence> =
        entries.iter().map(|(_, caption)| vocab.encode(caption)).collect();
    let emb = embed_texts(params, cfg, &seqs)?;
    Ok(LabelBank { kind, labels, emb, dim: cfg.text.embed_dim })
}

// ── classification ──

#[derive(Debug, Clone)]
pub struct Prediction<T: Real = f32> {
    pub top_index: usize,
    pub top_label: String,
    /// Softmax over the bank's labels; sums to 1.
    pub scores: Vec<T>,
    pub logits: Vec<T>,
}

/// Dots one image embedding against every bank row, softmaxes at
/// temperature `scale`, and picks the argmax (lowest index wins ties).
pub fn classify<T: Real>(
    image_emb: &[T],
    bank: &LabelBank<T>,
    scale: f64,
) -> Result<Prediction<T>> {
    if image_emb.len() != bank.dim {
        return Err(Error::Shape {
            op: "classify",
            lhs: vec![image_emb.len()],
            rhs: vec![bank.dim],
        });
    }
    let k = bank.labels.len();
    let mut logits = vec![0.0f64; k];
    for (j, l) in logits.iter_mut().enumerate() {
        let mut dot = 0.0;
        for d in 0..bank.dim {
            dot += image_emb[d].to_f64() * bank.emb[j * bank.dim + d].to_f64();
        }
        *l = scale * dot;
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let scores: Vec<T> = exps.iter().map(|&e| T::from_f64(e / z)).collect();
    let mut top = 0;
    for j in 1..k {
        if logits[j] > logits[top] {
            top = j;
        }
    }
    Ok(Prediction {
        top_index: top,
        top_label: bank.labels[top].clone(),
        scores,
        logits: logits.into_iter().map(T::from_f64).collect(),
    })
}

// ── metrics ──

/// Mean over images of "top label is in the target set".
pub fn accuracy<T: Real>(predictions: &[Prediction<T>], targets: &[Vec<String>]) -> Result<f64> {
    validate_targets(predictions, targets)?;
    let correct = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| t.contains(&p.top_label))
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Study variant: a hit on a multi-label image earns `1 / |targets|`
/// instead of full credit. Not used for headline numbers.
pub fn fractional_accuracy<T: Real>(
    predictions: &[Prediction<T>],
    targets: &[Vec<String>],
) -> Result<f64> {
    validate_targets(predictions, targets)?;
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| if t.contains(&p.top_label) { 1.0 / t.len() as f64 } else { 0.0 })
        .sum();
    Ok(total / predictions.len() as f64)
}

fn validate_targets<T: Real>(
    predictions: &[Prediction<T>],
    targets: &[Vec<String>],
) -> Result<()> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} target sets",
            predictions.len(),
            targets.len()
        )));
    }
    if let Some(i) = targets.iter().position(|t| t.is_empty()) {
        return Err(Error::Data(format!("empty target set for image {i}")));
    }
    Ok(())
}

/// One-vs-rest ROC for a single class: AUC by the rank statistic (ties
/// contribute half) and the threshold-sweep polyline from (0,0) to (1,1).
pub fn ovr_auc(scores: &[f64], truth: &[bool]) -> Result<(f64, Vec<(f64, f64)>)> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::Input(format!(
            "{} scores vs {} truth flags",
            scores.len(),
            truth.len()
        )));
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "one-vs-rest AUC undefined: truth contains a single class".into(),
        ));
    }

    // Average ranks over tie groups, then the Mann-Whitney identity.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average.
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if truth[idx] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;

    // Threshold sweep from the highest score down, stepping whole tie groups.
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = order.len();
    while i > 0 {
        let mut j = i;
        while j > 1 && scores[order[j - 2]] == scores[order[i - 1]] {
            j -= 1;
        }
        for &idx in &order[j - 1..i] {
            if truth[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j - 1;
    }
    Ok((auc, points))
}

// ── whole-split evaluation ──

/// Per-class slice of a bank report.
#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub label: String,
    /// Images whose target set contains this label.
    pub n_pos: usize,
    /// Images predicted as this label correctly.
    pub hits: usize,
    /// `hits / n_images`; sums to the bank's accuracy across classes.
    pub accuracy_contrib: f64,
    /// None when the split lacks one of the two truth classes.
    pub auc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct BankReport {
    pub kind: LabelKind,
    pub accuracy: f64,
    pub fractional_accuracy: f64,
    /// Mean over classes with a defined AUC.
    pub macro_auc: Option<f64>,
    pub classes: Vec<ClassMetrics>,
    /// Row-major `[K, K]`: row = true label, column = predicted label. A
    /// multi-label image contributes one count per true label.
    pub confusion: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n_images: usize,
    pub organ: BankReport,
    pub station: BankReport,
    /// Provenance echoed into emitted artifacts.
    pub model_tag: String,
}

fn bank_report<T: Real>(
    bank: &LabelBank<T>,
    predictions: &[Prediction<T>],
    targets: &[Vec<String>],
) -> Result<BankReport> {
    let k = bank.labels.len();
    let n = predictions.len();
    let acc = accuracy(predictions, targets)?;
    let frac = fractional_accuracy(predictions, targets)?;

    let mut confusion = vec![0u32; k * k];
    for (p, t) in predictions.iter().zip(targets) {
        for label in t {
            let row = bank
                .labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::Data(format!("target label {label:?} not in bank")))?;
            confusion[row * k + p.top_index] += 1;
        }
    }

    let mut classes = Vec::with_capacity(k);
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for (j, label) in bank.labels.iter().enumerate() {
        let truth: Vec<bool> = targets.iter().map(|t| t.contains(label)).collect();
        let scores: Vec<f64> =
            predictions.iter().map(|p| p.scores[j].to_f64()).collect();
        let n_pos = truth.iter().filter(|&&t| t).count();
        let hits = predictions
            .iter()
            .zip(&truth)
            .filter(|(p, &is_pos)| is_pos && p.top_index == j)
            .count();
        let (auc, roc) = match ovr_auc(&scores, &truth) {
            Ok((a, r)) => {
                auc_sum += a;
                auc_count += 1;
                (Some(a), r)
            }
            Err(_) => (None, Vec::new()),
        };
        classes.push(ClassMetrics {
            label: label.clone(),
            n_pos,
            hits,
            accuracy_contrib: hits as f64 / n as f64,
            auc,
            roc,
        });
    }
    Ok(BankReport {
        kind: bank.kind,
        accuracy: acc,
        fractional_accuracy: frac,
        macro_auc: (auc_count > 0).then(|| auc_sum / auc_count as f64),
        classes,
        confusion,
    })
}

/// Embeds every image of `records` once and classifies it against both
/// banks. `model_tag` is free-form provenance carried into the report.
pub fn evaluate<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    records: &[ManifestRecord],
    data_root: &Path,
    map: &OrganStationMap,
    model_tag: &str,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Input("no records to evaluate".into()));
    }
    let images: Vec<GrayImage> = records
        .par_iter()
        .map(|r| GrayImage::load_png(&data_root.join(&r.image_path)))
        .collect::<Result<_>>()?;
    let emb = embed_images(params, cfg, &images)?;
    let dim = cfg.vision.embed_dim;
    let scale = logit_scale_value(params)?;

    let organ_bank = build_label_bank(params, cfg, vocab, LabelKind::Organ)?;
    let station_bank = build_label_bank(params, cfg, vocab, LabelKind::Station)?;

    let mut organ_preds = Vec::with_capacity(records.len());
    let mut station_preds = Vec::with_capacity(records.len());
    for i in 0..records.len() {
        let row = &emb[i * dim..(i + 1) * dim];
        organ_preds.push(classify(row, &organ_bank, scale)?);
        station_preds.push(classify(row, &station_bank, scale)?);
    }

    let organ_targets: Vec<Vec<String>> = records.iter().map(|r| r.organs.clone()).collect();
    let station_targets: Vec<Vec<String>> =
        records.iter().map(|r| vec![r.station.clone()]).collect();
    for (i, r) in records.iter().enumerate() {
        // Targets must be internally consistent before they judge a model.
        r.label_record(map).map_err(|e| {
            Error::Data(format!("record {i} ({}): {e}", r.image_path))
        })?;
    }

    Ok(EvalReport {
        n_images: records.len(),
        organ: bank_report(&organ_bank, &organ_preds, &organ_targets)?,
        station: bank_report(&station_bank, &station_preds, &station_targets)?,
        model_tag: model_tag.to_string(),
    })
}
