//! Synthetic dataset generation and manifest handling.
//!
//! Scenes are sampled from the label taxonomy with uniform station, modality,
//! orientation, and organ-count marginals, rendered to PNG, captioned with a
//! per-image prompt set, and described by a JSON-lines manifest plus a small
//! meta file (seed, asset hashes, class counts). Everything is keyed off the
//! dataset seed: regenerating with the same seed reproduces every byte, and
//! rendering parallelizes across scenes without affecting output.

pub mod glyphs;
pub mod render;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_policy, PolicyConfig};
use crate::error::{Error, Result};
use crate::image::{GrayImage, MIN_DIM};
use crate::labels::{LabelRecord, Modality, OrganStationMap, MR_PROTOCOLS, ORIENTATIONS, STATIONS};
use crate::prompts::{generate_prompt_set, TemplateBank};
use crate::rng::derive_rng;

pub use render::{render_scene, render_scene_parts, style_for, Style};

// Stream tags keep the RNG draws for scenes, prompts, splits, and shifted
// copies statistically independent even though they share one dataset seed.
const STREAM_SCENE: u64 = 0x5343_454e;
const STREAM_PROMPT: u64 = 0x5052_4d50;
const STREAM_SPLIT: u64 = 0x5350_4c54;
const STREAM_SHIFT: u64 = 0x5348_4654;

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub station: String,
    /// 1 to 3 organs, all belonging to `station`, in placement order.
    pub organs: Vec<String>,
    pub modality: Modality,
    pub protocol: Option<String>,
    pub orientation: String,
    /// Seed of the scene's private noise stream.
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn label_record(&self, map: &OrganStationMap) -> Result<LabelRecord> {
        LabelRecord::new(
            map,
            self.modality,
            self.protocol.clone(),
            self.orientation.clone(),
            self.station.clone(),
            self.organs.clone(),
        )
    }
}

/// Draws the spec for scene `index` of a dataset. Station, modality,
/// orientation, and organ count are uniform; organs are a uniform
/// without-replacement draw from the station's pool, kept in draw order.
pub fn sample_scene_spec(
    seed: u64,
    index: u64,
    map: &OrganStationMap,
    organs_min: usize,
    organs_max: usize,
) -> Result<SceneSpec> {
    if organs_min < 1 || organs_max > 3 || organs_min > organs_max {
        return Err(Error::Config(format!(
            "organ count range {organs_min}..={organs_max} outside 1..=3"
        )));
    }
    let mut rng = derive_rng(seed, &[STREAM_SCENE, index]);
    let station = STATIONS[rng.random_range(0..STATIONS.len())].to_string();
    let pool = map.organs_of(&station);
    let want = rng.random_range(organs_min..=organs_max).min(pool.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let organs: Vec<String> = order.iter().take(want).map(|&i| pool[i].clone()).collect();
    let modality = if rng.random_bool(0.5) { Modality::Ct } else { Modality::Mr };
    let protocol = match modality {
        Modality::Ct => None,
        Modality::Mr => Some(MR_PROTOCOLS[rng.random_range(0..MR_PROTOCOLS.len())].to_string()),
    };
    let orientation = ORIENTATIONS[rng.random_range(0..ORIENTATIONS.len())].to_string();
    let noise_seed = rng.random::<u64>();
    Ok(SceneSpec { station, organs, modality, protocol, orientation, noise_seed })
}

// ── manifest ──

/// One dataset entry. Field order here is the on-disk JSON field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image file path relative to the manifest's directory.
    pub image_path: String,
    pub captions: Vec<String>,
    pub organs: Vec<String>,
    pub station: String,
    /// "CT" or "MR".
    pub modality: String,
    pub protocol: Option<String>,
    pub orientation: String,
    /// Serialized augment chain applied on top of the base render, if any.
    pub augment_spec: Option<String>,
    /// One of "train", "val", "test".
    pub split: String,
}

impl ManifestRecord {
    pub fn label_record(&self, map: &OrganStationMap) -> Result<LabelRecord> {
        LabelRecord::new(
            map,
            Modality::parse(&self.modality)?,
            self.protocol.clone(),
            self.orientation.clone(),
            self.station.clone(),
            self.organs.clone(),
        )
    }
}

/// Dataset-level provenance, stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: u64,
    pub image_size: usize,
    pub template_bank_hash: String,
    pub organ_map_hash: String,
    pub split_counts: BTreeMap<String, usize>,
    pub station_counts: BTreeMap<String, usize>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "manifest.meta.json";

/// Sizes and sampling knobs for dataset generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub image_size: usize,
    pub organs_min: usize,
    pub organs_max: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed: 17,
            image_size: DEFAULT_IMAGE_SIZE,
            organs_min: 1,
            organs_max: 3,
        }
    }
}

impl GenConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Config("dataset would be empty".into()));
        }
        if self.image_size < MIN_DIM {
            return Err(Error::Config(format!(
                "image size {} below minimum {MIN_DIM}",
                self.image_size
            )));
        }
        if self.organs_min < 1 || self.organs_max > 3 || self.organs_min > self.organs_max {
            return Err(Error::Config(format!(
                "organ count range {}..={} outside 1..=3",
                self.organs_min, self.organs_max
            )));
        }
        Ok(())
    }
}

fn split_of(index: usize, cfg: &GenConfig) -> &'static str {
    if index < cfg.n_train {
        "train"
    } else if index < cfg.n_train + cfg.n_val {
        "val"
    } else {
        "test"
    }
}

/// Generates the full dataset under `out_dir`: PNGs in `images/`, the
/// JSON-lines manifest, and the meta file. Returns the manifest path.
/// Same config and seed reproduce identical bytes in every file.
pub fn generate_dataset(
    cfg: &GenConfig,
    bank: &TemplateBank,
    map: &OrganStationMap,
    out_dir: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let total = cfg.total();
    let specs: Vec<SceneSpec> = (0..total)
        .map(|i| sample_scene_spec(cfg.seed, i as u64, map, cfg.organs_min, cfg.organs_max))
        .collect::<Result<_>>()?;

    // Render and write images in parallel; each scene is self-contained.
    specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let img = render_scene(spec, cfg.image_size)?;
            let path = images_dir.join(format!("{i:05}.png"));
            img.save_png(&path)
        })
        .collect::<Result<Vec<()>>>()?;

    let mut records = Vec::with_capacity(total);
    for (i, spec) in specs.iter().enumerate() {
        let record = spec.label_record(map)?;
        let mut prompt_rng = derive_rng(cfg.seed, &[STREAM_PROMPT, i as u64]);
        let set = generate_prompt_set(&record, bank, &mut prompt_rng)?;
        records.push(ManifestRecord {
            image_path: format!("images/{i:05}.png"),
            captions: set.prompts.into_iter().map(|p| p.caption).collect(),
            organs: spec.organs.clone(),
            station: spec.station.clone(),
            modality: spec.modality.to_string(),
            protocol: spec.protocol.clone(),
            orientation: spec.orientation.clone(),
            augment_spec: None,
            split: split_of(i, cfg).to_string(),
        });
    }

    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &records)?;
    let meta = ManifestMeta {
        seed: cfg.seed,
        image_size: cfg.image_size,
        template_bank_hash: bank.hash().to_string(),
        organ_map_hash: map.hash().to_string(),
        split_counts: count_by(&records, |r| r.split.clone()),
        station_counts: count_by(&records, |r| r.station.clone()),
    };
    write_meta(&out_dir.join(META_FILE), &meta)?;
    Ok(manifest_path)
}

fn count_by(records: &[ManifestRecord], key: impl Fn(&ManifestRecord) -> String) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(key(r)).or_insert(0) += 1;
    }
    counts
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_meta(path: &Path, meta: &ManifestMeta) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(meta).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_meta(path: &Path) -> Result<ManifestMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads and fully validates a manifest: well-formed JSON per line, known
/// labels consistent with the organ map, non-empty captions, legal splits,
/// unique image paths that exist on disk. Errors name the offending record.
pub fn load_manifest(path: &Path, map: &OrganStationMap) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut seen_paths = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("record {lineno}: bad JSON: {e}")))?;
        validate_record(&record, map, base, lineno)?;
        if !seen_paths.insert(record.image_path.clone()) {
            return Err(Error::Data(format!(
                "record {lineno}: duplicate image path {:?}",
                record.image_path
            )));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("manifest {} has no records", path.display())));
    }
    Ok(records)
}

fn validate_record(
    record: &ManifestRecord,
    map: &OrganStationMap,
    base: &Path,
    lineno: usize,
) -> Result<()> {
    let fail = |msg: String| Error::Data(format!("record {lineno}: {msg}"));
    record
        .label_record(map)
        .map_err(|e| fail(e.to_string()))?;
    if record.organs.len() > 3 {
        return Err(fail(format!("{} organs, expected at most 3", record.organs.len())));
    }
    if record.captions.is_empty() {
        return Err(fail("no captions".into()));
    }
    if !SPLITS.contains(&record.split.as_str()) {
        return Err(fail(format!("unknown split {:?}", record.split)));
    }
    if let Some(spec) = record.augment_spec.as_deref() {
        crate::augment::AugmentSpec::parse(spec).map_err(|e| fail(e.to_string()))?;
    }
    let img = base.join(&record.image_path);
    if !img.is_file() {
        return Err(fail(format!("image file {} missing", img.display())));
    }
    Ok(())
}

/// Reassigns splits stratified by (station, modality): within each stratum
/// records are shuffled with the seed and cut by the given train/val/test
/// ratios, so class balance carries over into every split within rounding.
pub fn stratified_split(
    records: &mut [ManifestRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<()> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({rt}, {rv}, {rs}) must be non-negative and sum to 1"
        )));
    }
    let mut strata: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata
            .entry((r.station.clone(), r.modality.clone()))
            .or_default()
            .push(i);
    }
    let mut rng = derive_rng(seed, &[STREAM_SPLIT]);
    for indices in strata.values_mut() {
        indices.shuffle(&mut rng);
        let n = indices.len();
        let n_train = (rt * n as f64).floor() as usize;
        let n_val = (rv * n as f64).floor() as usize;
        for (k, &i) in indices.iter().enumerate() {
            records[i].split = if k < n_train {
                "train"
            } else if k < n_train + n_val {
                "val"
            } else {
                "test"
            }
            .to_string();
        }
    }
    Ok(())
}

/// Writes a distorted copy of a dataset: every image gets one augment chain
/// sampled from `policy`, images land under `out_dir/images`, and the new
/// manifest records the applied chain in `augment_spec`. Label fields and
/// captions are carried over unchanged. Returns the new manifest path.
pub fn augment_dataset_copy(
    manifest_path: &Path,
    map: &OrganStationMap,
    policy: &PolicyConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    let mut one = policy.clone();
    one.variants = 1;
    one.validate()?;
    let records = load_manifest(manifest_path, map)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let new_records = records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let img = GrayImage::load_png(&base.join(&record.image_path))?;
            let mut rng = derive_rng(seed, &[STREAM_SHIFT, i as u64]);
            let spec = sample_policy(&mut rng, &one)?.remove(0);
            let shifted = spec.apply(&img, one.translate_max)?;
            let rel = format!("images/{i:05}.png");
            shifted.save_png(&images_dir.join(format!("{i:05}.png")))?;
            let mut out = record.clone();
            out.image_path = rel;
            out.augment_spec = Some(spec.to_string());
            Ok(out)
        })
        .collect::<Result<Vec<ManifestRecord>>>()?;

    let manifest_out = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_out, &new_records)?;
    let meta_in = base.join(META_FILE);
    if meta_in.is_file() {
        let mut meta = load_meta(&meta_in)?;
        meta.seed = seed;
        write_meta(&out_dir.join(META_FILE), &meta)?;
    }
    Ok(manifest_out)
}
