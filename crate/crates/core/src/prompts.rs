//! Caption templates and language augmentation.
//!
//! Captions are rendered from a versioned template bank (data, not code):
//! slots `{orientation}`, `{modality}`, `{organ}`, `{station}` substituted
//! from a label record. Augmentation produces 10 prompts per image split
//! 4 complete / 3 with a dropped slot / 3 with shuffled organ order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{self, LabelRecord, Modality, MR_PROTOCOLS, ORGANS, ORIENTATIONS, STATIONS};

pub const DEFAULT_BANK_TEXT: &str = include_str!("assets/templates.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Orientation,
    Modality,
    Organ,
    Station,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Orientation, Slot::Modality, Slot::Organ, Slot::Station];

    pub fn token(self) -> &'static str {
        match self {
            Slot::Orientation => "{orientation}",
            Slot::Modality => "{modality}",
            Slot::Organ => "{organ}",
            Slot::Station => "{station}",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Orientation => "orientation",
            Slot::Modality => "modality",
            Slot::Organ => "organ",
            Slot::Station => "station",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub pattern: String,
}

impl PromptTemplate {
    pub fn has(&self, slot: Slot) -> bool {
        self.pattern.contains(slot.token())
    }

    fn is_complete(&self) -> bool {
        Slot::ALL.iter().all(|&s| self.has(s))
    }

    /// Lacks exactly `dropped`, carries the other three.
    fn is_partial_missing(&self, dropped: Slot) -> bool {
        Slot::ALL.iter().all(|&s| self.has(s) != (s == dropped))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    templates: Vec<PromptTemplate>,
    hash: String,
}

impl TemplateBank {
    /// Parse `id<TAB>pattern` lines. Each template may mention each slot at
    /// most once and must anchor on organ or station.
    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, pattern) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("template bank line {}: expected 'id<TAB>pattern'", lineno + 1))
            })?;
            let t = PromptTemplate { id: id.to_string(), pattern: pattern.to_string() };
            for slot in Slot::ALL {
                if t.pattern.matches(slot.token()).count() > 1 {
                    return Err(Error::Config(format!(
                        "template {id}: slot {} appears more than once",
                        slot.name()
                    )));
                }
            }
            if !t.has(Slot::Organ) && !t.has(Slot::Station) {
                return Err(Error::Config(format!(
                    "template {id}: needs at least an organ or station slot"
                )));
            }
            if templates.iter().any(|e: &PromptTemplate| e.id == t.id) {
                return Err(Error::Config(format!("template bank: duplicate id {id}")));
            }
            templates.push(t);
        }
        if templates.is_empty() {
            return Err(Error::Config("template bank is empty".into()));
        }
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(TemplateBank { templates, hash: labels::hex(&hasher.finalize()) })
    }

    pub fn default_bank() -> Self {
        Self::parse(DEFAULT_BANK_TEXT).expect("embedded template bank is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn complete(&self) -> Vec<&PromptTemplate> {
        self.templates.iter().filter(|t| t.is_complete()).collect()
    }

    pub fn missing(&self, slot: Slot) -> Vec<&PromptTemplate> {
        self.templates.iter().filter(|t| t.is_partial_missing(slot)).collect()
    }
}

/// Slot values available for rendering; a dropped slot is `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFacts {
    pub modality_phrase: String,
    pub orientation: Option<String>,
    pub station: Option<String>,
    pub organs: Option<Vec<String>>,
}

impl PromptFacts {
    pub fn from_record(record: &LabelRecord) -> Self {
        PromptFacts {
            modality_phrase: record.modality_phrase(),
            orientation: Some(record.orientation.clone()),
            station: Some(record.station.clone()),
            organs: Some(record.organs.clone()),
        }
    }

    /// Mark one slot absent. Organ and station cannot both be dropped: one
    /// semantic anchor must survive.
    pub fn drop_slot(&self, slot: Slot) -> Result<PromptFacts> {
        let mut out = self.clone();
        match slot {
            Slot::Orientation => out.orientation = None,
            Slot::Station => out.station = None,
            Slot::Organ => out.organs = None,
            Slot::Modality => {
                return Err(Error::Param {
                    op: "drop_slot",
                    message: "modality is never dropped".into(),
                })
            }
        }
        if out.station.is_none() && out.organs.is_none() {
            return Err(Error::Param {
                op: "drop_slot",
                message: "cannot drop both station and organ".into(),
            });
        }
        Ok(out)
    }
}

/// Substitute slot values into a template. Organ lists join with ", " in
/// the order the facts carry them.
pub fn render(template: &PromptTemplate, facts: &PromptFacts) -> Result<String> {
    let mut out = template.pattern.clone();
    for slot in Slot::ALL {
        if !template.has(slot) {
            continue;
        }
        let value = match slot {
            Slot::Modality => Some(facts.modality_phrase.clone()),
            Slot::Orientation => facts.orientation.clone(),
            Slot::Station => facts.station.clone(),
            Slot::Organ => facts.organs.as_ref().map(|o| o.join(", ")),
        };
        let value = value.ok_or_else(|| Error::MissingSlot {
            template: template.id.clone(),
            slot: slot.name().to_string(),
        })?;
        out = out.replace(slot.token(), &value);
    }
    Ok(out)
}

/// Permute the organ list; every other field is untouched.
pub fn shuffle_entities(record: &LabelRecord, rng: &mut ChaCha8Rng) -> LabelRecord {
    let mut out = record.clone();
    out.organs.shuffle(rng);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub template_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
}

pub const PROMPTS_PER_IMAGE: usize = 10;

/// 10 captions for one record: 4 complete templates, one variant each with
/// station/organ/orientation dropped, and 3 with shuffled organ order.
/// Deterministic per (record, rng state).
pub fn generate_prompt_set(
    record: &LabelRecord,
    bank: &TemplateBank,
    rng: &mut ChaCha8Rng,
) -> Result<PromptSet> {
    let complete = bank.complete();
    if complete.len() < 4 {
        return Err(Error::Config(format!(
            "template bank has {} complete templates, need at least 4",
            complete.len()
        )));
    }
    let facts = PromptFacts::from_record(record);
    let mut prompts = Vec::with_capacity(PROMPTS_PER_IMAGE);

    let mut order: Vec<usize> = (0..complete.len()).collect();
    order.shuffle(rng);
    for &ti in order.iter().take(4) {
        let t = complete[ti];
        prompts.push(Prompt { template_id: t.id.clone(), caption: render(t, &facts)? });
    }

    for slot in [Slot::Station, Slot::Organ, Slot::Orientation] {
        let pool = bank.missing(slot);
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "template bank has no template missing the {} slot",
                slot.name()
            )));
        }
        let t = pool[rng.random_range(0..pool.len())];
        let dropped = facts.drop_slot(slot)?;
        prompts.push(Prompt { template_id: t.id.clone(), caption: render(t, &dropped)? });
    }

    for _ in 0..3 {
        let t = complete[rng.random_range(0..complete.len())];
        let shuffled = shuffle_entities(record, rng);
        let f = PromptFacts::from_record(&shuffled);
        prompts.push(Prompt { template_id: t.id.clone(), caption: render(t, &f)? });
    }

    Ok(PromptSet { prompts })
}

/// Canonical single-label prompts for the zero-shot classifier.
pub fn label_prompt_bank(kind: LabelKind) -> Vec<(String, String)> {
    match kind {
        LabelKind::Organ => ORGANS
            .iter()
            .map(|o| (o.to_string(), format!("An image consisting of {o} organs")))
            .collect(),
        LabelKind::Station => STATIONS
            .iter()
            .map(|s| (s.to_string(), format!("An image of {s} region")))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Organ,
    Station,
}

/// Slot values recovered from a rendered caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub template_id: String,
    pub modality: Modality,
    pub protocol: Option<String>,
    pub orientation: Option<String>,
    pub station: Option<String>,
    pub organs: Option<Vec<String>>,
}

/// Recover slot values by matching the caption against each template's
/// literal segments and validating captures against the taxonomy. Returns
/// the first template that matches cleanly.
pub fn extract(bank: &TemplateBank, caption: &str) -> Option<Extracted> {
    for t in bank.templates() {
        if let Some(e) = try_extract(t, caption) {
            return Some(e);
        }
    }
    None
}

fn try_extract(template: &PromptTemplate, caption: &str) -> Option<Extracted> {
    // Split the pattern into literal segments around slot tokens, in order.
    let mut segments: Vec<(Option<Slot>, &str)> = Vec::new();
    let mut rest = template.pattern.as_str();
    loop {
        let next = Slot::ALL
            .iter()
            .filter_map(|&s| rest.find(s.token()).map(|p| (p, s)))
            .min_by_key(|&(p, _)| p);
        match next {
            Some((pos, slot)) => {
                segments.push((None, &rest[..pos]));
                segments.push((Some(slot), ""));
                rest = &rest[pos + slot.token().len()..];
            }
            None => {
                segments.push((None, rest));
                break;
            }
        }
    }

    let mut caps: Vec<(Slot, String)> = Vec::new();
    let mut cur = caption;
    let mut pending: Option<Slot> = None;
    for (slot, lit) in segments {
        match slot {
            Some(s) => pending = Some(s),
            None => {
                if let Some(s) = pending.take() {
                    // leftmost occurrence of the next literal ends the capture
                    if lit.is_empty() {
                        caps.push((s, cur.to_string()));
                        cur = "";
                    } else {
                        let pos = cur.find(lit)?;
                        caps.push((s, cur[..pos].to_string()));
                        cur = &cur[pos + lit.len()..];
                    }
                } else {
                    cur = cur.strip_prefix(lit)?;
                }
            }
        }
    }
    if !cur.is_empty() {
        return None;
    }

    let mut out = Extracted {
        template_id: template.id.clone(),
        modality: Modality::Ct,
        protocol: None,
        orientation: None,
        station: None,
        organs: None,
    };
    let mut saw_modality = false;
    for (slot, value) in caps {
        match slot {
            Slot::Modality => {
                saw_modality = true;
                if value == "CT" {
                    out.modality = Modality::Ct;
                } else if let Some(p) = value.strip_prefix("MR ") {
                    if !MR_PROTOCOLS.contains(&p) {
                        return None;
                    }
                    out.modality = Modality::Mr;
                    out.protocol = Some(p.to_string());
                } else {
                    return None;
                }
            }
            Slot::Orientation => {
                if !ORIENTATIONS.contains(&value.as_str()) {
                    return None;
                }
                out.orientation = Some(value);
            }
            Slot::Station => {
                if !STATIONS.contains(&value.as_str()) {
                    return None;
                }
                out.station = Some(value);
            }
            Slot::Organ => {
                let organs: Vec<String> = value.split(", ").map(|s| s.to_string()).collect();
                if organs.iter().any(|o| !ORGANS.contains(&o.as_str())) {
                    return None;
                }
                out.organs = Some(organs);
            }
        }
    }
    if !saw_modality {
        return None;
    }
    Some(out)
}
