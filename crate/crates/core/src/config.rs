//! Run settings: typed defaults, `key = value` config files, and a
//! canonical text echo.
//!
//! Precedence is CLI flags > config file > defaults; the CLI applies file
//! values first and its own flags afterwards through the same `set` calls.
//! `to_text` renders every key in a fixed order, so the effective
//! configuration embedded in checkpoints and printed for provenance is
//! byte-stable.

use std::path::Path;

use crate::augment::PolicyConfig;
use crate::dataset::GenConfig;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::train::{AblationMode, DuplicatePolicy, TrainConfig};

/// Vocabulary size cap when building from the caption corpus.
pub const DEFAULT_VOCAB_MAX: usize = 1024;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    /// Encoder dimensions; vocab size is filled in from the corpus later.
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
    pub vocab_max: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::for_vocab(DEFAULT_VOCAB_MAX);
        RunConfig {
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            image_size: model.vision.image_size,
            patch_size: model.vision.patch_size,
            width: model.vision.width,
            depth: model.vision.depth,
            heads: model.vision.heads,
            mlp_ratio: model.vision.mlp_ratio,
            embed_dim: model.vision.embed_dim,
            vocab_max: DEFAULT_VOCAB_MAX,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::Config(format!("bad value {value:?} for {key}"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}, want true/false"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are errors so
    /// typos in config files cannot silently vanish.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "gen.train" => self.gen.n_train = parse_num(key, v)?,
            "gen.val" => self.gen.n_val = parse_num(key, v)?,
            "gen.test" => self.gen.n_test = parse_num(key, v)?,
            "gen.seed" => self.gen.seed = parse_num(key, v)?,
            "gen.image_size" => self.gen.image_size = parse_num(key, v)?,
            "gen.organs_min" => self.gen.organs_min = parse_num(key, v)?,
            "gen.organs_max" => self.gen.organs_max = parse_num(key, v)?,

            "model.image_size" => self.image_size = parse_num(key, v)?,
            "model.patch_size" => self.patch_size = parse_num(key, v)?,
            "model.width" => self.width = parse_num(key, v)?,
            "model.depth" => self.depth = parse_num(key, v)?,
            "model.heads" => self.heads = parse_num(key, v)?,
            "model.mlp_ratio" => self.mlp_ratio = parse_num(key, v)?,
            "model.embed_dim" => self.embed_dim = parse_num(key, v)?,
            "model.vocab_max" => self.vocab_max = parse_num(key, v)?,

            "train.lambda" => self.train.lambda = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.grad_clip_norm" => {
                self.train.grad_clip_norm =
                    if v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.mode" => self.train.mode = AblationMode::parse(v)?,
            "train.duplicate_policy" => {
                self.train.duplicate_policy = DuplicatePolicy::parse(v)?
            }

            "augment.variants" => self.train.augment.variants = parse_num(key, v)?,
            "augment.min_ops" => self.train.augment.min_ops = parse_num(key, v)?,
            "augment.max_ops" => self.train.augment.max_ops = parse_num(key, v)?,
            "augment.use_clahe" => self.train.augment.use_clahe = parse_bool(key, v)?,
            "augment.use_contrast" => self.train.augment.use_contrast = parse_bool(key, v)?,
            "augment.use_gamma" => self.train.augment.use_gamma = parse_bool(key, v)?,
            "augment.use_rotate" => self.train.augment.use_rotate = parse_bool(key, v)?,
            "augment.use_translate" => {
                self.train.augment.use_translate = parse_bool(key, v)?
            }
            "augment.contrast_min" => self.train.augment.contrast.0 = parse_num(key, v)?,
            "augment.contrast_max" => self.train.augment.contrast.1 = parse_num(key, v)?,
            "augment.gamma_min" => self.train.augment.gamma.0 = parse_num(key, v)?,
            "augment.gamma_max" => self.train.augment.gamma.1 = parse_num(key, v)?,
            "augment.rotate_min" => self.train.augment.rotate.0 = parse_num(key, v)?,
            "augment.rotate_max" => self.train.augment.rotate.1 = parse_num(key, v)?,
            "augment.translate_max" => {
                self.train.augment.translate_max = parse_num(key, v)?
            }
            "augment.clahe_tiles" => self.train.augment.clahe_tiles = parse_num(key, v)?,
            "augment.clahe_clip_min" => self.train.augment.clahe_clip.0 = parse_num(key, v)?,
            "augment.clahe_clip_max" => self.train.augment.clahe_clip.1 = parse_num(key, v)?,

            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file: `key = value` lines, `#` comments, blank lines.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Canonical echo of every setting, in fixed order.
    pub fn to_text(&self) -> String {
        let clip = self
            .train
            .grad_clip_norm
            .map(|c| format!("{c}"))
            .unwrap_or_else(|| "none".into());
        let a = &self.train.augment;
        format!(
            "gen.train = {}\ngen.val = {}\ngen.test = {}\ngen.seed = {}\n\
             gen.image_size = {}\ngen.organs_min = {}\ngen.organs_max = {}\n\
             model.image_size = {}\nmodel.patch_size = {}\nmodel.width = {}\n\
             model.depth = {}\nmodel.heads = {}\nmodel.mlp_ratio = {}\n\
             model.embed_dim = {}\nmodel.vocab_max = {}\n\
             train.lambda = {}\ntrain.batch_size = {}\ntrain.epochs = {}\n\
             train.learning_rate = {}\ntrain.weight_decay = {}\ntrain.grad_clip_norm = {}\n\
             train.seed = {}\ntrain.mode = {}\ntrain.duplicate_policy = {}\n\
             augment.variants = {}\naugment.min_ops = {}\naugment.max_ops = {}\n\
             augment.use_clahe = {}\naugment.use_contrast = {}\naugment.use_gamma = {}\n\
             augment.use_rotate = {}\naugment.use_translate = {}\n\
             augment.contrast_min = {}\naugment.contrast_max = {}\n\
             augment.gamma_min = {}\naugment.gamma_max = {}\n\
             augment.rotate_min = {}\naugment.rotate_max = {}\n\
             augment.translate_max = {}\naugment.clahe_tiles = {}\n\
             augment.clahe_clip_min = {}\naugment.clahe_clip_max = {}\n",
            self.gen.n_train,
            self.gen.n_val,
            self.gen.n_test,
            self.gen.seed,
            self.gen.image_size,
            self.gen.organs_min,
            self.gen.organs_max,
            self.image_size,
            self.patch_size,
            self.width,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.embed_dim,
            self.vocab_max,
            self.train.lambda,
            self.train.batch_size,
            self.train.epochs,
            self.train.learning_rate,
            self.train.weight_decay,
            clip,
            self.train.seed,
            self.train.mode,
            self.train.duplicate_policy,
            a.variants,
            a.min_ops,
            a.max_ops,
            a.use_clahe,
            a.use_contrast,
            a.use_gamma,
            a.use_rotate,
            a.use_translate,
            a.contrast.0,
            a.contrast.1,
            a.gamma.0,
            a.gamma.1,
            a.rotate.0,
            a.rotate.1,
            a.translate_max,
            a.clahe_tiles,
            a.clahe_clip.0,
            a.clahe_clip.1,
        )
    }

    /// Encoder configuration for a concrete vocabulary size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = ModelConfig::for_vocab(vocab_size);
        cfg.vision.image_size = self.image_size;
        cfg.vision.patch_size = self.patch_size;
        cfg.vision.width = self.width;
        cfg.vision.depth = self.depth;
        cfg.vision.heads = self.heads;
        cfg.vision.mlp_ratio = self.mlp_ratio;
        cfg.vision.embed_dim = self.embed_dim;
        cfg.text.width = self.width;
        cfg.text.depth = self.depth;
        cfg.text.heads = self.heads;
        cfg.text.mlp_ratio = self.mlp_ratio;
        cfg.text.embed_dim = self.embed_dim;
        cfg
    }
}

/// Shared augmentation policy for building distribution-shifted evaluation
/// copies: rotation up to ±45°, gamma in [0.5, 2], translation up to 1/8 of
/// the image, no contrast or CLAHE.
pub fn shift_policy(image_size: usize) -> PolicyConfig {
    PolicyConfig {
        variants: 1,
        min_ops: 3,
        max_ops: 3,
        use_clahe: false,
        use_contrast: false,
        use_gamma: true,
        use_rotate: true,
        use_translate: true,
        contrast: (1.0, 1.0),
        gamma: (0.5, 2.0),
        rotate: (-45.0, 45.0),
        translate_max: (image_size / 8) as i32,
        ..PolicyConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_form_a_valid_pipeline() {
        let cfg = RunConfig::default();
        cfg.gen.validate().unwrap();
        cfg.train.validate().unwrap();
        cfg.model_config(100).validate().unwrap();
        assert_eq!(cfg.gen.n_train, 2000);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.lambda, 0.5);
    }

    #[test]
    fn file_then_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\n\ntrain.epochs = 3\ntrain.mode = ms\nmodel.width = 32\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.width, 32);
        assert_eq!(cfg.train.mode, AblationMode::ModalityStation);
        // A later CLI-style set overrides the file.
        cfg.set("train.epochs", "7").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }

    #[test]
    fn bad_keys_and_values_are_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("train.epochz", "3").unwrap_err();
        assert!(err.to_string().contains("train.epochz"));
        let err = cfg.set("train.epochs", "three").unwrap_err();
        assert!(err.to_string().contains("three"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "train.epochs 3\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err();
        assert!(err.to_string().contains(":1:"), "got {err}");
    }

    #[test]
    fn echo_round_trips_through_set() {
        let mut cfg = RunConfig::default();
        cfg.set("train.grad_clip_norm", "none").unwrap();
        cfg.set("augment.rotate_min", "-45").unwrap();
        let text = cfg.to_text();
        // Feeding the echo back in reproduces the echo.
        let mut cfg2 = RunConfig::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            cfg2.set(k.trim(), v).unwrap();
        }
        assert_eq!(cfg2.to_text(), text);
    }

    #[test]
    fn shift_policy_is_valid_and_restricted() {
        let p = shift_policy(64);
        p.validate().unwrap();
        assert!(!p.use_clahe && !p.use_contrast);
        assert_eq!(p.translate_max, 8);
        assert_eq!(p.rotate, (-45.0, 45.0));
    }
}
