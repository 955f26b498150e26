//! Vision and text encoders.
//!
//! Both sides are small pre-norm transformers sharing one parameter store.
//! The vision encoder linearly embeds non-overlapping image patches; the
//! text encoder embeds token ids. Each runs `depth` blocks of multi-head
//! attention plus a GELU MLP, then layer-norms, pools (uniform over patches,
//! content-masked over tokens), projects into the joint space, and
//! L2-normalizes. Batches are stacked as `[batch * tokens, width]` matrices
//! and attention runs per (sample, head) on sliced blocks, so every
//! reduction is a plain row-major kernel with a deterministic result.
//!
//! Parameters live in a `BTreeMap` keyed by dotted names ("vision.block0.
//! attn.wq"). The catalog of names, shapes, and init rules is the single
//! source of truth shared by init, counting, checkpoint validation, and the
//! optimizer's iteration order.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::derive_rng;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, CONTEXT_LEN, RESERVED};

/// Initial value of the learned logit scale: ln(1 / 0.07).
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778;
/// Layer-norm stabilizer.
pub const LN_EPS: f64 = 1e-5;
/// L2-normalization stabilizer.
pub const NORM_EPS: f64 = 1e-12;

// ── configuration ──

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 64,
            patch_size: 8,
            width: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            embed_dim: 64,
        }
    }
}

impl VisionConfig {
    /// Number of patch tokens per image.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        validate_trunk("vision", self.width, self.depth, self.heads, self.mlp_ratio, self.embed_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
}

impl TextConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        TextConfig {
            vocab_size,
            context_len: CONTEXT_LEN,
            width: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab size {} leaves no room beyond the {RESERVED} reserved ids",
                self.vocab_size
            )));
        }
        if self.context_len == 0 {
            return Err(Error::Config("context length must be positive".into()));
        }
        validate_trunk("text", self.width, self.depth, self.heads, self.mlp_ratio, self.embed_dim)
    }
}

fn validate_trunk(
    name: &str,
    width: usize,
    depth: usize,
    heads: usize,
    mlp_ratio: usize,
    embed_dim: usize,
) -> Result<()> {
    if width == 0 || depth == 0 || heads == 0 || mlp_ratio == 0 || embed_dim == 0 {
        return Err(Error::Config(format!("{name} encoder has a zero dimension")));
    }
    if width % heads != 0 {
        return Err(Error::Config(format!(
            "{name} width {width} not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
}

impl ModelConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vision: VisionConfig::default(),
            text: TextConfig::with_vocab(vocab_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.embed_dim != self.text.embed_dim {
            return Err(Error::Config(format!(
                "vision embed dim {} != text embed dim {}",
                self.vision.embed_dim, self.text.embed_dim
            )));
        }
        Ok(())
    }
}

// ── parameter catalog ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// Every parameter's name, shape, and init rule, in creation order.
pub fn catalog(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let trunk = |out: &mut Vec<(String, Vec<usize>, Init)>, pre: &str, width: usize, depth: usize, mlp_ratio: usize, embed_dim: usize| {
        for i in 0..depth {
            let b = format!("{pre}.block{i}");
            out.push((format!("{b}.ln1.g"), vec![1, width], Init::Ones));
            out.push((format!("{b}.ln1.b"), vec![1, width], Init::Zeros));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{b}.attn.{w}"), vec![width, width], Init::Normal(0.02)));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                out.push((format!("{b}.attn.{bias}"), vec![1, width], Init::Zeros));
            }
            out.push((format!("{b}.ln2.g"), vec![1, width], Init::Ones));
            out.push((format!("{b}.ln2.b"), vec![1, width], Init::Zeros));
            out.push((format!("{b}.mlp.w1"), vec![width, width * mlp_ratio], Init::Normal(0.02)));
            out.push((format!("{b}.mlp.b1"), vec![1, width * mlp_ratio], Init::Zeros));
            out.push((format!("{b}.mlp.w2"), vec![width * mlp_ratio, width], Init::Normal(0.02)));
            out.push((format!("{b}.mlp.b2"), vec![1, width], Init::Zeros));
        }
        out.push((format!("{pre}.ln_f.g"), vec![1, width], Init::Ones));
        out.push((format!("{pre}.ln_f.b"), vec![1, width], Init::Zeros));
        // Joint-space projection: scaled down with width so the embedding
        // magnitude starts independent of the trunk width.
        out.push((
            format!("{pre}.proj"),
            vec![width, embed_dim],
            Init::Normal(1.0 / (width as f64).sqrt()),
        ));
    };

    out.push(("logit_scale".into(), vec![1, 1], Init::Const(LOGIT_SCALE_INIT)));

    let v = &cfg.vision;
    out.push(("vision.patch_proj.w".into(), vec![v.patch_dim(), v.width], Init::Normal(0.02)));
    out.push(("vision.patch_proj.b".into(), vec![1, v.width], Init::Zeros));
    out.push(("vision.pos".into(), vec![v.tokens(), v.width], Init::Normal(0.02)));
    trunk(&mut out, "vision", v.width, v.depth, v.mlp_ratio, v.embed_dim);

    let t = &cfg.text;
    out.push(("text.tok_emb".into(), vec![t.vocab_size, t.width], Init::Normal(0.02)));
    out.push(("text.pos".into(), vec![t.context_len, t.width], Init::Normal(0.02)));
    trunk(&mut out, "text", t.width, t.depth, t.mlp_ratio, t.embed_dim);
    out
}

// ── parameter store ──

/// Named parameter tensors in deterministic (sorted) iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Params<T> {
    /// Fresh parameters for `cfg`, drawn from `seed`. The same seed always
    /// produces the same tensors.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[0x494e_4954]);
        let mut map = BTreeMap::new();
        for (name, shape, init) in catalog(cfg) {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0f64, std).expect("positive std");
                    (0..numel).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
                Init::Zeros => vec![T::ZERO; numel],
                Init::Ones => vec![T::ONE; numel],
                Init::Const(c) => vec![T::from_f64(c); numel],
            };
            map.insert(name, Tensor::new(shape, data)?.with_grad());
        }
        Ok(Params { map })
    }

    /// Rebuilds a store from loaded tensors, validating names and shapes
    /// against what `cfg` demands.
    pub fn from_map(cfg: &ModelConfig, map: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let expected = catalog(cfg);
        if map.len() != expected.len() {
            return Err(Error::Data(format!(
                "parameter store holds {} tensors, config demands {}",
                map.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in &expected {
            match map.get(name) {
                None => return Err(Error::Data(format!("missing parameter {name:?}"))),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::Data(format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Some(_) => {}
            }
        }
        let map = map
            .into_iter()
            .map(|(name, tensor)| (name, tensor.with_grad()))
            .collect();
        Ok(Params { map })
    }

    /// Wraps arbitrary named tensors without validating against a config.
    /// Useful for ad-hoc parameter groups (optimizer tests, probes); model
    /// checkpoints go through [`Params::from_map`] instead.
    pub fn from_tensors(map: BTreeMap<String, Tensor<T>>) -> Self {
        let map = map
            .into_iter()
            .map(|(name, tensor)| (name, tensor.with_grad()))
            .collect();
        Params { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.zero_grad();
        }
    }

    /// The number of scalars `cfg` implies, from shapes alone.
    pub fn expected_scalar_count(cfg: &ModelConfig) -> usize {
        catalog(cfg)
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

// ── tape binding ──

/// Per-tape handles for every parameter, created once per forward pass.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("unbound parameter {name:?}")))
    }
}

/// Pushes every parameter onto the tape as a leaf.
pub fn bind<T: Real>(tape: &mut Tape<T>, params: &Params<T>) -> Result<Binding> {
    let mut vars = BTreeMap::new();
    for (name, tensor) in params.iter() {
        vars.insert(name.clone(), tape.leaf(tensor)?);
    }
    Ok(Binding { vars })
}

/// Adds each bound parameter's gradient into its tensor's grad buffer.
/// Call after `tape.backward`.
pub fn grads_into<T: Real>(tape: &Tape<T>, binding: &Binding, params: &mut Params<T>) -> Result<()> {
    for (name, var) in &binding.vars {
        let tensor = params.get_mut(name)?;
        tape.accumulate_grad_into(*var, tensor)?;
    }
    Ok(())
}

// ── shared transformer pieces ──

fn ln_affine<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let normed = tape.layer_norm(x, T::from_f64(LN_EPS))?;
    let scaled = tape.mul_row(normed, bind.var(&format!("{prefix}.g"))?)?;
    tape.add_row(scaled, bind.var(&format!("{prefix}.b"))?)
}

fn linear<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    x: Var,
    w: &str,
    b: &str,
) -> Result<Var> {
    let y = tape.matmul(x, bind.var(w)?)?;
    tape.add_row(y, bind.var(b)?)
}

/// Multi-head self-attention over a stacked batch. `key_bias`, when given,
/// holds one `[1, tokens]` row per sample added to every attention logit row
/// before softmax; PAD keys carry a large negative bias there.
#[allow(clippy::too_many_arguments)]
fn attention<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    prefix: &str,
    x: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
    width: usize,
    key_bias: Option<&[Var]>,
) -> Result<Var> {
    let q = linear(tape, bind, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(tape, bind, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(tape, bind, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let dh = width / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let mut sample_outs = Vec::with_capacity(batch);
    for s in 0..batch {
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qs = tape.slice_block(q, s * tokens, tokens, h * dh, dh)?;
            let ks = tape.slice_block(k, s * tokens, tokens, h * dh, dh)?;
            let vs = tape.slice_block(v, s * tokens, tokens, h * dh, dh)?;
            let kt = tape.transpose(ks)?;
            let logits = tape.matmul(qs, kt)?;
            let mut att = tape.mul_scalar(logits, scale)?;
            if let Some(bias) = key_bias {
                att = tape.add_row(att, bias[s])?;
            }
            let att = tape.softmax_rows(att)?;
            head_outs.push(tape.matmul(att, vs)?);
        }
        sample_outs.push(tape.concat_cols(&head_outs)?);
    }
    let cat = tape.concat_rows(&sample_outs)?;
    linear(tape, bind, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

#[allow(clippy::too_many_arguments)]
fn transformer_block<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    prefix: &str,
    x: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
    width: usize,
    key_bias: Option<&[Var]>,
) -> Result<Var> {
    let h = ln_affine(tape, bind, &format!("{prefix}.ln1"), x)?;
    let att = attention(
        tape,
        bind,
        &format!("{prefix}.attn"),
        h,
        batch,
        tokens,
        heads,
        width,
        key_bias,
    )?;
    let x = tape.add(x, att)?;

    let h = ln_affine(tape, bind, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, bind, h, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, bind, h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
    tape.add(x, h)
}

/// Pools each sample's token rows into one row by weighted mean, then stacks.
fn pool_samples<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    batch: usize,
    tokens: usize,
    width: usize,
    weights: impl Fn(usize) -> Vec<T>,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch);
    for s in 0..batch {
        let block = tape.slice_block(x, s * tokens, tokens, 0, width)?;
        rows.push(tape.mean_rows_weighted(block, &weights(s))?);
    }
    tape.concat_rows(&rows)
}

// ── encoders ──

/// Flattens images into a `[batch * tokens, patch_dim]` matrix, one row per
/// patch, patches in row-major order, pixels row-major within the patch.
fn patchify<T: Real>(cfg: &VisionConfig, images: &[GrayImage]) -> Result<(Vec<usize>, Vec<T>)> {
    let side = cfg.image_size / cfg.patch_size;
    let (tokens, pd) = (cfg.tokens(), cfg.patch_dim());
    let mut data = Vec::with_capacity(images.len() * tokens * pd);
    for (i, img) in images.iter().enumerate() {
        if img.height() != cfg.image_size || img.width() != cfg.image_size {
            return Err(Error::Input(format!(
                "image {i} is {}x{}, encoder expects {}x{}",
                img.height(),
                img.width(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        for pr in 0..side {
            for pc in 0..side {
                for r in 0..cfg.patch_size {
                    for c in 0..cfg.patch_size {
                        let pixel =
                            img.get(pr * cfg.patch_size + r, pc * cfg.patch_size + c);
                        data.push(T::from_f64(pixel as f64));
                    }
                }
            }
        }
    }
    Ok((vec![images.len() * tokens, pd], data))
}

/// Encodes a batch of images into L2-normalized rows `[batch, embed_dim]`.
pub fn encode_images<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    cfg: &VisionConfig,
    images: &[GrayImage],
) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::Input("empty image batch".into()));
    }
    let (batch, tokens) = (images.len(), cfg.tokens());
    let (shape, data) = patchify(cfg, images)?;
    let patches = tape.constant(shape, data)?;
    let x = linear(tape, bind, patches, "vision.patch_proj.w", "vision.patch_proj.b")?;
    let mut x = tape.add_tiled_rows(x, bind.var("vision.pos")?)?;
    for i in 0..cfg.depth {
        x = transformer_block(
            tape,
            bind,
            &format!("vision.block{i}"),
            x,
            batch,
            tokens,
            cfg.heads,
            cfg.width,
            None,
        )?;
    }
    let x = ln_affine(tape, bind, "vision.ln_f", x)?;
    let pooled = pool_samples(tape, x, batch, tokens, cfg.width, |_| vec![T::ONE; tokens])?;
    let projected = tape.matmul(pooled, bind.var("vision.proj")?)?;
    tape.l2_normalize_rows(projected, T::from_f64(NORM_EPS))
}

/// Encodes a batch of token sequences into L2-normalized rows
/// `[batch, embed_dim]`. PAD positions are excluded from attention keys and
/// from pooling, so ids past the true length cannot influence the embedding.
pub fn encode_texts<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    cfg: &TextConfig,
    seqs: &[TokenSequence],
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Input("empty text batch".into()));
    }
    if cfg.context_len != CONTEXT_LEN {
        return Err(Error::Config(format!(
            "text context length {} does not match the tokenizer's {CONTEXT_LEN}",
            cfg.context_len
        )));
    }
    let (batch, tokens) = (seqs.len(), cfg.context_len);

    let mut ids = Vec::with_capacity(batch * tokens);
    for seq in seqs {
        ids.extend(seq.as_indices());
    }
    let emb = tape.embedding_lookup(bind.var("text.tok_emb")?, &ids)?;
    let mut x = tape.add_tiled_rows(emb, bind.var("text.pos")?)?;

    let key_bias: Vec<Var> = seqs
        .iter()
        .map(|seq| {
            let row: Vec<T> = seq
                .content_mask()
                .iter()
                .map(|&m| if m == 0.0 { T::from_f64(-1e9) } else { T::ZERO })
                .collect();
            tape.constant(vec![1, tokens], row)
        })
        .collect::<Result<_>>()?;

    for i in 0..cfg.depth {
        x = transformer_block(
            tape,
            bind,
            &format!("text.block{i}"),
            x,
            batch,
            tokens,
            cfg.heads,
            cfg.width,
            Some(&key_bias),
        )?;
    }
    let x = ln_affine(tape, bind, "text.ln_f", x)?;
    let pooled = pool_samples(tape, x, batch, tokens, cfg.width, |s| {
        seqs[s]
            .content_mask()
            .iter()
            .map(|&m| T::from_f64(m as f64))
            .collect()
    })?;
    let projected = tape.matmul(pooled, bind.var("text.proj")?)?;
    tape.l2_normalize_rows(projected, T::from_f64(NORM_EPS))
}
