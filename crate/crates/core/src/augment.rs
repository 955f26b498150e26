//! Deterministic image augmentations: CLAHE, contrast stretch, gamma
//! correction, rotation, translation, and the policy that samples 10
//! augmentation chains per image.
//!
//! Identity parameters (factor 1, gamma 1, theta 0, zero shift) return a
//! bitwise copy; float round-trips are short-circuited, not recomputed.
//!
//! `clahe_reference` is the unoptimized oracle: it recomputes every tile
//! histogram from scratch for every pixel and exists to pin down `clahe`,
//! which caches one lookup table per tile. Both share the contract below:
//!
//!   per-tile 256-bin histogram; bins clipped at clip_limit x (mean bin
//!   count) with the excess redistributed uniformly over all bins; the
//!   lowest occupied bin b0 of the *original* histogram maps to its own
//!   lower edge e = b0/256 (this keeps constant tiles constant); bins above
//!   b0 map onto [e,1] by the clipped CDF; bins below b0 map onto [0,e);
//!   each pixel bilinearly interpolates the mappings of its 4 nearest tiles.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const CONTRAST_RANGE: (f32, f32) = (0.5, 2.0);
pub const GAMMA_RANGE: (f32, f32) = (0.25, 4.0);
pub const ROTATE_RANGE: (f32, f32) = (-180.0, 180.0);

// ── Individual ops ──────────────────────────────────────────────────────

/// `out = clamp(mean + factor * (img - mean))`.
pub fn contrast(img: &GrayImage, factor: f32) -> Result<GrayImage> {
    if !(CONTRAST_RANGE.0..=CONTRAST_RANGE.1).contains(&factor) {
        return Err(Error::Param {
            op: "contrast",
            message: format!("factor {factor} outside [{}, {}]", CONTRAST_RANGE.0, CONTRAST_RANGE.1),
        });
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let mean = img.mean();
    Ok(img.map(|p| mean + factor * (p - mean)))
}

/// Pixelwise `img^g`.
pub fn gamma(img: &GrayImage, g: f32) -> Result<GrayImage> {
    if !(GAMMA_RANGE.0..=GAMMA_RANGE.1).contains(&g) {
        return Err(Error::Param {
            op: "gamma",
            message: format!("gamma {g} outside [{}, {}]", GAMMA_RANGE.0, GAMMA_RANGE.1),
        });
    }
    if g == 1.0 {
        return Ok(img.clone());
    }
    Ok(img.map(|p| p.powf(g)))
}

/// Rotate about the image center ((w-1)/2, (h-1)/2), bilinear interpolation,
/// out-of-bounds source pixels read as 0.
pub fn rotate(img: &GrayImage, theta_deg: f32) -> Result<GrayImage> {
    if !(ROTATE_RANGE.0..=ROTATE_RANGE.1).contains(&theta_deg) {
        return Err(Error::Param {
            op: "rotate",
            message: format!("theta {theta_deg} outside [{}, {}]", ROTATE_RANGE.0, ROTATE_RANGE.1),
        });
    }
    if theta_deg == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let th = theta_deg as f64 * std::f64::consts::PI / 180.0;
    let (sin, cos) = th.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            img.get(y as usize, x as usize) as f64
        }
    };
    GrayImage::from_fn(h, w, |r, c| {
        let dx = c as f64 - cx;
        let dy = r as f64 - cy;
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let v = (1.0 - fx) * (1.0 - fy) * sample(x0, y0)
            + fx * (1.0 - fy) * sample(x0 + 1, y0)
            + (1.0 - fx) * fy * sample(x0, y0 + 1)
            + fx * fy * sample(x0 + 1, y0 + 1);
        v as f32
    })
}

/// Integer-pixel shift; vacated pixels become 0. `max_shift` is the
/// configured bound (the augmentation policy defaults it to width/4).
pub fn translate(img: &GrayImage, dx: i32, dy: i32, max_shift: i32) -> Result<GrayImage> {
    if dx.abs() > max_shift || dy.abs() > max_shift {
        return Err(Error::Param {
            op: "translate",
            message: format!("shift ({dx}, {dy}) exceeds configured bound {max_shift}"),
        });
    }
    if dx == 0 && dy == 0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height() as i32, img.width() as i32);
    GrayImage::from_fn(img.height(), img.width(), |r, c| {
        let sr = r as i32 - dy;
        let sc = c as i32 - dx;
        if sr < 0 || sc < 0 || sr >= h || sc >= w {
            0.0
        } else {
            img.get(sr as usize, sc as usize)
        }
    })
}

pub fn default_translate_bound(img: &GrayImage) -> i32 {
    (img.width() / 4) as i32
}

// ── CLAHE ───────────────────────────────────────────────────────────────

fn clahe_check_params(img: &GrayImage, tiles: usize, clip_limit: f32) -> Result<()> {
    if tiles == 0 || img.height() < tiles || img.width() < tiles {
        return Err(Error::Param {
            op: "clahe",
            message: format!(
                "{}x{} grid does not fit a {}x{} image",
                tiles,
                tiles,
                img.height(),
                img.width()
            ),
        });
    }
    if clip_limit < 1.0 {
        return Err(Error::Param {
            op: "clahe",
            message: format!("clip_limit {clip_limit} must be >= 1"),
        });
    }
    Ok(())
}

fn bin_of(p: f32) -> usize {
    ((p * 256.0) as usize).min(255)
}

/// Tile `k` of `t` over an extent of `len` covers `[floor(k*len/t), floor((k+1)*len/t))`.
fn tile_extent(k: usize, t: usize, len: usize) -> (usize, usize) {
    (k * len / t, (k + 1) * len / t)
}

/// Continuous tile coordinate for a pixel index, with the border clamp that
/// collapses interpolation to the edge tile.
fn tile_coord(i: usize, t: usize, len: usize) -> (usize, usize, f64) {
    let u = (i as f64 + 0.5) * t as f64 / len as f64 - 0.5;
    if u <= 0.0 {
        (0, 0, 0.0)
    } else if u >= (t - 1) as f64 {
        (t - 1, t - 1, 0.0)
    } else {
        let i0 = u.floor() as usize;
        (i0, i0 + 1, u - i0.min(t - 1) as f64)
    }
}

/// The mapped value of `bin` under one tile's clipped, identity-anchored CDF.
fn mapped_value(hist: &[f64; 256], n: f64, clip_limit: f32, bin: usize) -> f64 {
    let limit = clip_limit as f64 * n / 256.0;
    let mut excess = 0.0;
    for &h in hist.iter() {
        if h > limit {
            excess += h - limit;
        }
    }
    let share = excess / 256.0;
    let clipped = |b: usize| -> f64 { hist[b].min(limit) + share };

    let b0 = hist.iter().position(|&h| h > 0.0).expect("tile has pixels");
    let e = b0 as f64 / 256.0;
    let cdf_at = |b: usize| -> f64 { (0..=b).map(&clipped).sum() };

    let m = if bin >= b0 {
        let a = cdf_at(b0);
        if n - a <= 0.0 {
            e
        } else {
            e + (1.0 - e) * (cdf_at(bin) - a) / (n - a)
        }
    } else {
        let a = cdf_at(b0);
        e * cdf_at(bin) / a
    };
    m.clamp(0.0, 1.0)
}

/// Unoptimized per-pixel reference: recomputes the four neighboring tiles'
/// histograms and mappings from scratch for every single pixel.
pub fn clahe_reference(img: &GrayImage, tiles: usize, clip_limit: f32) -> Result<GrayImage> {
    clahe_check_params(img, tiles, clip_limit)?;
    let (h, w) = (img.height(), img.width());
    let tile_value = |ty: usize, tx: usize, bin: usize| -> f64 {
        let (r0, r1) = tile_extent(ty, tiles, h);
        let (c0, c1) = tile_extent(tx, tiles, w);
        let mut hist = [0.0f64; 256];
        for r in r0..r1 {
            for c in c0..c1 {
                hist[bin_of(img.get(r, c))] += 1.0;
            }
        }
        let n = ((r1 - r0) * (c1 - c0)) as f64;
        mapped_value(&hist, n, clip_limit, bin)
    };
    GrayImage::from_fn(h, w, |r, c| {
        let bin = bin_of(img.get(r, c));
        let (j0, j1, fy) = tile_coord(r, tiles, h);
        let (i0, i1, fx) = tile_coord(c, tiles, w);
        let v = (1.0 - fy) * ((1.0 - fx) * tile_value(j0, i0, bin) + fx * tile_value(j0, i1, bin))
            + fy * ((1.0 - fx) * tile_value(j1, i0, bin) + fx * tile_value(j1, i1, bin));
        v as f32
    })
}

/// Contrast-limited adaptive histogram equalization; one cached lookup
/// table per tile, bilinear blend of the four nearest tables per pixel.
pub fn clahe(img: &GrayImage, tiles: usize, clip_limit: f32) -> Result<GrayImage> {
    clahe_check_params(img, tiles, clip_limit)?;
    let (h, w) = (img.height(), img.width());
    let mut luts = vec![[0.0f64; 256]; tiles * tiles];
    for ty in 0..tiles {
        for tx in 0..tiles {
            let (r0, r1) = tile_extent(ty, tiles, h);
            let (c0, c1) = tile_extent(tx, tiles, w);
            let mut hist = [0.0f64; 256];
            for r in r0..r1 {
                for c in c0..c1 {
                    hist[bin_of(img.get(r, c))] += 1.0;
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let lut = &mut luts[ty * tiles + tx];
            for bin in 0..256 {
                lut[bin] = mapped_value(&hist, n, clip_limit, bin);
            }
        }
    }
    GrayImage::from_fn(h, w, |r, c| {
        let bin = bin_of(img.get(r, c));
        let (j0, j1, fy) = tile_coord(r, tiles, h);
        let (i0, i1, fx) = tile_coord(c, tiles, w);
        let m00 = luts[j0 * tiles + i0][bin];
        let m01 = luts[j0 * tiles + i1][bin];
        let m10 = luts[j1 * tiles + i0][bin];
        let m11 = luts[j1 * tiles + i1][bin];
        ((1.0 - fy) * ((1.0 - fx) * m00 + fx * m01) + fy * ((1.0 - fx) * m10 + fx * m11)) as f32
    })
}

// ── Specs ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOp {
    Clahe { tiles: usize, clip_limit: f32 },
    Contrast { factor: f32 },
    Gamma { g: f32 },
    Rotate { theta_deg: f32 },
    Translate { dx: i32, dy: i32 },
}

impl AugmentOp {
    pub fn apply(&self, img: &GrayImage, max_shift: i32) -> Result<GrayImage> {
        match *self {
            AugmentOp::Clahe { tiles, clip_limit } => clahe(img, tiles, clip_limit),
            AugmentOp::Contrast { factor } => contrast(img, factor),
            AugmentOp::Gamma { g } => gamma(img, g),
            AugmentOp::Rotate { theta_deg } => rotate(img, theta_deg),
            AugmentOp::Translate { dx, dy } => translate(img, dx, dy, max_shift),
        }
    }
}

impl std::fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AugmentOp::Clahe { tiles, clip_limit } => write!(f, "clahe({tiles},{clip_limit})"),
            AugmentOp::Contrast { factor } => write!(f, "contrast({factor})"),
            AugmentOp::Gamma { g } => write!(f, "gamma({g})"),
            AugmentOp::Rotate { theta_deg } => write!(f, "rotate({theta_deg})"),
            AugmentOp::Translate { dx, dy } => write!(f, "translate({dx},{dy})"),
        }
    }
}

/// An ordered chain of augmentation ops; ops are applied in listed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentSpec {
    pub ops: Vec<AugmentOp>,
}

impl AugmentSpec {
    pub fn apply(&self, img: &GrayImage, max_shift: i32) -> Result<GrayImage> {
        let mut out = img.clone();
        for op in &self.ops {
            out = op.apply(&out, max_shift)?;
        }
        Ok(out)
    }

    /// Parse the `gamma(1.5)|rotate(-30)|translate(4,-7)` form.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ops = Vec::new();
        if text.is_empty() {
            return Ok(AugmentSpec { ops });
        }
        for part in text.split('|') {
            let open = part
                .find('(')
                .ok_or_else(|| Error::Data(format!("augment op {part:?}: missing '('")))?;
            let close = part
                .strip_suffix(')')
                .ok_or_else(|| Error::Data(format!("augment op {part:?}: missing ')'")))?;
            let name = &part[..open];
            let args: Vec<&str> = close[open + 1..].split(',').collect();
            let wrong_arity = || Error::Data(format!("augment op {part:?}: wrong argument count"));
            let bad_num = |v: &str| Error::Data(format!("augment op {part:?}: bad number {v:?}"));
            let f32_arg = |v: &str| v.trim().parse::<f32>().map_err(|_| bad_num(v));
            let i32_arg = |v: &str| v.trim().parse::<i32>().map_err(|_| bad_num(v));
            let op = match name {
                "clahe" => {
                    let [t, c] = args[..] else { return Err(wrong_arity()) };
                    AugmentOp::Clahe {
                        tiles: t.trim().parse::<usize>().map_err(|_| bad_num(t))?,
                        clip_limit: f32_arg(c)?,
                    }
                }
                "contrast" => {
                    let [v] = args[..] else { return Err(wrong_arity()) };
                    AugmentOp::Contrast { factor: f32_arg(v)? }
                }
                "gamma" => {
                    let [v] = args[..] else { return Err(wrong_arity()) };
                    AugmentOp::Gamma { g: f32_arg(v)? }
                }
                "rotate" => {
                    let [v] = args[..] else { return Err(wrong_arity()) };
                    AugmentOp::Rotate { theta_deg: f32_arg(v)? }
                }
                "translate" => {
                    let [x, y] = args[..] else { return Err(wrong_arity()) };
                    AugmentOp::Translate { dx: i32_arg(x)?, dy: i32_arg(y)? }
                }
                other => return Err(Error::Data(format!("unknown augment op {other:?}"))),
            };
            ops.push(op);
        }
        Ok(AugmentSpec { ops })
    }
}

impl std::fmt::Display for AugmentSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

// ── Sampling policy ─────────────────────────────────────────────────────

/// Which ops the sampler may draw and from which ranges. Ranges may be
/// collapsed to a point (identity parameters) for testing; CLAHE has no
/// identity parameters, so identity policies disable it instead.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub variants: usize,
    pub min_ops: usize,
    pub max_ops: usize,
    pub use_clahe: bool,
    pub use_contrast: bool,
    pub use_gamma: bool,
    pub use_rotate: bool,
    pub use_translate: bool,
    pub contrast: (f32, f32),
    pub gamma: (f32, f32),
    pub rotate: (f32, f32),
    pub translate_max: i32,
    pub clahe_tiles: usize,
    pub clahe_clip: (f32, f32),
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            variants: 10,
            min_ops: 1,
            max_ops: 3,
            use_clahe: true,
            use_contrast: true,
            use_gamma: true,
            use_rotate: true,
            use_translate: true,
            contrast: CONTRAST_RANGE,
            gamma: GAMMA_RANGE,
            rotate: ROTATE_RANGE,
            translate_max: 16,
            clahe_tiles: 8,
            clahe_clip: (1.5, 3.0),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Param { op: "sample_policy", message };
        if self.variants == 0 {
            return Err(err("variants must be positive".into()));
        }
        if self.min_ops == 0 || self.min_ops > self.max_ops {
            return Err(err(format!("invalid op count range {}..{}", self.min_ops, self.max_ops)));
        }
        if self.enabled_kinds().is_empty() {
            return Err(err("no augmentation ops enabled".into()));
        }
        let sub = |r: (f32, f32), bound: (f32, f32)| r.0 <= r.1 && r.0 >= bound.0 && r.1 <= bound.1;
        if !sub(self.contrast, CONTRAST_RANGE) {
            return Err(err(format!("contrast range {:?} outside {:?}", self.contrast, CONTRAST_RANGE)));
        }
        if !sub(self.gamma, GAMMA_RANGE) {
            return Err(err(format!("gamma range {:?} outside {:?}", self.gamma, GAMMA_RANGE)));
        }
        if !sub(self.rotate, ROTATE_RANGE) {
            return Err(err(format!("rotate range {:?} outside {:?}", self.rotate, ROTATE_RANGE)));
        }
        if self.translate_max < 0 {
            return Err(err("translate_max must be non-negative".into()));
        }
        if self.clahe_clip.0 < 1.0 || self.clahe_clip.0 > self.clahe_clip.1 {
            return Err(err(format!("invalid clahe clip range {:?}", self.clahe_clip)));
        }
        if self.clahe_tiles == 0 {
            return Err(err("clahe_tiles must be positive".into()));
        }
        Ok(())
    }

    fn enabled_kinds(&self) -> Vec<u8> {
        let mut kinds = Vec::new();
        if self.use_clahe {
            kinds.push(0);
        }
        if self.use_contrast {
            kinds.push(1);
        }
        if self.use_gamma {
            kinds.push(2);
        }
        if self.use_rotate {
            kinds.push(3);
        }
        if self.use_translate {
            kinds.push(4);
        }
        kinds
    }
}

fn unif_f32(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draw `variants` pairwise-distinct augmentation chains of 1-3 ops each,
/// parameters uniform over the configured ranges. Deterministic per rng
/// state.
pub fn sample_policy(rng: &mut ChaCha8Rng, cfg: &PolicyConfig) -> Result<Vec<AugmentSpec>> {
    cfg.validate()?;
    let kinds = cfg.enabled_kinds();
    let mut specs: Vec<AugmentSpec> = Vec::with_capacity(cfg.variants);
    let mut keys: Vec<String> = Vec::with_capacity(cfg.variants);
    const MAX_TRIES: usize = 200;
    for _ in 0..cfg.variants {
        let mut accepted = false;
        for _ in 0..MAX_TRIES {
            let n = rng.random_range(cfg.min_ops..=cfg.max_ops).min(kinds.len());
            let mut order = kinds.clone();
            order.shuffle(rng);
            order.truncate(n);
            let ops = order
                .into_iter()
                .map(|kind| match kind {
                    0 => AugmentOp::Clahe {
                        tiles: cfg.clahe_tiles,
                        clip_limit: unif_f32(rng, cfg.clahe_clip),
                    },
                    1 => AugmentOp::Contrast { factor: unif_f32(rng, cfg.contrast) },
                    2 => AugmentOp::Gamma { g: unif_f32(rng, cfg.gamma) },
                    3 => AugmentOp::Rotate { theta_deg: unif_f32(rng, cfg.rotate) },
                    _ => AugmentOp::Translate {
                        dx: rng.random_range(-cfg.translate_max..=cfg.translate_max),
                        dy: rng.random_range(-cfg.translate_max..=cfg.translate_max),
                    },
                })
                .collect();
            let spec = AugmentSpec { ops };
            let key = spec.to_string();
            if !keys.contains(&key) {
                keys.push(key);
                specs.push(spec);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Param {
                op: "sample_policy",
                message: format!(
                    "could not draw {} distinct augmentation chains from the configured ranges",
                    cfg.variants
                ),
            });
        }
    }
    Ok(specs)
}

/// Apply each spec to the image; output order matches spec order.
pub fn apply_all(img: &GrayImage, specs: &[AugmentSpec], max_shift: i32) -> Result<Vec<GrayImage>> {
    specs
        .par_iter()
        .map(|spec| spec.apply(img, max_shift))
        .collect()
}
