//! Symmetric contrastive loss over paired image/text embeddings.
//!
//! Given L2-normalized embeddings for a batch of matched pairs, the pairwise
//! logit matrix is `scale * <v_i, t_j>` with a learned temperature
//! `scale = exp(log_scale)` clamped to [1, 100]. The loss averages two
//! cross-entropies against the diagonal: images classifying their caption
//! among all captions, and captions classifying their image, blended by
//! `lambda`. When one caption string appears under several images in a
//! batch, those cross pairs are false negatives; a large negative additive
//! bias removes them from both softmax directions.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Temperature bounds on `exp(log_scale)`.
pub const SCALE_MIN: f64 = 1.0;
pub const SCALE_MAX: f64 = 100.0;
/// Additive bias that effectively deletes a logit from a softmax.
pub const MASK_BIAS: f64 = -1e9;

/// The blended loss and its two directional terms, all scalar nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub vision_term: Var,
    pub text_term: Var,
}

/// Temperature node: `exp(log_scale)` clamped to [SCALE_MIN, SCALE_MAX].
/// Outside the bounds the node degrades to a constant, which is exactly the
/// clamp's zero gradient.
pub fn temperature<T: Real>(tape: &mut Tape<T>, log_scale: Var) -> Result<Var> {
    if tape.shape(log_scale) != [1, 1] {
        return Err(Error::Shape {
            op: "temperature",
            lhs: tape.shape(log_scale).to_vec(),
            rhs: vec![1, 1],
        });
    }
    let s = tape.exp(log_scale)?;
    let val = tape.value_scalar(s).to_f64();
    if val < SCALE_MIN {
        tape.scalar_const(T::from_f64(SCALE_MIN))
    } else if val > SCALE_MAX {
        tape.scalar_const(T::from_f64(SCALE_MAX))
    } else {
        Ok(s)
    }
}

/// Pairwise logits `[B, B]`: `logits[i][j] = scale * <img_i, txt_j>`.
/// Rows index images, columns index texts. Embeddings are expected to be
/// L2-normalized rows of equal dimension.
pub fn pairwise_logits<T: Real>(
    tape: &mut Tape<T>,
    img_emb: Var,
    txt_emb: Var,
    log_scale: Var,
) -> Result<Var> {
    let (bi, di) = dims(tape, "pairwise_logits", img_emb)?;
    let (bt, dt) = dims(tape, "pairwise_logits", txt_emb)?;
    if bi != bt || di != dt {
        return Err(Error::Shape {
            op: "pairwise_logits",
            lhs: vec![bi, di],
            rhs: vec![bt, dt],
        });
    }
    let scale = temperature(tape, log_scale)?;
    let tt = tape.transpose(txt_emb)?;
    let sims = tape.matmul(img_emb, tt)?;
    tape.scale(sims, scale)
}

fn dims<T: Real>(tape: &Tape<T>, op: &'static str, v: Var) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 {
        return Err(Error::Shape { op, lhs: s.to_vec(), rhs: vec![0, 0] });
    }
    Ok((s[0], s[1]))
}

/// Off-diagonal bias matrix `[B, B]` that deletes pairs whose captions are
/// string-identical: `bias[i][j] = MASK_BIAS` iff `i != j` and
/// `captions[i] == captions[j]`. Symmetric, so it serves both directions.
/// Returns None when the batch has no duplicates.
pub fn duplicate_mask<T: Real>(captions: &[&str]) -> Option<Vec<T>> {
    let b = captions.len();
    let mut bias = vec![T::ZERO; b * b];
    let mut any = false;
    for i in 0..b {
        for j in (i + 1)..b {
            if captions[i] == captions[j] {
                bias[i * b + j] = T::from_f64(MASK_BIAS);
                bias[j * b + i] = T::from_f64(MASK_BIAS);
                any = true;
            }
        }
    }
    any.then_some(bias)
}

/// Blended two-direction contrastive loss for a batch of matched pairs.
/// `captions`, when given, supplies the strings used for duplicate masking.
/// `lambda` weighs the image-to-text term; `1 - lambda` the text-to-image
/// term.
pub fn symmetric_loss<T: Real>(
    tape: &mut Tape<T>,
    img_emb: Var,
    txt_emb: Var,
    log_scale: Var,
    captions: Option<&[&str]>,
    lambda: T,
) -> Result<LossBreakdown> {
    let lf = lambda.to_f64();
    if !(0.0..=1.0).contains(&lf) {
        return Err(Error::Param {
            op: "symmetric_loss",
            message: format!("lambda {lf} outside [0, 1]"),
        });
    }
    let (b, _) = dims(tape, "symmetric_loss", img_emb)?;
    if b == 0 {
        return Err(Error::Input("empty contrastive batch".into()));
    }
    if let Some(c) = captions {
        if c.len() != b {
            return Err(Error::Shape {
                op: "symmetric_loss",
                lhs: vec![b],
                rhs: vec![c.len()],
            });
        }
    }

    let mut logits = pairwise_logits(tape, img_emb, txt_emb, log_scale)?;
    if let Some(bias) = captions.and_then(duplicate_mask::<T>) {
        let mask = tape.constant(vec![b, b], bias)?;
        logits = tape.add(logits, mask)?;
    }

    let diagonal: Vec<usize> = (0..b).collect();
    let vision_term = tape.cross_entropy_rows(logits, &diagonal)?;
    let transposed = tape.transpose(logits)?;
    let text_term = tape.cross_entropy_rows(transposed, &diagonal)?;

    let lv = tape.mul_scalar(vision_term, lambda)?;
    let lt = tape.mul_scalar(text_term, T::ONE - lambda)?;
    let total = tape.add(lv, lt)?;
    Ok(LossBreakdown { total, vision_term, text_term })
}
