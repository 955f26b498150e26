//! End-to-end finite-difference check of the encoder stack.
//!
//! The per-op gradients are verified exhaustively in the gradcheck suite;
//! this test guards the wiring between them: attention slicing, head
//! concatenation, positional tiling, PAD masking, pooling, projection, and
//! normalization. A tiny f64 model is run through both encoders, the loss is
//! a fixed random weighting of all embedding coordinates (so permuted or
//! dropped gradients cannot cancel), and a sample of coordinates from every
//! parameter tensor is probed with central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use aclip_core::encoders::{
    bind, encode_images, encode_texts, grads_into, ModelConfig, Params, TextConfig, VisionConfig,
};
use aclip_core::image::GrayImage;
use aclip_core::rng::derive_rng;
use aclip_core::tokenizer::{Vocabulary, CONTEXT_LEN};
use aclip_core::{Tape, Var};

// Smaller step than the per-op suite: the composite is much more curved, so
// truncation error dominates at 1e-3. f64 keeps roundoff far below tolerance.
const H_SCALE: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-6;
const PROBES_PER_TENSOR: usize = 12;

fn tiny_cfg(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vision: VisionConfig {
            image_size: 16,
            patch_size: 8,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 6,
        },
        text: TextConfig {
            vocab_size,
            context_len: CONTEXT_LEN,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 6,
        },
    }
}

struct Fixture {
    cfg: ModelConfig,
    images: Vec<GrayImage>,
    seqs: Vec<aclip_core::tokenizer::TokenSequence>,
    wv: Vec<f64>,
    wt: Vec<f64>,
}

fn fixture() -> Fixture {
    let lines = [
        "an image of brain organs belong to head region".to_string(),
        "a scan of liver, kidneys organs".to_string(),
    ];
    let voc = Vocabulary::build(&lines, 32).unwrap();
    let cfg = tiny_cfg(voc.len());
    let mut rng = derive_rng(2024, &[7]);
    let images: Vec<GrayImage> = (0..2)
        .map(|_| GrayImage::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0)).unwrap())
        .collect();
    let seqs = vec![voc.encode(&lines[0]), voc.encode(&lines[1])];
    let wv: Vec<f64> = (0..2 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wt: Vec<f64> = (0..2 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    Fixture { cfg, images, seqs, wv, wt }
}

fn weighted_sum(tape: &mut Tape<f64>, emb: Var, weights: &[f64]) -> Var {
    let w = tape
        .constant(tape.shape(emb).to_vec(), weights.to_vec())
        .unwrap();
    let prod = tape.mul(emb, w).unwrap();
    tape.sum_all(prod).unwrap()
}

fn loss_value(fx: &Fixture, params: &Params<f64>) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let binding = bind(&mut tape, params).unwrap();
    let iv = encode_images(&mut tape, &binding, &fx.cfg.vision, &fx.images).unwrap();
    let tv = encode_texts(&mut tape, &binding, &fx.cfg.text, &fx.seqs).unwrap();
    let lv = weighted_sum(&mut tape, iv, &fx.wv);
    let lt = weighted_sum(&mut tape, tv, &fx.wt);
    let loss = tape.add(lv, lt).unwrap();
    tape.value_scalar(loss)
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let fx = fixture();
    let mut params: Params<f64> = Params::init(&fx.cfg, 11).unwrap();

    // Analytic gradients for every parameter.
    let mut tape: Tape<f64> = Tape::new();
    let binding = bind(&mut tape, &params).unwrap();
    let iv = encode_images(&mut tape, &binding, &fx.cfg.vision, &fx.images).unwrap();
    let tv = encode_texts(&mut tape, &binding, &fx.cfg.text, &fx.seqs).unwrap();
    let lv = weighted_sum(&mut tape, iv, &fx.wv);
    let lt = weighted_sum(&mut tape, tv, &fx.wt);
    let loss = tape.add(lv, lt).unwrap();
    tape.backward(loss).unwrap();
    grads_into(&tape, &binding, &mut params).unwrap();

    // logit_scale only enters through the contrastive head, not the
    // encoders, so no gradient reaches it in this loss.
    let names: Vec<String> = params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n != "logit_scale")
        .collect();
    let mut rng: ChaCha8Rng = derive_rng(55, &[3]);
    let mut checked = 0usize;
    for name in names {
        let (numel, grad): (usize, Vec<f64>) = {
            let t = params.get(&name).unwrap();
            let g = t
                .grad
                .clone()
                .unwrap_or_else(|| panic!("no gradient reached {name}"));
            (t.numel(), g)
        };
        let probes: Vec<usize> = if numel <= PROBES_PER_TENSOR {
            (0..numel).collect()
        } else {
            (0..PROBES_PER_TENSOR)
                .map(|_| rng.random_range(0..numel))
                .collect()
        };
        for idx in probes {
            let x0 = params.get(&name).unwrap().data()[idx];
            let h = H_SCALE * x0.abs().max(1.0);
            params.get_mut(&name).unwrap().data_mut()[idx] = x0 + h;
            let up = loss_value(&fx, &params);
            params.get_mut(&name).unwrap().data_mut()[idx] = x0 - h;
            let down = loss_value(&fx, &params);
            params.get_mut(&name).unwrap().data_mut()[idx] = x0;
            let fd = (up - down) / (2.0 * h);
            let ad = grad[idx];
            let abs = (ad - fd).abs();
            let rel = abs / ad.abs().max(fd.abs()).max(1e-12);
            assert!(
                abs <= ABS_TOL || rel <= REL_TOL,
                "{name}[{idx}]: analytic {ad:.9e} vs fd {fd:.9e} (abs {abs:.3e}, rel {rel:.3e})"
            );
            checked += 1;
        }
    }
    assert!(checked > 300, "only {checked} coordinates probed");
}
