//! Release gate: ten numbered checks spanning gradients, loss identities,
//! metric oracles, the tokenizer and augmentation contracts, end-to-end
//! training quality, the ablation ladder, caption preference, chance-level
//! sanity, and byte reproducibility.
//!
//! Each check prints one `criterion NN PASS` line with its measured numbers
//! (visible with `--nocapture`); a failed assertion marks the criterion
//! failed. Heavy fixtures (datasets, trained models) are shared through
//! lazily initialized statics so each is built once per run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::LazyLock;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use aclip_core::augment::{
    apply_all, clahe, clahe_reference, contrast, gamma, rotate, sample_policy, translate,
    AugmentSpec, PolicyConfig,
};
use aclip_core::config::{shift_policy, RunConfig};
use aclip_core::contrastive::symmetric_loss;
use aclip_core::dataset::{
    augment_dataset_copy, generate_dataset, load_manifest, GenConfig, ManifestRecord,
};
use aclip_core::encoders::{bind, encode_images, encode_texts, grads_into, ModelConfig, Params};
use aclip_core::eval::{accuracy, embed_images, embed_texts, evaluate, ovr_auc, Prediction};
use aclip_core::image::GrayImage;
use aclip_core::labels::{OrganStationMap, STATIONS};
use aclip_core::prompts::{
    label_prompt_bank, render, LabelKind, PromptFacts, TemplateBank, PROMPTS_PER_IMAGE,
};
use aclip_core::tokenizer::{Vocabulary, BOS_ID, CONTEXT_LEN, EOS_ID, PAD_ID};
use aclip_core::train::{train_loop, AblationMode, TrainConfig, TrainSession};
use aclip_core::{Tape, Tensor, Var};

// ── shared fixtures ──

struct Dataset {
    _dir: TempDir,
    manifest: PathBuf,
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

fn make_dataset(cfg: &GenConfig) -> Dataset {
    let dir = TempDir::new().expect("tempdir");
    let map = OrganStationMap::default_map();
    let bank = TemplateBank::default_bank();
    let manifest = generate_dataset(cfg, &bank, &map, dir.path()).expect("dataset generation");
    let records = load_manifest(&manifest, &map).expect("manifest load");
    let root = dir.path().to_path_buf();
    Dataset { _dir: dir, manifest, root, records }
}

/// The default-config dataset: 2000 train / 500 val / 500 test, seed 17.
static BASE_DATA: LazyLock<Dataset> = LazyLock::new(|| make_dataset(&GenConfig::default()));

fn split(records: &[ManifestRecord], name: &str) -> Vec<ManifestRecord> {
    records.iter().filter(|r| r.split == name).cloned().collect()
}

fn default_vocab(train_records: &[ManifestRecord]) -> Vocabulary {
    let mut corpus: Vec<String> =
        train_records.iter().flat_map(|r| r.captions.iter().cloned()).collect();
    for kind in [LabelKind::Organ, LabelKind::Station] {
        corpus.extend(label_prompt_bank(kind).into_iter().map(|(_, c)| c));
    }
    Vocabulary::build(&corpus, RunConfig::default().vocab_max).expect("vocabulary")
}

struct Trained {
    _out: TempDir,
    params: Params<f32>,
    model_cfg: ModelConfig,
    vocab: Vocabulary,
    wall: Duration,
    test_organ_acc: f64,
    test_station_acc: f64,
}

fn train_model(data: &Dataset, train_cfg: &TrainConfig, eval_split: &str) -> Trained {
    let map = OrganStationMap::default_map();
    let bank = TemplateBank::default_bank();
    let train_records = split(&data.records, "train");
    let val_records = split(&data.records, "val");
    let vocab = default_vocab(&train_records);
    let run_cfg = RunConfig::default();
    let model_cfg = run_cfg.model_config(vocab.len());
    let session = TrainSession {
        model_cfg: &model_cfg,
        train_cfg,
        vocab: &vocab,
        bank: &bank,
        map: &map,
        config_text: run_cfg.to_text(),
    };
    let out = TempDir::new().expect("tempdir");
    let mut params = Params::<f32>::init(&model_cfg, train_cfg.seed).expect("init");
    let started = Instant::now();
    train_loop(&session, &train_records, &val_records, &data.root, &mut params, out.path(), |_| {})
        .expect("training");
    let wall = started.elapsed();
    let test_records = split(&data.records, eval_split);
    let report = evaluate(&params, &model_cfg, &vocab, &test_records, &data.root, &map, "final")
        .expect("evaluation");
    Trained {
        _out: out,
        params,
        model_cfg,
        vocab,
        wall,
        test_organ_acc: report.organ.accuracy,
        test_station_acc: report.station.accuracy,
    }
}

/// The default training run (MSA mode, seed 17) used by criteria 6 and 8.
static MSA_MODEL: LazyLock<Trained> =
    LazyLock::new(|| train_model(&BASE_DATA, &TrainConfig::default(), "test"));

// ── criterion 1: finite-difference gradient checks ──

const PER_OP_H: f64 = 1e-3;
const PER_OP_REL: f64 = 1e-4;
const END_TO_END_H: f64 = 1e-4;
const END_TO_END_REL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

fn probe_value(
    inputs: &[Tensor<f64>],
    w: &[f64],
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.requires_grad = false;
            tape.leaf(&c).unwrap()
        })
        .collect();
    let y = f(&mut tape, &vars);
    if tape.value(y).len() == 1 {
        return tape.value_scalar(y);
    }
    let wv = tape.constant(tape.shape(y).to_vec(), w[..tape.value(y).len()].to_vec()).unwrap();
    let p = tape.mul(y, wv).unwrap();
    let s = tape.sum_all(p).unwrap();
    tape.value_scalar(s)
}

/// Worst relative FD error over every coordinate of every input. Non-scalar
/// outputs are probed through a fixed random weighting so permutation
/// mistakes cannot cancel.
fn op_fd_worst_rel(
    name: &str,
    seed: u64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let w: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t).unwrap()).collect();
    let y = f(&mut tape, &vars);
    let loss = if tape.value(y).len() == 1 {
        y
    } else {
        let wv = tape.constant(tape.shape(y).to_vec(), w[..tape.value(y).len()].to_vec()).unwrap();
        let p = tape.mul(y, wv).unwrap();
        tape.sum_all(p).unwrap()
    };
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (ti, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("leaf gradient missing").to_vec();
        for j in 0..inputs[ti].numel() {
            let x0 = inputs[ti].data()[j];
            let h = PER_OP_H * x0.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] = x0 + h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] = x0 - h;
            let fd = (probe_value(&plus, &w, &f) - probe_value(&minus, &w, &f)) / (2.0 * h);
            let ad = analytic[j];
            let abs = (ad - fd).abs();
            if abs <= ABS_FLOOR {
                continue;
            }
            let rel = abs / ad.abs().max(fd.abs());
            assert!(
                rel < PER_OP_REL,
                "{name}: input {ti} coord {j}: analytic {ad} vs fd {fd} (rel {rel:.3e})"
            );
            worst = worst.max(rel);
        }
    }
    worst
}

struct TrainStepFixture {
    cfg: ModelConfig,
    images: Vec<GrayImage>,
    seqs: Vec<aclip_core::tokenizer::TokenSequence>,
    captions: Vec<&'static str>,
}

fn train_step_fixture() -> TrainStepFixture {
    let lines = [
        "an image of brain organs belong to head region",
        "a scan of liver, kidneys organs",
        "coronal view of the chest region",
    ];
    let corpus: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::build(&corpus, 64).unwrap();
    let cfg = ModelConfig {
        vision: aclip_core::encoders::VisionConfig {
            image_size: 16,
            patch_size: 8,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 6,
        },
        text: aclip_core::encoders::TextConfig {
            vocab_size: vocab.len(),
            context_len: CONTEXT_LEN,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 6,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let images: Vec<GrayImage> = (0..3)
        .map(|_| GrayImage::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0)).unwrap())
        .collect();
    let seqs = lines.iter().map(|l| vocab.encode(l)).collect();
    TrainStepFixture { cfg, images, seqs, captions: lines.to_vec() }
}

/// The exact scalar a train step differentiates: both encoders feeding the
/// symmetric contrastive loss, including the learned temperature.
fn train_step_loss(fx: &TrainStepFixture, params: &Params<f64>) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let binding = bind(&mut tape, params).unwrap();
    let img = encode_images(&mut tape, &binding, &fx.cfg.vision, &fx.images).unwrap();
    let txt = encode_texts(&mut tape, &binding, &fx.cfg.text, &fx.seqs).unwrap();
    let scale = binding.var("logit_scale").unwrap();
    let out = symmetric_loss(&mut tape, img, txt, scale, Some(&fx.captions), 0.5).unwrap();
    tape.value_scalar(out.total)
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let started = Instant::now();

    // One representative case per differentiable op.
    let mut per_op_worst = 0.0f64;
    let mut check = |name: &str, seed: u64, shapes: &[&[usize]], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var| {
        per_op_worst = per_op_worst.max(op_fd_worst_rel(name, seed, shapes, f));
    };
    check("add", 100, &[&[2, 3], &[2, 3]], &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub", 101, &[&[3, 2], &[3, 2]], &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", 102, &[&[2, 4], &[2, 4]], &|t, v| t.mul(v[0], v[1]).unwrap());
    check("mul_scalar", 103, &[&[3, 5]], &|t, v| t.mul_scalar(v[0], -1.37).unwrap());
    check("scale", 104, &[&[2, 3], &[1]], &|t, v| t.scale(v[0], v[1]).unwrap());
    check("exp", 105, &[&[3, 4]], &|t, v| t.exp(v[0]).unwrap());
    check("gelu", 106, &[&[2, 5]], &|t, v| t.gelu(v[0]).unwrap());
    check("add_row", 107, &[&[4, 5], &[5]], &|t, v| t.add_row(v[0], v[1]).unwrap());
    check("mul_row", 108, &[&[3, 4], &[4]], &|t, v| t.mul_row(v[0], v[1]).unwrap());
    check("add_tiled_rows", 109, &[&[6, 4], &[3, 4]], &|t, v| {
        t.add_tiled_rows(v[0], v[1]).unwrap()
    });
    check("matmul", 110, &[&[3, 4], &[4, 2]], &|t, v| t.matmul(v[0], v[1]).unwrap());
    check("transpose", 111, &[&[2, 5]], &|t, v| t.transpose(v[0]).unwrap());
    check("layer_norm", 112, &[&[3, 6]], &|t, v| t.layer_norm(v[0], 1e-5).unwrap());
    check("embedding_lookup", 113, &[&[7, 4]], &|t, v| {
        t.embedding_lookup(v[0], &[0, 3, 3, 6, 1]).unwrap()
    });
    check("l2_normalize_rows", 114, &[&[3, 4]], &|t, v| {
        t.l2_normalize_rows(v[0], 1e-12).unwrap()
    });
    check("softmax_rows", 115, &[&[2, 5]], &|t, v| t.softmax_rows(v[0]).unwrap());
    check("cross_entropy_rows", 116, &[&[4, 6]], &|t, v| {
        t.cross_entropy_rows(v[0], &[1, 0, 5, 3]).unwrap()
    });
    check("mean_all", 117, &[&[2, 3]], &|t, v| t.mean_all(v[0]).unwrap());
    check("sum_all", 118, &[&[3, 3]], &|t, v| t.sum_all(v[0]).unwrap());
    check("slice_block", 119, &[&[5, 6]], &|t, v| {
        t.slice_block(v[0], 1, 3, 2, 3).unwrap()
    });
    check("concat_rows", 120, &[&[1, 4], &[2, 4], &[3, 4]], &|t, v| t.concat_rows(v).unwrap());
    check("concat_cols", 121, &[&[3, 1], &[3, 4], &[3, 2]], &|t, v| t.concat_cols(v).unwrap());
    check("mean_rows_weighted", 122, &[&[4, 3]], &|t, v| {
        t.mean_rows_weighted(v[0], &[0.5, 1.5, 0.0, 2.0]).unwrap()
    });

    // End-to-end: the full train-step scalar, probed at a sample of
    // coordinates from every parameter tensor.
    let fx = train_step_fixture();
    let mut params: Params<f64> = Params::init(&fx.cfg, 11).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let binding = bind(&mut tape, &params).unwrap();
    let img = encode_images(&mut tape, &binding, &fx.cfg.vision, &fx.images).unwrap();
    let txt = encode_texts(&mut tape, &binding, &fx.cfg.text, &fx.seqs).unwrap();
    let scale = binding.var("logit_scale").unwrap();
    let out = symmetric_loss(&mut tape, img, txt, scale, Some(&fx.captions), 0.5).unwrap();
    tape.backward(out.total).unwrap();
    grads_into(&tape, &binding, &mut params).unwrap();

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut probed = 0usize;
    let mut end_worst = 0.0f64;
    for name in names {
        let (numel, grad) = {
            let t = params.get(&name).unwrap();
            (t.numel(), t.grad.clone().unwrap_or_else(|| panic!("no gradient reached {name}")))
        };
        let probes: Vec<usize> = if numel <= 6 {
            (0..numel).collect()
        } else {
            (0..6).map(|_| rng.random_range(0..numel)).collect()
        };
        for idx in probes {
            let x0 = params.get(&name).unwrap().data()[idx];
            let h = END_TO_END_H * x0.abs().max(1.0);
            params.get_mut(&name).unwrap().data_mut()[idx] = x0 + h;
            let up = train_step_loss(&fx, &params);
            params.get_mut(&name).unwrap().data_mut()[idx] = x0 - h;
            let down = train_step_loss(&fx, &params);
            params.get_mut(&name).unwrap().data_mut()[idx] = x0;
            let fd = (up - down) / (2.0 * h);
            let ad = grad[idx];
            let abs = (ad - fd).abs();
            if abs > ABS_FLOOR {
                let rel = abs / ad.abs().max(fd.abs());
                assert!(
                    rel < END_TO_END_REL,
                    "{name}[{idx}]: analytic {ad:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
                );
                end_worst = end_worst.max(rel);
            }
            probed += 1;
        }
    }
    assert!(probed > 150, "only {probed} coordinates probed");

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "gradient suite took {elapsed:?}");
    println!(
        "criterion 01 PASS: per-op FD worst rel {per_op_worst:.3e} (< 1e-4), \
         train-step FD worst rel {end_worst:.3e} over {probed} coords (< 1e-3), \
         suite {elapsed:.2?} (< 2 min)"
    );
}

// ── criterion 2: loss identities ──

#[test]
fn criterion_02_loss_identities_hold() {
    // Identical rows make every pairwise logit equal, so both cross-entropy
    // directions collapse to ln B.
    let mut worst_lnb = 0.0f64;
    for b in [2usize, 4, 8, 32] {
        let dim = 6;
        let row: Vec<f32> = {
            let mut v = vec![0.3f32, -0.4, 0.5, 0.1, -0.2, 0.6];
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        let data: Vec<f32> = (0..b).flat_map(|_| row.iter().copied()).collect();
        let mut tape: Tape<f32> = Tape::new();
        let img = tape.constant(vec![b, dim], data.clone()).unwrap();
        let txt = tape.constant(vec![b, dim], data).unwrap();
        let ls = tape.constant(vec![1, 1], vec![2.0f32.ln()]).unwrap();
        let out = symmetric_loss(&mut tape, img, txt, ls, None, 0.5).unwrap();
        let diff = (tape.value_scalar(out.total) as f64 - (b as f64).ln()).abs();
        assert!(diff < 1e-6, "uniform-logit loss for B={b}: off ln B by {diff:.3e}");
        worst_lnb = worst_lnb.max(diff);
    }

    // At lambda = 0.5 the loss is symmetric in its two embedding arguments.
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let mut worst_sym = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(2..12);
        let dim = rng.random_range(3..9);
        let a_data: Vec<f32> = (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b_data: Vec<f32> = (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ls_val: f32 = rng.random_range(0.0..3.0);
        let value = |x: &[f32], y: &[f32]| -> f64 {
            let mut tape: Tape<f32> = Tape::new();
            let xe = tape.constant(vec![b, dim], x.to_vec()).unwrap();
            let xn = tape.l2_normalize_rows(xe, 1e-12).unwrap();
            let ye = tape.constant(vec![b, dim], y.to_vec()).unwrap();
            let yn = tape.l2_normalize_rows(ye, 1e-12).unwrap();
            let ls = tape.constant(vec![1, 1], vec![ls_val]).unwrap();
            let out = symmetric_loss(&mut tape, xn, yn, ls, None, 0.5).unwrap();
            tape.value_scalar(out.total) as f64
        };
        let diff = (value(&a_data, &b_data) - value(&b_data, &a_data)).abs();
        assert!(diff < 1e-6, "transpose symmetry broken by {diff:.3e}");
        worst_sym = worst_sym.max(diff);
    }
    println!(
        "criterion 02 PASS: uniform-logit loss within {worst_lnb:.3e} of ln B for B in {{2,4,8,32}}, \
         lambda=0.5 symmetry within {worst_sym:.3e} on 100 random batches (both < 1e-6)"
    );
}

// ── criterion 3: oracle equivalences ──

#[test]
fn criterion_03_oracles_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3030);

    // Batched pairwise logits vs a scalar triple loop.
    let (b, k, dim) = (7usize, 5usize, 9usize);
    let img: Vec<f32> = (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let txt: Vec<f32> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ls: f32 = 1.1;
    let mut tape: Tape<f32> = Tape::new();
    let iv = tape.constant(vec![b, dim], img.clone()).unwrap();
    let tv = tape.constant(vec![k, dim], txt.clone()).unwrap();
    let lv = tape.constant(vec![1, 1], vec![ls]).unwrap();
    let logits = aclip_core::contrastive::pairwise_logits(&mut tape, iv, tv, lv).unwrap();
    let batched = tape.value(logits).to_vec();
    let mut worst_logit = 0.0f64;
    for i in 0..b {
        for j in 0..k {
            let mut dot = 0.0f64;
            for d in 0..dim {
                dot += img[i * dim + d] as f64 * txt[j * dim + d] as f64;
            }
            let scalar = (ls as f64).exp() * dot;
            let diff = (batched[i * k + j] as f64 - scalar).abs();
            assert!(diff < 1e-6, "logit [{i},{j}] differs from scalar loop by {diff:.3e}");
            worst_logit = worst_logit.max(diff);
        }
    }

    // Top-1-in-target-set accuracy vs a brute-force recount.
    let labels = ["a", "b", "c", "d", "e"];
    let mut acc_instances = 0usize;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let preds: Vec<Prediction<f32>> = (0..n)
            .map(|_| {
                let top = rng.random_range(0..labels.len());
                Prediction {
                    top_index: top,
                    top_label: labels[top].to_string(),
                    scores: vec![0.2; labels.len()],
                    logits: vec![0.0; labels.len()],
                }
            })
            .collect();
        let targets: Vec<Vec<String>> = (0..n)
            .map(|_| {
                let size = rng.random_range(1..4);
                let mut set: Vec<String> = labels
                    .choose_multiple(&mut rng, size)
                    .map(|s| s.to_string())
                    .collect();
                set.sort();
                set
            })
            .collect();
        let fast = accuracy(&preds, &targets).unwrap();
        let mut hits = 0usize;
        for (p, t) in preds.iter().zip(&targets) {
            if t.iter().any(|l| *l == p.top_label) {
                hits += 1;
            }
        }
        let brute = hits as f64 / n as f64;
        assert_eq!(fast, brute, "accuracy differs from brute-force count");
        acc_instances += 1;
    }

    // Rank-based AUC vs O(N^2) pair counting, ties included.
    let mut worst_auc = 0.0f64;
    for round in 0..200 {
        let n = rng.random_range(2..40);
        // Quantized scores force ties; rounds alternate tie density.
        let levels: f64 = if round % 2 == 0 { 4.0 } else { 64.0 };
        let scores: Vec<f64> =
            (0..n).map(|_| (rng.random_range(0.0..1.0) * levels).floor() / levels).collect();
        let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        truth[0] = true;
        truth[if n > 1 { 1 } else { 0 }] = false;
        if n == 1 {
            continue;
        }
        let (fast, _) = ovr_auc(&scores, &truth).unwrap();
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for i in 0..n {
            if !truth[i] {
                continue;
            }
            for j in 0..n {
                if truth[j] {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        let brute = wins / pairs;
        let diff = (fast - brute).abs();
        assert!(diff < 1e-9, "AUC differs from pair counting by {diff:.3e}");
        worst_auc = worst_auc.max(diff);
    }

    // Tiled CLAHE vs the naive per-pixel reference.
    let mut worst_clahe = 0.0f64;
    for i in 0..20 {
        let size = if i % 2 == 0 { 32 } else { 64 };
        let mut local = ChaCha8Rng::seed_from_u64(5000 + i);
        let img =
            GrayImage::from_fn(size, size, |_, _| local.random_range(0.0..1.0)).unwrap();
        let tiles = if size == 32 { 4 } else { 8 };
        let clip = local.random_range(1.0..4.0);
        let fast = clahe(&img, tiles, clip).unwrap();
        let naive = clahe_reference(&img, tiles, clip).unwrap();
        for (a, b) in fast.pixels().iter().zip(naive.pixels()) {
            let diff = (*a as f64 - *b as f64).abs();
            assert!(diff < 1e-6, "CLAHE differs from reference by {diff:.3e}");
            worst_clahe = worst_clahe.max(diff);
        }
    }

    println!(
        "criterion 03 PASS: logits vs scalar loop within {worst_logit:.3e} (1e-6), \
         accuracy exact on {acc_instances} instances, AUC vs pair counting within \
         {worst_auc:.3e} (1e-9) on 200 instances, CLAHE vs reference within \
         {worst_clahe:.3e} (1e-6) on 20 images"
    );
}

// ── criterion 4: tokenizer contract ──

#[test]
fn criterion_04_tokenizer_contract_holds() {
    // Every caption the generator ever emits encodes to the fixed length.
    let records = &BASE_DATA.records;
    let vocab = default_vocab(&split(records, "train"));
    let mut captions = 0usize;
    for record in records {
        for caption in &record.captions {
            let seq = vocab.encode(caption);
            assert_eq!(seq.ids.len(), CONTEXT_LEN, "caption {caption:?}");
            assert_eq!(seq.ids[0], BOS_ID);
            assert!(seq.true_length <= CONTEXT_LEN);
            assert_eq!(seq.ids[seq.true_length - 1], EOS_ID);
            captions += 1;
        }
    }

    // Boundary content lengths: pad, exact fit, one-over, far-over.
    let words: Vec<String> = (0..210).map(|i| format!("w{i}")).collect();
    let boundary_vocab = Vocabulary::build(&[words.join(" ")], 512).unwrap();
    for n_words in [1usize, 75, 76, 77, 200] {
        let text = words[..n_words].join(" ");
        let seq = boundary_vocab.encode(&text);
        assert_eq!(seq.ids.len(), CONTEXT_LEN);
        assert_eq!(seq.ids[0], BOS_ID);
        // BOS + content + EOS, capped at the context length.
        let expect_len = (n_words + 2).min(CONTEXT_LEN);
        assert_eq!(seq.true_length, expect_len, "content length {n_words}");
        assert_eq!(seq.ids[expect_len - 1], EOS_ID);
        let kept = expect_len - 2;
        for (k, id) in seq.ids[1..1 + kept].iter().enumerate() {
            assert_eq!(*id, boundary_vocab.id_of(&words[k]).unwrap(), "word {k} of {n_words}");
        }
        for id in &seq.ids[expect_len..] {
            assert_eq!(*id, PAD_ID);
        }
    }
    println!(
        "criterion 04 PASS: {captions} generated captions all encode to {CONTEXT_LEN} ids; \
         trim/pad verified at content lengths 1, 75, 76, 77, 200"
    );
}

// ── criterion 5: augmentation contract ──

#[test]
fn criterion_05_augmentation_contract_holds() {
    // Exactly 10 pairwise-distinct image variants per seeded policy draw.
    let policy = PolicyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(550);
    let specs = sample_policy(&mut rng, &policy).unwrap();
    assert_eq!(specs.len(), 10);
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            assert_ne!(specs[i], specs[j], "variants {i} and {j} collide");
        }
    }
    let mut img_rng = ChaCha8Rng::seed_from_u64(551);
    let img = GrayImage::from_fn(64, 64, |_, _| img_rng.random_range(0.0..1.0)).unwrap();
    let outputs = apply_all(&img, &specs, policy.translate_max).unwrap();
    assert_eq!(outputs.len(), 10);

    // Exactly 10 prompts per generated sample.
    for record in BASE_DATA.records.iter().take(200) {
        assert_eq!(record.captions.len(), PROMPTS_PER_IMAGE);
    }

    // Identity parameters leave pixels bitwise untouched.
    assert_eq!(contrast(&img, 1.0).unwrap().pixels(), img.pixels());
    assert_eq!(gamma(&img, 1.0).unwrap().pixels(), img.pixels());
    assert_eq!(rotate(&img, 0.0).unwrap().pixels(), img.pixels());
    assert_eq!(translate(&img, 0, 0, 16).unwrap().pixels(), img.pixels());
    let identity = AugmentSpec::parse("contrast(1)|gamma(1)|rotate(0)|translate(0,0)").unwrap();
    assert_eq!(identity.apply(&img, 16).unwrap().pixels(), img.pixels());

    // Re-seeding reproduces the same specs and the same output bytes.
    let mut rng_b = ChaCha8Rng::seed_from_u64(550);
    let specs_b = sample_policy(&mut rng_b, &policy).unwrap();
    assert_eq!(specs, specs_b);
    let outputs_b = apply_all(&img, &specs_b, policy.translate_max).unwrap();
    for (a, b) in outputs.iter().zip(&outputs_b) {
        assert_eq!(a.pixels(), b.pixels(), "seeded replay diverged");
    }
    println!(
        "criterion 05 PASS: 10 distinct image variants and {PROMPTS_PER_IMAGE} prompts per sample, \
         identity parameters bitwise-preserve input, seeded policies replay byte-identically"
    );
}

// ── criterion 6: end-to-end training quality ──

#[test]
fn criterion_06_default_training_reaches_targets() {
    let model = &*MSA_MODEL;
    assert!(
        model.test_organ_acc >= 0.80,
        "organ accuracy {:.4} below 0.80",
        model.test_organ_acc
    );
    assert!(
        model.test_station_acc >= 0.90,
        "station accuracy {:.4} below 0.90",
        model.test_station_acc
    );
    assert!(
        model.wall <= Duration::from_secs(20 * 60),
        "training took {:?}, budget 20 min",
        model.wall
    );
    println!(
        "criterion 06 PASS: default config reaches organ {:.4} (>= 0.80) and station {:.4} \
         (>= 0.90) on the test split in {:.1?} (<= 20 min)",
        model.test_organ_acc, model.test_station_acc, model.wall
    );
}

// ── criterion 7: ablation ladder on a distribution-shifted test set ──

struct LadderPoint {
    organ: f64,
    station: f64,
}

struct LadderSeed {
    seed: u64,
    by_mode: BTreeMap<&'static str, LadderPoint>,
}

static LADDER: LazyLock<Vec<LadderSeed>> = LazyLock::new(|| {
    let data = make_dataset(&GenConfig {
        n_train: 600,
        n_val: 0,
        n_test: 250,
        seed: 29,
        image_size: 64,
        organs_min: 1,
        organs_max: 3,
    });
    // Rotation +-45 deg, gamma in [0.5, 2], translation +-12.5%: the shifted
    // copy every ladder model is scored on.
    let shifted_dir = TempDir::new().expect("tempdir");
    let map = OrganStationMap::default_map();
    let shifted_manifest = augment_dataset_copy(
        &data.manifest,
        &map,
        &shift_policy(64),
        71,
        shifted_dir.path(),
    )
    .expect("shifted copy");
    let shifted = load_manifest(&shifted_manifest, &map).expect("shifted manifest");
    let shifted_test = split(&shifted, "test");

    let mut out = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut by_mode = BTreeMap::new();
        for (tag, mode) in [
            ("m", AblationMode::Modality),
            ("ms", AblationMode::ModalityStation),
            ("msa", AblationMode::ModalityStationAugment),
        ] {
            let cfg = TrainConfig { seed, mode, epochs: 6, ..TrainConfig::default() };
            let trained = train_model(&data, &cfg, "test");
            let report = evaluate(
                &trained.params,
                &trained.model_cfg,
                &trained.vocab,
                &shifted_test,
                shifted_dir.path(),
                &map,
                tag,
            )
            .expect("shifted evaluation");
            by_mode.insert(
                tag,
                LadderPoint { organ: report.organ.accuracy, station: report.station.accuracy },
            );
        }
        out.push(LadderSeed { seed, by_mode });
    }
    out
});

#[test]
fn criterion_07_ablation_trend_holds() {
    let ladder = &*LADDER;
    let mut holds = 0usize;
    let mut lines = Vec::new();
    for entry in ladder {
        let m = &entry.by_mode["m"];
        let ms = &entry.by_mode["ms"];
        let msa = &entry.by_mode["msa"];
        let organ_gap = msa.organ - ms.organ;
        let station_gain = ms.station > m.station;
        let ok = organ_gap >= 0.10 && station_gain;
        if ok {
            holds += 1;
        }
        lines.push(format!(
            "seed {}: shifted organ msa {:.3} vs ms {:.3} (gap {:+.3}), \
             station ms {:.3} vs m {:.3} -> {}",
            entry.seed,
            msa.organ,
            ms.organ,
            organ_gap,
            ms.station,
            m.station,
            if ok { "holds" } else { "fails" }
        ));
    }
    for line in &lines {
        println!("  {line}");
    }
    assert!(holds >= 2, "trend held in only {holds} of 3 seeds:\n{}", lines.join("\n"));
    println!(
        "criterion 07 PASS: augment-mode organ gain >= 10 points on the shifted test and \
         station-caption gain over the station-free mode held in {holds} of 3 seeds (need >= 2)"
    );
}

// ── criterion 8: station-consistent captions outscore contradictory twins ──

#[test]
fn criterion_08_station_consistency_preferred() {
    let model = &*MSA_MODEL;
    let map = OrganStationMap::default_map();
    let bank = TemplateBank::default_bank();
    let template = bank.complete()[0].clone();
    let test_records: Vec<ManifestRecord> =
        split(&BASE_DATA.records, "test").into_iter().take(100).collect();
    assert_eq!(test_records.len(), 100);

    let images: Vec<GrayImage> = test_records
        .iter()
        .map(|r| GrayImage::load_png(&BASE_DATA.root.join(&r.image_path)).unwrap())
        .collect();
    let img_emb = embed_images(&model.params, &model.model_cfg, &images).unwrap();
    let dim = model.model_cfg.vision.embed_dim;

    let mut consistent = Vec::with_capacity(100);
    let mut contradictory = Vec::with_capacity(100);
    for record in &test_records {
        let label = record.label_record(&map).unwrap();
        let facts = PromptFacts::from_record(&label);
        let wrong_station = STATIONS
            .iter()
            .find(|s| **s != label.station)
            .expect("five stations exist")
            .to_string();
        let mut wrong = facts.clone();
        wrong.station = Some(wrong_station);
        consistent.push(render(&template, &facts).unwrap());
        contradictory.push(render(&template, &wrong).unwrap());
    }
    let all: Vec<String> = consistent.iter().chain(&contradictory).cloned().collect();
    let seqs: Vec<_> = all.iter().map(|c| model.vocab.encode(c)).collect();
    let txt_emb = embed_texts(&model.params, &model.model_cfg, &seqs).unwrap();

    let dot = |i: usize, j: usize| -> f64 {
        let mut d = 0.0f64;
        for k in 0..dim {
            d += img_emb[i * dim + k] as f64 * txt_emb[j * dim + k] as f64;
        }
        d
    };
    let mut wins = 0usize;
    for i in 0..100 {
        if dot(i, i) > dot(i, 100 + i) {
            wins += 1;
        }
    }
    assert!(wins >= 90, "consistent caption won on only {wins} of 100 images");
    println!(
        "criterion 08 PASS: station-consistent caption outscored its contradictory twin on \
         {wins} of 100 test images (need >= 90)"
    );
}

// ── criterion 9: chance level at random init ──

#[test]
fn criterion_09_random_init_scores_at_chance() {
    // Single-organ pool, then a station-balanced draw: 100 samples per
    // station, organs as even as the taxonomy allows.
    let pool = make_dataset(&GenConfig {
        n_train: 1200,
        n_val: 0,
        n_test: 0,
        seed: 4242,
        image_size: 64,
        organs_min: 1,
        organs_max: 1,
    });
    let map = OrganStationMap::default_map();
    let mut by_organ: BTreeMap<String, Vec<&ManifestRecord>> = BTreeMap::new();
    for record in &pool.records {
        assert_eq!(record.organs.len(), 1);
        by_organ.entry(record.organs[0].clone()).or_default().push(record);
    }

    let mut picked: Vec<ManifestRecord> = Vec::new();
    for station in STATIONS {
        let organs = map.organs_of(station);
        let per = 100 / organs.len();
        let mut extra = 100 % organs.len();
        for organ in organs {
            let want = per + usize::from(extra > 0);
            extra = extra.saturating_sub(1);
            let have = by_organ.get(organ).map_or(0, |v| v.len());
            assert!(have >= want, "pool has only {have} single-{organ} scenes, need {want}");
            picked.extend(by_organ[organ][..want].iter().map(|r| (*r).clone()));
        }
    }
    assert_eq!(picked.len(), 500);

    let vocab = default_vocab(&picked);
    let model_cfg = RunConfig::default().model_config(vocab.len());
    let params = Params::<f32>::init(&model_cfg, 999).unwrap();
    let report =
        evaluate(&params, &model_cfg, &vocab, &picked, &pool.root, &map, "random-init").unwrap();

    let organ = report.organ.accuracy;
    let station = report.station.accuracy;
    assert!(
        (organ - 0.05).abs() <= 0.05,
        "random-init organ accuracy {organ:.4} outside 0.05 +- 0.05"
    );
    assert!(
        (station - 0.20).abs() <= 0.07,
        "random-init station accuracy {station:.4} outside 0.20 +- 0.07"
    );
    println!(
        "criterion 09 PASS: random-init scores organ {organ:.4} (0.05 +- 0.05) and station \
         {station:.4} (0.20 +- 0.07) on 500 station-balanced single-organ samples"
    );
}

// ── criterion 10: byte reproducibility ──

const REPRO_CONF: &str = "\
gen.train = 10
gen.val = 3
gen.test = 3
gen.seed = 9
gen.image_size = 64
model.image_size = 64
model.patch_size = 16
model.width = 16
model.depth = 1
model.heads = 2
model.mlp_ratio = 2
model.embed_dim = 16
model.vocab_max = 512
train.batch_size = 4
train.epochs = 2
train.mode = msa
";

fn run_single_threaded(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_aclip"))
        .args(args)
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .expect("binary should spawn");
    assert!(
        out.status.success(),
        "aclip {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Byte-compare every file under two directories, recursively.
fn assert_trees_identical(a: &Path, b: &Path) -> usize {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                out.push(path.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut files_a = Vec::new();
    let mut files_b = Vec::new();
    walk(a, a, &mut files_a);
    walk(b, b, &mut files_b);
    files_a.sort();
    files_b.sort();
    assert_eq!(files_a, files_b, "file sets differ between {a:?} and {b:?}");
    for rel in &files_a {
        let ba = fs::read(a.join(rel)).unwrap();
        let bb = fs::read(b.join(rel)).unwrap();
        assert_eq!(ba, bb, "{} differs between runs", rel.display());
    }
    files_a.len()
}

#[test]
fn criterion_10_pipeline_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("repro.conf");
    fs::write(&conf, REPRO_CONF).unwrap();
    let conf = conf.to_str().unwrap();

    let mut compared = 0usize;
    let data_a = dir.path().join("data_a");
    let data_b = dir.path().join("data_b");
    for data in [&data_a, &data_b] {
        run_single_threaded(&["gen-data", "--out", data.to_str().unwrap(), "--config", conf]);
    }
    compared += assert_trees_identical(&data_a, &data_b);

    let manifest = data_a.join("manifest.jsonl");
    let manifest = manifest.to_str().unwrap();
    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    for run in [&run_a, &run_b] {
        run_single_threaded(&["train", "--data", manifest, "--out", run.to_str().unwrap(), "--config", conf]);
    }
    compared += assert_trees_identical(&run_a, &run_b);

    let ckpt = run_a.join("model.ckpt");
    let report_a = dir.path().join("report_a");
    let report_b = dir.path().join("report_b");
    for report in [&report_a, &report_b] {
        run_single_threaded(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            manifest,
            "--split",
            "test",
            "--report",
            report.to_str().unwrap(),
        ]);
    }
    compared += assert_trees_identical(&report_a, &report_b);

    println!(
        "criterion 10 PASS: gen-data, single-threaded train, eval, and report emission \
         reproduced byte-identically across reruns ({compared} files compared)"
    );
}
