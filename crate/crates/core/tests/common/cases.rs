//! Finite-difference gradient cases. Each returns the maximum relative error
//! for one random draw identified by `seed`.

use cuedseq::alphabet::{Language, PhonemeAlphabet};
use cuedseq::autodiff::{ParamStore, Tensor};
use cuedseq::contrastive::nt_xent_loss;
use cuedseq::encoder::{encode, init_encoder, init_projection, project, EncoderConfig};
use cuedseq::finetune::{classify, init_classifier, FinetuneConfig};
use cuedseq::fusion::{fuse, hand_pos_mlp, init_fusion_streams, lip_cnn, FusionConfig, LipCnnConfig};
use cuedseq::rng::Rng;
use cuedseq::sequence::{
    ctc_loss, encode_to_logits, init_bilstm, init_san, init_sequence, lstm_param_name, lstm_step, san_forward,
    LstmWeights, SequenceConfig, BLANK,
};

use super::{check_gradients, check_param_gradients, probe, random_tensor};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub type Case = (&'static str, fn(u64) -> f64);

pub fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", matmul),
        ("pointwise", pointwise),
        ("conv2d", conv2d),
        ("structural", structural),
        ("channel_affine+pool", channel_affine_pool),
        ("cross_entropy", cross_entropy),
        ("nt_xent", nt_xent),
        ("ctc", ctc_logits),
    ]
}

pub fn composite_cases() -> Vec<Case> {
    vec![
        ("encoder", encoder_params),
        ("encoder input", encoder_input),
        ("projection+classifier", projection_classifier),
        ("lstm chain", lstm_chain),
        ("san block", san_params),
        ("san input", san_input),
        ("ctc∘model", ctc_model_params),
        ("ctc∘model input", ctc_model_input),
        ("lip cnn", lip_cnn_params),
        ("position mlp+fuse", pos_fuse_params),
    ]
}

fn matmul(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let a = random_tensor(&[3, 4], &mut rng, 1.0);
    let b = random_tensor(&[4, 2], &mut rng, 1.0);
    check_gradients(&[a, b], EPS, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let yt = t.matmul_nt(v[0], v[0])?;
        let p = probe(t, y, seed)?;
        let q = probe(t, yt, seed + 1)?;
        t.add(p, q)
    })
}

fn pointwise(seed: u64) -> f64 {
    let mut rng = Rng::new(100 + seed);
    let a = random_tensor(&[2, 5], &mut rng, 1.0);
    let b = random_tensor(&[2, 5], &mut rng, 1.0);
    check_gradients(&[a, b], EPS, |t, v| {
        let s = t.add(v[0], v[1])?;
        let m = t.mul(s, v[1])?;
        let sg = t.sigmoid(m);
        let th = t.tanh(v[0]);
        let sc = t.scale(th, 1.7);
        let r = t.relu(v[1]);
        let d = t.sub(sg, sc)?;
        let e = t.mul(d, r)?;
        let f = t.add(e, sc)?;
        probe(t, f, seed)
    })
}

fn conv2d(seed: u64) -> f64 {
    let mut rng = Rng::new(200 + seed);
    let x = random_tensor(&[2, 6, 5], &mut rng, 1.0);
    let k = random_tensor(&[3, 2, 3, 3], &mut rng, 0.5);
    let (stride, pad) = (1 + seed as usize % 2, seed as usize % 3);
    check_gradients(&[x, k], EPS, |t, v| {
        let y = t.conv2d(v[0], v[1], stride, pad)?;
        probe(t, y, seed)
    })
}

fn structural(seed: u64) -> f64 {
    let mut rng = Rng::new(300 + seed);
    let x = random_tensor(&[4, 6], &mut rng, 1.0);
    let b = random_tensor(&[6], &mut rng, 1.0);
    let g = random_tensor(&[3], &mut rng, 1.0);
    check_gradients(&[x, b, g], EPS, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        let tr = t.transpose(y)?;
        let sc = t.slice_cols(tr, 1, 3)?;
        let sr = t.slice_rows(y, 2, 2)?;
        let sr_t = t.transpose(sr)?;
        let cc = t.concat_cols(&[sc, sr_t])?;
        let cr = t.concat_rows(&[cc, cc])?;
        let sm = t.softmax_rows(cr)?;
        let nr = t.normalize_rows(y)?;
        let gb = t.slice_cols(v[0], 0, 3)?;
        let gb = t.reshape(gb, &[12])?;
        let gb = t.reshape(gb, &[4, 3])?;
        let ln = t.layer_norm_rows(gb, v[2], v[2], 1e-5)?;
        let p1 = probe(t, sm, seed)?;
        let p2 = probe(t, nr, seed + 1)?;
        let p3 = probe(t, ln, seed + 2)?;
        let s = t.add(p1, p2)?;
        let s = t.add(s, p3)?;
        let m = t.mean(y);
        t.add(s, m)
    })
}

fn channel_affine_pool(seed: u64) -> f64 {
    let mut rng = Rng::new(400 + seed);
    let x = random_tensor(&[3, 4, 4], &mut rng, 1.0);
    let s = random_tensor(&[3], &mut rng, 1.0);
    let b = random_tensor(&[3], &mut rng, 1.0);
    check_gradients(&[x, s, b], EPS, |t, v| {
        let y = t.channel_affine(v[0], v[1], v[2])?;
        let y = t.tanh(y);
        let p = t.global_avg_pool(y)?;
        probe(t, p, seed)
    })
}

fn cross_entropy(seed: u64) -> f64 {
    let mut rng = Rng::new(500 + seed);
    let logits = random_tensor(&[3, 4], &mut rng, 2.0);
    check_gradients(&[logits], EPS, |t, v| t.cross_entropy(v[0], &[1, 3, 0]))
}

fn nt_xent(seed: u64) -> f64 {
    let mut rng = Rng::new(600 + seed);
    let n = 1 + seed as usize % 4;
    let z = random_tensor(&[2 * n, 3], &mut rng, 1.0);
    check_gradients(&[z], EPS, |t, v| nt_xent_loss(t, v[0], 0.5))
}

fn ctc_logits(seed: u64) -> f64 {
    let mut rng = Rng::new(700 + seed);
    let frames = 3 + seed as usize % 5;
    let logits = random_tensor(&[frames, 4], &mut rng, 1.5);
    let target = [1 + seed as usize % 3, 2, 2];
    let target = &target[..(frames - 1).min(2) + usize::from(frames >= 5)];
    check_gradients(&[logits], EPS, |t, v| ctc_loss(t, v[0], target, BLANK))
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: (8, 8),
        stem_channels: 2,
        block_channels: vec![2, 3],
        blocks_per_stage: 1,
        feature_dim: 3,
        projection_dim: 2,
    }
}

fn encoder_params(seed: u64) -> f64 {
    let cfg = tiny_encoder();
    let mut rng = Rng::new(1000 + seed);
    let params = init_encoder(&cfg, &mut rng).unwrap();
    let x = random_tensor(&[3, 8, 8], &mut rng, 1.0);
    check_param_gradients(&params, EPS, 6, seed, |t, b| {
        let x = t.constant(x.clone());
        let h = encode(t, b, &cfg, x)?;
        probe(t, h, seed)
    })
}

fn encoder_input(seed: u64) -> f64 {
    let cfg = tiny_encoder();
    let mut rng = Rng::new(1050 + seed);
    let params = init_encoder(&cfg, &mut rng).unwrap();
    let x = random_tensor(&[3, 8, 8], &mut rng, 1.0);
    check_gradients(&[x], EPS, |t, v| {
        let b = params.bind_frozen(t);
        let h = encode(t, &b, &cfg, v[0])?;
        probe(t, h, seed)
    })
}

fn projection_classifier(seed: u64) -> f64 {
    let cfg = tiny_encoder();
    let ft = FinetuneConfig { hidden_dim: 5, num_classes: 4, ..FinetuneConfig::default() };
    let mut rng = Rng::new(1100 + seed);
    let mut params = init_projection(&cfg, &mut rng);
    params.merge(&init_classifier(cfg.feature_dim, &ft, &mut rng));
    let h = random_tensor(&[4, 3], &mut rng, 1.0);
    let labels = [0, 3, 1, 1];
    check_param_gradients(&params, EPS, 100, seed, |t, b| {
        let h = t.constant(h.clone());
        let z = project(t, b, h)?;
        let logits = classify(t, b, h)?;
        let ce = t.cross_entropy(logits, &labels)?;
        let pz = probe(t, z, seed)?;
        t.add(ce, pz)
    })
}

/// Three chained LSTM steps.
fn lstm_chain(seed: u64) -> f64 {
    let (d_in, hid) = (3, 4);
    let mut rng = Rng::new(1200 + seed);
    let mut params = ParamStore::new();
    init_bilstm(&mut params, "t.", d_in, 2 * hid, 1, &mut rng);
    let xs: Vec<_> = (0..3).map(|_| random_tensor(&[1, d_in], &mut rng, 1.0)).collect();
    let prefix = lstm_param_name("t.", 0, false, "");
    let prefix = prefix.trim_end_matches('.').to_string();
    check_param_gradients(&params, EPS, 100, seed, |t, b| {
        let w = LstmWeights::from_bound(b, &prefix)?;
        let mut h = t.constant(Tensor::zeros(&[1, hid]));
        let mut c = h;
        for x in &xs {
            let x = t.constant(x.clone());
            (h, c) = lstm_step(t, x, h, c, &w)?;
        }
        let hc = t.concat_cols(&[h, c])?;
        probe(t, hc, seed)
    })
}

/// One SAN block at `T = 3`, `d_model = 16`, two heads, with non-trivial
/// norm parameters.
fn san_setup(seed: u64) -> (ParamStore, Tensor) {
    let mut rng = Rng::new(1300 + seed);
    let mut params = ParamStore::new();
    init_san(&mut params, "t.", 16, 1, &mut rng);
    for (name, t) in params.iter_mut() {
        if name.contains(".ln") {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    let x = random_tensor(&[3, 16], &mut rng, 1.0);
    (params, x)
}

fn san_params(seed: u64) -> f64 {
    let (params, x) = san_setup(seed);
    check_param_gradients(&params, EPS, 24, seed, |t, b| {
        let x = t.constant(x.clone());
        let y = san_forward(t, x, b, "t.", 1, 2)?;
        probe(t, y, seed)
    })
}

fn san_input(seed: u64) -> f64 {
    let (params, x) = san_setup(seed);
    check_gradients(&[x], EPS, |t, v| {
        let b = params.bind_frozen(t);
        let y = san_forward(t, v[0], &b, "t.", 1, 2)?;
        probe(t, y, seed)
    })
}

fn ctc_model_setup(seed: u64) -> (SequenceConfig, ParamStore, Tensor, [usize; 2]) {
    let cfg = SequenceConfig { d_in: 16, d_model: 16, heads: 2, vocab: 4, ..SequenceConfig::default() };
    let mut rng = Rng::new(1400 + seed);
    let params = init_sequence(&cfg, &mut rng).unwrap();
    let c = random_tensor(&[4, 16], &mut rng, 1.0);
    (cfg, params, c, [1 + seed as usize % 3, 2])
}

/// CTC on the output layer over the full Bi-LSTM + SAN encoder, `T = 4`.
fn ctc_model_params(seed: u64) -> f64 {
    let (cfg, params, c, target) = ctc_model_setup(seed);
    check_param_gradients(&params, EPS, 8, seed, |t, b| {
        let c = t.constant(c.clone());
        let logits = encode_to_logits(t, b, &cfg, c)?;
        ctc_loss(t, logits, &target, BLANK)
    })
}

fn ctc_model_input(seed: u64) -> f64 {
    let (cfg, params, c, target) = ctc_model_setup(seed);
    check_gradients(&[c], EPS, |t, v| {
        let b = params.bind_frozen(t);
        let logits = encode_to_logits(t, &b, &cfg, v[0])?;
        ctc_loss(t, logits, &target, BLANK)
    })
}

pub fn small_fusion() -> FusionConfig {
    let alphabet = PhonemeAlphabet::builtin(Language::French);
    let cfg = FusionConfig {
        lip: LipCnnConfig { roi_size: 24, d_lip: 4, ..LipCnnConfig::default() },
        pos_hidden: 4,
        d_pos: 3,
        sequence: SequenceConfig { d_model: 8, heads: 2, bilstm_layers: 1, san_layers: 1, ..SequenceConfig::default() },
        ..FusionConfig::default()
    };
    FusionConfig { sequence: cfg.sequence_for(&alphabet), ..cfg }
}

/// Lip CNN over two 24×24 frames.
fn lip_cnn_params(seed: u64) -> f64 {
    let cfg = small_fusion();
    let mut rng = Rng::new(1500 + seed);
    let params = init_fusion_streams(&cfg, 3, &mut rng).unwrap().subset("fus.lip.");
    let frames: Vec<_> = (0..2).map(|_| random_tensor(&[3, 24, 24], &mut rng, 1.0)).collect();
    check_param_gradients(&params, EPS, 12, seed, |t, b| {
        let fs: Vec<_> = frames.iter().map(|f| t.constant(f.clone())).collect();
        let y = lip_cnn(t, b, &cfg.lip, &fs)?;
        probe(t, y, seed)
    })
}

fn pos_fuse_params(seed: u64) -> f64 {
    let cfg = small_fusion();
    let mut rng = Rng::new(1550 + seed);
    let mut params = init_fusion_streams(&cfg, 3, &mut rng).unwrap();
    params.remove("fus.lip.conv1.w");
    params.remove("fus.lip.conv2.w");
    params.remove("fus.lip.fc.w");
    params.remove("fus.lip.fc.b");
    let coords = random_tensor(&[3, 2], &mut rng, 0.5);
    let lip = random_tensor(&[3, cfg.lip.d_lip], &mut rng, 1.0);
    let shape = random_tensor(&[3, 3], &mut rng, 1.0);
    check_param_gradients(&params, EPS, 100, seed, |t, b| {
        let c = t.constant(coords.clone());
        let pos = hand_pos_mlp(t, b, c)?;
        let l = t.constant(lip.clone());
        let s = t.constant(shape.clone());
        let y = fuse(t, b, l, pos, s)?;
        probe(t, y, seed)
    })
}

/// Runs every case for `SEEDS` seeds; returns the failures.
pub fn sweep(cases: &[Case]) -> Vec<String> {
    let mut failures = Vec::new();
    for (name, case) in cases {
        for seed in 0..SEEDS {
            let err = case(seed);
            if !(err < TOL) {
                failures.push(format!("{name} seed {seed}: {err:.3e}"));
            }
        }
    }
    failures
}
