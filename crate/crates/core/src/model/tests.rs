use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn cfg(v: usize, d: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        embed_dim: d,
        hidden_dim: d,
        layers,
        heads,
        ffn_dim: 2 * d,
        max_seq_len: 16,
        arch: Architecture::Encoder,
        precision: Precision::F64,
        tie_weights: true,
        mimic_head: false,
    }
}

fn zero_params(c: &ModelConfig) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(c, 0).unwrap();
    for t in &mut p.tensors {
        let fill = if t.name.ends_with(".gain") { 1.0 } else { 0.0 };
        t.data.iter_mut().for_each(|v| *v = fill);
    }
    p
}

#[test]
fn init_is_deterministic_and_checked() {
    let c = ModelConfig::tiny(50);
    let a = ModelParams::<f64>::init(&c, 7).unwrap();
    let b = ModelParams::<f64>::init(&c, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, ModelParams::<f64>::init(&c, 8).unwrap());
    let mut bad = c.clone();
    bad.heads = 5;
    assert!(matches!(ModelParams::<f64>::init(&bad, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn init_statistics_match_target_gaussian() {
    let mut c = ModelConfig::tiny(4000);
    c.layers = 0;
    let p = ModelParams::<f64>::init(&c, 3).unwrap();
    let e = p.token_embeddings();
    assert!(e.len() >= 100_000);
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let std = (e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    // standard errors of the mean and of the sample std
    assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt());
    assert!((std - INIT_STD).abs() < 3.0 * INIT_STD / (2.0 * n).sqrt());
}

#[test]
fn zero_weights_make_states_input_independent() {
    let c = cfg(20, 8, 2, 2);
    let p = zero_params(&c);
    let s = forward(&p, &ModelInput::encoder(&[3, 9, 1, 17])).unwrap();
    for row in s.chunks(8) {
        assert_eq!(row, &s[..8]);
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let p = ModelParams::<f64>::init(&cfg(10, 8, 1, 2), 0).unwrap();
    assert!(matches!(
        forward(&p, &ModelInput::encoder(&[1, 10])),
        Err(Error::TokenOutOfRange { id: 10, position: 1, .. })
    ));
    let long = vec![1u32; 17];
    assert!(matches!(
        forward(&p, &ModelInput::encoder(&long)),
        Err(Error::SequenceTooLong { len: 17, max: 16 })
    ));
}

#[test]
fn batch_order_does_not_change_outputs() {
    let p = ModelParams::<f64>::init_with_std(&cfg(30, 8, 2, 2), 1, 0.3).unwrap();
    let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9]];
    let fwd: Vec<ModelInput> = seqs.iter().map(|s| ModelInput::encoder(s)).collect();
    let rev: Vec<ModelInput> = seqs.iter().rev().map(|s| ModelInput::encoder(s)).collect();
    let a = forward_batch(&p, &fwd).unwrap();
    let mut b = forward_batch(&p, &rev).unwrap();
    b.reverse();
    assert_eq!(a, b);
}

// Straight-line single-example encoder written against tensor names.
fn reference_encoder(p: &ModelParams<f64>, ids: &[u32]) -> Vec<Vec<f64>> {
    let c = &p.config;
    let d = c.hidden_dim;
    let t = |n: &str| &p.tensor(n).unwrap().data;
    let zeros = vec![0.0; d];
    let bias = |n: &str| p.tensor(n).map_or(&zeros, |t| &t.data);
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let m = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
        (0..d).map(|i| (x[i] - m) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
    };
    let lin = |x: &[f64], w: &[f64], b: &[f64], o: usize| -> Vec<f64> {
        (0..o)
            .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * o + j]).sum::<f64>())
            .collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let emb = t("embed.tokens");
    let pos = t("embed.positions");
    let mut xs: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(q, &id)| (0..d).map(|i| emb[id as usize * d + i] + pos[q * d + i]).collect())
        .collect();
    let dh = d / c.heads;
    for l in 0..c.layers {
        let pre = format!("encoder.{l}");
        let a: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| ln(x, t(&format!("{pre}.ln1.gain")), t(&format!("{pre}.ln1.bias"))))
            .collect();
        let proj = |n: &str| -> Vec<Vec<f64>> {
            a.iter()
                .map(|x| lin(x, t(&format!("{pre}.attn.{n}.weight")), bias(&format!("{pre}.attn.{n}.bias")), d))
                .collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let n = ids.len();
        let mut o = vec![vec![0.0; d]; n];
        for h in 0..c.heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|e| q[i][h * dh + e] * k[j][h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..n {
                    let w = (s[j] - mx).exp() / z;
                    for e in 0..dh {
                        o[i][h * dh + e] += w * v[j][h * dh + e];
                    }
                }
            }
        }
        for i in 0..n {
            let att = lin(&o[i], t(&format!("{pre}.attn.o.weight")), t(&format!("{pre}.attn.o.bias")), d);
            for e in 0..d {
                xs[i][e] += att[e];
            }
            let hdn = ln(&xs[i], t(&format!("{pre}.ln2.gain")), t(&format!("{pre}.ln2.bias")));
            let f1: Vec<f64> = lin(&hdn, t(&format!("{pre}.ffn.fc1.weight")), t(&format!("{pre}.ffn.fc1.bias")), c.ffn_dim)
                .into_iter()
                .map(gelu)
                .collect();
            let f2 = lin(&f1, t(&format!("{pre}.ffn.fc2.weight")), t(&format!("{pre}.ffn.fc2.bias")), d);
            for e in 0..d {
                xs[i][e] += f2[e];
            }
        }
    }
    xs.iter()
        .map(|x| ln(x, t("encoder.norm.gain"), t("encoder.norm.bias")))
        .collect()
}

#[test]
fn forward_matches_hand_reference() {
    let mut c = cfg(12, 8, 1, 2);
    c.ffn_dim = 12;
    let mut p = ModelParams::<f64>::init_with_std(&c, 11, 0.4).unwrap();
    // nonzero biases and gains so every term is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in &mut p.tensors {
        if t.name.ends_with("bias") || t.name.ends_with("gain") {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let ids = [3u32, 0, 11, 5, 5];
    let got = forward(&p, &ModelInput::encoder(&ids)).unwrap();
    let want = reference_encoder(&p, &ids);
    for (r, row) in want.iter().enumerate() {
        for (e, &w) in row.iter().enumerate() {
            assert!((got[r * 8 + e] - w).abs() < 1e-6, "row {r} col {e}");
        }
    }
}

#[test]
fn tied_head_reads_embedding_storage() {
    let c = cfg(6, 4, 1, 1);
    let mut p = ModelParams::<f64>::init_with_std(&c, 5, 0.5).unwrap();
    assert!(p.tensor("lm_head.weight").is_none());
    let h = vec![0.5, -1.0, 2.0, 0.25];
    let before = lm_logits(&p, &h);
    p.token_embeddings_mut()[4 * 3 + 2] += 1.0;
    let after = lm_logits(&p, &h);
    for (j, (a, b)) in before.iter().zip(&after).enumerate() {
        let expect = if j == 3 { 2.0 } else { 0.0 };
        assert!((b - a - expect).abs() < 1e-12);
    }
    // and gradients flowing through the head land on the same table
    let ex = Example {
        source: vec![1, 2],
        decoder_input: None,
        targets: Targets::Lm(vec![(0, 5)]),
    };
    let g = loss_and_grads(&p, &[ex], Objective::MaskedLm).unwrap().grads;
    let row5 = &g.tensors[p.token_embedding_index()][5 * 4..6 * 4];
    assert!(row5.iter().any(|v| v.abs() > 0.0), "token 5 only appears as a head target");
}

#[test]
fn uniform_logits_give_ln2() {
    let c = cfg(2, 4, 1, 1);
    let p = zero_params(&c);
    let ex = Example {
        source: vec![0, 1, 1],
        decoder_input: None,
        targets: Targets::Lm(vec![(0, 1), (2, 0)]),
    };
    let l = loss(&p, &[ex], Objective::MaskedLm).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

fn mimic_cfg(v: usize, he: usize, hs: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: he,
        hidden_dim: hs,
        mimic_head: true,
        ..cfg(v, hs, 1, 1)
    }
}

#[test]
fn scalar_mimic_loss_by_hand() {
    // width 1: layer norm output is its bias, so s is the final norm bias
    let c = mimic_cfg(3, 1, 1);
    let mut p = ModelParams::<f64>::init(&c, 0).unwrap();
    let bias = p.tensor_index("encoder.norm.bias").unwrap();
    p.tensors[bias].data[0] = 1.5;
    let w = p.mimic_index().unwrap();
    p.tensors[w].data[0] = 0.8;
    let ex = Example {
        source: vec![2],
        decoder_input: None,
        targets: Targets::Mimic(vec![(0, vec![0.2])]),
    };
    let out = loss_and_grads(&p, &[ex], Objective::MimicMse).unwrap();
    let r: f64 = 0.8 * 1.5 - 0.2;
    assert!((out.loss - r * r).abs() < 1e-12);
    assert!((out.grads.tensors[w][0] - 2.0 * r * 1.5).abs() < 1e-12);
    assert!((out.grads.tensors[bias][0] - 2.0 * r * 0.8).abs() < 1e-12);
}

#[test]
fn matching_predictions_give_zero_loss_and_gradients() {
    let c = mimic_cfg(10, 4, 8);
    let p = ModelParams::<f64>::init_with_std(&c, 2, 0.3).unwrap();
    let src = vec![1u32, 4, 7];
    let s = forward(&p, &ModelInput::encoder(&src)).unwrap();
    let pred = mimic_project(&p, &s[8..16]).unwrap();
    let ex = Example {
        source: src,
        decoder_input: None,
        targets: Targets::Mimic(vec![(1, pred)]),
    };
    let out = loss_and_grads(&p, std::slice::from_ref(&ex), Objective::MimicMse).unwrap();
    assert!(out.loss < 1e-28);
    assert!(out.grads.max_abs() < 1e-12);
    let rep = grad_check(&p, &[ex], Objective::MimicMse, 1e-6, 200, 0).unwrap();
    assert!(rep.max_error < 1e-8, "{rep:?}");
}

#[test]
fn empty_examples_are_skipped_and_flagged() {
    let c = mimic_cfg(10, 4, 4);
    let p = ModelParams::<f64>::init(&c, 2).unwrap();
    let full = Example {
        source: vec![1, 2],
        decoder_input: None,
        targets: Targets::Mimic(vec![(0, vec![0.1; 4])]),
    };
    let empty = Example {
        targets: Targets::Mimic(vec![]),
        ..full.clone()
    };
    let both = loss_and_grads(&p, &[empty.clone(), full.clone()], Objective::MimicMse).unwrap();
    let alone = loss_and_grads(&p, std::slice::from_ref(&full), Objective::MimicMse).unwrap();
    assert_eq!(both.skipped, vec![0]);
    assert_eq!(both.loss, alone.loss);
    assert!(matches!(
        loss_and_grads(&p, &[empty], Objective::MimicMse),
        Err(Error::NoCorruptedTokens)
    ));
}

#[test]
fn mimic_loss_ignores_example_order() {
    let c = mimic_cfg(16, 4, 8);
    let p = ModelParams::<f64>::init_with_std(&c, 9, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<Example> = (0..5)
        .map(|i| Example {
            source: (0..4).map(|_| rng.random_range(0..16)).collect(),
            decoder_input: None,
            targets: Targets::Mimic(
                (0..=i % 3)
                    .map(|k| (k, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
                    .collect(),
            ),
        })
        .collect();
    let mut rev = batch.clone();
    rev.reverse();
    let a = loss(&p, &batch, Objective::MimicMse).unwrap();
    let b = loss(&p, &rev, Objective::MimicMse).unwrap();
    assert!((a - b).abs() < 1e-14);
}

pub(crate) fn random_config(rng: &mut ChaCha8Rng, mimic: bool) -> ModelConfig {
    // widths below 4 make layer norm nearly a sign function
    let heads = [1usize, 2][rng.random_range(0..2)];
    let hs = [4usize, 6, 8][rng.random_range(0..3)];
    let he = if rng.random_bool(0.5) { hs } else { rng.random_range(2..=hs) };
    ModelConfig {
        vocab_size: rng.random_range(5..=12),
        embed_dim: he,
        hidden_dim: hs,
        layers: rng.random_range(1..=2),
        heads,
        ffn_dim: rng.random_range(3..=8),
        max_seq_len: 8,
        arch: if rng.random_bool(0.5) {
            Architecture::Encoder
        } else {
            Architecture::EncoderDecoder
        },
        precision: Precision::F64,
        tie_weights: rng.random_bool(0.5),
        mimic_head: mimic,
    }
}

pub(crate) fn random_batch(rng: &mut ChaCha8Rng, c: &ModelConfig, objective: Objective) -> Vec<Example> {
    (0..3)
        .map(|_| {
            let n = rng.random_range(2..=5);
            let source: Vec<u32> = (0..n).map(|_| rng.random_range(0..c.vocab_size as u32)).collect();
            let decoder_input = match c.arch {
                Architecture::Encoder => None,
                Architecture::EncoderDecoder => {
                    let m = rng.random_range(2..=4);
                    Some((0..m).map(|_| rng.random_range(0..c.vocab_size as u32)).collect::<Vec<_>>())
                }
            };
            let out_len = decoder_input.as_ref().map_or(n, |d| d.len());
            let k = rng.random_range(1..=out_len);
            let positions = rand::seq::index::sample(rng, out_len, k).into_vec();
            let targets = match objective {
                Objective::MaskedLm => Targets::Lm(
                    positions
                        .into_iter()
                        .map(|q| (q, rng.random_range(0..c.vocab_size as u32)))
                        .collect(),
                ),
                Objective::MimicMse => Targets::Mimic(
                    positions
                        .into_iter()
                        .map(|q| (q, (0..c.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
                        .collect(),
                ),
            };
            Example {
                source,
                decoder_input,
                targets,
            }
        })
        .collect()
}

#[test]
fn grad_check_f64_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for objective in [Objective::MaskedLm, Objective::MimicMse] {
        for trial in 0..20 {
            let c = random_config(&mut rng, objective == Objective::MimicMse);
            let p = ModelParams::<f64>::init_with_std(&c, trial, 0.5).unwrap();
            let batch = random_batch(&mut rng, &c, objective);
            let rep = grad_check(&p, &batch, objective, 1e-2, 200, trial).unwrap();
            assert!(rep.checked >= 200.min(p.num_parameters()));
            assert!(rep.max_error < 1e-6, "{objective:?} trial {trial} {c:?}: {rep:?}");
        }
    }
}

#[test]
fn grad_check_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = random_config(&mut rng, true);
    let p = ModelParams::<f32>::init_with_std(&c, 0, 0.5).unwrap();
    let batch = random_batch(&mut rng, &c, Objective::MimicMse);
    let rep = grad_check(&p, &batch, Objective::MimicMse, 1e-3, 200, 0).unwrap();
    assert!(rep.max_error < 1e-3, "{rep:?}");
}

#[test]
fn schedule_peaks_at_warmup() {
    let w = 400;
    assert_eq!(inverse_sqrt_lr(2.0, w, 0), 0.0);
    assert!((inverse_sqrt_lr(2.0, w, w) - 2.0 / (w as f64).sqrt()).abs() < 1e-15);
    assert!(inverse_sqrt_lr(2.0, w, w / 2) < inverse_sqrt_lr(2.0, w, w));
    assert!(inverse_sqrt_lr(2.0, w, 4 * w) < inverse_sqrt_lr(2.0, w, w));
}

fn scalar_model() -> ModelParams<f64> {
    let mut c = cfg(1, 1, 0, 1);
    c.max_seq_len = 1;
    ModelParams::<f64>::init(&c, 0).unwrap()
}

#[test]
fn adam_zero_gradients_leave_params() {
    let mut p = ModelParams::<f64>::init(&ModelConfig::tiny(20), 0).unwrap();
    let before = p.clone();
    let mut opt = AdamState::new(&p, AdamConfig::default());
    let g = p.zeros_like();
    opt.step(&mut p, &g).unwrap();
    assert_eq!(p, before);
    assert_eq!(opt.step, 1);
}

#[test]
fn adam_scalar_step_by_hand() {
    let mut p = scalar_model();
    let cfg = AdamConfig {
        base_lr: 0.5,
        warmup: 4,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(&p, cfg);
    let w0 = p.tensors[0].data[0];
    let mut g = p.zeros_like();
    g.tensors[0][0] = 0.3;
    opt.step(&mut p, &g).unwrap();
    g.tensors[0][0] = -0.1;
    opt.step(&mut p, &g).unwrap();

    let (b1, b2, eps) = (0.9f64, 0.98f64, 1e-8);
    let mut w = w0;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, gr) in [(1, 0.3f64), (2, -0.1)] {
        m = b1 * m + (1.0 - b1) * gr;
        v = b2 * v + (1.0 - b2) * gr * gr;
        let lr = 0.5 * f64::min(t as f64 / 8.0, 1.0 / (t as f64).sqrt());
        w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    assert!((p.tensors[0].data[0] - w).abs() < 1e-12);
}

#[test]
fn adam_respects_frozen_and_shapes() {
    let mut p = ModelParams::<f64>::init(&ModelConfig::tiny(20), 0).unwrap();
    let mut opt = AdamState::new(&p, AdamConfig::default());
    let e = p.token_embedding_index();
    opt.freeze(e);
    let before = p.token_embeddings().to_vec();
    let mut g = p.zeros_like();
    g.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v = 1.0));
    opt.step(&mut p, &g).unwrap();
    assert_eq!(p.token_embeddings(), &before[..]);
    assert_ne!(p.tensors[e + 1].data, vec![0.0; p.tensors[e + 1].data.len()]);
    g.tensors.pop();
    assert!(opt.step(&mut p, &g).is_err());
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let mut c = ModelConfig::tiny(30);
    c.arch = Architecture::EncoderDecoder;
    c.mimic_head = true;
    c.embed_dim = 16;
    let p = ModelParams::<f64>::init(&c, 4).unwrap();
    let bytes = checkpoint_bytes(&p).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let q: ModelParams<f64> = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(p, q);
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(
        checkpoint_from_bytes::<f64>(cut),
        Err(Error::Format { offset, .. }) if offset == cut.len() as u64
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint_from_bytes::<f64>(&bad), Err(Error::Format { offset: 0, .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txf");
    let p32 = ModelParams::<f32>::init(&c, 4).unwrap();
    save_checkpoint(&p32, &path).unwrap();
    assert_eq!(load_checkpoint::<f32>(&path).unwrap(), p32);
}

#[test]
fn encoder_decoder_states_follow_decoder_length() {
    let mut c = ModelConfig::tiny(30);
    c.arch = Architecture::EncoderDecoder;
    let p = ModelParams::<f64>::init(&c, 4).unwrap();
    let s = forward(&p, &ModelInput::seq2seq(&[1, 2, 3, 4], &[5, 6])).unwrap();
    assert_eq!(s.len(), 2 * c.hidden_dim);
    assert!(forward(&p, &ModelInput::encoder(&[1, 2])).is_err());
    // causal: the first decoder state ignores later decoder tokens
    let t = forward(&p, &ModelInput::seq2seq(&[1, 2, 3, 4], &[5, 9, 9])).unwrap();
    assert_eq!(&s[..c.hidden_dim], &t[..c.hidden_dim]);
}


