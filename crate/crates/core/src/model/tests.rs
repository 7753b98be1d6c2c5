use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{grad_check_params, GradCheckOptions};
use crate::synthgen::FRAME_DIM;
use crate::tokens::Vocab;

fn toy_config(fusion: Option<FusionMode>, lora: bool) -> ModelConfig {
    ModelConfig {
        lm: LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            vocab: Vocab::new(16, 8, 8, 16).unwrap(),
            max_seq: 64,
            dropout: 0.0,
        },
        lora: lora.then_some(LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
        }),
        fusion: fusion.map(|mode| FusionConfig {
            mode,
            d_expr: 8,
            d_jaw: 4,
            d_adapter_hidden: 16,
            n_cross_layers: 2,
            d_cross_ff: 16,
            compression: 5,
            infill_ratio: 0.5,
        }),
        d_emotion: 8,
    }
}

fn track(frames: usize, seed: u64) -> VisualTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * FRAME_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    VisualTrack::new(frames, data).unwrap()
}

fn tokens(m: &Model, n: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = m.config().lm.vocab.size();
    (0..n).map(|_| rng.gen_range(0..size)).collect()
}

fn randomize(m: &mut Model, group: ParamGroup, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = m.params.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect();
    for id in ids {
        let t = m.params.value(id);
        let data = t.data().iter().map(|_| rng.gen_range(-scale..scale)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        m.params.set_value(id, t).unwrap();
    }
}

fn logits_of(m: &Model, ids: &[TokenId], key_visible: Option<&[bool]>) -> Tensor {
    let mut g = Graph::new();
    let s = m.embed_tokens(&mut g, ids).unwrap();
    let out = m.lm_forward(&mut g, s, key_visible).unwrap();
    g.value(out).clone()
}

/// Next-token loss over the speech rows after fusion.
fn lm_loss(m: &Model, g: &mut Graph, ids: &[TokenId], visual: Option<&VisualTrack>, r_mask: Option<&[bool]>) -> Result<(Var, FusionState)> {
    let s = m.embed_tokens(g, ids)?;
    let st = m.fuse(g, s, visual, r_mask)?;
    let rows = g.value(st.h).rows();
    let mut vis = vec![true; rows];
    vis[st.n_prefix + 1] = false;
    let hidden = m.lm_hidden(g, st.h, Some(&vis), None)?;
    let logits = m.lm_logits(g, hidden)?;
    let mut targets = vec![0; rows];
    let mut include = vec![false; rows];
    for i in 0..ids.len() - 1 {
        targets[st.n_prefix + i] = ids[i + 1];
        include[st.n_prefix + i] = true;
    }
    let loss = g.cross_entropy(logits, &targets, &include)?;
    let st = FusionState { h: hidden, ..st };
    Ok((loss, st))
}

fn param(m: &Model, name: &str) -> Vec<f64> {
    m.params.value(m.params.id(name).unwrap()).data().to_vec()
}

fn mm(a: &[f64], rows: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

fn ln(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let s = (var + 1e-5).sqrt();
            r.iter().enumerate().map(move |(i, v)| (v - mu) / s * g[i] + b[i]).collect::<Vec<_>>()
        })
        .collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line recomputation of the cross-attention stack.
fn qformer_oracle(m: &Model, v: &[f64], frames: usize, n: usize) -> Vec<f64> {
    let d = m.config().lm.d_model;
    let f = m.config().fusion.unwrap();
    let latent = param(m, "qformer.query");
    let mut q = Vec::new();
    for i in 0..n {
        let pos = i as f64 * frames as f64 / (f.compression * n) as f64;
        for c in 0..d {
            let k = c / 2;
            let freq = 10000f64.powf(-(2.0 * k as f64) / d as f64);
            let pe = if c % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
            q.push(latent[c] + pe);
        }
    }
    for l in 0..f.n_cross_layers {
        let p = |s: &str| param(m, &format!("qformer.layer{l}.{s}"));
        let qn = ln(&q, d, &p("ln_q.g"), &p("ln_q.b"));
        let qq = mm(&qn, n, d, &p("wq"), d);
        let kk = mm(v, frames, d, &p("wk"), d);
        let vv = mm(v, frames, d, &p("wv"), d);
        let mut read = vec![0.0; n * d];
        for i in 0..n {
            let s: Vec<f64> = (0..frames)
                .map(|j| (0..d).map(|c| qq[i * d + c] * kk[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..frames {
                for c in 0..d {
                    read[i * d + c] += e[j] / z * vv[j * d + c];
                }
            }
        }
        let read = mm(&read, n, d, &p("wo"), d);
        q.iter_mut().zip(&read).for_each(|(a, b)| *a += b);
        let qn = ln(&q, d, &p("ln_ff.g"), &p("ln_ff.b"));
        let h = f.d_cross_ff;
        let mut a = mm(&qn, n, d, &p("ff1.w"), h);
        let b1 = p("ff1.b");
        a.iter_mut().enumerate().for_each(|(i, x)| *x = gelu_ref(*x + b1[i % h]));
        let o = mm(&a, n, h, &p("ff2.w"), d);
        let b2 = p("ff2.b");
        q.iter_mut().zip(&o).enumerate().for_each(|(i, (x, y))| *x += y + b2[i % d]);
    }
    q
}

fn random_rows(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn qformer_matches_straight_line_oracle() {
    let mut cfg = toy_config(Some(FusionMode::Prefix), false);
    cfg.fusion.as_mut().unwrap().n_cross_layers = 1;
    let mut m = Model::new(cfg, 3).unwrap();
    randomize(&mut m, ParamGroup::Fusion, 0.5, 4);
    let v = random_rows(2, 16, 5);
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let z = m.qformer(&mut g, vv, 3).unwrap();
    let want = qformer_oracle(&m, v.data(), 2, 3);
    let got = g.value(z).data();
    let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn single_frame_reads_same_value_for_every_query() {
    let mut cfg = toy_config(Some(FusionMode::Prefix), false);
    cfg.fusion.as_mut().unwrap().n_cross_layers = 1;
    let mut m = Model::new(cfg, 1).unwrap();
    // silence the feedforward so each output is latent + PE + read
    for name in ["qformer.layer0.ff2.w", "qformer.layer0.ff2.b"] {
        let id = m.params.id(name).unwrap();
        let zero = Tensor::zeros(m.params.value(id).shape());
        m.params.set_value(id, zero).unwrap();
    }
    let v = random_rows(1, 16, 2);
    let wv = param(&m, "qformer.layer0.wv");
    let wo = param(&m, "qformer.layer0.wo");
    let read = mm(&mm(v.data(), 1, 16, &wv, 16), 1, 16, &wo, 16);
    let latent = param(&m, "qformer.query");
    let mut g = Graph::new();
    let vv = g.constant(v);
    let z = m.qformer(&mut g, vv, 4).unwrap();
    let got = g.value(z);
    for i in 0..4 {
        let pe = sinusoidal_embedding(i as f64 / 20.0, 16);
        for c in 0..16 {
            assert!((got.row(i)[c] - latent[c] - pe[c] - read[c]).abs() < 1e-12);
        }
    }
    let mut g = Graph::new();
    let none = g.constant(Tensor::zeros(&[0, 16]));
    assert!(m.qformer(&mut g, none, 2).is_err());
}

#[test]
fn prefix_compresses_by_five() {
    let m = Model::new(toy_config(Some(FusionMode::Prefix), false), 0).unwrap();
    assert_eq!(m.prefix_queries(25), 5);
    assert_eq!(m.prefix_queries(26), 6);
    let ids = tokens(&m, 9, 1);
    let mut g = Graph::new();
    let s = m.embed_tokens(&mut g, &ids).unwrap();
    let st = m.fuse(&mut g, s, Some(&track(25, 2)), None).unwrap();
    assert_eq!(st.n_prefix, 5);
    assert_eq!(g.value(st.h).dims2(), (14, 16));
    let mut g = Graph::new();
    let s = m.embed_tokens(&mut g, &ids).unwrap();
    assert!(matches!(m.fuse(&mut g, s, None, None), Err(Error::Missing(_))));
}

#[test]
fn infill_extremes_and_concat_shape() {
    let m = Model::new(toy_config(Some(FusionMode::Infill), false), 0).unwrap();
    let ids = tokens(&m, 7, 3);
    let v = track(12, 4);
    let mut g = Graph::new();
    let s = m.embed_tokens(&mut g, &ids).unwrap();
    let none = m.fuse(&mut g, s, Some(&v), Some(&[false; 7])).unwrap();
    assert_eq!(g.value(none.h), g.value(s));
    let all = m.fuse(&mut g, s, Some(&v), Some(&[true; 7])).unwrap();
    assert_eq!(g.value(all.h), g.value(all.z.unwrap()));
    assert!(m.fuse(&mut g, s, Some(&v), Some(&[true; 3])).is_err());
    assert!(m.fuse(&mut g, s, Some(&v), None).is_err());

    let m = Model::new(toy_config(Some(FusionMode::Concat), false), 0).unwrap();
    let mut g = Graph::new();
    let s = m.embed_tokens(&mut g, &ids).unwrap();
    let st = m.fuse(&mut g, s, Some(&v), None).unwrap();
    assert_eq!(g.value(st.h).dims2(), (7, 16));
}

#[test]
fn speech_only_passes_embeddings_through() {
    let m = Model::new(toy_config(None, false), 0).unwrap();
    let ids = tokens(&m, 5, 0);
    let mut g = Graph::new();
    let s = m.embed_tokens(&mut g, &ids).unwrap();
    let st = m.fuse(&mut g, s, None, None).unwrap();
    assert_eq!(st.h, s);
    assert!(m.embed_tokens(&mut g, &[m.config().lm.vocab.size()]).is_err());
}

#[test]
fn attention_masks_behave() {
    let m = Model::new(toy_config(None, false), 7).unwrap();
    let ids = tokens(&m, 10, 8);
    let plain = logits_of(&m, &ids, None);
    assert_eq!(plain.dims2(), (10, m.config().lm.vocab.size() as usize));
    assert_eq!(logits_of(&m, &ids, Some(&[true; 10])), plain);

    // future tokens never influence earlier logits
    let mut changed = ids.clone();
    changed[6] = (changed[6] + 1) % m.config().lm.vocab.size();
    let other = logits_of(&m, &changed, None);
    for i in 0..10 {
        let same = plain.row(i) == other.row(i);
        assert_eq!(same, i < 6, "row {i}");
    }

    // hiding key 4 changes rows 4.. only
    let mut vis = vec![true; 10];
    vis[4] = false;
    let masked = logits_of(&m, &ids, Some(&vis));
    for i in 0..10 {
        assert_eq!(plain.row(i) == masked.row(i), i < 4, "row {i}");
    }

    let one = logits_of(&m, &ids[..1], None);
    assert_eq!(one.dims2(), (1, m.config().lm.vocab.size() as usize));

    let long = tokens(&m, 65, 1);
    let mut g = Graph::new();
    let s = m.embed_tokens(&mut g, &long).unwrap();
    assert!(matches!(m.lm_forward(&mut g, s, None), Err(Error::SequenceTooLong { len: 65, max: 64 })));
}

#[test]
fn zero_adapters_leave_logits_unchanged() {
    let base = Model::new(toy_config(None, false), 11).unwrap();
    let ids = tokens(&base, 12, 2);
    let want = logits_of(&base, &ids, None);
    let adapted = base
        .apply_lora(
            LoraConfig {
                rank: 4,
                alpha: 8.0,
                dropout: 0.0,
            },
            3,
        )
        .unwrap();
    assert_eq!(logits_of(&adapted, &ids, None), want);
    assert!(adapted.apply_lora(LoraConfig::default(), 0).is_err());

    // alpha = 0 silences nonzero adapters too
    let mut silent = base
        .apply_lora(
            LoraConfig {
                rank: 4,
                alpha: 0.0,
                dropout: 0.0,
            },
            3,
        )
        .unwrap();
    randomize(&mut silent, ParamGroup::Lora, 0.3, 9);
    assert_eq!(logits_of(&silent, &ids, None), want);
}

#[test]
fn merged_adapters_match_applied() {
    let mut m = Model::new(toy_config(None, true), 5).unwrap();
    randomize(&mut m, ParamGroup::Lora, 0.3, 6);
    let ids = tokens(&m, 12, 7);
    let applied = logits_of(&m, &ids, None);
    let merged = m.merge_lora().unwrap();
    assert!(merged.config().lora.is_none());
    let diff = logits_of(&merged, &ids, None).max_abs_diff(&applied);
    assert!(diff <= 1e-10, "{diff}");

    let bad: Vec<(Tensor, Tensor)> = (0..8).map(|_| (Tensor::zeros(&[16, 3]), Tensor::zeros(&[3, 16]))).collect();
    assert!(matches!(m.set_lora(&bad), Err(Error::Shape { .. })));
    assert!(m.set_lora(&bad[..2]).is_err());
    let good: Vec<(Tensor, Tensor)> = (0..8).map(|_| (Tensor::zeros(&[16, 4]), Tensor::zeros(&[4, 16]))).collect();
    m.set_lora(&good).unwrap();
}

#[test]
fn kv_session_matches_full_forward() {
    let mut m = Model::new(toy_config(None, true), 21).unwrap();
    randomize(&mut m, ParamGroup::Lora, 0.3, 22);
    let ids = tokens(&m, 15, 23);
    let mut vis = vec![true; 15];
    vis[0] = false;
    vis[7] = false;
    let want = logits_of(&m, &ids, Some(&vis));
    let inf = InferenceModel::new(&m).unwrap();
    let rows = Tensor::new(
        vec![15, 16],
        ids.iter().flat_map(|&t| inf.embedding(t).unwrap().to_vec()).collect(),
    )
    .unwrap();
    let got = inf.logits_all(&rows, Some(&vis)).unwrap();
    let diff = got.max_abs_diff(&want);
    assert!(diff < 1e-9, "{diff}");

    let mut sess = inf.session();
    let mut last = None;
    for &t in &ids {
        last = sess.push_token(t, true).unwrap();
    }
    let plain = logits_of(&m, &ids, None);
    let last = last.unwrap();
    assert!(last.iter().zip(plain.row(14)).all(|(a, b)| (a - b).abs() < 1e-9));
}

#[test]
fn gradients_match_finite_differences_in_every_mode() {
    let opts = GradCheckOptions {
        tol: 1e-3,
        max_coords_per_input: Some(2),
        ..Default::default()
    };
    for mode in [None, Some(FusionMode::Prefix), Some(FusionMode::Infill), Some(FusionMode::Concat)] {
        let mut m = Model::new(toy_config(mode, true), 31).unwrap();
        randomize(&mut m, ParamGroup::Lora, 0.2, 32);
        let ids = tokens(&m, 8, 33);
        let v = track(10, 34);
        let r_mask = [true, false, true, false, false, true, false, true];
        let r = (mode == Some(FusionMode::Infill)).then_some(&r_mask[..]);
        let vis = mode.map(|_| &v);
        let report = grad_check_params(
            &mut m,
            |m| &mut m.params,
            |m, g| lm_loss(m, g, &ids, vis, r).map(|(l, _)| l),
            &opts,
        )
        .unwrap();
        assert!(report.passed, "{mode:?}: {report:?}");
        assert!(report.checked > 50);
    }
}

#[test]
fn emotion_head_is_detached() {
    let m = Model::new(toy_config(Some(FusionMode::Prefix), false), 41).unwrap();
    let ids = tokens(&m, 9, 42);
    let v = track(10, 43);
    let grads_for = |with_head: bool| -> Vec<(String, Vec<f64>)> {
        let mut g = Graph::new();
        let (loss, st) = lm_loss(&m, &mut g, &ids, Some(&v), None).unwrap();
        let total = if with_head {
            let logits = m.emotion_logits(&mut g, st.h, &[0, 1], &[2, 5]).unwrap();
            let ce = g.cross_entropy(logits, &[1], &[true]).unwrap();
            g.add(loss, ce).unwrap()
        } else {
            loss
        };
        let grads = g.backward(total).unwrap();
        g.param_vars()
            .iter()
            .filter(|(id, _)| m.params.get(*id).group != ParamGroup::EmotionHead)
            .map(|&(id, var)| (m.params.get(id).name.clone(), grads.get(var).unwrap_or(&[]).to_vec()))
            .collect()
    };
    assert_eq!(grads_for(true), grads_for(false));

    let mut g = Graph::new();
    let (_, st) = lm_loss(&m, &mut g, &ids, Some(&v), None).unwrap();
    assert!(m.emotion_logits(&mut g, st.h, &[], &[]).is_err());
    let one = m.emotion_logits(&mut g, st.h, &[], &[5]).unwrap();
    let p = crate::numcore::softmax_rows(g.value(one)).unwrap().into_data();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.iter().all(|&x| x > 0.05 && x < 0.6));
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let mut m = Model::new(toy_config(Some(FusionMode::Infill), true), 51).unwrap();
    randomize(&mut m, ParamGroup::Lora, 0.1, 52);
    m.params.set_trainable(ParamGroup::Base, false);
    let meta = CheckpointMeta {
        seed: 51,
        vocab_hash: m.config().lm.vocab.manifest().hash(),
        fusion_mode: Some(FusionMode::Infill),
        stage: "test".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &meta, dir.path()).unwrap();
    let (back, meta2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(back.config(), m.config());
    for (id, p) in m.params.iter() {
        let q = back.params.get(id);
        assert_eq!(p.name, q.name);
        assert_eq!(p.value, q.value);
        assert_eq!(p.trainable, q.trainable);
    }

    let blob = dir.path().join(PARAMS_FILE);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn reconfigure_keeps_shared_weights() {
    let base = Model::new(toy_config(None, false), 61).unwrap();
    let fused = base.reconfigure(toy_config(Some(FusionMode::Concat), true), 62).unwrap();
    assert_eq!(param(&fused, "tok_emb"), param(&base, "tok_emb"));
    assert_eq!(param(&fused, "layer1.attn.wq"), param(&base, "layer1.attn.wq"));
    assert!(fused.count_params(ParamGroup::Fusion) > 0);
    assert_eq!(base.count_params(ParamGroup::Lora), 0);
    let mut other = toy_config(None, false);
    other.lm.d_model = 8;
    assert!(base.reconfigure(other, 0).is_err());
}
