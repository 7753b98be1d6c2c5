//! Decoder-only speech-token LM, low-rank adapters, visual adapter,
//! cross-attention query module and the three fusion modes.

mod checkpoint;
mod config;
mod infer;
mod mask;

use std::rc::Rc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::rng::derive_seed;
use crate::numcore::{sinusoidal_embedding, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::synthgen::{VisualTrack, EXPR_DIM, JAW_DIM};
use crate::tokens::{Emotion, TokenId};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, MANIFEST_FILE, PARAMS_FILE};
pub use config::{FusionConfig, FusionMode, LmConfig, LoraConfig, ModelConfig};
pub use infer::{InferenceModel, Session};
pub use mask::{infill_mask, mask_speech};

type LnIds = (ParamId, ParamId);
type LinearIds = (ParamId, ParamId);

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: LnIds,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    /// (A, B) per projection in q, k, v, o order.
    lora: Option<[(ParamId, ParamId); 4]>,
    ln2: LnIds,
    ff1: LinearIds,
    ff2: LinearIds,
}

#[derive(Debug, Clone)]
struct CrossIds {
    ln_q: LnIds,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_ff: LnIds,
    ff1: LinearIds,
    ff2: LinearIds,
}

#[derive(Debug, Clone)]
struct FusionIds {
    expr: LinearIds,
    jaw: LinearIds,
    ad1: LinearIds,
    ad2: LinearIds,
    query: ParamId,
    cross: Vec<CrossIds>,
    concat: Option<(LinearIds, LinearIds)>,
}

#[derive(Debug, Clone)]
struct HeadIds {
    v1: LinearIds,
    v2: LinearIds,
    s1: LinearIds,
    s2: LinearIds,
    cls: LinearIds,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_emb: ParamId,
    layers: Vec<LayerIds>,
    ln_f: LnIds,
    fusion: Option<FusionIds>,
    head: HeadIds,
}

const PROJ: [&str; 4] = ["q", "k", "v", "o"];

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
}

impl Ids {
    fn resolve(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let p = |n: &str| lookup(store, n);
        let ln = |n: &str| -> Result<LnIds> { Ok((p(&format!("{n}.g"))?, p(&format!("{n}.b"))?)) };
        let lin = |n: &str| -> Result<LinearIds> { Ok((p(&format!("{n}.w"))?, p(&format!("{n}.b"))?)) };
        let mut layers = Vec::new();
        for i in 0..config.lm.n_layers {
            let pre = format!("layer{i}");
            let lora = match config.lora {
                Some(_) => {
                    let mut pairs = Vec::with_capacity(4);
                    for name in PROJ {
                        pairs.push((
                            p(&format!("{pre}.attn.{name}.lora_a"))?,
                            p(&format!("{pre}.attn.{name}.lora_b"))?,
                        ));
                    }
                    Some(<[_; 4]>::try_from(pairs).expect("four projections"))
                }
                None => None,
            };
            layers.push(LayerIds {
                ln1: ln(&format!("{pre}.ln1"))?,
                wq: p(&format!("{pre}.attn.wq"))?,
                wk: p(&format!("{pre}.attn.wk"))?,
                wv: p(&format!("{pre}.attn.wv"))?,
                wo: p(&format!("{pre}.attn.wo"))?,
                lora,
                ln2: ln(&format!("{pre}.ln2"))?,
                ff1: lin(&format!("{pre}.ff1"))?,
                ff2: lin(&format!("{pre}.ff2"))?,
            });
        }
        let fusion = match &config.fusion {
            Some(f) => {
                let mut cross = Vec::new();
                for i in 0..f.n_cross_layers {
                    let pre = format!("qformer.layer{i}");
                    cross.push(CrossIds {
                        ln_q: ln(&format!("{pre}.ln_q"))?,
                        wq: p(&format!("{pre}.wq"))?,
                        wk: p(&format!("{pre}.wk"))?,
                        wv: p(&format!("{pre}.wv"))?,
                        wo: p(&format!("{pre}.wo"))?,
                        ln_ff: ln(&format!("{pre}.ln_ff"))?,
                        ff1: lin(&format!("{pre}.ff1"))?,
                        ff2: lin(&format!("{pre}.ff2"))?,
                    });
                }
                let concat = match f.mode {
                    FusionMode::Concat => Some((lin("concat.ff1")?, lin("concat.ff2")?)),
                    _ => None,
                };
                Some(FusionIds {
                    expr: lin("adapter.expr")?,
                    jaw: lin("adapter.jaw")?,
                    ad1: lin("adapter.ff1")?,
                    ad2: lin("adapter.ff2")?,
                    query: p("qformer.query")?,
                    cross,
                    concat,
                })
            }
            None => None,
        };
        Ok(Ids {
            tok_emb: p("tok_emb")?,
            layers,
            ln_f: ln("ln_f")?,
            fusion,
            head: HeadIds {
                v1: lin("emotion.visual.ff1")?,
                v2: lin("emotion.visual.ff2")?,
                s1: lin("emotion.speech.ff1")?,
                s2: lin("emotion.speech.ff2")?,
                cls: lin("emotion.cls")?,
            },
        })
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: [usize; 2], std: f64, group: ParamGroup) {
        let dist = Normal::new(0.0, std).unwrap();
        let data = (0..shape[0] * shape[1]).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data).unwrap(), group);
    }

    fn fill(&mut self, name: String, shape: [usize; 2], value: f64, group: ParamGroup) {
        self.store.insert(name, Tensor::filled(&shape, value), group);
    }

    fn layer_norm(&mut self, name: &str, d: usize, group: ParamGroup) {
        self.fill(format!("{name}.g"), [1, d], 1.0, group);
        self.fill(format!("{name}.b"), [1, d], 0.0, group);
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, group: ParamGroup) {
        self.normal(format!("{name}.w"), [fan_in, fan_out], gain / (fan_in as f64).sqrt(), group);
        self.fill(format!("{name}.b"), [1, fan_out], 0.0, group);
    }
}

fn add_lora(store: &mut ParamStore, lm: &LmConfig, lora: &LoraConfig, rng: &mut ChaCha8Rng) {
    let d = lm.d_model;
    let mut init = Init {
        store,
        rng: ChaCha8Rng::seed_from_u64(rng.gen()),
    };
    for i in 0..lm.n_layers {
        for name in PROJ {
            let pre = format!("layer{i}.attn.{name}");
            init.normal(format!("{pre}.lora_a"), [d, lora.rank], 1.0 / (d as f64).sqrt(), ParamGroup::Lora);
            init.fill(format!("{pre}.lora_b"), [lora.rank, d], 0.0, ParamGroup::Lora);
        }
    }
}

fn add_fusion(store: &mut ParamStore, lm: &LmConfig, f: &FusionConfig, rng: &mut ChaCha8Rng) {
    let d = lm.d_model;
    let g = ParamGroup::Fusion;
    let mut init = Init {
        store,
        rng: ChaCha8Rng::seed_from_u64(rng.gen()),
    };
    init.linear("adapter.expr", EXPR_DIM, f.d_expr, 1.0, g);
    init.linear("adapter.jaw", JAW_DIM, f.d_jaw, 1.0, g);
    init.linear("adapter.ff1", f.d_expr + f.d_jaw, f.d_adapter_hidden, 1.0, g);
    init.linear("adapter.ff2", f.d_adapter_hidden, d, 1.0, g);
    init.normal("qformer.query".into(), [1, d], 0.02, g);
    let out_gain = 1.0 / (2.0 * f.n_cross_layers as f64).sqrt();
    for i in 0..f.n_cross_layers {
        let pre = format!("qformer.layer{i}");
        init.layer_norm(&format!("{pre}.ln_q"), d, g);
        for (name, gain) in [("wq", 1.0), ("wk", 1.0), ("wv", 1.0), ("wo", out_gain)] {
            init.normal(format!("{pre}.{name}"), [d, d], gain / (d as f64).sqrt(), g);
        }
        init.layer_norm(&format!("{pre}.ln_ff"), d, g);
        init.linear(&format!("{pre}.ff1"), d, f.d_cross_ff, 1.0, g);
        init.linear(&format!("{pre}.ff2"), f.d_cross_ff, d, out_gain, g);
    }
    if f.mode == FusionMode::Concat {
        init.linear("concat.ff1", 2 * d, lm.d_ff, 1.0, g);
        init.linear("concat.ff2", lm.d_ff, d, 1.0, g);
    }
}

/// Hidden states and bookkeeping produced by [`Model::fuse`].
#[derive(Debug, Clone)]
pub struct FusionState {
    pub mode: Option<FusionMode>,
    /// Query outputs, when the mode produces them.
    pub z: Option<Var>,
    /// Positions replaced by query outputs (infill only).
    pub r_mask: Option<Vec<bool>>,
    pub h: Var,
    /// Rows of `h` holding visual queries (prefix only).
    pub n_prefix: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..g.value(x).len())
        .map(|_| if rng.gen_bool(p) { 0.0 } else { keep })
        .collect();
    g.mul_const(x, Rc::new(mask))
}

/// Visual frame `f` sits at query position `f / c`.
fn frame_positions(frames: usize, compression: usize) -> Vec<f64> {
    (0..frames).map(|f| f as f64 / compression as f64).collect()
}

/// Query `i` of `n` covering `frames` frames sits at `i · frames / (c · n)`.
fn query_positions(n: usize, frames: usize, compression: usize) -> Vec<f64> {
    let step = frames as f64 / (compression * n) as f64;
    (0..n).map(|i| i as f64 * step).collect()
}

fn pe_table(positions: &[f64], d: usize) -> Tensor {
    let data = positions.iter().flat_map(|&p| sinusoidal_embedding(p, d)).collect();
    Tensor::new(vec![positions.len(), d], data).unwrap()
}

/// Causal visibility combined with per-key visibility, row-major `L × L`.
pub fn attention_visibility(len: usize, key_visible: Option<&[bool]>) -> Vec<bool> {
    let mut vis = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            vis[i * len + j] = key_visible.is_none_or(|k| k[j]);
        }
    }
    vis
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let lm = &config.lm;
        let (d, v) = (lm.d_model, lm.vocab.size() as usize);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        {
            let mut init = Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(rng.gen()),
            };
            let base = ParamGroup::Base;
            init.normal("tok_emb".into(), [v, d], 0.02, base);
            let out_gain = 1.0 / (2.0 * lm.n_layers as f64).sqrt();
            for i in 0..lm.n_layers {
                let pre = format!("layer{i}");
                init.layer_norm(&format!("{pre}.ln1"), d, base);
                for (name, gain) in [("wq", 1.0), ("wk", 1.0), ("wv", 1.0), ("wo", out_gain)] {
                    init.normal(format!("{pre}.attn.{name}"), [d, d], gain / (d as f64).sqrt(), base);
                }
                init.layer_norm(&format!("{pre}.ln2"), d, base);
                init.linear(&format!("{pre}.ff1"), d, lm.d_ff, 1.0, base);
                init.linear(&format!("{pre}.ff2"), lm.d_ff, d, out_gain, base);
            }
            init.layer_norm("ln_f", d, base);
            let h = config.d_emotion;
            let head = ParamGroup::EmotionHead;
            for m in ["visual", "speech"] {
                init.linear(&format!("emotion.{m}.ff1"), d, h, 1.0, head);
                init.linear(&format!("emotion.{m}.ff2"), h, h, 1.0, head);
            }
            init.linear("emotion.cls", h, Emotion::COUNT, 1.0, head);
        }
        if let Some(lora) = &config.lora {
            add_lora(&mut store, lm, lora, &mut rng);
        }
        if let Some(f) = &config.fusion {
            add_fusion(&mut store, lm, f, &mut rng);
        }
        let ids = Ids::resolve(&store, &config)?;
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.check()?;
        let ids = Ids::resolve(&params, &config)?;
        let expect = Model::new(config.clone(), 0)?;
        for (_, p) in expect.params.iter() {
            let got = params.get(lookup(&params, &p.name)?);
            if got.value.shape() != p.value.shape() {
                return Err(Error::shape("parameter", format!("`{}` has shape {:?}", p.name, got.value.shape())));
            }
        }
        if params.len() != expect.params.len() {
            return Err(Error::invalid("parameter set does not match the configuration"));
        }
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Copies every parameter present in `other` with the same name and shape.
    pub fn copy_params_from(&mut self, other: &Model) -> usize {
        let mut n = 0;
        for (_, p) in other.params.iter() {
            if let Some(id) = self.params.id(&p.name) {
                if self.params.value(id).shape() == p.value.shape() {
                    self.params.set_value(id, p.value.clone()).unwrap();
                    n += 1;
                }
            }
        }
        n
    }

    /// Same weights with a different adapter / fusion setup. Parameters new
    /// to `config` are freshly initialised from `seed`.
    pub fn reconfigure(&self, config: ModelConfig, seed: u64) -> Result<Model> {
        if config.lm != self.config.lm {
            return Err(Error::invalid("reconfigure cannot change the language-model shape"));
        }
        let mut out = Model::new(config, seed)?;
        out.copy_params_from(self);
        Ok(out)
    }

    /// Adds zero-initialised adapters (B = 0) to a model without them.
    pub fn apply_lora(&self, lora: LoraConfig, seed: u64) -> Result<Model> {
        if self.config.lora.is_some() {
            return Err(Error::invalid("model already carries adapters"));
        }
        self.reconfigure(
            ModelConfig {
                lora: Some(lora),
                ..self.config.clone()
            },
            seed,
        )
    }

    /// Folds `(α/r)·A·B` into the base projections and drops the adapters.
    pub fn merge_lora(&self) -> Result<Model> {
        let lora = self
            .config
            .lora
            .ok_or_else(|| Error::invalid("model has no adapters to merge"))?;
        let mut out = Model::from_parts(
            ModelConfig {
                lora: None,
                ..self.config.clone()
            },
            {
                let mut store = ParamStore::new();
                for (_, p) in self.params.iter() {
                    if p.group != ParamGroup::Lora {
                        let id = store.insert(p.name.clone(), p.value.clone(), p.group);
                        store.get_mut(id).trainable = p.trainable;
                    }
                }
                store
            },
        )?;
        for (i, layer) in self.ids.layers.iter().enumerate() {
            let pairs = layer.lora.expect("adapters present");
            for (k, w) in [layer.wq, layer.wk, layer.wv, layer.wo].into_iter().enumerate() {
                let delta = crate::numcore::matmul(self.params.value(pairs[k].0), self.params.value(pairs[k].1))?;
                let mut merged = self.params.value(w).clone();
                for (m, dlt) in merged.data_mut().iter_mut().zip(delta.data()) {
                    *m += lora.scale() * dlt;
                }
                let id = lookup(&out.params, &format!("layer{i}.attn.w{}", PROJ[k]))?;
                out.params.set_value(id, merged)?;
            }
        }
        Ok(out)
    }

    /// Replaces the adapter matrices; shapes must match the configured rank.
    pub fn set_lora(&mut self, adapters: &[(Tensor, Tensor)]) -> Result<()> {
        let lora = self
            .config
            .lora
            .ok_or_else(|| Error::invalid("model has no adapters"))?;
        let d = self.config.lm.d_model;
        if adapters.len() != 4 * self.config.lm.n_layers {
            return Err(Error::invalid(format!(
                "expected {} adapter pairs, got {}",
                4 * self.config.lm.n_layers,
                adapters.len()
            )));
        }
        for (a, b) in adapters {
            if a.shape() != [d, lora.rank] || b.shape() != [lora.rank, d] {
                return Err(Error::shape(
                    "lora",
                    format!("rank {} adapters need {d}x{0} and {0}x{d}, got {:?} and {:?}", lora.rank, a.shape(), b.shape()),
                ));
            }
        }
        let ids: Vec<(ParamId, ParamId)> =
            self.ids.layers.iter().flat_map(|l| l.lora.expect("adapters present")).collect();
        for ((ia, ib), (a, b)) in ids.into_iter().zip(adapters) {
            self.params.set_value(ia, a.clone())?;
            self.params.set_value(ib, b.clone())?;
        }
        Ok(())
    }

    pub fn embed_tokens(&self, g: &mut Graph, ids: &[TokenId]) -> Result<Var> {
        let size = self.config.lm.vocab.size();
        if let Some(&bad) = ids.iter().find(|&&t| t >= size) {
            return Err(Error::TokenOutOfRange { id: bad, size });
        }
        let table = g.param(&self.params, self.ids.tok_emb);
        g.embedding(table, ids)
    }

    fn fusion_ids(&self) -> Result<(&FusionConfig, &FusionIds)> {
        match (&self.config.fusion, &self.ids.fusion) {
            (Some(c), Some(i)) => Ok((c, i)),
            _ => Err(Error::invalid("model has no fusion module")),
        }
    }

    fn lin(&self, g: &mut Graph, x: Var, ids: LinearIds) -> Result<Var> {
        let w = g.param(&self.params, ids.0);
        let b = g.param(&self.params, ids.1);
        linear(g, x, w, b)
    }

    fn ln(&self, g: &mut Graph, x: Var, ids: LnIds) -> Result<Var> {
        let gain = g.param(&self.params, ids.0);
        let bias = g.param(&self.params, ids.1);
        g.layer_norm(x, gain, bias)
    }

    fn ffn(&self, g: &mut Graph, x: Var, a: LinearIds, b: LinearIds) -> Result<Var> {
        let h = self.lin(g, x, a)?;
        let h = g.gelu(h)?;
        self.lin(g, h, b)
    }

    /// Adapter output plus frame positional embedding, `F × d_model`.
    pub fn visual_features(&self, g: &mut Graph, track: &VisualTrack) -> Result<Var> {
        let (cfg, ids) = self.fusion_ids()?;
        let frames = track.frames();
        if frames == 0 {
            return Err(Error::Missing("visual frames".into()));
        }
        let expr: Vec<f64> = (0..frames).flat_map(|f| track.expression(f).to_vec()).collect();
        let jaw: Vec<f64> = (0..frames).flat_map(|f| track.jaw(f).to_vec()).collect();
        let expr = g.constant(Tensor::new(vec![frames, EXPR_DIM], expr)?);
        let jaw = g.constant(Tensor::new(vec![frames, JAW_DIM], jaw)?);
        let e = self.lin(g, expr, ids.expr)?;
        let j = self.lin(g, jaw, ids.jaw)?;
        let cat = g.concat_cols(&[e, j])?;
        let out = self.ffn(g, cat, ids.ad1, ids.ad2)?;
        let pe = g.constant(pe_table(&frame_positions(frames, cfg.compression), self.config.lm.d_model));
        g.add(out, pe)
    }

    /// Cross-attention stack: `n_queries` latents read from `v` (`F × d`).
    pub fn qformer(&self, g: &mut Graph, v: Var, n_queries: usize) -> Result<Var> {
        let (cfg, ids) = self.fusion_ids()?;
        let d = self.config.lm.d_model;
        let (frames, dv) = g.value(v).dims2();
        if dv != d {
            return Err(Error::shape("qformer", format!("visual width {dv}, expected {d}")));
        }
        if frames == 0 || n_queries == 0 {
            return Err(Error::invalid("cross-attention needs at least one frame and one query"));
        }
        let latent = g.param(&self.params, ids.query);
        let q0 = g.gather_rows(latent, &vec![0; n_queries])?;
        let pe = g.constant(pe_table(&query_positions(n_queries, frames, cfg.compression), d));
        let mut q = g.add(q0, pe)?;
        let inv = 1.0 / (d as f64).sqrt();
        for layer in &ids.cross {
            let qn = self.ln(g, q, layer.ln_q)?;
            let wq = g.param(&self.params, layer.wq);
            let wk = g.param(&self.params, layer.wk);
            let wv = g.param(&self.params, layer.wv);
            let wo = g.param(&self.params, layer.wo);
            let qq = g.matmul(qn, wq)?;
            let kk = g.matmul(v, wk)?;
            let vv = g.matmul(v, wv)?;
            let scores = g.matmul_nt(qq, kk)?;
            let scores = g.scale(scores, inv)?;
            let attn = g.softmax_rows(scores)?;
            let read = g.matmul(attn, vv)?;
            let read = g.matmul(read, wo)?;
            q = g.add(q, read)?;
            let qn = self.ln(g, q, layer.ln_ff)?;
            let f = self.ffn(g, qn, layer.ff1, layer.ff2)?;
            q = g.add(q, f)?;
        }
        Ok(q)
    }

    /// Number of prefix queries for a clip of `frames` frames.
    pub fn prefix_queries(&self, frames: usize) -> usize {
        let c = self.config.fusion.map_or(5, |f| f.compression);
        frames.div_ceil(c)
    }

    /// Combines speech embeddings with the visual track according to the
    /// configured mode. Speech-only models return `s` unchanged.
    pub fn fuse(
        &self,
        g: &mut Graph,
        s: Var,
        visual: Option<&VisualTrack>,
        r_mask: Option<&[bool]>,
    ) -> Result<FusionState> {
        let Some(cfg) = self.config.fusion else {
            return Ok(FusionState {
                mode: None,
                z: None,
                r_mask: None,
                h: s,
                n_prefix: 0,
            });
        };
        let track = visual.ok_or_else(|| Error::Missing("visual input for fusion".into()))?;
        let t = g.value(s).rows();
        let v = self.visual_features(g, track)?;
        match cfg.mode {
            FusionMode::Prefix => {
                let n = self.prefix_queries(track.frames());
                let z = self.qformer(g, v, n)?;
                let h = g.concat_rows(&[z, s])?;
                Ok(FusionState {
                    mode: Some(cfg.mode),
                    z: Some(z),
                    r_mask: None,
                    h,
                    n_prefix: n,
                })
            }
            FusionMode::Infill => {
                let mask = r_mask.ok_or_else(|| Error::Missing("infill replacement mask".into()))?;
                if mask.len() != t {
                    return Err(Error::shape("infill", format!("mask of {} for {t} positions", mask.len())));
                }
                let z = self.qformer(g, v, t)?;
                let h = g.select_rows(z, s, Rc::new(mask.to_vec()))?;
                Ok(FusionState {
                    mode: Some(cfg.mode),
                    z: Some(z),
                    r_mask: Some(mask.to_vec()),
                    h,
                    n_prefix: 0,
                })
            }
            FusionMode::Concat => {
                let frames = track.frames();
                let index: Vec<usize> = (0..t)
                    .map(|i| (((i as f64 + 0.5) * frames as f64 / t as f64) as usize).min(frames - 1))
                    .collect();
                let aligned = g.gather_rows(v, &index)?;
                let cat = g.concat_cols(&[s, aligned])?;
                let (a, b) = self.fusion_ids()?.1.concat.expect("concat parameters");
                let h = self.ffn(g, cat, a, b)?;
                Ok(FusionState {
                    mode: Some(cfg.mode),
                    z: None,
                    r_mask: None,
                    h,
                    n_prefix: 0,
                })
            }
        }
    }

    fn project(
        &self,
        g: &mut Graph,
        x: Var,
        w: ParamId,
        lora: Option<(ParamId, ParamId)>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let base = g.matmul(x, wv)?;
        let (Some((a, b)), Some(cfg)) = (lora, self.config.lora) else {
            return Ok(base);
        };
        let xin = match rng {
            Some(r) if cfg.dropout > 0.0 => dropout(g, x, cfg.dropout, &mut **r)?,
            _ => x,
        };
        let av = g.param(&self.params, a);
        let bv = g.param(&self.params, b);
        let low = g.matmul(xin, av)?;
        let low = g.matmul(low, bv)?;
        let low = g.scale(low, cfg.scale())?;
        g.add(base, low)
    }

    /// Final-norm hidden states for input rows `h`. Keys whose
    /// `key_visible` entry is false are hidden from every query. Passing an
    /// RNG turns on training-time dropout.
    pub fn lm_hidden(
        &self,
        g: &mut Graph,
        h: Var,
        key_visible: Option<&[bool]>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let lm = &self.config.lm;
        let (len, d) = g.value(h).dims2();
        if len > lm.max_seq {
            return Err(Error::SequenceTooLong { len, max: lm.max_seq });
        }
        if d != lm.d_model {
            return Err(Error::shape("lm input", format!("width {d}, expected {}", lm.d_model)));
        }
        if let Some(k) = key_visible {
            if k.len() != len {
                return Err(Error::shape("attention mask", format!("{} entries for {len} positions", k.len())));
            }
        }
        let vis = Rc::new(attention_visibility(len, key_visible));
        let positions = Rc::new((0..len).map(|i| i as f64).collect::<Vec<_>>());
        let hd = lm.head_dim();
        let inv = 1.0 / (hd as f64).sqrt();
        let mut x = h;
        for layer in &self.ids.layers {
            let lora = layer.lora;
            let xn = self.ln(g, x, layer.ln1)?;
            let q = self.project(g, xn, layer.wq, lora.map(|l| l[0]), &mut rng)?;
            let k = self.project(g, xn, layer.wk, lora.map(|l| l[1]), &mut rng)?;
            let v = self.project(g, xn, layer.wv, lora.map(|l| l[2]), &mut rng)?;
            let q = g.rope(q, positions.clone(), hd)?;
            let k = g.rope(k, positions.clone(), hd)?;
            let mut heads = Vec::with_capacity(lm.n_heads);
            for head in 0..lm.n_heads {
                let qh = g.slice_cols(q, head * hd, hd)?;
                let kh = g.slice_cols(k, head * hd, hd)?;
                let vh = g.slice_cols(v, head * hd, hd)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, inv)?;
                let a = g.masked_softmax_rows(s, Some(vis.clone()))?;
                heads.push(g.matmul(a, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let mut att = self.project(g, cat, layer.wo, lora.map(|l| l[3]), &mut rng)?;
            if let Some(r) = rng.as_mut().filter(|_| lm.dropout > 0.0) {
                att = dropout(g, att, lm.dropout, &mut **r)?;
            }
            x = g.add(x, att)?;
            let xn = self.ln(g, x, layer.ln2)?;
            let mut f = self.ffn(g, xn, layer.ff1, layer.ff2)?;
            if let Some(r) = rng.as_mut().filter(|_| lm.dropout > 0.0) {
                f = dropout(g, f, lm.dropout, &mut **r)?;
            }
            x = g.add(x, f)?;
        }
        self.ln(g, x, self.ids.ln_f)
    }

    /// Next-token logits from hidden states (output head tied to `tok_emb`).
    pub fn lm_logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let table = g.param(&self.params, self.ids.tok_emb);
        g.matmul_nt(hidden, table)
    }

    pub fn lm_forward(&self, g: &mut Graph, h: Var, key_visible: Option<&[bool]>) -> Result<Var> {
        let hidden = self.lm_hidden(g, h, key_visible, None)?;
        self.lm_logits(g, hidden)
    }

    /// Emotion logits (`1 × 4`) from hidden states at visual-query rows and
    /// style/pitch rows. Inputs are detached so this loss never reaches the
    /// LM or fusion parameters.
    pub fn emotion_logits(&self, g: &mut Graph, hidden: Var, visual_rows: &[usize], speech_rows: &[usize]) -> Result<Var> {
        if speech_rows.is_empty() && visual_rows.is_empty() {
            return Err(Error::Missing("emotion head needs at least one eligible position".into()));
        }
        let ids = self.ids.head.clone();
        let frozen = g.detach(hidden);
        let mut parts = Vec::new();
        if !visual_rows.is_empty() {
            let rows = g.gather_rows(frozen, visual_rows)?;
            parts.push(self.ffn(g, rows, ids.v1, ids.v2)?);
        }
        if !speech_rows.is_empty() {
            let rows = g.gather_rows(frozen, speech_rows)?;
            parts.push(self.ffn(g, rows, ids.s1, ids.s2)?);
        }
        let all = g.concat_rows(&parts)?;
        let pooled = g.mean_rows(all)?;
        let pooled = g.gelu(pooled)?;
        self.lin(g, pooled, ids.cls)
    }

    pub fn count_params(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|(_, p)| p.group == group).map(|(_, p)| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests;
