//! Standalone emotion classifier over speech tokens, visual frames or
//! both: per-step features concatenated along time, one encoder layer,
//! mean-pool, linear output.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{classification_metrics, ClassificationMetrics};
use crate::numcore::rng::derive_seed;
use crate::numcore::{sinusoidal_embedding, AdamConfig, AdamState, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::synthgen::{argmax, DialogueSample, EXPR_DIM, JAW_DIM};
use crate::tokens::{Emotion, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Visual,
    Both,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Speech, Modality::Visual, Modality::Both];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Speech => "speech",
            Modality::Visual => "visual",
            Modality::Both => "both",
        }
    }

    fn speech(self) -> bool {
        self != Modality::Visual
    }

    fn visual(self) -> bool {
        self != Modality::Speech
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_ff: 64,
            lr: 3e-3,
            epochs: 4,
            batch_size: 16,
            seed: 0,
        }
    }
}

struct Ids {
    tok: ParamId,
    vis: (ParamId, ParamId),
    kind: ParamId,
    ln1: (ParamId, ParamId),
    w: [ParamId; 4],
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln_f: (ParamId, ParamId),
    cls: (ParamId, ParamId),
}

pub struct StandaloneClassifier {
    modality: Modality,
    vocab: Vocab,
    d: usize,
    params: ParamStore,
    ids: Ids,
}

impl StandaloneClassifier {
    pub fn new(vocab: Vocab, modality: Modality, cfg: &ClassifierConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "classifier-init", 0));
        let mut store = ParamStore::new();
        let grp = ParamGroup::Classifier;
        let mut normal = |store: &mut ParamStore, name: &str, r: usize, c: usize, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            let data = (0..r * c).map(|_| dist.sample(&mut rng)).collect();
            store.insert(name, Tensor::new(vec![r, c], data).unwrap(), grp)
        };
        let fill = |store: &mut ParamStore, name: &str, c: usize, v: f64| store.insert(name, Tensor::filled(&[1, c], v), grp);
        let vis_in = EXPR_DIM + JAW_DIM;
        let tok = normal(&mut store, "tok_emb", vocab.size() as usize, d, 0.3);
        let vis = (normal(&mut store, "vis.w", vis_in, d, 1.0 / (vis_in as f64).sqrt()), fill(&mut store, "vis.b", d, 0.0));
        let kind = normal(&mut store, "kind", 2, d, 0.3);
        let ln1 = (fill(&mut store, "ln1.g", d, 1.0), fill(&mut store, "ln1.b", d, 0.0));
        let w = ["wq", "wk", "wv", "wo"].map(|n| normal(&mut store, n, d, d, 1.0 / (d as f64).sqrt()));
        let ln2 = (fill(&mut store, "ln2.g", d, 1.0), fill(&mut store, "ln2.b", d, 0.0));
        let ff1 = (normal(&mut store, "ff1.w", d, f, 1.0 / (d as f64).sqrt()), fill(&mut store, "ff1.b", f, 0.0));
        let ff2 = (normal(&mut store, "ff2.w", f, d, 1.0 / (f as f64).sqrt()), fill(&mut store, "ff2.b", d, 0.0));
        let ln_f = (fill(&mut store, "ln_f.g", d, 1.0), fill(&mut store, "ln_f.b", d, 0.0));
        let cls = (
            normal(&mut store, "cls.w", d, Emotion::COUNT, 1.0 / (d as f64).sqrt()),
            fill(&mut store, "cls.b", Emotion::COUNT, 0.0),
        );
        Self {
            modality,
            vocab,
            d,
            params: store,
            ids: Ids {
                tok,
                vis,
                kind,
                ln1,
                w,
                ln2,
                ff1,
                ff2,
                ln_f,
                cls,
            },
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, x: Var, ids: (ParamId, ParamId)) -> Result<Var> {
        let w = self.p(g, ids.0);
        let b = self.p(g, ids.1);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, ids: (ParamId, ParamId)) -> Result<Var> {
        let gain = self.p(g, ids.0);
        let bias = self.p(g, ids.1);
        g.layer_norm(x, gain, bias)
    }

    /// Class logits (`1 × 4`) for one sample.
    pub fn logits(&self, g: &mut Graph, sample: &DialogueSample) -> Result<Var> {
        let d = self.d;
        let kinds = self.p(g, self.ids.kind);
        let mut parts = Vec::new();
        if self.modality.speech() {
            let toks = &sample.input.tokens;
            let table = self.p(g, self.ids.tok);
            let e = g.embedding(table, toks)?;
            let pe: Vec<f64> = (0..toks.len()).flat_map(|i| sinusoidal_embedding(i as f64, d)).collect();
            let pe = g.constant(Tensor::new(vec![toks.len(), d], pe)?);
            let e = g.add(e, pe)?;
            let k = g.gather_rows(kinds, &vec![0; toks.len()])?;
            parts.push(g.add(e, k)?);
        }
        if self.modality.visual() {
            let v = &sample.visual;
            let n = v.frames();
            let feats: Vec<f64> = (0..n)
                .flat_map(|f| v.expression(f).iter().chain(v.jaw(f)).copied().collect::<Vec<_>>())
                .collect();
            let x = g.constant(Tensor::new(vec![n, EXPR_DIM + JAW_DIM], feats)?);
            let e = self.linear(g, x, self.ids.vis)?;
            let pe: Vec<f64> = (0..n).flat_map(|i| sinusoidal_embedding(i as f64, d)).collect();
            let pe = g.constant(Tensor::new(vec![n, d], pe)?);
            let e = g.add(e, pe)?;
            let k = g.gather_rows(kinds, &vec![1; n])?;
            parts.push(g.add(e, k)?);
        }
        let x = g.concat_rows(&parts)?;
        let xn = self.norm(g, x, self.ids.ln1)?;
        let [wq, wk, wv, wo] = self.ids.w.map(|id| self.p(g, id));
        let q = g.matmul(xn, wq)?;
        let k = g.matmul(xn, wk)?;
        let v = g.matmul(xn, wv)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
        let a = g.softmax_rows(s)?;
        let o = g.matmul(a, v)?;
        let o = g.matmul(o, wo)?;
        let x = g.add(x, o)?;
        let xn = self.norm(g, x, self.ids.ln2)?;
        let h = self.linear(g, xn, self.ids.ff1)?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, self.ids.ff2)?;
        let x = g.add(x, h)?;
        let x = self.norm(g, x, self.ids.ln_f)?;
        let pooled = g.mean_rows(x)?;
        self.linear(g, pooled, self.ids.cls)
    }

    pub fn fit(&mut self, train: &[DialogueSample], cfg: &ClassifierConfig) -> Result<()> {
        let mut seen = [false; Emotion::COUNT];
        train.iter().for_each(|s| seen[s.emotion.index()] = true);
        if seen.iter().filter(|&&b| b).count() < 2 {
            return Err(Error::invalid("classifier needs at least two classes in training data"));
        }
        if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
            return Err(Error::invalid("classifier batch size, epochs and rate must be positive"));
        }
        let adam = AdamConfig {
            warmup_steps: 0,
            ..AdamConfig::default()
        };
        let mut opt = AdamState::new(&self.params, adam, BTreeMap::from([(ParamGroup::Classifier, cfg.lr)]));
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "classifier-order", epoch as u64)));
            for chunk in order.chunks(cfg.batch_size) {
                self.params.zero_grads();
                for &i in chunk {
                    let mut g = Graph::new();
                    let logits = self.logits(&mut g, &train[i])?;
                    let loss = g.cross_entropy(logits, &[train[i].emotion.index() as u32], &[true])?;
                    let grads = g.backward(loss)?;
                    self.params.accumulate(&g, &grads, 1.0 / chunk.len() as f64);
                }
                opt.step(&mut self.params, 1.0)?;
            }
        }
        Ok(())
    }

    pub fn predict(&self, sample: &DialogueSample) -> Result<Emotion> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, sample)?;
        Ok(Emotion::from_index(argmax(g.value(logits).data())).expect("four classes"))
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierOutcome {
    pub modality: Modality,
    pub ids: Vec<String>,
    pub predictions: Vec<Emotion>,
    pub labels: Vec<Emotion>,
    pub correct: Vec<bool>,
    pub metrics: ClassificationMetrics,
}

/// Trains one classifier for `modality` on `train` and scores `test`.
pub fn standalone_fusion_classifier(
    vocab: Vocab,
    train: &[DialogueSample],
    test: &[DialogueSample],
    modality: Modality,
    cfg: &ClassifierConfig,
) -> Result<ClassifierOutcome> {
    let mut clf = StandaloneClassifier::new(vocab, modality, cfg);
    clf.fit(train, cfg)?;
    let predictions = test.iter().map(|s| clf.predict(s)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<Emotion> = test.iter().map(|s| s.emotion).collect();
    let correct = predictions.iter().zip(&labels).map(|(p, l)| p == l).collect();
    let metrics = classification_metrics(&predictions, &labels)?;
    Ok(ClassifierOutcome {
        modality,
        ids: test.iter().map(|s| s.id.clone()).collect(),
        predictions,
        labels,
        correct,
        metrics,
    })
}
