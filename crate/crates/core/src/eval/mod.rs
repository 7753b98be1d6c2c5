//! Perplexity, token error rate, classification metrics, contingency
//! analysis, the synthetic emotion judge and controllability counts.

mod judge;
mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::{block_queries, build_icl_prompt, greedy_text, prompt_rows, Generator, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::{mask_speech, InferenceModel, Model};
use crate::numcore::rng::{derive_seed, substream};
use crate::numcore::Graph;
use crate::synthgen::{corrupt, DialogueSample, VisualTrack};
use crate::tokens::{Emotion, InterleavedStream, Task};
use crate::training::{build_prompt, stream_loss, BlockSpec};

pub use judge::BayesJudge;
pub use metrics::{classification_metrics, contingency, edit_distance, token_wer, ClassificationMetrics, Contingency};

/// Default evaluation mask grid.
pub const MASK_GRID: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 0.7];
/// Semantic-token corruption rates standing in for decreasing SNR.
pub const CORRUPTION_GRID: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

/// Hex sha256 of a value's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    /// Scalar metric per condition name.
    pub metrics: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, BTreeMap<Emotion, f64>>,
    pub confusion: BTreeMap<String, [[usize; Emotion::COUNT]; Emotion::COUNT]>,
}

impl MetricsReport {
    pub fn new<T: Serialize>(task: &str, seed: u64, config: &T) -> Result<Self> {
        Ok(Self {
            task: task.to_string(),
            seed,
            config_hash: config_hash(config)?,
            metrics: BTreeMap::new(),
            per_class: BTreeMap::new(),
            confusion: BTreeMap::new(),
        })
    }

    pub fn add_classification(&mut self, prefix: &str, m: &ClassificationMetrics) {
        self.metrics.insert(format!("{prefix}.ua"), m.ua);
        self.metrics.insert(format!("{prefix}.wa"), m.wa);
        self.metrics.insert(format!("{prefix}.f1"), m.macro_f1);
        self.per_class.insert(prefix.to_string(), m.per_class_f1.clone());
        self.confusion.insert(prefix.to_string(), m.confusion);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn visual_of<'a>(model: &Model, s: &'a DialogueSample) -> Option<&'a VisualTrack> {
    model.config().fusion.is_some().then_some(&s.visual)
}

/// `exp` of the mean next-token NLL over `s_2..s_T` of every input stream,
/// with `mask_ratio` of stream keys hidden. Masks come from
/// `(eval_seed, sample id)` and are nested across ratios.
pub fn perplexity(model: &Model, data: &[DialogueSample], mask_ratio: f64, eval_seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Missing("evaluation data".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for s in data {
        let mut rng = substream(eval_seed, &s.id, 0);
        let mut g = Graph::new();
        let l = stream_loss(model, &mut g, visual_of(model, s), &s.input.tokens, mask_ratio, &mut rng, None)?;
        total += g.value(l.loss).item() * l.count as f64;
        count += l.count;
    }
    Ok((total / count as f64).exp())
}

/// Corpus-level token error rate of greedy transcripts. `corruption`
/// resamples input semantic tokens; `mask_ratio` hides input keys.
pub fn avsr_error_rate(model: &Model, data: &[DialogueSample], corruption: f64, mask_ratio: f64, eval_seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Missing("evaluation data".into()));
    }
    let vocab = model.config().lm.vocab;
    let inf = InferenceModel::new(model)?;
    let mut edits = 0;
    let mut total = 0;
    for s in data {
        let mut rng = substream(eval_seed, &s.id, 1);
        let mut noisy = s.clone();
        noisy.input = corrupt(&s.input, &vocab, corruption, &mut rng)?;
        let spec = BlockSpec {
            sample: &noisy,
            n_queries: block_queries(model, s),
            emotion: s.emotion,
        };
        let layout = build_prompt(&vocab, Task::Avsr, &[], &spec, false, model.config().lm.max_seq)?;
        let rows = prompt_rows(model, &layout, &[&s.visual], derive_seed(eval_seed, &s.id, 2))?;
        let visible = mask_speech(&layout.maskable(), mask_ratio, &mut rng)?;
        let hyp = masked_greedy(&inf, &rows, &visible, &vocab, s.transcript.len() * 2 + 4)?;
        edits += edit_distance(&hyp, &s.transcript);
        total += s.transcript.len();
    }
    Ok(edits as f64 / total as f64)
}

fn masked_greedy(
    inf: &InferenceModel,
    rows: &crate::numcore::Tensor,
    visible: &[bool],
    vocab: &crate::tokens::Vocab,
    max_new: usize,
) -> Result<Vec<crate::tokens::TokenId>> {
    if visible.iter().all(|&v| v) {
        return greedy_text(inf, rows, vocab, max_new);
    }
    let mut session = inf.session();
    let mut logits = None;
    for i in 0..rows.rows() {
        logits = session.push(rows.row(i), visible[i], i + 1 == rows.rows())?;
    }
    let lo = vocab.text(0) as usize;
    let n = vocab.n_transcript_symbols() as usize;
    let eos = vocab.control(crate::tokens::Control::Eos) as usize;
    let budget = max_new.min(inf.max_seq().saturating_sub(rows.rows()));
    let mut out = Vec::new();
    for _ in 0..budget {
        let l = logits.as_deref().expect("logits");
        let best = crate::synthgen::argmax(&l[lo..lo + n]);
        if l[eos] > l[lo + best] {
            break;
        }
        let id = (lo + best) as u32;
        out.push(id);
        logits = session.push_token(id, true)?;
    }
    Ok(out)
}

/// Emotion-head predictions on zero-shot prompts.
pub fn recognize_emotions(model: &Model, data: &[DialogueSample], eval_seed: u64) -> Result<Vec<Emotion>> {
    data.iter()
        .map(|s| {
            let (layout, _) = build_icl_prompt(model, &[], s, None, derive_seed(eval_seed, &s.id, 3))?;
            Ok(model
                .config()
                .lm
                .vocab
                .emotion_of(layout.token(layout.emotion_slot().expect("slot")).expect("token"))
                .expect("emotion id"))
        })
        .collect()
}

/// Responses generated with the predicted emotion, with their judged labels.
pub fn generate_and_judge(
    model: &Model,
    data: &[DialogueSample],
    judge: &BayesJudge,
    cfg: &SamplerConfig,
) -> Result<Vec<(InterleavedStream, Emotion)>> {
    let gen = Generator::new(model)?;
    data.iter()
        .map(|s| {
            let seed = derive_seed(cfg.seed, &s.id, 4);
            let (layout, clips) = build_icl_prompt(model, &[], s, None, seed)?;
            let out = gen.respond(&layout, &clips, cfg, seed)?;
            let judged = judge.judge(&out);
            Ok((out, judged))
        })
        .collect()
}

/// `counts[original][forced]`: generations judged as the forced label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityMatrix {
    pub counts: [[usize; Emotion::COUNT]; Emotion::COUNT],
    pub attempts: [[usize; Emotion::COUNT]; Emotion::COUNT],
}

impl ControllabilityMatrix {
    pub fn successes(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn total_attempts(&self) -> usize {
        self.attempts.iter().flatten().sum()
    }
}

/// Forces every other emotion into each sample's prompt and counts
/// generations the judge assigns to the forced label. With `demos`,
/// prompts carry one demonstration per emotion.
pub fn controllability(
    model: &Model,
    data: &[DialogueSample],
    demos: &[&DialogueSample],
    judge: &BayesJudge,
    cfg: &SamplerConfig,
) -> Result<ControllabilityMatrix> {
    let gen = Generator::new(model)?;
    let mut m = ControllabilityMatrix {
        counts: [[0; Emotion::COUNT]; Emotion::COUNT],
        attempts: [[0; Emotion::COUNT]; Emotion::COUNT],
    };
    for s in data {
        for forced in Emotion::ALL {
            if forced == s.emotion {
                continue;
            }
            let seed = derive_seed(cfg.seed, &s.id, 5 + forced.index() as u64);
            let (layout, clips) = build_icl_prompt(model, demos, s, Some(forced), seed)?;
            let out = gen.respond(&layout, &clips, cfg, seed)?;
            let (o, f) = (s.emotion.index(), forced.index());
            m.attempts[o][f] += 1;
            if judge.judge(&out) == forced {
                m.counts[o][f] += 1;
            }
        }
    }
    Ok(m)
}
