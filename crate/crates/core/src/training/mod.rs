//! Pre-training on speech streams, prompt fine-tuning with the auxiliary
//! emotion head, and the standalone modality-fusion classifier.

mod classifier;
pub mod prompt;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{infill_mask, mask_speech, FusionMode, Model};
use crate::numcore::rng::substream;
use crate::numcore::{AdamConfig, AdamState, Graph, ParamGroup, Var};
use crate::synthgen::{DialogueSample, VisualTrack};
use crate::tokens::{Emotion, Task, TokenId};

pub use classifier::{
    standalone_fusion_classifier, ClassifierConfig, ClassifierOutcome, Modality, StandaloneClassifier,
};
pub use prompt::{build_prompt, order_demos, BlockSpec, PromptLayout, Segment, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Full-parameter rate for training the base speech LM from scratch.
    pub lr_base: f64,
    pub lr_adapter_pretrain: f64,
    pub lr_adapter_finetune: f64,
    pub lr_fusion: f64,
    pub lr_head: f64,
    pub warmup_steps: usize,
    pub finetune_warmup_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub fusion_mode: Option<FusionMode>,
    pub train_mask_ratio: f64,
    /// Update the fusion module while fine-tuning.
    pub finetune_fusion: bool,
    /// Fraction of fine-tuning prompts laid out with demonstrations.
    pub icl_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-3,
            lr_adapter_pretrain: 3e-5,
            lr_adapter_finetune: 5e-5,
            lr_fusion: 1e-4,
            lr_head: 3e-4,
            warmup_steps: 1000,
            finetune_warmup_steps: 0,
            batch_size: 8,
            grad_accum: 2,
            epochs: 1,
            max_steps: None,
            seed: 0,
            fusion_mode: Some(FusionMode::Prefix),
            train_mask_ratio: 0.0,
            finetune_fusion: false,
            icl_rate: 0.0,
        }
    }
}

impl TrainConfig {
    /// Rates and schedule sized for the small desk models.
    pub fn desk() -> Self {
        Self {
            lr_base: 3e-3,
            lr_adapter_pretrain: 2e-3,
            lr_adapter_finetune: 2e-3,
            lr_fusion: 1e-4,
            lr_head: 3e-3,
            warmup_steps: 50,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let rates = [
            self.lr_base,
            self.lr_adapter_pretrain,
            self.lr_adapter_finetune,
            self.lr_fusion,
            self.lr_head,
        ];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::invalid("batch size, accumulation, epochs and step cap must be positive"));
        }
        for (name, r) in [("train mask ratio", self.train_mask_ratio), ("icl rate", self.icl_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub mask_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub steps: usize,
    pub records: Vec<MetricRecord>,
}

impl TrainReport {
    /// Mean loss over the first / last `k` steps.
    pub fn head_tail(&self, k: usize) -> (f64, f64) {
        let k = k.clamp(1, self.records.len().max(1));
        let mean = |r: &[MetricRecord]| r.iter().map(|m| m.loss).sum::<f64>() / r.len().max(1) as f64;
        (mean(&self.records[..k]), mean(&self.records[self.records.len() - k..]))
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean next-token loss over a stream with how many targets it covers.
pub struct StreamLoss {
    pub loss: Var,
    pub count: usize,
}

/// Next-token loss on `tokens` (predicting `s_2..s_T`) after fusing with
/// `visual`. A `mask_ratio` share of stream keys is hidden; `rng` draws
/// the key and infill masks, `dropout` enables training-time dropout.
pub fn stream_loss(
    model: &Model,
    g: &mut Graph,
    visual: Option<&VisualTrack>,
    tokens: &[TokenId],
    mask_ratio: f64,
    rng: &mut dyn RngCore,
    dropout: Option<&mut dyn RngCore>,
) -> Result<StreamLoss> {
    if tokens.len() < 2 {
        return Err(Error::invalid("stream needs at least two tokens"));
    }
    let s = model.embed_tokens(g, tokens)?;
    let r_mask = match model.config().fusion {
        Some(f) if f.mode == FusionMode::Infill => Some(infill_mask(tokens.len(), f.infill_ratio, rng)?),
        _ => None,
    };
    let st = model.fuse(g, s, visual, r_mask.as_deref())?;
    let rows = st.n_prefix + tokens.len();
    let eligible: Vec<bool> = (0..rows).map(|i| i >= st.n_prefix).collect();
    let visible = mask_speech(&eligible, mask_ratio, rng)?;
    let hidden = model.lm_hidden(g, st.h, Some(&visible), dropout)?;
    let logits = model.lm_logits(g, hidden)?;
    let mut targets = vec![0; rows];
    let mut include = vec![false; rows];
    for i in 0..tokens.len() - 1 {
        targets[st.n_prefix + i] = tokens[i + 1];
        include[st.n_prefix + i] = true;
    }
    Ok(StreamLoss {
        loss: g.cross_entropy(logits, &targets, &include)?,
        count: tokens.len() - 1,
    })
}

/// Input rows for a prompt: token embeddings, visual queries in their
/// slots, and (infill / concat) fused input speech.
pub fn embed_prompt(
    model: &Model,
    g: &mut Graph,
    layout: &PromptLayout,
    clips: &[&VisualTrack],
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let fusion = model.config().fusion;
    if fusion.is_some() && clips.len() != layout.n_blocks {
        return Err(Error::invalid(format!(
            "{} visual clips for {} prompt blocks",
            clips.len(),
            layout.n_blocks
        )));
    }
    let fuse_input = matches!(fusion.map(|f| f.mode), Some(FusionMode::Infill | FusionMode::Concat));
    let mut pieces = Vec::new();
    let mut run: Vec<TokenId> = Vec::new();
    let n = layout.len();
    let mut i = 0;
    while i < n {
        let (block, seg) = (layout.blocks[i], layout.segments[i]);
        let special = seg == Segment::Visual || (fuse_input && seg == Segment::Input);
        if !special {
            run.push(layout.token(i).expect("token slot"));
            i += 1;
            continue;
        }
        if !run.is_empty() {
            pieces.push(model.embed_tokens(g, &run)?);
            run.clear();
        }
        let mut j = i;
        while j < n && layout.blocks[j] == block && layout.segments[j] == seg {
            j += 1;
        }
        let clip = *clips
            .get(block)
            .ok_or_else(|| Error::Missing("visual input for fusion".into()))?;
        if seg == Segment::Visual {
            let v = model.visual_features(g, clip)?;
            pieces.push(model.qformer(g, v, j - i)?);
        } else {
            let ids: Vec<TokenId> = (i..j).map(|k| layout.token(k).expect("token slot")).collect();
            let s = model.embed_tokens(g, &ids)?;
            let f = fusion.expect("fusion present");
            let mask = match f.mode {
                FusionMode::Infill => Some(infill_mask(ids.len(), f.infill_ratio, rng)?),
                _ => None,
            };
            pieces.push(model.fuse(g, s, Some(clip), mask.as_deref())?.h);
        }
        i = j;
    }
    if !run.is_empty() {
        pieces.push(model.embed_tokens(g, &run)?);
    }
    g.concat_rows(&pieces)
}

/// Losses of one prompt: target-segment NLL and, when `label` is given,
/// the emotion head's cross-entropy.
pub struct PromptLoss {
    pub lm: Var,
    pub head: Option<Var>,
    pub hidden: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn prompt_loss(
    model: &Model,
    g: &mut Graph,
    layout: &PromptLayout,
    clips: &[&VisualTrack],
    mask_ratio: f64,
    label: Option<Emotion>,
    rng: &mut dyn RngCore,
    dropout: Option<&mut dyn RngCore>,
) -> Result<PromptLoss> {
    let h = embed_prompt(model, g, layout, clips, rng)?;
    let visible = mask_speech(&layout.maskable(), mask_ratio, rng)?;
    let hidden = model.lm_hidden(g, h, Some(&visible), dropout)?;
    let logits = model.lm_logits(g, hidden)?;
    let (targets, include) = layout.targets();
    let lm = g.cross_entropy(logits, &targets, &include)?;
    let head = match label {
        Some(e) => {
            let (v, s) = layout.head_rows(&model.config().lm.vocab);
            let logits = model.emotion_logits(g, hidden, &v, &s)?;
            Some(g.cross_entropy(logits, &[e.index() as u32], &[true])?)
        }
        None => None,
    };
    Ok(PromptLoss { lm, head, hidden })
}

/// Generic minibatch loop: `item_loss` builds one sample's scalar loss.
/// Each optimizer step averages `batch_size · grad_accum` samples.
fn run_loop<F>(
    model: &mut Model,
    stage: &str,
    n_items: usize,
    cfg: &TrainConfig,
    lrs: BTreeMap<ParamGroup, f64>,
    warmup: usize,
    mut item_loss: F,
) -> Result<TrainReport>
where
    F: FnMut(&Model, &mut Graph, usize, &mut dyn RngCore) -> Result<Var>,
{
    cfg.check()?;
    if n_items == 0 {
        return Err(Error::Missing("training data".into()));
    }
    let adam_cfg = AdamConfig {
        warmup_steps: warmup,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.params, adam_cfg, lrs);
    let per_step = cfg.batch_size * cfg.grad_accum;
    let mut records = Vec::new();
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut substream(cfg.seed, "order", epoch as u64));
        for (k, chunk) in order.chunks(per_step).enumerate() {
            model.params.zero_grads();
            let weight = 1.0 / chunk.len() as f64;
            let mut total = 0.0;
            for (pos, &item) in chunk.iter().enumerate() {
                let draw = (epoch * n_items + k * per_step + pos) as u64;
                let mut rng = substream(cfg.seed, "item", draw);
                let mut g = Graph::new();
                let loss = item_loss(model, &mut g, item, &mut rng)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        step: records.len() + 1,
                        detail: format!("loss {value} on item {item}"),
                    });
                }
                let grads = g.backward(loss)?;
                model.params.accumulate(&g, &grads, weight);
                total += weight * value;
            }
            adam.step(&mut model.params, 1.0)?;
            let lr = adam.lrs.keys().next().map_or(0.0, |&grp| adam.current_lr(grp));
            records.push(MetricRecord {
                step: records.len() + 1,
                loss: total,
                lr,
                mask_ratio: cfg.train_mask_ratio,
            });
            if cfg.max_steps.is_some_and(|m| records.len() >= m) {
                break 'epochs;
            }
        }
    }
    Ok(TrainReport {
        stage: stage.to_string(),
        steps: records.len(),
        records,
    })
}

fn set_groups(model: &mut Model, trainable: &[(ParamGroup, bool)]) {
    for &(grp, on) in trainable {
        model.params.set_trainable(grp, on);
    }
}

/// Trains every base parameter of a speech-only model on raw streams.
/// This stands in for the large pretrained speech LM.
pub fn train_speech_lm(model: &mut Model, streams: &[&[TokenId]], cfg: &TrainConfig) -> Result<TrainReport> {
    if model.config().fusion.is_some() || model.config().lora.is_some() {
        return Err(Error::invalid("base speech LM training expects a plain model"));
    }
    set_groups(model, &[(ParamGroup::Base, true), (ParamGroup::EmotionHead, false)]);
    let lrs = BTreeMap::from([(ParamGroup::Base, cfg.lr_base)]);
    run_loop(model, "speech_lm", streams.len(), cfg, lrs, cfg.warmup_steps, |m, g, i, rng| {
        let mut drop_rng = substream(rng.gen(), "dropout", 0);
        Ok(stream_loss(m, g, None, streams[i], cfg.train_mask_ratio, rng, Some(&mut drop_rng))?.loss)
    })
}

/// Trains a plain speech LM on every input and response stream of `data`.
pub fn train_base_lm(model: &mut Model, data: &[DialogueSample], cfg: &TrainConfig) -> Result<TrainReport> {
    let streams: Vec<&[TokenId]> = data
        .iter()
        .flat_map(|s| [s.input.tokens.as_slice(), s.response.tokens.as_slice()])
        .collect();
    train_speech_lm(model, &streams, cfg)
}

/// Next-token pre-training on `(visual, input stream)` pairs. Updates the
/// adapters and the fusion module; base weights stay frozen.
pub fn pretrain(model: &mut Model, data: &[DialogueSample], cfg: &TrainConfig) -> Result<TrainReport> {
    if model.config().fusion_mode() != cfg.fusion_mode {
        return Err(Error::invalid("model fusion mode differs from the training configuration"));
    }
    if model.config().lora.is_none() && model.config().fusion.is_none() {
        return Err(Error::invalid("pre-training needs adapters or a fusion module to update"));
    }
    set_groups(
        model,
        &[
            (ParamGroup::Base, false),
            (ParamGroup::Lora, true),
            (ParamGroup::Fusion, true),
            (ParamGroup::EmotionHead, false),
        ],
    );
    let lrs = BTreeMap::from([(ParamGroup::Lora, cfg.lr_adapter_pretrain), (ParamGroup::Fusion, cfg.lr_fusion)]);
    let with_visual = model.config().fusion.is_some();
    run_loop(model, "pretrain", data.len(), cfg, lrs, cfg.warmup_steps, |m, g, i, rng| {
        let s = &data[i];
        let mut drop_rng = substream(rng.gen(), "dropout", 0);
        let visual = with_visual.then_some(&s.visual);
        Ok(stream_loss(m, g, visual, &s.input.tokens, cfg.train_mask_ratio, rng, Some(&mut drop_rng))?.loss)
    })
}

/// Prompt blocks for `query`, with demonstrations (one per emotion, drawn
/// from `pool` excluding `query`) when `icl` is set.
pub fn training_layout(
    model: &Model,
    task: Task,
    pool: &[DialogueSample],
    by_emotion: &[Vec<usize>],
    query: usize,
    icl: bool,
    rng: &mut dyn RngCore,
) -> Result<(PromptLayout, Vec<usize>)> {
    let with_visual = model.config().fusion_mode() == Some(FusionMode::Prefix);
    let nq = |s: &DialogueSample| if with_visual { model.prefix_queries(s.visual.frames()) } else { 0 };
    let mut members = Vec::new();
    if icl {
        for idx in by_emotion {
            let choices: Vec<usize> = idx.iter().copied().filter(|&j| j != query).collect();
            let &j = choices
                .choose(rng)
                .ok_or_else(|| Error::Missing("demonstration candidates".into()))?;
            members.push(j);
        }
    }
    let demos: Vec<BlockSpec> = members
        .iter()
        .map(|&j| BlockSpec {
            sample: &pool[j],
            n_queries: nq(&pool[j]),
            emotion: pool[j].emotion,
        })
        .collect();
    let q = &pool[query];
    let spec = BlockSpec {
        sample: q,
        n_queries: nq(q),
        emotion: q.emotion,
    };
    let layout = build_prompt(&model.config().lm.vocab, task, &demos, &spec, true, model.config().lm.max_seq)?;
    members.push(query);
    Ok((layout, members))
}

pub fn indices_by_emotion(data: &[DialogueSample]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); Emotion::COUNT];
    for (i, s) in data.iter().enumerate() {
        out[s.emotion.index()].push(i);
    }
    out
}

/// Prompt fine-tuning: target-segment NLL plus (for generation) the
/// emotion head trained on the true label.
pub fn finetune(model: &mut Model, data: &[DialogueSample], cfg: &TrainConfig, task: Task) -> Result<TrainReport> {
    if model.config().fusion_mode() != cfg.fusion_mode {
        return Err(Error::invalid("model fusion mode differs from the training configuration"));
    }
    set_groups(
        model,
        &[
            (ParamGroup::Base, false),
            (ParamGroup::Lora, true),
            (ParamGroup::Fusion, cfg.finetune_fusion),
            (ParamGroup::EmotionHead, task == Task::Generate),
        ],
    );
    let lrs = BTreeMap::from([
        (ParamGroup::Lora, cfg.lr_adapter_finetune),
        (ParamGroup::Fusion, cfg.lr_fusion),
        (ParamGroup::EmotionHead, cfg.lr_head),
    ]);
    let by_emotion = indices_by_emotion(data);
    let has_fusion = model.config().fusion.is_some();
    run_loop(model, "finetune", data.len(), cfg, lrs, cfg.finetune_warmup_steps, |m, g, i, rng| {
        let icl = cfg.icl_rate > 0.0 && rng.gen_bool(cfg.icl_rate);
        let (layout, members) = training_layout(m, task, data, &by_emotion, i, icl, rng)?;
        let clips: Vec<&VisualTrack> = if has_fusion {
            members.iter().map(|&j| &data[j].visual).collect()
        } else {
            Vec::new()
        };
        let label = (task == Task::Generate).then_some(data[i].emotion);
        let mut drop_rng = substream(rng.gen(), "dropout", 0);
        let pl = prompt_loss(m, g, &layout, &clips, cfg.train_mask_ratio, label, rng, Some(&mut drop_rng))?;
        match pl.head {
            Some(h) => g.add(pl.lm, h),
            None => Ok(pl.lm),
        }
    })
}
