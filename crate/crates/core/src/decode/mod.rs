//! Sampling with temperature and nucleus truncation under the speech
//! token-type constraint, and prompt assembly for inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FusionMode, InferenceModel, Model};
use crate::numcore::rng::substream;
use crate::numcore::{Graph, Tensor};
use crate::synthgen::{argmax, DialogueSample, VisualTrack};
use crate::tokens::{Control, Emotion, InterleavedStream, Task, TokenId, TokenKind, Vocab};
use crate::training::{build_prompt, embed_prompt, order_demos, BlockSpec, PromptLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.95,
            max_new_tokens: 300,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!(
                "temperature {} must be positive and top_p {} in (0, 1]",
                self.temperature, self.top_p
            )));
        }
        Ok(())
    }
}

/// Token-type state for speech generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TypeConstraint {
    pub prev: Option<TokenKind>,
}

impl TypeConstraint {
    pub fn allows(&self, kind: TokenKind, is_eos: bool) -> bool {
        match self.prev {
            None => kind == TokenKind::Style,
            Some(prev) => {
                if is_eos {
                    return true;
                }
                match kind {
                    TokenKind::Text | TokenKind::Control => false,
                    TokenKind::Style | TokenKind::Pitch => kind != prev,
                    TokenKind::Semantic => true,
                }
            }
        }
    }

    pub fn advance(&mut self, kind: TokenKind) {
        self.prev = Some(kind);
    }
}

/// Sets every id the constraint forbids to −∞.
pub fn constrain(logits: &[f64], state: &TypeConstraint, vocab: &Vocab) -> Result<Vec<f64>> {
    if logits.len() != vocab.size() as usize {
        return Err(Error::shape("constrain", format!("{} logits for vocab {}", logits.len(), vocab.size())));
    }
    let eos = vocab.control(Control::Eos);
    let out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let id = i as TokenId;
            let kind = vocab.kind_of(id).expect("id inside vocab");
            if state.allows(kind, id == eos) {
                l
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    assert!(out.iter().any(|l| l.is_finite()), "constraint removed every candidate");
    Ok(out)
}

/// Kept ids with their renormalised probabilities, most likely first.
pub fn nucleus_support(logits: &[f64], temperature: f64, top_p: f64) -> Result<Vec<(TokenId, f64)>> {
    let max = logits
        .iter()
        .copied()
        .filter(|l| l.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut probs: Vec<(TokenId, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .map(|(i, &l)| (i as TokenId, ((l - max) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = 0;
    for p in &probs {
        keep += 1;
        cum += p.1;
        if cum >= top_p {
            break;
        }
    }
    probs.truncate(keep);
    probs.iter_mut().for_each(|p| p.1 /= cum);
    Ok(probs)
}

pub fn nucleus_sample<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplerConfig, rng: &mut R) -> Result<TokenId> {
    cfg.check()?;
    let support = nucleus_support(logits, cfg.temperature, cfg.top_p)?;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(id, p) in &support {
        cum += p;
        if u < cum {
            return Ok(id);
        }
    }
    Ok(support.last().expect("nonempty support").0)
}

/// Samples a speech continuation after `prompt_rows` (`L × d`) until EOS
/// or `max_new_tokens`.
pub fn generate<R: Rng + ?Sized>(
    model: &InferenceModel,
    prompt_rows: &Tensor,
    vocab: &Vocab,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<InterleavedStream> {
    cfg.check()?;
    let (len, _) = prompt_rows.dims2();
    if len == 0 {
        return Err(Error::Missing("prompt".into()));
    }
    if len + cfg.max_new_tokens > model.max_seq() {
        return Err(Error::SequenceTooLong {
            len: len + cfg.max_new_tokens,
            max: model.max_seq(),
        });
    }
    let mut session = model.session();
    let mut logits = None;
    for i in 0..len {
        logits = session.push(prompt_rows.row(i), true, i + 1 == len)?;
    }
    let eos = vocab.control(Control::Eos);
    let mut state = TypeConstraint::default();
    let mut out = Vec::new();
    for step in 0..cfg.max_new_tokens {
        let masked = constrain(logits.as_deref().expect("logits"), &state, vocab)?;
        let id = nucleus_sample(&masked, cfg, rng)?;
        if id == eos {
            break;
        }
        out.push(id);
        state.advance(vocab.kind_of(id)?);
        if step + 1 < cfg.max_new_tokens {
            logits = session.push_token(id, true)?;
        }
    }
    Ok(InterleavedStream::new(out, None))
}

/// Greedy decoding restricted to transcript symbols and EOS.
pub fn greedy_text(model: &InferenceModel, prompt_rows: &Tensor, vocab: &Vocab, max_new: usize) -> Result<Vec<TokenId>> {
    let (len, _) = prompt_rows.dims2();
    let budget = max_new.min(model.max_seq().saturating_sub(len));
    let mut session = model.session();
    let mut logits = None;
    for i in 0..len {
        logits = session.push(prompt_rows.row(i), true, i + 1 == len)?;
    }
    let lo = vocab.text(0) as usize;
    let n = vocab.n_transcript_symbols() as usize;
    let eos = vocab.control(Control::Eos);
    let mut out = Vec::new();
    for _ in 0..budget {
        let l = logits.as_deref().ok_or_else(|| Error::Missing("prompt".into()))?;
        let best = argmax(&l[lo..lo + n]);
        if l[eos as usize] > l[lo + best] {
            break;
        }
        let id = (lo + best) as TokenId;
        out.push(id);
        logits = session.push_token(id, true)?;
    }
    Ok(out)
}

/// Query rows of each prompt block for `model`'s fusion mode.
pub fn block_queries(model: &Model, sample: &DialogueSample) -> usize {
    match model.config().fusion_mode() {
        Some(FusionMode::Prefix) => model.prefix_queries(sample.visual.frames()),
        _ => 0,
    }
}

/// Computes the input rows of `layout` without tracking gradients.
pub fn prompt_rows(model: &Model, layout: &PromptLayout, clips: &[&VisualTrack], seed: u64) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut rng = substream(seed, "prompt-fusion", 0);
    let clips = if model.config().fusion.is_some() { clips } else { &[] };
    let h = embed_prompt(model, &mut g, layout, clips, &mut rng)?;
    Ok(g.value(h).clone())
}

/// Emotion-head prediction from the prompt context before the emotion slot.
pub fn predict_emotion(model: &Model, layout: &PromptLayout, clips: &[&VisualTrack], seed: u64) -> Result<Emotion> {
    let slot = layout
        .emotion_slot()
        .ok_or_else(|| Error::invalid("prompt has no emotion slot"))?;
    let ctx = layout.truncated(slot);
    let mut g = Graph::new();
    let mut rng = substream(seed, "prompt-fusion", 0);
    let clips = if model.config().fusion.is_some() { clips } else { &[] };
    let h = embed_prompt(model, &mut g, &ctx, clips, &mut rng)?;
    let hidden = model.lm_hidden(&mut g, h, None, None)?;
    let (v, s) = ctx.head_rows(&model.config().lm.vocab);
    let logits = model.emotion_logits(&mut g, hidden, &v, &s)?;
    Ok(Emotion::from_index(argmax(g.value(logits).data())).expect("four classes"))
}

/// A generation-task prompt for `query`: demonstrations (one per emotion,
/// reordered happy, sad, angry, neutral) when `demos` is nonempty, and
/// the emotion slot set to `forced` or else the emotion head's prediction.
pub fn build_icl_prompt(
    model: &Model,
    demos: &[&DialogueSample],
    query: &DialogueSample,
    forced: Option<Emotion>,
    seed: u64,
) -> Result<(PromptLayout, Vec<VisualTrack>)> {
    let vocab = model.config().lm.vocab;
    let ordered = if demos.is_empty() { Vec::new() } else { order_demos(demos)? };
    let specs: Vec<BlockSpec> = ordered
        .iter()
        .map(|d| BlockSpec {
            sample: d,
            n_queries: block_queries(model, d),
            emotion: d.emotion,
        })
        .collect();
    let q = BlockSpec {
        sample: query,
        n_queries: block_queries(model, query),
        emotion: forced.unwrap_or(Emotion::Neutral),
    };
    let mut layout = build_prompt(&vocab, Task::Generate, &specs, &q, false, model.config().lm.max_seq)?;
    let clips: Vec<VisualTrack> = ordered.iter().chain([&query]).map(|s| s.visual.clone()).collect();
    if forced.is_none() {
        let refs: Vec<&VisualTrack> = clips.iter().collect();
        let e = predict_emotion(model, &layout, &refs, seed)?;
        layout.set_emotion(&vocab, e)?;
    }
    Ok((layout, clips))
}

/// Model plus its merged inference copy.
pub struct Generator<'a> {
    pub model: &'a Model,
    pub inference: InferenceModel,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a Model) -> Result<Self> {
        Ok(Self {
            model,
            inference: InferenceModel::new(model)?,
        })
    }

    /// Speech response for a prompt built by [`build_icl_prompt`].
    pub fn respond(&self, layout: &PromptLayout, clips: &[VisualTrack], cfg: &SamplerConfig, seed: u64) -> Result<InterleavedStream> {
        let refs: Vec<&VisualTrack> = clips.iter().collect();
        let rows = prompt_rows(self.model, layout, &refs, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate(&self.inference, &rows, &self.model.config().lm.vocab, cfg, &mut rng)
    }
}
