//! Multimodal prompt layout: instruction, visual queries, input speech,
//! emotion slot and supervised target, optionally preceded by one
//! demonstration per emotion.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthgen::DialogueSample;
use crate::tokens::{Control, Emotion, Task, TokenId, TokenKind, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Instruction,
    QueryMarker,
    SepVisual,
    Visual,
    SepAudio,
    Input,
    SepEmotion,
    Emotion,
    SepResponse,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    /// Row `i` of its block's visual query output.
    Query(usize),
}

/// One block of a prompt: a demonstration or the query itself.
#[derive(Debug, Clone, Copy)]
pub struct BlockSpec<'a> {
    pub sample: &'a DialogueSample,
    /// Visual query rows; 0 leaves out the visual segment and its separator.
    pub n_queries: usize,
    /// Label placed in the emotion slot.
    pub emotion: Emotion,
}

#[derive(Debug, Clone)]
pub struct PromptLayout {
    pub task: Task,
    pub slots: Vec<Slot>,
    pub segments: Vec<Segment>,
    /// Demonstrations are blocks `0..n_blocks-1`; the query is the last block.
    pub blocks: Vec<usize>,
    pub n_blocks: usize,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn query_block(&self) -> usize {
        self.n_blocks - 1
    }

    /// Positions of `segment` inside `block`.
    pub fn positions(&self, block: usize, segment: Segment) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.blocks[i] == block && self.segments[i] == segment)
            .collect()
    }

    pub fn token(&self, i: usize) -> Option<TokenId> {
        match self.slots[i] {
            Slot::Token(t) => Some(t),
            Slot::Query(_) => None,
        }
    }

    /// Slots whose token is a training target: the query block's target segment.
    pub fn supervised(&self) -> Vec<bool> {
        let q = self.query_block();
        (0..self.len())
            .map(|i| self.blocks[i] == q && self.segments[i] == Segment::Target)
            .collect()
    }

    /// Next-token targets per position with their loss mask.
    pub fn targets(&self) -> (Vec<TokenId>, Vec<bool>) {
        let sup = self.supervised();
        let n = self.len();
        let mut targets = vec![0; n];
        let mut include = vec![false; n];
        for i in 0..n.saturating_sub(1) {
            if sup[i + 1] {
                targets[i] = self.token(i + 1).expect("targets are tokens");
                include[i] = true;
            }
        }
        (targets, include)
    }

    /// Number of slots up to and including the query's response separator.
    pub fn context_len(&self) -> usize {
        let q = self.query_block();
        self.positions(q, Segment::SepResponse)
            .first()
            .map_or(self.len(), |&i| i + 1)
    }

    /// Query-block slot holding the emotion label, if the task has one.
    pub fn emotion_slot(&self) -> Option<usize> {
        self.positions(self.query_block(), Segment::Emotion).first().copied()
    }

    pub fn set_emotion(&mut self, vocab: &Vocab, emotion: Emotion) -> Result<()> {
        let i = self
            .emotion_slot()
            .ok_or_else(|| Error::invalid("prompt has no emotion slot"))?;
        self.slots[i] = Slot::Token(vocab.emotion_token(emotion));
        Ok(())
    }

    /// Emotion-head inputs: the query block's visual-query rows and its
    /// style/pitch input rows.
    pub fn head_rows(&self, vocab: &Vocab) -> (Vec<usize>, Vec<usize>) {
        let q = self.query_block();
        let visual = self.positions(q, Segment::Visual);
        let speech = self
            .positions(q, Segment::Input)
            .into_iter()
            .filter(|&i| {
                matches!(
                    self.token(i).map(|t| vocab.kind_of(t)),
                    Some(Ok(TokenKind::Style | TokenKind::Pitch))
                )
            })
            .collect();
        (visual, speech)
    }

    /// Input-speech positions of the query block (key-masking candidates).
    pub fn maskable(&self) -> Vec<bool> {
        let q = self.query_block();
        (0..self.len())
            .map(|i| self.blocks[i] == q && self.segments[i] == Segment::Input)
            .collect()
    }

    /// Prefix of the first `len` slots.
    pub fn truncated(&self, len: usize) -> PromptLayout {
        PromptLayout {
            task: self.task,
            slots: self.slots[..len].to_vec(),
            segments: self.segments[..len].to_vec(),
            blocks: self.blocks[..len].to_vec(),
            n_blocks: self.n_blocks,
        }
    }
}

struct Builder {
    layout: PromptLayout,
    block: usize,
}

impl Builder {
    fn push(&mut self, slot: Slot, segment: Segment) {
        self.layout.slots.push(slot);
        self.layout.segments.push(segment);
        self.layout.blocks.push(self.block);
    }

    fn tokens(&mut self, ids: &[TokenId], segment: Segment) {
        for &t in ids {
            self.push(Slot::Token(t), segment);
        }
    }

    fn block(&mut self, vocab: &Vocab, task: Task, spec: &BlockSpec, with_target: bool) -> Result<()> {
        let sep = |c| Slot::Token(vocab.control(c));
        if spec.n_queries > 0 {
            self.push(sep(Control::SepVisual), Segment::SepVisual);
            for i in 0..spec.n_queries {
                self.push(Slot::Query(i), Segment::Visual);
            }
        }
        self.push(sep(Control::SepAudio), Segment::SepAudio);
        self.tokens(&spec.sample.input.tokens, Segment::Input);
        if task == Task::Generate {
            self.push(sep(Control::SepEmotion), Segment::SepEmotion);
            self.push(Slot::Token(vocab.emotion_token(spec.emotion)), Segment::Emotion);
        }
        self.push(sep(Control::SepResponse), Segment::SepResponse);
        if with_target {
            let target = match task {
                Task::Generate => &spec.sample.response.tokens,
                Task::Avsr => &spec.sample.transcript,
            };
            if target.is_empty() {
                return Err(Error::Missing(format!("target of sample {}", spec.sample.id)));
            }
            self.tokens(target, Segment::Target);
            self.push(sep(Control::Eos), Segment::Target);
        }
        Ok(())
    }
}

/// Lays out `demos` (each with its own target) followed by `query`. The
/// query's target is appended only when `with_target` is set.
pub fn build_prompt(
    vocab: &Vocab,
    task: Task,
    demos: &[BlockSpec],
    query: &BlockSpec,
    with_target: bool,
    max_seq: usize,
) -> Result<PromptLayout> {
    let mut b = Builder {
        layout: PromptLayout {
            task,
            slots: Vec::new(),
            segments: Vec::new(),
            blocks: Vec::new(),
            n_blocks: demos.len() + 1,
        },
        block: 0,
    };
    if demos.is_empty() {
        b.tokens(&vocab.instruction(task), Segment::Instruction);
    } else {
        b.tokens(&vocab.icl_instruction(task), Segment::Instruction);
        for d in demos {
            b.block(vocab, task, d, true)?;
            b.block += 1;
        }
        b.push(Slot::Token(vocab.icl_query_marker()), Segment::QueryMarker);
    }
    b.block(vocab, task, query, with_target)?;
    let len = b.layout.len();
    if len > max_seq {
        return Err(Error::SequenceTooLong { len, max: max_seq });
    }
    Ok(b.layout)
}

/// Checks that `demos` hold exactly one sample per emotion and returns them
/// in the canonical happy, sad, angry, neutral order.
pub fn order_demos<'a>(demos: &[&'a DialogueSample]) -> Result<Vec<&'a DialogueSample>> {
    Emotion::ALL
        .iter()
        .map(|&e| {
            let found: Vec<_> = demos.iter().filter(|d| d.emotion == e).collect();
            match found.as_slice() {
                [one] => Ok(**one),
                [] => Err(Error::Missing(format!("demonstration for {e}"))),
                _ => Err(Error::invalid(format!("more than one demonstration for {e}"))),
            }
        })
        .collect()
}
