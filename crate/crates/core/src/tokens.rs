//! Partitioned vocabulary and the interleaved speech-token grammar.
//!
//! Id layout, lowest first: semantic, pitch, style, text, control. The four
//! emotion tokens are the last four text ids.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const VISUAL_FPS: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Semantic,
    Pitch,
    Style,
    Text,
    Control,
}

impl TokenKind {
    pub fn is_speech(self) -> bool {
        matches!(self, TokenKind::Semantic | TokenKind::Pitch | TokenKind::Style)
    }
}

/// Prompt delimiters and other non-content tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Control {
    Bos,
    Eos,
    SepVisual,
    SepAudio,
    SepEmotion,
    SepResponse,
    Pad,
}

impl Control {
    pub const ALL: [Control; 7] = [
        Control::Bos,
        Control::Eos,
        Control::SepVisual,
        Control::SepAudio,
        Control::SepEmotion,
        Control::SepResponse,
        Control::Pad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Control::Bos => "BOS",
            Control::Eos => "EOS",
            Control::SepVisual => "SEP_VISUAL",
            Control::SepAudio => "SEP_AUDIO",
            Control::SepEmotion => "SEP_EMOTION",
            Control::SepResponse => "SEP_RESPONSE",
            Control::Pad => "PAD",
        }
    }

    fn offset(self) -> u32 {
        Control::ALL.iter().position(|&c| c == self).unwrap() as u32
    }
}

/// The four merged emotion classes, in the fixed demo order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Happy,
    Sad,
    Angry,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [Emotion::Happy, Emotion::Sad, Emotion::Angry, Emotion::Neutral];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Emotion::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Angry => "angry",
            Emotion::Neutral => "neutral",
        }
    }

    pub fn parse(s: &str) -> Result<Emotion> {
        Emotion::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown emotion `{s}`")))
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Prompt task. Each task is tagged by a fixed short run of text ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Generate,
    Avsr,
}

impl Task {
    fn tag(self) -> &'static [u32] {
        match self {
            Task::Generate => &[0, 1, 2],
            Task::Avsr => &[3, 4, 5],
        }
    }
}

/// Marks a prompt that carries demonstrations before the query.
const ICL_TAG: u32 = 6;
/// Separates the demonstrations from the query.
const ICL_QUERY_TAG: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_semantic: u32,
    pub n_pitch: u32,
    pub n_style: u32,
    pub n_text: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            n_semantic: 512,
            n_pitch: 64,
            n_style: 100,
            n_text: 64,
        }
    }
}

impl Vocab {
    pub fn new(n_semantic: u32, n_pitch: u32, n_style: u32, n_text: u32) -> Result<Self> {
        if n_semantic == 0 || n_pitch == 0 || n_style == 0 || n_text < Emotion::COUNT as u32 + 8 {
            return Err(Error::invalid("every vocabulary range needs at least one id (twelve for text)"));
        }
        Ok(Self {
            n_semantic,
            n_pitch,
            n_style,
            n_text,
        })
    }

    pub fn n_control(&self) -> u32 {
        Control::ALL.len() as u32
    }

    pub fn size(&self) -> u32 {
        self.n_semantic + self.n_pitch + self.n_style + self.n_text + self.n_control()
    }

    /// Half-open id range of a kind.
    pub fn range(&self, kind: TokenKind) -> std::ops::Range<TokenId> {
        let sem = self.n_semantic;
        let pit = sem + self.n_pitch;
        let sty = pit + self.n_style;
        let txt = sty + self.n_text;
        match kind {
            TokenKind::Semantic => 0..sem,
            TokenKind::Pitch => sem..pit,
            TokenKind::Style => pit..sty,
            TokenKind::Text => sty..txt,
            TokenKind::Control => txt..self.size(),
        }
    }

    pub fn kind_of(&self, id: TokenId) -> Result<TokenKind> {
        if id >= self.size() {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.size(),
            });
        }
        let kind = [
            TokenKind::Semantic,
            TokenKind::Pitch,
            TokenKind::Style,
            TokenKind::Text,
        ]
        .into_iter()
        .find(|&k| self.range(k).contains(&id))
        .unwrap_or(TokenKind::Control);
        Ok(kind)
    }

    pub fn semantic(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_semantic);
        i
    }

    pub fn pitch(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_pitch);
        self.range(TokenKind::Pitch).start + i
    }

    pub fn style(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_style);
        self.range(TokenKind::Style).start + i
    }

    pub fn text(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_text);
        self.range(TokenKind::Text).start + i
    }

    pub fn control(&self, c: Control) -> TokenId {
        self.range(TokenKind::Control).start + c.offset()
    }

    pub fn emotion_token(&self, e: Emotion) -> TokenId {
        self.text(self.n_text - Emotion::COUNT as u32 + e.index() as u32)
    }

    pub fn emotion_of(&self, id: TokenId) -> Option<Emotion> {
        Emotion::ALL.into_iter().find(|&e| self.emotion_token(e) == id)
    }

    /// Index of `id` within its own kind's range.
    pub fn local_index(&self, id: TokenId) -> Result<u32> {
        let kind = self.kind_of(id)?;
        Ok(id - self.range(kind).start)
    }

    pub fn instruction(&self, task: Task) -> Vec<TokenId> {
        task.tag().iter().map(|&i| self.text(i)).collect()
    }

    pub fn icl_instruction(&self, task: Task) -> Vec<TokenId> {
        let mut out = self.instruction(task);
        out.push(self.text(ICL_TAG));
        out
    }

    pub fn icl_query_marker(&self) -> TokenId {
        self.text(ICL_QUERY_TAG)
    }

    /// Number of text ids usable as transcript symbols (emotion ids excluded).
    pub fn n_transcript_symbols(&self) -> u32 {
        self.n_text - Emotion::COUNT as u32
    }

    /// Name → `[lo, hi)` map describing the whole layout.
    pub fn manifest(&self) -> VocabManifest {
        let mut ranges = BTreeMap::new();
        for (name, kind) in [
            ("semantic", TokenKind::Semantic),
            ("pitch", TokenKind::Pitch),
            ("style", TokenKind::Style),
            ("text", TokenKind::Text),
            ("control", TokenKind::Control),
        ] {
            let r = self.range(kind);
            ranges.insert(name.to_string(), [r.start, r.end]);
        }
        for c in Control::ALL {
            let id = self.control(c);
            ranges.insert(c.name().to_string(), [id, id + 1]);
        }
        for e in Emotion::ALL {
            let id = self.emotion_token(e);
            ranges.insert(format!("emotion.{}", e.name()), [id, id + 1]);
        }
        VocabManifest {
            size: self.size(),
            ranges,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub size: u32,
    pub ranges: BTreeMap<String, [u32; 2]>,
}

impl VocabManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn to_vocab(&self) -> Result<Vocab> {
        let get = |k: &str| {
            self.ranges
                .get(k)
                .map(|r| r[1] - r[0])
                .ok_or_else(|| Error::Missing(format!("vocab manifest range `{k}`")))
        };
        let v = Vocab::new(get("semantic")?, get("pitch")?, get("style")?, get("text")?)?;
        if v.manifest() != *self {
            return Err(Error::invalid("vocab manifest is not a layout this build produces"));
        }
        Ok(v)
    }
}

/// Speech tokens (semantic, pitch, style only) aligned to a visual clip of
/// `duration_frames` frames when known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavedStream {
    pub tokens: Vec<TokenId>,
    pub duration_frames: Option<u32>,
}

impl InterleavedStream {
    pub fn new(tokens: Vec<TokenId>, duration_frames: Option<u32>) -> Self {
        Self {
            tokens,
            duration_frames,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn semantic_tokens(&self, vocab: &Vocab) -> Vec<TokenId> {
        self.tokens
            .iter()
            .copied()
            .filter(|&t| matches!(vocab.kind_of(t), Ok(TokenKind::Semantic)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Empty,
    NotSpeech,
    FirstNotStyle,
    ConsecutiveStyle,
    ConsecutivePitch,
    SemanticRate,
    PitchRate,
    StyleRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

/// Count bands applied when a stream's duration is known. Counts are
/// compared against `ceil(rate · seconds)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBand {
    pub semantic_per_sec: f64,
    pub semantic_tolerance: f64,
    pub max_pitch_per_sec: f64,
    pub max_style_per_sec: f64,
}

impl Default for RateBand {
    fn default() -> Self {
        Self {
            semantic_per_sec: 25.0,
            semantic_tolerance: 0.10,
            max_pitch_per_sec: 13.0,
            max_style_per_sec: 2.0,
        }
    }
}

pub fn validate(stream: &InterleavedStream, vocab: &Vocab) -> Result<(), Violation> {
    validate_with(stream, vocab, &RateBand::default())
}

/// Grammar check, plus rate bands when the duration is known. Reports the
/// first offending index.
pub fn validate_with(stream: &InterleavedStream, vocab: &Vocab, band: &RateBand) -> Result<(), Violation> {
    let v = |index, kind| Err(Violation { index, kind });
    if stream.tokens.is_empty() {
        return v(0, ViolationKind::Empty);
    }
    let seconds = stream.duration_frames.map(|f| f as f64 / VISUAL_FPS);
    let pitch_cap = seconds.map(|s| (band.max_pitch_per_sec * s - 1e-9).ceil() as usize);
    let style_cap = seconds.map(|s| (band.max_style_per_sec * s - 1e-9).ceil() as usize);
    let (mut n_sem, mut n_pitch, mut n_style) = (0usize, 0usize, 0usize);
    let mut prev: Option<TokenKind> = None;
    for (i, &tok) in stream.tokens.iter().enumerate() {
        let kind = match vocab.kind_of(tok) {
            Ok(k) if k.is_speech() => k,
            _ => return v(i, ViolationKind::NotSpeech),
        };
        if i == 0 && kind != TokenKind::Style {
            return v(0, ViolationKind::FirstNotStyle);
        }
        match (prev, kind) {
            (Some(TokenKind::Style), TokenKind::Style) => return v(i, ViolationKind::ConsecutiveStyle),
            (Some(TokenKind::Pitch), TokenKind::Pitch) => return v(i, ViolationKind::ConsecutivePitch),
            _ => {}
        }
        match kind {
            TokenKind::Semantic => n_sem += 1,
            TokenKind::Pitch => n_pitch += 1,
            _ => n_style += 1,
        }
        if pitch_cap.is_some_and(|cap| n_pitch > cap) {
            return v(i, ViolationKind::PitchRate);
        }
        if style_cap.is_some_and(|cap| n_style > cap) {
            return v(i, ViolationKind::StyleRate);
        }
        prev = Some(kind);
    }
    if let Some(s) = seconds {
        let expected = band.semantic_per_sec * s;
        let slack = (band.semantic_tolerance * expected).max(1.0);
        if (n_sem as f64 - expected).abs() > slack {
            return v(stream.tokens.len(), ViolationKind::SemanticRate);
        }
    }
    Ok(())
}

pub fn kind_of(id: TokenId, vocab: &Vocab) -> Result<TokenKind> {
    vocab.kind_of(id)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateProfile {
    pub semantic: f64,
    pub pitch: f64,
    pub style: f64,
}

/// Tokens per second of each speech kind over the stream's duration.
pub fn rate_profile(stream: &InterleavedStream, vocab: &Vocab, fps_visual: f64) -> Result<RateProfile> {
    let frames = stream.duration_frames.unwrap_or(0);
    if frames == 0 || fps_visual <= 0.0 {
        return Err(Error::invalid("rate profile needs a positive duration"));
    }
    let seconds = frames as f64 / fps_visual;
    let mut counts = [0usize; 3];
    for &t in &stream.tokens {
        match vocab.kind_of(t)? {
            TokenKind::Semantic => counts[0] += 1,
            TokenKind::Pitch => counts[1] += 1,
            TokenKind::Style => counts[2] += 1,
            _ => {}
        }
    }
    Ok(RateProfile {
        semantic: counts[0] as f64 / seconds,
        pitch: counts[1] as f64 / seconds,
        style: counts[2] as f64 / seconds,
    })
}
