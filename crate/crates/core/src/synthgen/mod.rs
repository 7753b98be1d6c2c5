//! Synthetic emotion-correlated audio-visual corpus.

mod corpus;
mod profile;
mod rotation;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, WeightedIndex};

use crate::error::{Error, Result};
use crate::tokens::{InterleavedStream, TokenId, Vocab, VISUAL_FPS};

pub use corpus::{
    gen_corpus, generate_samples, load_split, load_vocab, read_samples, write_samples, CorpusConfig, CorpusSummary,
    DialogueSample, Split, CORPUS_CONFIG_FILE, VOCAB_FILE,
};
pub use profile::{EmotionProfile, SemanticChain, World, EXPR_DIM, FRAME_DIM, JAW_DIM, POSE_DIM};
pub use rotation::{det, mat_mul, mean_abs_yaw_deg, rodrigues, yaw, Mat3, DEFAULT_MAX_MEAN_YAW_DEG};

pub(crate) use profile::argmax;

pub const MIN_SECONDS: f64 = 0.2;
pub const MAX_SECONDS: f64 = 15.0;
const EXPR_NOISE: f64 = 1.0;
const JAW_NOISE: f64 = 0.3;
const POSE_STEP: f64 = 0.15;
const SEMANTIC_PER_STYLE: usize = 25;

fn frames_for(seconds: f64) -> Result<usize> {
    if !(MIN_SECONDS..=MAX_SECONDS).contains(&seconds) {
        return Err(Error::invalid(format!(
            "duration {seconds}s outside [{MIN_SECONDS}, {MAX_SECONDS}]"
        )));
    }
    Ok(((seconds * VISUAL_FPS).round() as usize).max(5))
}

/// Frame-major `T × 61` feature matrix: expression, jaw, pose.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTrack {
    frames: usize,
    data: Vec<f64>,
}

impl VisualTrack {
    pub fn new(frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * FRAME_DIM {
            return Err(Error::shape("visual track", format!("{} values for {frames} frames", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "visual track" });
        }
        Ok(Self { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * FRAME_DIM..(f + 1) * FRAME_DIM]
    }

    pub fn expression(&self, f: usize) -> &[f64] {
        &self.frame(f)[..EXPR_DIM]
    }

    pub fn jaw(&self, f: usize) -> &[f64] {
        &self.frame(f)[EXPR_DIM..EXPR_DIM + JAW_DIM]
    }

    pub fn pose(&self, f: usize) -> [f64; 3] {
        let p = &self.frame(f)[EXPR_DIM + JAW_DIM..];
        [p[0], p[1], p[2]]
    }

    pub fn mean_expression(&self) -> Vec<f64> {
        let mut out = vec![0.0; EXPR_DIM];
        for f in 0..self.frames {
            for (o, x) in out.iter_mut().zip(self.expression(f)) {
                *o += x / self.frames as f64;
            }
        }
        out
    }
}

/// Drops a track whose mean absolute yaw exceeds `max_mean_yaw_deg`.
pub fn pose_filter(track: &VisualTrack, max_mean_yaw_deg: f64) -> bool {
    mean_abs_yaw_deg((0..track.frames()).map(|f| track.pose(f))) <= max_mean_yaw_deg
}

/// Interleaved stream of `round(25 · seconds)` semantic tokens: a style token
/// opens every 25-token second and a pitch token precedes every
/// even-indexed semantic token.
pub fn gen_stream<R: Rng>(world: &World, profile: &EmotionProfile, seconds: f64, rng: &mut R) -> Result<InterleavedStream> {
    let n = frames_for(seconds)?;
    let vocab = &world.vocab;
    let style = WeightedIndex::new(profile.effective_style(profile.signal_strength_audio))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let pitch = WeightedIndex::new(profile.effective_pitch(profile.signal_strength_audio))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut tokens = Vec::with_capacity(n * 3 / 2 + n / SEMANTIC_PER_STYLE + 1);
    let mut sem = rng.gen_range(0..vocab.n_semantic);
    for k in 0..n {
        if k % SEMANTIC_PER_STYLE == 0 {
            tokens.push(vocab.style(style.sample(rng) as u32));
        }
        if k % 2 == 0 {
            tokens.push(vocab.pitch(pitch.sample(rng) as u32));
        }
        if k > 0 {
            sem = world.chain.next(sem, rng);
        }
        tokens.push(vocab.semantic(sem));
    }
    Ok(InterleavedStream::new(tokens, Some(n as u32)))
}

/// Visual track for `seconds`. When `speech` is given its semantic tokens
/// drive jaw articulation frame by frame.
pub fn gen_visual<R: Rng>(
    world: &World,
    profile: &EmotionProfile,
    seconds: f64,
    yaw_scale: f64,
    speech: Option<&InterleavedStream>,
    rng: &mut R,
) -> Result<VisualTrack> {
    let n = frames_for(seconds)?;
    let semantic = speech.map(|s| s.semantic_tokens(&world.vocab)).unwrap_or_default();
    let jaw_noise = Normal::new(0.0, JAW_NOISE).unwrap();
    let mut walk = [0.0f64; 3];
    let mut data = Vec::with_capacity(n * FRAME_DIM);
    for f in 0..n {
        for &m in &profile.expr_mean {
            let noise: f64 = StandardNormal.sample(rng);
            data.push(profile.signal_strength_visual * m + EXPR_NOISE * noise);
        }
        let viseme = semantic.get(f).map(|&s| *world.viseme(s)).unwrap_or([0.0; JAW_DIM]);
        for v in viseme {
            data.push(v + jaw_noise.sample(rng));
        }
        for (i, w) in walk.iter_mut().enumerate() {
            let step: f64 = StandardNormal.sample(rng);
            let axis_weight = if i == 1 { 1.0 } else { 0.2 };
            *w += POSE_STEP * axis_weight * step;
        }
        let mut pose = walk.map(|w| w * yaw_scale);
        let norm = pose.iter().map(|x| x * x).sum::<f64>().sqrt();
        let limit = 0.99 * std::f64::consts::PI;
        if norm > limit {
            pose.iter_mut().for_each(|x| *x *= limit / norm);
        }
        data.extend_from_slice(&pose);
    }
    // values are stored as f32 on disk; keep memory and disk identical
    data.iter_mut().for_each(|x| *x = *x as f32 as f64);
    VisualTrack::new(n, data)
}

/// Resamples each semantic token uniformly with probability `rate`.
pub fn corrupt<R: Rng>(stream: &InterleavedStream, vocab: &Vocab, rate: f64, rng: &mut R) -> Result<InterleavedStream> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("corruption rate {rate} outside [0, 1]")));
    }
    let semantic = vocab.range(crate::tokens::TokenKind::Semantic);
    let tokens = stream
        .tokens
        .iter()
        .map(|&t| {
            if semantic.contains(&t) && rng.gen_bool(rate) {
                rng.gen_range(semantic.clone())
            } else {
                t
            }
        })
        .collect();
    Ok(InterleavedStream::new(tokens, stream.duration_frames))
}

/// Text symbol for each consecutive (non-overlapping) 4-gram of semantic
/// tokens; a trailing partial chunk gets a symbol too.
pub fn transcript(semantic: &[TokenId], vocab: &Vocab) -> Vec<TokenId> {
    semantic
        .chunks(4)
        .map(|chunk| {
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for &t in chunk {
                for b in t.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
            vocab.text((h % vocab.n_transcript_symbols() as u64) as u32)
        })
        .collect()
}
