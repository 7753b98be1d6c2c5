//! Corpus assembly and the JSONL dataset format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gen_stream, gen_visual, pose_filter, transcript, VisualTrack, World, FRAME_DIM};
use crate::error::{Error, Result};
use crate::numcore::rng::substream;
use crate::tokens::{Emotion, InterleavedStream, Task, TokenId, Vocab, VocabManifest};

pub const VOCAB_FILE: &str = "vocab.json";
pub const CORPUS_CONFIG_FILE: &str = "corpus.json";
const MAX_POSE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Fraction of samples whose audio is weak and visual strong.
    pub weak_audio_rate: f64,
    pub seconds: [f64; 2],
    pub response_seconds: [f64; 2],
    pub audio_strength: f64,
    pub weak_audio_strength: f64,
    /// Visual strength on weak-audio samples.
    pub visual_strength: f64,
    /// Visual strength on the remaining samples.
    pub background_visual_strength: f64,
    pub response_audio_strength: f64,
    pub yaw_scale: f64,
    pub max_mean_yaw_deg: f64,
    pub vocab: Vocab,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_samples: 4000,
            seed: 0,
            weak_audio_rate: 0.4,
            seconds: [1.0, 2.0],
            response_seconds: [0.8, 1.2],
            audio_strength: 0.8,
            weak_audio_strength: 0.05,
            visual_strength: 1.0,
            background_visual_strength: 0.25,
            response_audio_strength: 0.9,
            yaw_scale: 0.3,
            max_mean_yaw_deg: super::DEFAULT_MAX_MEAN_YAW_DEG,
            vocab: Vocab::default(),
        }
    }
}

impl CorpusConfig {
    fn check(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_samples == 0 {
            return Err(Error::invalid("corpus needs at least one sample"));
        }
        if ![
            self.weak_audio_rate,
            self.audio_strength,
            self.weak_audio_strength,
            self.visual_strength,
            self.background_visual_strength,
            self.response_audio_strength,
        ]
        .into_iter()
        .all(unit)
        {
            return Err(Error::invalid("rates and strengths must lie in [0, 1]"));
        }
        for [lo, hi] in [self.seconds, self.response_seconds] {
            if lo > hi {
                return Err(Error::invalid(format!("duration range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSample {
    pub id: String,
    pub emotion: Emotion,
    pub instruction: Vec<TokenId>,
    pub visual: VisualTrack,
    pub input: InterleavedStream,
    pub response: InterleavedStream,
    pub transcript: Vec<TokenId>,
    pub weak_audio: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub weak_audio: usize,
    pub pose_rejected: usize,
    pub vocab_hash: String,
}

fn sample_seconds<R: Rng>(range: [f64; 2], rng: &mut R) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn gen_sample(config: &CorpusConfig, world: &World, index: usize) -> Result<(DialogueSample, usize)> {
    let mut rng = substream(config.seed, "sample", index as u64);
    let emotion = Emotion::from_index(index % Emotion::COUNT).unwrap();
    let weak_audio = rng.gen_bool(config.weak_audio_rate);
    let (audio, visual) = if weak_audio {
        (config.weak_audio_strength, config.visual_strength)
    } else {
        (config.audio_strength, config.background_visual_strength)
    };
    let profile = world.profile(emotion).with_strengths(audio, visual);
    let response_profile = world.profile(emotion).with_strengths(config.response_audio_strength, visual);

    for attempt in 0..MAX_POSE_ATTEMPTS {
        let seconds = sample_seconds(config.seconds, &mut rng);
        let input = gen_stream(world, &profile, seconds, &mut rng)?;
        let track = gen_visual(world, &profile, seconds, config.yaw_scale, Some(&input), &mut rng)?;
        if !pose_filter(&track, config.max_mean_yaw_deg) {
            continue;
        }
        let response_len = sample_seconds(config.response_seconds, &mut rng);
        let response = gen_stream(world, &response_profile, response_len, &mut rng)?;
        let text = transcript(&input.semantic_tokens(&world.vocab), &world.vocab);
        let sample = DialogueSample {
            id: format!("s{}-{index:05}", config.seed),
            emotion,
            instruction: world.vocab.instruction(Task::Generate),
            visual: track,
            input,
            response,
            transcript: text,
            weak_audio,
        };
        return Ok((sample, attempt));
    }
    Err(Error::invalid(format!(
        "sample {index}: no clip passed the pose filter in {MAX_POSE_ATTEMPTS} attempts"
    )))
}

/// All samples with their split, ordered by sample index, plus the count of
/// clips rejected by the pose filter.
pub fn generate_samples(config: &CorpusConfig) -> Result<(Vec<(Split, DialogueSample)>, usize)> {
    config.check()?;
    let world = World::new(config.vocab);
    let mut split_of = vec![Split::Train; config.n_samples];
    for class in 0..Emotion::COUNT {
        let mut members: Vec<usize> = (class..config.n_samples).step_by(Emotion::COUNT).collect();
        members.shuffle(&mut substream(config.seed, "split", class as u64));
        let n = members.len();
        let n_train = (0.8 * n as f64).round() as usize;
        let n_dev = (0.1 * n as f64).round() as usize;
        for (rank, &i) in members.iter().enumerate() {
            split_of[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
    }
    let mut rejected = 0;
    let mut out = Vec::with_capacity(config.n_samples);
    for (i, &split) in split_of.iter().enumerate() {
        let (sample, attempts) = gen_sample(config, &world, i)?;
        rejected += attempts;
        out.push((split, sample));
    }
    Ok((out, rejected))
}

#[derive(Serialize, Deserialize)]
struct VisualRecord {
    frames: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    emotion: Emotion,
    instruction: Vec<TokenId>,
    visual: VisualRecord,
    input_tokens: Vec<TokenId>,
    input_frames: Option<u32>,
    response_tokens: Vec<TokenId>,
    response_frames: Option<u32>,
    transcript: Vec<TokenId>,
    weak_audio: bool,
}

impl Record {
    fn from_sample(s: &DialogueSample) -> Self {
        let bytes: Vec<u8> = s.visual.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        Record {
            id: s.id.clone(),
            emotion: s.emotion,
            instruction: s.instruction.clone(),
            visual: VisualRecord {
                frames: s.visual.frames(),
                data: B64.encode(bytes),
            },
            input_tokens: s.input.tokens.clone(),
            input_frames: s.input.duration_frames,
            response_tokens: s.response.tokens.clone(),
            response_frames: s.response.duration_frames,
            transcript: s.transcript.clone(),
            weak_audio: s.weak_audio,
        }
    }

    fn into_sample(self) -> Result<DialogueSample> {
        let bytes = B64
            .decode(self.visual.data.as_bytes())
            .map_err(|e| Error::invalid(format!("sample {}: bad visual payload: {e}", self.id)))?;
        if bytes.len() != self.visual.frames * FRAME_DIM * 4 {
            return Err(Error::shape(
                "visual payload",
                format!("{} bytes for {} frames", bytes.len(), self.visual.frames),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(DialogueSample {
            id: self.id,
            emotion: self.emotion,
            instruction: self.instruction,
            visual: VisualTrack::new(self.visual.frames, data)?,
            input: InterleavedStream::new(self.input_tokens, self.input_frames),
            response: InterleavedStream::new(self.response_tokens, self.response_frames),
            transcript: self.transcript,
            weak_audio: self.weak_audio,
        })
    }
}

pub fn write_samples<'a>(path: &Path, samples: impl IntoIterator<Item = &'a DialogueSample>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, &Record::from_sample(s))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<DialogueSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)?;
        out.push(record.into_sample()?);
    }
    Ok(out)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<DialogueSample>> {
    read_samples(&dir.join(split.file_name()))
}

pub fn load_vocab(dir: &Path) -> Result<Vocab> {
    let path = dir.join(VOCAB_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: VocabManifest = serde_json::from_str(&text)?;
    manifest.to_vocab()
}

/// Writes `train/dev/test.jsonl`, `vocab.json` and `corpus.json` into `out`.
pub fn gen_corpus(config: &CorpusConfig, out: &Path) -> Result<CorpusSummary> {
    let (samples, rejected) = generate_samples(config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for split in Split::ALL {
        write_samples(
            &out.join(split.file_name()),
            samples.iter().filter(|(s, _)| *s == split).map(|(_, x)| x),
        )?;
    }
    let manifest = config.vocab.manifest();
    let vocab_path = out.join(VOCAB_FILE);
    fs::write(&vocab_path, manifest.to_json()).map_err(|e| Error::io(&vocab_path, e))?;
    let cfg_path = out.join(CORPUS_CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;
    let count = |split| samples.iter().filter(|(s, _)| *s == split).count();
    Ok(CorpusSummary {
        train: count(Split::Train),
        dev: count(Split::Dev),
        test: count(Split::Test),
        weak_audio: samples.iter().filter(|(_, s)| s.weak_audio).count(),
        pose_rejected: rejected,
        vocab_hash: manifest.hash(),
    })
}
