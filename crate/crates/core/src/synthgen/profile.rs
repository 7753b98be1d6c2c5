//! Emotion profiles and the fixed pieces of the synthetic world shared by
//! every corpus.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use crate::tokens::{Emotion, Vocab};

pub const EXPR_DIM: usize = 55;
pub const JAW_DIM: usize = 3;
pub const POSE_DIM: usize = 3;
pub const FRAME_DIM: usize = EXPR_DIM + JAW_DIM + POSE_DIM;

const WORLD_SEED: u64 = 0x5EED_A71D;
const EXPR_MEAN_NORM: f64 = 4.0;
const STYLE_MODAL_MASS: f64 = 0.96;
const PITCH_SIGMA: f64 = 4.0;
const N_VISEMES: usize = 8;
const SUCCESSOR_WEIGHTS: [f64; 4] = [0.55, 0.25, 0.15, 0.05];

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionProfile {
    pub label: Emotion,
    /// Full-strength distribution over local style indices.
    pub style_dist: Vec<f64>,
    /// Full-strength distribution over local pitch indices.
    pub pitch_dist: Vec<f64>,
    pub expr_mean: Vec<f64>,
    pub signal_strength_audio: f64,
    pub signal_strength_visual: f64,
}

fn mix_uniform(dist: &[f64], strength: f64) -> Vec<f64> {
    let u = 1.0 / dist.len() as f64;
    dist.iter().map(|&p| strength * p + (1.0 - strength) * u).collect()
}

impl EmotionProfile {
    pub fn modal_style(&self) -> u32 {
        argmax(&self.style_dist) as u32
    }

    pub fn with_strengths(&self, audio: f64, visual: f64) -> Self {
        Self {
            signal_strength_audio: audio.clamp(0.0, 1.0),
            signal_strength_visual: visual.clamp(0.0, 1.0),
            ..self.clone()
        }
    }

    /// Style distribution after mixing with uniform noise at `1 − strength`.
    pub fn effective_style(&self, strength: f64) -> Vec<f64> {
        mix_uniform(&self.style_dist, strength)
    }

    pub fn effective_pitch(&self, strength: f64) -> Vec<f64> {
        mix_uniform(&self.pitch_dist, strength)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Order-1 chain over semantic ids: each id has four fixed successors.
#[derive(Debug, Clone)]
pub struct SemanticChain {
    successors: Vec<[u32; 4]>,
    weights: WeightedIndex<f64>,
}

impl SemanticChain {
    pub fn new(n_semantic: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ 0xC4A1);
        let successors = (0..n_semantic)
            .map(|_| {
                let mut picks = [0u32; 4];
                let mut k = 0;
                while k < 4 {
                    let c = rng.gen_range(0..n_semantic);
                    if n_semantic < 4 || !picks[..k].contains(&c) {
                        picks[k] = c;
                        k += 1;
                    }
                }
                picks
            })
            .collect();
        Self {
            successors,
            weights: WeightedIndex::new(SUCCESSOR_WEIGHTS).unwrap(),
        }
    }

    pub fn n_states(&self) -> u32 {
        self.successors.len() as u32
    }

    pub fn next<R: Rng>(&self, prev: u32, rng: &mut R) -> u32 {
        self.successors[prev as usize][self.weights.sample(rng)]
    }

    pub fn transition_prob(&self, prev: u32, next: u32) -> f64 {
        self.successors[prev as usize]
            .iter()
            .zip(SUCCESSOR_WEIGHTS)
            .filter(|(&s, _)| s == next)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Fixed parameters of the synthetic world for one vocabulary.
#[derive(Debug, Clone)]
pub struct World {
    pub vocab: Vocab,
    pub chain: SemanticChain,
    profiles: Vec<EmotionProfile>,
    visemes: Vec<[f64; JAW_DIM]>,
}

impl World {
    pub fn new(vocab: Vocab) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED);
        let n_style = vocab.n_style as usize;
        let n_pitch = vocab.n_pitch as usize;
        let spacing = n_style / Emotion::COUNT;
        let pitch_centers = [0.70, 0.30, 0.85, 0.50];
        let profiles = Emotion::ALL
            .iter()
            .map(|&e| {
                let mut style = vec![0.0; n_style];
                let modal = (e.index() * spacing + spacing / 2).min(n_style - 1);
                style[modal] = STYLE_MODAL_MASS;
                let spill = (1.0 - STYLE_MODAL_MASS) / 2.0;
                style[(modal + n_style - 1) % n_style] += spill;
                style[(modal + 1) % n_style] += spill;

                let center = pitch_centers[e.index()] * (n_pitch as f64 - 1.0);
                let sigma = PITCH_SIGMA * n_pitch as f64 / 64.0;
                let mut pitch: Vec<f64> = (0..n_pitch)
                    .map(|i| (-0.5 * ((i as f64 - center) / sigma).powi(2)).exp())
                    .collect();
                let z: f64 = pitch.iter().sum();
                pitch.iter_mut().for_each(|p| *p /= z);

                let raw: Vec<f64> = (0..EXPR_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                let expr_mean = raw.iter().map(|x| x * EXPR_MEAN_NORM / norm).collect();
                EmotionProfile {
                    label: e,
                    style_dist: style,
                    pitch_dist: pitch,
                    expr_mean,
                    signal_strength_audio: 1.0,
                    signal_strength_visual: 1.0,
                }
            })
            .collect();
        let visemes = (0..N_VISEMES)
            .map(|_| {
                let mut v = [0.0; JAW_DIM];
                v.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
                v
            })
            .collect();
        Self {
            chain: SemanticChain::new(vocab.n_semantic),
            vocab,
            profiles,
            visemes,
        }
    }

    /// Full-strength profile for `e`.
    pub fn profile(&self, e: Emotion) -> &EmotionProfile {
        &self.profiles[e.index()]
    }

    pub fn profiles(&self) -> &[EmotionProfile] {
        &self.profiles
    }

    pub(crate) fn viseme(&self, semantic: u32) -> &[f64; JAW_DIM] {
        &self.visemes[semantic as usize % N_VISEMES]
    }
}
