use crate::synthgen::World;
use crate::tokens::{Emotion, InterleavedStream, TokenKind, Vocab};

/// Maximum-likelihood emotion under the generator's style and pitch
/// profiles, mixed with uniform noise at an assumed signal strength.
#[derive(Debug, Clone)]
pub struct BayesJudge {
    vocab: Vocab,
    log_style: Vec<Vec<f64>>,
    log_pitch: Vec<Vec<f64>>,
}

impl BayesJudge {
    pub fn new(world: &World, strength: f64) -> Self {
        let logs = |v: Vec<f64>| v.into_iter().map(f64::ln).collect::<Vec<_>>();
        Self {
            vocab: world.vocab,
            log_style: Emotion::ALL
                .iter()
                .map(|&e| logs(world.profile(e).effective_style(strength)))
                .collect(),
            log_pitch: Emotion::ALL
                .iter()
                .map(|&e| logs(world.profile(e).effective_pitch(strength)))
                .collect(),
        }
    }

    /// Log-likelihood of the stream's style and pitch tokens per emotion.
    /// Semantic tokens carry no emotion and are skipped.
    pub fn log_likelihoods(&self, stream: &InterleavedStream) -> [f64; Emotion::COUNT] {
        let mut ll = [0.0; Emotion::COUNT];
        for &t in &stream.tokens {
            let table = match self.vocab.kind_of(t) {
                Ok(TokenKind::Style) => &self.log_style,
                Ok(TokenKind::Pitch) => &self.log_pitch,
                _ => continue,
            };
            let i = self.vocab.local_index(t).expect("id in range") as usize;
            for (e, l) in ll.iter_mut().enumerate() {
                *l += table[e][i];
            }
        }
        ll
    }

    /// Ties go to the earliest emotion in canonical order.
    pub fn judge(&self, stream: &InterleavedStream) -> Emotion {
        let ll = self.log_likelihoods(stream);
        let mut best = 0;
        for e in 1..Emotion::COUNT {
            if ll[e] > ll[best] {
                best = e;
            }
        }
        Emotion::from_index(best).expect("class")
    }
}
