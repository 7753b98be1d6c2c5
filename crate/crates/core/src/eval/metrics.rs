use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{Emotion, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Mean per-class recall over classes present in the labels.
    pub ua: f64,
    /// Overall accuracy.
    pub wa: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<Emotion, f64>,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; Emotion::COUNT]; Emotion::COUNT],
    pub n: usize,
}

pub fn classification_metrics(preds: &[Emotion], labels: &[Emotion]) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::shape("classification_metrics", format!("{} predictions, {} labels", preds.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Missing("labels".into()));
    }
    let mut confusion = [[0usize; Emotion::COUNT]; Emotion::COUNT];
    for (p, l) in preds.iter().zip(labels) {
        confusion[l.index()][p.index()] += 1;
    }
    let support = |c: usize| confusion[c].iter().sum::<usize>();
    let predicted = |c: usize| (0..Emotion::COUNT).map(|r| confusion[r][c]).sum::<usize>();
    let correct: usize = (0..Emotion::COUNT).map(|c| confusion[c][c]).sum();
    let present: Vec<usize> = (0..Emotion::COUNT).filter(|&c| support(c) > 0).collect();
    let ua = present.iter().map(|&c| confusion[c][c] as f64 / support(c) as f64).sum::<f64>() / present.len() as f64;
    let mut per_class_f1 = BTreeMap::new();
    let mut f1_sum = 0.0;
    let mut f1_n = 0;
    for c in 0..Emotion::COUNT {
        let (tp, s, p) = (confusion[c][c] as f64, support(c), predicted(c));
        let f1 = if s + p == 0 { 0.0 } else { 2.0 * tp / (s + p) as f64 };
        per_class_f1.insert(Emotion::from_index(c).expect("class"), f1);
        if s + p > 0 {
            f1_sum += f1;
            f1_n += 1;
        }
    }
    Ok(ClassificationMetrics {
        ua,
        wa: correct as f64 / labels.len() as f64,
        macro_f1: f1_sum / f1_n as f64,
        per_class_f1,
        confusion,
        n: labels.len(),
    })
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token error rate: edits needed to turn `hyp` into `reference`, over its length.
pub fn token_wer(hyp: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Missing("reference transcript".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Counts per (fusion, speech, visual) correctness triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    /// Keyed `F{0|1}S{0|1}V{0|1}`.
    pub cells: BTreeMap<String, usize>,
    pub n: usize,
}

impl Contingency {
    pub fn cell(&self, fusion: bool, speech: bool, visual: bool) -> usize {
        self.cells[&cell_key(fusion, speech, visual)]
    }

    /// Fusion right together with exactly one single modality.
    pub fn agrees_with_single(&self) -> usize {
        self.cell(true, true, false) + self.cell(true, false, true)
    }

    /// Fusion right while both single modalities fail.
    pub fn fusion_only(&self) -> usize {
        self.cell(true, false, false)
    }
}

fn cell_key(f: bool, s: bool, v: bool) -> String {
    format!("F{}S{}V{}", u8::from(f), u8::from(s), u8::from(v))
}

pub fn contingency(fusion: &[bool], speech: &[bool], visual: &[bool]) -> Result<Contingency> {
    if fusion.len() != speech.len() || fusion.len() != visual.len() {
        return Err(Error::shape(
            "contingency",
            format!("lengths {}, {}, {}", fusion.len(), speech.len(), visual.len()),
        ));
    }
    let mut cells = BTreeMap::new();
    for f in [false, true] {
        for s in [false, true] {
            for v in [false, true] {
                cells.insert(cell_key(f, s, v), 0);
            }
        }
    }
    for i in 0..fusion.len() {
        *cells.get_mut(&cell_key(fusion[i], speech[i], visual[i])).expect("cell") += 1;
    }
    Ok(Contingency { cells, n: fusion.len() })
}
