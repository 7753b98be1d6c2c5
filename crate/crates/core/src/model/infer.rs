//! Incremental inference with a per-layer key/value cache.

use super::{Model, PROJ};
use crate::error::{Error, Result};
use crate::numcore::{dot, gelu, gemm_nn, layer_norm_rows, rope_in_place, softmax_row_into, Tensor};
use crate::tokens::TokenId;

struct Layer {
    ln1: (Vec<f64>, Vec<f64>),
    w: [Tensor; 4],
    ln2: (Vec<f64>, Vec<f64>),
    ff1: (Tensor, Vec<f64>),
    ff2: (Tensor, Vec<f64>),
}

/// Read-only snapshot of a model's language-model weights with any
/// adapters folded in.
pub struct InferenceModel {
    d: usize,
    n_heads: usize,
    max_seq: usize,
    vocab_size: usize,
    tok_emb: Tensor,
    layers: Vec<Layer>,
    ln_f: (Vec<f64>, Vec<f64>),
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = w.dims2();
    let mut out = vec![0.0; n];
    gemm_nn(x, w.data(), &mut out, 1, k, n);
    out
}

fn vecmat_bias(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let mut out = vecmat(x, w);
    out.iter_mut().zip(b).for_each(|(o, b)| *o += b);
    out
}

impl InferenceModel {
    pub fn new(model: &Model) -> Result<Self> {
        let merged;
        let m = if model.config.lora.is_some() {
            merged = model.merge_lora()?;
            &merged
        } else {
            model
        };
        let v = |name: &str| -> Result<Tensor> { Ok(m.params.value(super::lookup(&m.params, name)?).clone()) };
        let row = |name: &str| -> Result<Vec<f64>> { Ok(v(name)?.into_data()) };
        let lm = &m.config.lm;
        let mut layers = Vec::new();
        for i in 0..lm.n_layers {
            let pre = format!("layer{i}");
            let w = PROJ.map(|p| v(&format!("{pre}.attn.w{p}")));
            let [q, k, vv, o] = w;
            layers.push(Layer {
                ln1: (row(&format!("{pre}.ln1.g"))?, row(&format!("{pre}.ln1.b"))?),
                w: [q?, k?, vv?, o?],
                ln2: (row(&format!("{pre}.ln2.g"))?, row(&format!("{pre}.ln2.b"))?),
                ff1: (v(&format!("{pre}.ff1.w"))?, row(&format!("{pre}.ff1.b"))?),
                ff2: (v(&format!("{pre}.ff2.w"))?, row(&format!("{pre}.ff2.b"))?),
            });
        }
        Ok(Self {
            d: lm.d_model,
            n_heads: lm.n_heads,
            max_seq: lm.max_seq,
            vocab_size: lm.vocab.size() as usize,
            tok_emb: v("tok_emb")?,
            layers,
            ln_f: (row("ln_f.g")?, row("ln_f.b")?),
        })
    }

    pub fn d_model(&self) -> usize {
        self.d
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn embedding(&self, id: TokenId) -> Result<&[f64]> {
        if id as usize >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.vocab_size as u32,
            });
        }
        Ok(self.tok_emb.row(id as usize))
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            model: self,
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            visible: Vec::new(),
        }
    }

    /// Logits for every row of `rows` (`L × d`) in one pass.
    pub fn logits_all(&self, rows: &Tensor, key_visible: Option<&[bool]>) -> Result<Tensor> {
        let (len, _) = rows.dims2();
        let mut s = self.session();
        let mut out = Vec::with_capacity(len * self.vocab_size);
        for i in 0..len {
            let vis = key_visible.is_none_or(|k| k[i]);
            out.extend(s.push(rows.row(i), vis, true)?.expect("logits requested"));
        }
        Tensor::new(vec![len, self.vocab_size], out)
    }
}

/// Decoding state over one sequence.
pub struct Session<'a> {
    model: &'a InferenceModel,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    visible: Vec<bool>,
}

impl Session<'_> {
    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn push_token(&mut self, id: TokenId, want_logits: bool) -> Result<Option<Vec<f64>>> {
        let row = self.model.embedding(id)?.to_vec();
        self.push(&row, true, want_logits)
    }

    /// Appends one input row. Its key is hidden from all later queries
    /// (and itself) when `key_visible` is false.
    pub fn push(&mut self, row: &[f64], key_visible: bool, want_logits: bool) -> Result<Option<Vec<f64>>> {
        let m = self.model;
        let d = m.d;
        if row.len() != d {
            return Err(Error::shape("session", format!("row width {}, expected {d}", row.len())));
        }
        let pos = self.len();
        if pos + 1 > m.max_seq {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: m.max_seq,
            });
        }
        self.visible.push(key_visible);
        let len = pos + 1;
        let hd = d / m.n_heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let mut x = row.to_vec();
        let mut scores = vec![0.0; len];
        let mut probs = vec![0.0; len];
        for (li, layer) in m.layers.iter().enumerate() {
            let (xn, _) = layer_norm_rows(&x, &layer.ln1.0, &layer.ln1.1, 1, d);
            let mut q = vecmat(&xn, &layer.w[0]);
            let mut k = vecmat(&xn, &layer.w[1]);
            let v = vecmat(&xn, &layer.w[2]);
            rope_in_place(&mut q, &[pos as f64], d, hd, 1.0);
            rope_in_place(&mut k, &[pos as f64], d, hd, 1.0);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (keys, values) = (&self.keys[li], &self.values[li]);
            let mut att = vec![0.0; d];
            for h in 0..m.n_heads {
                let qh = &q[h * hd..(h + 1) * hd];
                for j in 0..len {
                    scores[j] = dot(qh, &keys[j * d + h * hd..j * d + (h + 1) * hd]) * inv;
                }
                softmax_row_into(&scores, Some(&self.visible), &mut probs);
                let out = &mut att[h * hd..(h + 1) * hd];
                for j in 0..len {
                    let p = probs[j];
                    if p == 0.0 {
                        continue;
                    }
                    for (o, &vv) in out.iter_mut().zip(&values[j * d + h * hd..j * d + (h + 1) * hd]) {
                        *o += p * vv;
                    }
                }
            }
            let att = vecmat(&att, &layer.w[3]);
            x.iter_mut().zip(&att).for_each(|(a, b)| *a += b);
            let (xn, _) = layer_norm_rows(&x, &layer.ln2.0, &layer.ln2.1, 1, d);
            let mut hdn = vecmat_bias(&xn, &layer.ff1.0, &layer.ff1.1);
            hdn.iter_mut().for_each(|v| *v = gelu(*v));
            let f = vecmat_bias(&hdn, &layer.ff2.0, &layer.ff2.1);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        if !want_logits {
            return Ok(None);
        }
        let (hidden, _) = layer_norm_rows(&x, &m.ln_f.0, &m.ln_f.1, 1, d);
        let logits = (0..m.vocab_size).map(|t| dot(&hidden, m.tok_emb.row(t))).collect();
        Ok(Some(logits))
    }
}
