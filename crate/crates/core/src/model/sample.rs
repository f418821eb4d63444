//! Nucleus sampling and incremental decoding.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::phi;
use super::{AttentionKind, ModelError, ModelState};
use crate::mapping::{binarize, BitVector};
use crate::score::{Token, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 0.9, temperature: 1.0, max_tokens: 256, seed: 0 }
    }
}

/// Smallest prefix of the probabilities sorted in descending order (ties by
/// index) whose mass reaches `p`, renormalized.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in idx {
        if probs[i] <= 0.0 {
            break;
        }
        kept.push(i);
        mass += probs[i];
        if mass >= p - 1e-12 {
            break;
        }
    }
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

pub fn sample_top_p(probs: &[f64], p: f64, rng: &mut impl Rng) -> usize {
    let nuc = nucleus(probs, p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, q) in &nuc {
        acc += q;
        if u < acc {
            return i;
        }
    }
    nuc.last().map_or(0, |x| x.0)
}

/// Temperature-scaled softmax followed by nucleus sampling.
pub fn sample_logits(logits: &[f64], cfg: &SamplerConfig, rng: &mut impl Rng) -> usize {
    let tau = cfg.temperature.max(1e-12);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|v| *v /= sum);
    sample_top_p(&probs, cfg.p, rng)
}

enum LayerState {
    Linear { s: Vec<f64>, z: Vec<f64> },
    Softmax { keys: Vec<Vec<f64>>, values: Vec<Vec<f64>> },
}

/// Step-by-step evaluation of the model with cached attention state; each
/// step costs O(1) in the sequence length for linear attention.
pub struct Decoder<'a> {
    model: &'a ModelState,
    attr_emb: Array1<f64>,
    layers: Vec<LayerState>,
    pos: usize,
}

fn ln_vec(x: &Array1<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a ModelState, attr: &[f64]) -> Result<Self, ModelError> {
        let c = &model.config;
        if attr.len() != c.attr_dim {
            return Err(ModelError::ShapeMismatch(format!("attribute length {} != {}", attr.len(), c.attr_dim)));
        }
        let dh = c.head_dim();
        let layers = (0..c.n_layers)
            .map(|_| match c.attention {
                AttentionKind::Linear => {
                    LayerState::Linear { s: vec![0.0; c.n_heads * dh * dh], z: vec![0.0; c.d_model] }
                }
                AttentionKind::Softmax => LayerState::Softmax { keys: vec![], values: vec![] },
            })
            .collect();
        let attr_emb = model.encode_attr(attr).2;
        Ok(Self { model, attr_emb, layers, pos: 0 })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the logits for the next one.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>, ModelError> {
        let m = self.model;
        let c = &m.config;
        if self.pos >= c.max_len {
            return Err(ModelError::ShapeMismatch(format!("position {} beyond max_len {}", self.pos, c.max_len)));
        }
        if token >= c.vocab_size {
            return Err(ModelError::ShapeMismatch(format!("token id {token} outside vocabulary")));
        }
        let l = m.layout();
        let p = &m.params;
        let dh = c.head_dim();
        let mut x: Array1<f64> = &l.tok_emb.mat(p).row(token) + &l.pos_emb.mat(p).row(self.pos) + &self.attr_emb;
        for (ls, st) in l.layers.iter().zip(&mut self.layers) {
            let u = ln_vec(&x, ls.ln1_g.vec(p), ls.ln1_b.vec(p));
            let q = u.dot(&ls.wq.mat(p));
            let k = u.dot(&ls.wk.mat(p));
            let v = u.dot(&ls.wv.mat(p));
            let mut o = Array1::zeros(c.d_model);
            match st {
                LayerState::Linear { s, z } => {
                    for h in 0..c.n_heads {
                        let c0 = h * dh;
                        let sh = &mut s[h * dh * dh..(h + 1) * dh * dh];
                        for r in 0..dh {
                            let kr = phi(k[c0 + r]);
                            z[c0 + r] += kr;
                            for cc in 0..dh {
                                sh[r * dh + cc] += kr * v[c0 + cc];
                            }
                        }
                        let pq: Vec<f64> = (0..dh).map(|r| phi(q[c0 + r])).collect();
                        let den: f64 = (0..dh).map(|r| pq[r] * z[c0 + r]).sum();
                        for cc in 0..dh {
                            let num: f64 = (0..dh).map(|r| pq[r] * sh[r * dh + cc]).sum();
                            o[c0 + cc] = num / den;
                        }
                    }
                }
                LayerState::Softmax { keys, values } => {
                    keys.push(k.to_vec());
                    values.push(v.to_vec());
                    let scale = 1.0 / (dh as f64).sqrt();
                    for h in 0..c.n_heads {
                        let c0 = h * dh;
                        let scores: Vec<f64> = keys
                            .iter()
                            .map(|kj| (0..dh).map(|cc| q[c0 + cc] * kj[c0 + cc]).sum::<f64>() * scale)
                            .collect();
                        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let sum: f64 = w.iter().sum();
                        for (wj, vj) in w.iter().zip(values.iter()) {
                            for cc in 0..dh {
                                o[c0 + cc] += wj / sum * vj[c0 + cc];
                            }
                        }
                    }
                }
            }
            x += &(o.dot(&ls.wo.mat(p)) + ls.bo.vec(p));
            let w = ln_vec(&x, ls.ln2_g.vec(p), ls.ln2_b.vec(p));
            let g = (w.dot(&ls.ffn_w1.mat(p)) + ls.ffn_b1.vec(p)).mapv(|v| v.max(0.0));
            x += &(g.dot(&ls.ffn_w2.mat(p)) + ls.ffn_b2.vec(p));
        }
        let y = ln_vec(&x, l.lnf_g.vec(p), l.lnf_b.vec(p));
        self.pos += 1;
        Ok(l.tok_emb.mat(p).dot(&y).to_vec())
    }
}

/// Binarizes `attr_values` against `medians` and samples a sequence.
pub fn generate(
    model: &ModelState,
    attr_values: &[f64],
    medians: &[f64],
    cfg: &SamplerConfig,
) -> Result<TokenSequence, ModelError> {
    let bits = binarize(attr_values, medians).map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    generate_from_bits(model, &bits, cfg)
}

/// Samples from BOS until EOS or `max_tokens`. BOS and PAD are never
/// sampled after the first position.
pub fn generate_from_bits(
    model: &ModelState,
    bits: &BitVector,
    cfg: &SamplerConfig,
) -> Result<TokenSequence, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec = Decoder::new(model, &bits.as_f64())?;
    let max_tokens = cfg.max_tokens.clamp(1, model.config.max_len);
    let bos = usize::from(Token::Bos.id());
    let eos = usize::from(Token::Eos.id());
    let pad = usize::from(Token::Pad.id());
    let mut ids = vec![bos];
    while ids.len() < max_tokens {
        let mut logits = dec.step(*ids.last().expect("non-empty"))?;
        logits[bos] = f64::NEG_INFINITY;
        logits[pad] = f64::NEG_INFINITY;
        let next = sample_logits(&logits, cfg, &mut rng);
        ids.push(next);
        if next == eos {
            break;
        }
    }
    TokenSequence::from_ids(&ids).map_err(|e| ModelError::ShapeMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn nucleus_of_the_reference_distribution() {
        let nuc = nucleus(&[0.5, 0.3, 0.15, 0.05], 0.9);
        let idx: Vec<usize> = nuc.iter().map(|x| x.0).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        let expect = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95];
        for (got, want) in nuc.iter().zip(expect) {
            assert!((got.1 - want).abs() < 1e-12);
        }
        let full = nucleus(&[0.5, 0.3, 0.15, 0.05], 1.0);
        assert_eq!(full.len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_top_p(&[0.0, 1.0, 0.0], 0.9, &mut rng), 1);
        }
    }

    #[test]
    fn decoder_matches_full_forward() {
        for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
            let mut cfg = ModelConfig::tiny(3);
            cfg.n_heads = 2;
            cfg.attention = kind;
            let m = ModelState::new(cfg, 8).unwrap();
            let tokens = [0usize, 3, 4, 61, 150, 190, 6];
            let attr = [1.0, 0.0, 1.0];
            let full = m.forward(&tokens, &attr, None).unwrap().logits;
            let mut dec = Decoder::new(&m, &attr).unwrap();
            for (t, &tok) in tokens.iter().enumerate() {
                let step = dec.step(tok).unwrap();
                for (a, b) in step.iter().zip(full.row(t).iter()) {
                    assert!((a - b).abs() < 1e-9, "{kind:?} pos {t}");
                }
            }
        }
    }

    #[test]
    fn generation_is_seeded_and_bounded() {
        let m = ModelState::new(ModelConfig::tiny(2), 1).unwrap();
        let cfg = SamplerConfig { max_tokens: 12, seed: 4, ..Default::default() };
        let a = generate(&m, &[3.0, 0.0], &[1.0, 1.0], &cfg).unwrap();
        let b = generate(&m, &[3.0, 0.0], &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens[0], Token::Bos);
        assert!(a.len() <= 12);
    }
}
