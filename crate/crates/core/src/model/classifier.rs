//! Emotion classifier on the transformer backbone: mean-pooled final hidden
//! states followed by a linear layer over the four quadrants.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_schedule, Adam, ModelConfig, ModelError, ModelState, TrainConfig};
use crate::emotion::EmotionQuadrant;
use crate::score::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// `attr_dim` is forced to 0.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        let mut model = ModelConfig::desk(0);
        model.n_layers = 1;
        Self { model, train: TrainConfig { max_steps: 300, warmup_steps: 30, ..TrainConfig::desk() } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerClassifier {
    pub backbone: ModelState,
    /// `d_model x 4`, row-major.
    pub head_w: Vec<f64>,
    pub head_b: [f64; 4],
}

impl TransformerClassifier {
    pub fn new(cfg: &ClassifierConfig) -> Result<Self, ModelError> {
        let mut model = cfg.model;
        model.attr_dim = 0;
        let backbone = ModelState::new(model, cfg.train.seed)?;
        Ok(Self { backbone, head_w: vec![0.0; model.d_model * 4], head_b: [0.0; 4] })
    }

    fn pooled(&self, ids: &[usize]) -> Result<(super::Forward, Array1<f64>), ModelError> {
        let fwd = self.backbone.forward(ids, &[], None)?;
        let pooled = fwd.hidden.mean_axis(ndarray::Axis(0)).expect("non-empty sequence");
        Ok((fwd, pooled))
    }

    fn head(&self, pooled: &Array1<f64>) -> [f64; 4] {
        let mut z = self.head_b;
        for (i, &h) in pooled.iter().enumerate() {
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += h * self.head_w[i * 4 + k];
            }
        }
        z
    }

    fn clip(&self, seq: &TokenSequence) -> Vec<usize> {
        let mut ids = seq.ids();
        ids.truncate(self.backbone.config.max_len);
        ids
    }

    pub fn class_logits(&self, seq: &TokenSequence) -> Result<[f64; 4], ModelError> {
        let (_, pooled) = self.pooled(&self.clip(seq))?;
        Ok(self.head(&pooled))
    }

    /// Highest logit; ties go to the lowest quadrant.
    pub fn predict(&self, seq: &TokenSequence) -> Result<EmotionQuadrant, ModelError> {
        let z = self.class_logits(seq)?;
        let mut best = 0;
        for k in 1..4 {
            if z[k] > z[best] {
                best = k;
            }
        }
        Ok(EmotionQuadrant::from_index(best).expect("class index"))
    }

    /// Cross-entropy training with Adam over both backbone and head.
    pub fn fit(&mut self, data: &[(TokenSequence, EmotionQuadrant)], cfg: &TrainConfig) -> Result<Vec<f64>, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let samples: Vec<(Vec<usize>, usize)> = data.iter().map(|(s, q)| (self.clip(s), q.index())).collect();
        let n_back = self.backbone.param_count();
        let d = self.backbone.config.d_model;
        let mut adam_back = Adam::new(n_back);
        let mut adam_head = Adam::new(d * 4 + 4);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut losses = Vec::with_capacity(cfg.max_steps);
        for step in 1..=cfg.max_steps {
            let mut g_back = vec![0.0; n_back];
            let mut g_head = vec![0.0; d * 4 + 4];
            let mut loss = 0.0;
            let bs = cfg.batch_size.max(1);
            for _ in 0..bs {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let (ids, y) = &samples[order[cursor]];
                cursor += 1;
                let (fwd, pooled) = self.pooled(ids)?;
                let z = self.head(&pooled);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                loss += (lse - z[*y]) / bs as f64;
                let mut dz = [0.0; 4];
                for k in 0..4 {
                    dz[k] = ((z[k] - lse).exp() - f64::from(u8::from(k == *y))) / bs as f64;
                }
                let mut dpooled = Array1::zeros(d);
                for i in 0..d {
                    for k in 0..4 {
                        g_head[i * 4 + k] += pooled[i] * dz[k];
                        dpooled[i] += self.head_w[i * 4 + k] * dz[k];
                    }
                }
                for k in 0..4 {
                    g_head[d * 4 + k] += dz[k];
                }
                let t_len = ids.len();
                let mut dh = Array2::zeros((t_len, d));
                for mut row in dh.rows_mut() {
                    row.scaled_add(1.0 / t_len as f64, &dpooled);
                }
                self.backbone.backward(&fwd, None, Some(dh.view()), &mut g_back);
            }
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step, detail: "classifier loss".into() });
            }
            let lr = lr_schedule(step, cfg);
            adam_back.step(&mut self.backbone.params, &g_back, lr, cfg);
            let mut head: Vec<f64> = self.head_w.iter().chain(self.head_b.iter()).copied().collect();
            adam_head.step(&mut head, &g_head, lr, cfg);
            self.head_w.copy_from_slice(&head[..d * 4]);
            self.head_b.copy_from_slice(&head[d * 4..]);
            losses.push(loss);
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_token_patterns() {
        let mut cfg = ClassifierConfig::desk();
        cfg.model = ModelConfig::tiny(0);
        cfg.train.max_steps = 120;
        cfg.train.batch_size = 4;
        let a = TokenSequence::from_ids(&[0, 3, 4, 90, 160, 220, 1]).unwrap();
        let b = TokenSequence::from_ids(&[0, 3, 4, 40, 150, 185, 1]).unwrap();
        let data = vec![(a.clone(), EmotionQuadrant::Q1), (b.clone(), EmotionQuadrant::Q3)];
        let mut clf = TransformerClassifier::new(&cfg).unwrap();
        let losses = clf.fit(&data, &cfg.train).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(clf.predict(&a).unwrap(), EmotionQuadrant::Q1);
        assert_eq!(clf.predict(&b).unwrap(), EmotionQuadrant::Q3);
    }
}
