use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModelError, ModelState};
use crate::mapping::BitVector;
use crate::score::{Token, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; None disables clipping.
    pub clip_norm: Option<f64>,
    /// Compute per-sequence gradients on the rayon pool. The reduction order
    /// is fixed, so results do not depend on the thread count.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    50
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            batch_size: 8,
            base_lr: 1e-4,
            warmup_steps: 16000,
            max_steps: 200_000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
            parallel: false,
            log_every: 100,
        }
    }

    pub fn desk() -> Self {
        Self { base_lr: 1e-3, warmup_steps: 100, max_steps: 1200, log_every: 50, ..Self::full() }
    }
}

/// base_lr * min(step / warmup, sqrt(warmup / step)); steps count from 1.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warm = cfg.warmup_steps.max(1) as f64;
    cfg.base_lr * (step / warm).min((warm / step).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|l| l.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,grad_norm\n");
        for l in &self.log {
            s.push_str(&format!("{},{:e},{},{}\n", l.step, l.lr, l.loss, l.grad_norm));
        }
        s
    }
}

fn counted_targets(ids: &[usize]) -> usize {
    let pad = usize::from(Token::Pad.id());
    ids.iter().skip(1).filter(|&&t| t != pad).count()
}

/// Next-token training with Adam and the warmup/inverse-square-root
/// schedule. Each batch loss is the mean over its non-PAD target positions.
pub fn train(
    state: &mut ModelState,
    data: &[(TokenSequence, BitVector)],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let max_len = state.config.max_len;
    let samples: Vec<(Vec<usize>, Vec<f64>)> = data
        .iter()
        .map(|(seq, bits)| {
            let mut ids = seq.ids();
            ids.truncate(max_len);
            (ids, bits.as_f64())
        })
        .collect();
    for (_, a) in &samples {
        if a.len() != state.config.attr_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "attribute length {} != {}",
                a.len(),
                state.config.attr_dim
            )));
        }
    }

    let n_params = state.param_count();
    let mut adam = Adam::new(n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut report = TrainReport::default();
    let batch = cfg.batch_size.max(1);
    let mut drawn: u64 = 0;

    for step in 1..=cfg.max_steps {
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push((order[cursor], drawn));
            cursor += 1;
            drawn += 1;
        }
        let total: usize = picks.iter().map(|&(i, _)| counted_targets(&samples[i].0)).sum();
        if total == 0 {
            continue;
        }
        let scale = 1.0 / total as f64;
        let model: &ModelState = state;
        let one = |&(i, stream): &(usize, u64)| -> Result<(f64, Vec<f64>), ModelError> {
            let (ids, attr) = &samples[i];
            let mut g = vec![0.0; n_params];
            let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d1ce);
            drop_rng.set_stream(stream);
            let lv = model.loss_and_grad(ids, attr, scale, Some(&mut drop_rng), &mut g)?;
            Ok((lv.loss * lv.count as f64, g))
        };
        let parts: Vec<Result<(f64, Vec<f64>), ModelError>> =
            if cfg.parallel { picks.par_iter().map(one).collect() } else { picks.iter().map(one).collect() };
        let mut grad = vec![0.0; n_params];
        let mut loss_sum = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss_sum += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let loss = loss_sum * scale;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step,
                detail: format!("loss {loss}, gradient norm {norm}, batch rows {:?}", picks.iter().map(|p| p.0).collect::<Vec<_>>()),
            });
        }
        if let Some(clip) = cfg.clip_norm {
            if norm > clip {
                let f = clip / norm;
                grad.iter_mut().for_each(|g| *g *= f);
            }
        }
        let lr = lr_schedule(step, cfg);
        adam.step(&mut state.params, &grad, lr, cfg);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            log::info!("step {step} loss {loss:.4} lr {lr:.2e}");
        }
        report.log.push(StepLog { step, lr, loss, grad_norm: norm });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::full();
        assert_eq!(lr_schedule(16000, &cfg), 1e-4);
        assert_eq!(lr_schedule(4000, &cfg), 2.5e-5);
        assert_eq!(lr_schedule(64000, &cfg), 5e-5);
    }

    fn data() -> Vec<(TokenSequence, BitVector)> {
        let a = TokenSequence::from_ids(&[0, 3, 4, 60, 151, 196, 1]).unwrap();
        let b = TokenSequence::from_ids(&[0, 3, 8, 72, 149, 200, 1]).unwrap();
        vec![(a, BitVector { bits: vec![1, 0] }), (b, BitVector { bits: vec![0, 1] })]
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut m = ModelState::new(ModelConfig::tiny(2), 3).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig { base_lr: 0.0, max_steps: 5, batch_size: 2, ..TrainConfig::desk() };
        train(&mut m, &data(), &cfg).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = TrainConfig { max_steps: 6, batch_size: 2, ..TrainConfig::desk() };
        let mut a = ModelState::new(ModelConfig::tiny(2), 3).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &data(), &cfg).unwrap();
        let rb = train(&mut b, &data(), &TrainConfig { parallel: true, ..cfg }).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn attribute_length_is_checked() {
        let mut m = ModelState::new(ModelConfig::tiny(3), 3).unwrap();
        assert!(train(&mut m, &data(), &TrainConfig::desk()).is_err());
    }
}
