use super::{ModelError, ModelState};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub analytic_norm: f64,
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||), 0 when both vanish.
    pub rel_error: f64,
}

/// Compares the analytic gradient of the mean sequence loss with central
/// finite differences, group by group. Every parameter is perturbed.
pub fn gradient_check(model: &ModelState, tokens: &[usize], attr: &[f64], h: f64) -> Result<Vec<GroupCheck>, ModelError> {
    let mut grad = vec![0.0; model.param_count()];
    let lv = model.loss_and_grad(tokens, attr, 1.0, None, &mut grad)?;
    let scale = 1.0 / lv.count.max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    let mut probe = model.clone();
    let eval = |probe: &mut ModelState, i: usize, v: f64| -> Result<f64, ModelError> {
        let old = probe.params[i];
        probe.params[i] = v;
        let out = super::loss(&probe.forward(tokens, attr, None)?.logits, tokens).loss;
        probe.params[i] = old;
        Ok(out)
    };
    let mut out = Vec::new();
    for (name, slot) in model.layout().groups() {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for i in slot.range() {
            let x = model.params[i];
            let num = (eval(&mut probe, i, x + h)? - eval(&mut probe, i, x - h)?) / (2.0 * h);
            diff += (grad[i] - num).powi(2);
            na += grad[i].powi(2);
            nn += num * num;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        out.push(GroupCheck { name, analytic_norm: na.sqrt(), rel_error });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKind, ModelConfig};

    fn check(kind: AttentionKind, heads: usize) {
        let mut cfg = ModelConfig::tiny(3);
        cfg.attention = kind;
        cfg.n_heads = heads;
        let m = ModelState::new(cfg, 21).unwrap();
        let tokens = [0, 3, 4, 62, 151, 197, 8, 66];
        let report = gradient_check(&m, &tokens, &[1.0, 0.0, 1.0], 1e-5).unwrap();
        for g in &report {
            assert!(g.rel_error < 1e-3, "{kind:?} {}: {}", g.name, g.rel_error);
        }
    }

    #[test]
    fn softmax_attention_gradients() {
        check(AttentionKind::Softmax, 2);
    }

    #[test]
    fn linear_attention_multi_head_gradients() {
        check(AttentionKind::Linear, 2);
    }
}
