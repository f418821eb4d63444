//! Forward pass, loss and hand-derived backward pass over one sequence.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{attend, attend_backward, AttnCache};
use super::{ModelError, ModelState};
use crate::mapping::BitVector;
use crate::score::Token;

const LN_EPS: f64 = 1e-5;

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut inv_std = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * inv;
        }
    }
    let mut y = xhat.clone();
    Zip::from(y.rows_mut()).for_each(|mut r| {
        r *= &g;
        r += &b;
    });
    (y, LnCache { xhat, inv_std })
}

/// Returns dx and accumulates the gain and bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    c: &LnCache,
    g: ArrayView1<f64>,
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let gdy = dy[[i, j]];
            dg[j] += gdy * c.xhat[[i, j]];
            db[j] += gdy;
            let dxh = gdy * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * c.xhat[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = c.inv_std[i] * (dxh - mean_dxhat - c.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    u: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: AttnCache,
    o: Array2<f64>,
    drop_a: Option<Array2<f64>>,
    ln2: LnCache,
    w: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    drop_f: Option<Array2<f64>>,
}

/// Output of a forward pass over one sequence, with everything the backward
/// pass needs.
pub struct Forward {
    /// `T x vocab_size`.
    pub logits: Array2<f64>,
    /// Final layer-norm output, `T x d_model`.
    pub hidden: Array2<f64>,
    tokens: Vec<usize>,
    attr: Vec<f64>,
    attr_pre: Array1<f64>,
    attr_h: Array1<f64>,
    drop_e: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Mean next-token cross-entropy over counted positions.
    pub loss: f64,
    /// Positions whose target is not PAD.
    pub count: usize,
    /// True when no position was counted; `loss` is then 0.
    pub empty: bool,
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

fn log_softmax_row(row: ArrayView1<f64>) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = row.iter().map(|v| (v - max).exp()).sum::<f64>();
    (max, sum.ln())
}

/// Mean cross-entropy of row t against `tokens[t + 1]`, skipping PAD
/// targets.
pub fn loss(logits: &Array2<f64>, tokens: &[usize]) -> LossValue {
    let pad = usize::from(Token::Pad.id());
    let mut total = 0.0;
    let mut count = 0;
    for t in 0..tokens.len().saturating_sub(1).min(logits.nrows()) {
        let target = tokens[t + 1];
        if target == pad {
            continue;
        }
        let row = logits.row(t);
        let (max, lse) = log_softmax_row(row);
        total += max + lse - row[target];
        count += 1;
    }
    if count == 0 {
        return LossValue { loss: 0.0, count: 0, empty: true };
    }
    LossValue { loss: total / count as f64, count, empty: false }
}

impl ModelState {
    fn check_inputs(&self, tokens: &[usize], attr: &[f64]) -> Result<(), ModelError> {
        let c = &self.config;
        if tokens.is_empty() || tokens.len() > c.max_len {
            return Err(ModelError::ShapeMismatch(format!("sequence length {} not in 1..={}", tokens.len(), c.max_len)));
        }
        if attr.len() != c.attr_dim {
            return Err(ModelError::ShapeMismatch(format!("attribute length {} != {}", attr.len(), c.attr_dim)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(ModelError::ShapeMismatch(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Attribute-encoder output (pre-activation, hidden, embedding).
    pub(crate) fn encode_attr(&self, attr: &[f64]) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let l = self.layout();
        let p = &self.params;
        let a = ArrayView1::from(attr);
        let pre = a.dot(&l.attr_w1.mat(p)) + l.attr_b1.vec(p);
        let h = pre.mapv(|x| x.max(0.0));
        let e = h.dot(&l.attr_w2.mat(p)) + l.attr_b2.vec(p);
        (pre, h, e)
    }

    /// Logits for every position, inference mode.
    pub fn logits(&self, tokens: &[usize], bits: &BitVector) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward(tokens, &bits.as_f64(), None)?.logits)
    }

    /// Full forward pass. Dropout is applied only when `rng` is given.
    pub fn forward(&self, tokens: &[usize], attr: &[f64], mut rng: Option<&mut ChaCha8Rng>) -> Result<Forward, ModelError> {
        self.check_inputs(tokens, attr)?;
        let c = &self.config;
        let l = self.layout();
        let p = &self.params;
        let t_len = tokens.len();
        let d = c.d_model;
        let drop = c.dropout > 0.0 && rng.is_some();

        let (attr_pre, attr_h, e) = self.encode_attr(attr);
        let tok = l.tok_emb.mat(p);
        let pos = l.pos_emb.mat(p);
        let mut x = Array2::zeros((t_len, d));
        for (t, &id) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &tok.row(id);
            row += &pos.row(t);
            row += &e;
        }
        let drop_e = drop.then(|| dropout_mask(rng.as_deref_mut().unwrap(), (t_len, d), c.dropout));
        if let Some(m) = &drop_e {
            x *= m;
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for ls in &l.layers {
            let (u, ln1) = layer_norm(&x, ls.ln1_g.vec(p), ls.ln1_b.vec(p));
            let q = u.dot(&ls.wq.mat(p));
            let k = u.dot(&ls.wk.mat(p));
            let v = u.dot(&ls.wv.mat(p));
            let (o, attn) = attend(c.attention, q.view(), k.view(), v.view(), c.n_heads);
            let mut a = o.dot(&ls.wo.mat(p)) + ls.bo.vec(p);
            let drop_a = drop.then(|| dropout_mask(rng.as_deref_mut().unwrap(), (t_len, d), c.dropout));
            if let Some(m) = &drop_a {
                a *= m;
            }
            x += &a;

            let (w, ln2) = layer_norm(&x, ls.ln2_g.vec(p), ls.ln2_b.vec(p));
            let f1 = w.dot(&ls.ffn_w1.mat(p)) + ls.ffn_b1.vec(p);
            let g = f1.mapv(|v| v.max(0.0));
            let mut f2 = g.dot(&ls.ffn_w2.mat(p)) + ls.ffn_b2.vec(p);
            let drop_f = drop.then(|| dropout_mask(rng.as_deref_mut().unwrap(), (t_len, d), c.dropout));
            if let Some(m) = &drop_f {
                f2 *= m;
            }
            x += &f2;
            layers.push(LayerCache { ln1, u, q, k, v, attn, o, drop_a, ln2, w, f1, g, drop_f });
        }
        let (hidden, lnf) = layer_norm(&x, l.lnf_g.vec(p), l.lnf_b.vec(p));
        let logits = hidden.dot(&tok.t());
        Ok(Forward {
            logits,
            hidden,
            tokens: tokens.to_vec(),
            attr: attr.to_vec(),
            attr_pre,
            attr_h,
            drop_e,
            layers,
            lnf,
        })
    }

    /// Accumulates parameter gradients into `grad` given upstream gradients
    /// of the logits and/or of the final hidden states.
    pub fn backward(
        &self,
        fwd: &Forward,
        dlogits: Option<ArrayView2<f64>>,
        dhidden: Option<ArrayView2<f64>>,
        grad: &mut [f64],
    ) {
        let c = &self.config;
        let l = self.layout();
        let p = &self.params;
        let t_len = fwd.tokens.len();
        let d = c.d_model;

        let mut dy = Array2::<f64>::zeros((t_len, d));
        if let Some(dl) = dlogits {
            // logits = hidden . tok_emb^T
            general_mat_mul(1.0, &dl.t(), &fwd.hidden, 1.0, &mut l.tok_emb.mat_mut(grad));
            general_mat_mul(1.0, &dl, &l.tok_emb.mat(p), 1.0, &mut dy);
        }
        if let Some(dh) = dhidden {
            dy += &dh;
        }
        let mut dx = {
            let (dg, db) = split_pair(grad, l.lnf_g.range(), l.lnf_b.range());
            layer_norm_backward(&dy, &fwd.lnf, l.lnf_g.vec(p), dg, db)
        };

        for (ls, lc) in l.layers.iter().zip(&fwd.layers).rev() {
            // feed-forward branch
            let mut df2 = dx.clone();
            if let Some(m) = &lc.drop_f {
                df2 *= m;
            }
            general_mat_mul(1.0, &lc.g.t(), &df2, 1.0, &mut ls.ffn_w2.mat_mut(grad));
            ls.ffn_b2.vec_mut(grad).scaled_add(1.0, &df2.sum_axis(Axis(0)));
            let mut df1 = df2.dot(&ls.ffn_w2.mat(p).t());
            df1.zip_mut_with(&lc.f1, |g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0
                }
            });
            general_mat_mul(1.0, &lc.w.t(), &df1, 1.0, &mut ls.ffn_w1.mat_mut(grad));
            ls.ffn_b1.vec_mut(grad).scaled_add(1.0, &df1.sum_axis(Axis(0)));
            let dw = df1.dot(&ls.ffn_w1.mat(p).t());
            let dxl = {
                let (dg, db) = split_pair(grad, ls.ln2_g.range(), ls.ln2_b.range());
                layer_norm_backward(&dw, &lc.ln2, ls.ln2_g.vec(p), dg, db)
            };
            dx += &dxl;

            // attention branch
            let mut da = dx.clone();
            if let Some(m) = &lc.drop_a {
                da *= m;
            }
            general_mat_mul(1.0, &lc.o.t(), &da, 1.0, &mut ls.wo.mat_mut(grad));
            ls.bo.vec_mut(grad).scaled_add(1.0, &da.sum_axis(Axis(0)));
            let d_o = da.dot(&ls.wo.mat(p).t());
            let out = &lc.o;
            let (dq, dk, dv) =
                attend_backward(lc.q.view(), lc.k.view(), lc.v.view(), out.view(), &lc.attn, c.n_heads, d_o.view());
            general_mat_mul(1.0, &lc.u.t(), &dq, 1.0, &mut ls.wq.mat_mut(grad));
            general_mat_mul(1.0, &lc.u.t(), &dk, 1.0, &mut ls.wk.mat_mut(grad));
            general_mat_mul(1.0, &lc.u.t(), &dv, 1.0, &mut ls.wv.mat_mut(grad));
            let mut du = dq.dot(&ls.wq.mat(p).t());
            general_mat_mul(1.0, &dk, &ls.wk.mat(p).t(), 1.0, &mut du);
            general_mat_mul(1.0, &dv, &ls.wv.mat(p).t(), 1.0, &mut du);
            let dxl = {
                let (dg, db) = split_pair(grad, ls.ln1_g.range(), ls.ln1_b.range());
                layer_norm_backward(&du, &lc.ln1, ls.ln1_g.vec(p), dg, db)
            };
            dx += &dxl;
        }

        if let Some(m) = &fwd.drop_e {
            dx *= m;
        }
        {
            let mut dtok = l.tok_emb.mat_mut(grad);
            for (t, &id) in fwd.tokens.iter().enumerate() {
                let mut row = dtok.row_mut(id);
                row += &dx.row(t);
            }
        }
        {
            let mut dpos = l.pos_emb.mat_mut(grad);
            let mut rows = dpos.slice_mut(s![..t_len, ..]);
            rows += &dx;
        }
        let de = dx.sum_axis(Axis(0));
        // e = h . W2 + b2, h = relu(a . W1 + b1)
        {
            let mut dw2 = l.attr_w2.mat_mut(grad);
            for i in 0..d {
                let hi = fwd.attr_h[i];
                if hi != 0.0 {
                    dw2.row_mut(i).scaled_add(hi, &de);
                }
            }
        }
        l.attr_b2.vec_mut(grad).scaled_add(1.0, &de);
        let mut dh = l.attr_w2.mat(p).dot(&de);
        dh.zip_mut_with(&fwd.attr_pre, |g, &pre| {
            if pre <= 0.0 {
                *g = 0.0
            }
        });
        {
            let mut dw1 = l.attr_w1.mat_mut(grad);
            for (i, &ai) in fwd.attr.iter().enumerate() {
                if ai != 0.0 {
                    dw1.row_mut(i).scaled_add(ai, &dh);
                }
            }
        }
        l.attr_b1.vec_mut(grad).scaled_add(1.0, &dh);
    }

    /// Loss of one sequence and the gradient of `scale * loss_sum`, where
    /// `loss_sum` is the summed (not averaged) cross-entropy.
    pub fn loss_and_grad(
        &self,
        tokens: &[usize],
        attr: &[f64],
        scale: f64,
        rng: Option<&mut ChaCha8Rng>,
        grad: &mut [f64],
    ) -> Result<LossValue, ModelError> {
        let fwd = self.forward(tokens, attr, rng)?;
        let lv = loss(&fwd.logits, tokens);
        if lv.empty {
            return Ok(lv);
        }
        let dl = cross_entropy_grad(&fwd.logits, tokens, scale);
        self.backward(&fwd, Some(dl.view()), None, grad);
        Ok(lv)
    }
}

/// Gradient of `scale * sum_t CE(logits[t], tokens[t+1])` w.r.t. logits.
pub(crate) fn cross_entropy_grad(logits: &Array2<f64>, tokens: &[usize], scale: f64) -> Array2<f64> {
    let pad = usize::from(Token::Pad.id());
    let mut dl = Array2::zeros(logits.dim());
    for t in 0..tokens.len().saturating_sub(1).min(logits.nrows()) {
        let target = tokens[t + 1];
        if target == pad {
            continue;
        }
        let row = logits.row(t);
        let (max, lse) = log_softmax_row(row);
        let mut out = dl.row_mut(t);
        for (o, &z) in out.iter_mut().zip(row.iter()) {
            *o = scale * (z - max - lse).exp();
        }
        out[target] -= scale;
    }
    dl
}

/// Two disjoint mutable sub-slices, first range before the second.
fn split_pair(
    buf: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKind, ModelConfig};

    fn toy_tokens() -> Vec<usize> {
        vec![0, 3, 25, 60, 152, 196, 4, 70]
    }

    #[test]
    fn shapes_and_causality() {
        let m = ModelState::new(ModelConfig::tiny(3), 4).unwrap();
        let attr = [1.0, 0.0, 1.0];
        let a = m.forward(&toy_tokens(), &attr, None).unwrap();
        assert_eq!(a.logits.dim(), (8, 244));
        let mut other = toy_tokens();
        other[5] = 100;
        let b = m.forward(&other, &attr, None).unwrap();
        for t in 0..5 {
            assert_eq!(a.logits.row(t), b.logits.row(t));
        }
        assert_ne!(a.logits.row(5), b.logits.row(5));
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = ModelState::new(ModelConfig::tiny(3), 4).unwrap();
        assert!(m.forward(&toy_tokens(), &[1.0], None).is_err());
        assert!(m.forward(&[0; 17], &[0.0; 3], None).is_err());
        assert!(m.forward(&[], &[0.0; 3], None).is_err());
        assert!(m.forward(&[500], &[0.0; 3], None).is_err());
    }

    #[test]
    fn uniform_and_pad_losses() {
        let logits = Array2::zeros((4, 244));
        let lv = loss(&logits, &[0, 5, 6, 7]);
        assert!((lv.loss - 244f64.ln()).abs() < 1e-12);
        assert_eq!(lv.count, 3);
        let pad = usize::from(Token::Pad.id());
        let lv = loss(&logits, &[0, pad, pad, pad]);
        assert!(lv.empty && lv.loss == 0.0 && lv.count == 0);
        let mut sharp = Array2::zeros((2, 244));
        sharp[[0, 9]] = 60.0;
        assert!(loss(&sharp, &[0, 9]).loss < 1e-20);
    }

    #[test]
    fn distinct_bits_change_first_logits() {
        let m = ModelState::new(ModelConfig::tiny(4), 11).unwrap();
        let a = m.logits(&[0], &BitVector { bits: vec![1, 0, 0, 1] }).unwrap();
        let b = m.logits(&[0], &BitVector { bits: vec![0, 1, 1, 0] }).unwrap();
        let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn single_token_linear_matches_softmax() {
        let mut cfg = ModelConfig::tiny(2);
        let m = ModelState::new(cfg, 5).unwrap();
        cfg.attention = AttentionKind::Softmax;
        let s = ModelState::from_params(cfg, m.params.clone()).unwrap();
        let a = m.forward(&[0], &[1.0, 0.0], None).unwrap();
        let b = s.forward(&[0], &[1.0, 0.0], None).unwrap();
        for (x, y) in a.logits.iter().zip(b.logits.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
