//! Causal multi-head attention over already-projected q, k, v.

use ndarray::{Array2, ArrayView2};

use super::AttentionKind;

/// elu(x) + 1
#[inline]
pub(crate) fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
fn phi_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub(crate) enum AttnCache {
    Linear { phq: Array2<f64>, phk: Array2<f64>, den: Array2<f64> },
    /// Attention weights per head, `T x T`, lower triangular.
    Softmax { probs: Vec<Array2<f64>> },
}

pub(crate) fn attend(
    kind: AttentionKind,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    match kind {
        AttentionKind::Linear => linear_forward(q, k, v, n_heads),
        AttentionKind::Softmax => softmax_forward(q, k, v, n_heads),
    }
}

/// Gradients (dq, dk, dv) given the upstream gradient of the output.
pub(crate) fn attend_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    out: ArrayView2<f64>,
    cache: &AttnCache,
    n_heads: usize,
    dout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    match cache {
        AttnCache::Linear { phq, phk, den } => linear_backward(q, k, v, out, phq, phk, den, n_heads, dout),
        AttnCache::Softmax { probs } => softmax_backward(q, k, v, probs, n_heads, dout),
    }
}

fn linear_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    let (t_len, d) = q.dim();
    let dh = d / n_heads;
    let phq = q.mapv(phi);
    let phk = k.mapv(phi);
    let mut out = Array2::zeros((t_len, d));
    let mut den = Array2::zeros((t_len, n_heads));
    let mut s = vec![0.0; dh * dh];
    let mut z = vec![0.0; dh];
    for h in 0..n_heads {
        let c0 = h * dh;
        s.fill(0.0);
        z.fill(0.0);
        for i in 0..t_len {
            for r in 0..dh {
                let kr = phk[[i, c0 + r]];
                z[r] += kr;
                for c in 0..dh {
                    s[r * dh + c] += kr * v[[i, c0 + c]];
                }
            }
            let mut dn = 0.0;
            for r in 0..dh {
                dn += phq[[i, c0 + r]] * z[r];
            }
            den[[i, h]] = dn;
            for c in 0..dh {
                let mut num = 0.0;
                for r in 0..dh {
                    num += phq[[i, c0 + r]] * s[r * dh + c];
                }
                out[[i, c0 + c]] = num / dn;
            }
        }
    }
    (out, AttnCache::Linear { phq, phk, den })
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    out: ArrayView2<f64>,
    phq: &Array2<f64>,
    phk: &Array2<f64>,
    den: &Array2<f64>,
    n_heads: usize,
    dout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t_len, d) = q.dim();
    let dh = d / n_heads;
    let mut dphq = Array2::<f64>::zeros((t_len, d));
    let mut dphk = Array2::<f64>::zeros((t_len, d));
    let mut dv = Array2::<f64>::zeros((t_len, d));
    let mut dn = Array2::<f64>::zeros((t_len, dh));
    let mut dden = vec![0.0; t_len];
    let mut s = vec![0.0; dh * dh];
    let mut z = vec![0.0; dh];
    let mut rr = vec![0.0; dh * dh];
    let mut rz = vec![0.0; dh];
    for h in 0..n_heads {
        let c0 = h * dh;
        // forward sweep: rebuild prefix state, gradient w.r.t. phi(q)
        s.fill(0.0);
        z.fill(0.0);
        for i in 0..t_len {
            for r in 0..dh {
                let kr = phk[[i, c0 + r]];
                z[r] += kr;
                for c in 0..dh {
                    s[r * dh + c] += kr * v[[i, c0 + c]];
                }
            }
            let inv = 1.0 / den[[i, h]];
            let mut dot = 0.0;
            for c in 0..dh {
                dn[[i, c]] = dout[[i, c0 + c]] * inv;
                dot += dout[[i, c0 + c]] * out[[i, c0 + c]];
            }
            dden[i] = -dot * inv;
            for r in 0..dh {
                let mut acc = dden[i] * z[r];
                for c in 0..dh {
                    acc += s[r * dh + c] * dn[[i, c]];
                }
                dphq[[i, c0 + r]] = acc;
            }
        }
        // reverse sweep: suffix sums of phi(q_i) dn_i^T and dden_i phi(q_i)
        rr.fill(0.0);
        rz.fill(0.0);
        for j in (0..t_len).rev() {
            for r in 0..dh {
                let qr = phq[[j, c0 + r]];
                rz[r] += dden[j] * qr;
                for c in 0..dh {
                    rr[r * dh + c] += qr * dn[[j, c]];
                }
            }
            for r in 0..dh {
                let mut acc = rz[r];
                for c in 0..dh {
                    acc += rr[r * dh + c] * v[[j, c0 + c]];
                }
                dphk[[j, c0 + r]] = acc;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for r in 0..dh {
                    acc += rr[r * dh + c] * phk[[j, c0 + r]];
                }
                dv[[j, c0 + c]] = acc;
            }
        }
    }
    let mut dq = dphq;
    dq.zip_mut_with(&q, |g, &x| *g *= phi_grad(x));
    let mut dk = dphk;
    dk.zip_mut_with(&k, |g, &x| *g *= phi_grad(x));
    (dq, dk, dv)
}

fn softmax_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    let (t_len, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t_len, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let c0 = h * dh;
        let mut p = Array2::<f64>::zeros((t_len, t_len));
        for i in 0..t_len {
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let mut sc = 0.0;
                for c in 0..dh {
                    sc += q[[i, c0 + c]] * k[[j, c0 + c]];
                }
                p[[i, j]] = sc * scale;
                max = max.max(p[[i, j]]);
            }
            let mut sum = 0.0;
            for j in 0..=i {
                p[[i, j]] = (p[[i, j]] - max).exp();
                sum += p[[i, j]];
            }
            for j in 0..=i {
                p[[i, j]] /= sum;
                for c in 0..dh {
                    out[[i, c0 + c]] += p[[i, j]] * v[[j, c0 + c]];
                }
            }
        }
        probs.push(p);
    }
    (out, AttnCache::Softmax { probs })
}

fn softmax_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    probs: &[Array2<f64>],
    n_heads: usize,
    dout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t_len, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t_len, d));
    let mut dk = Array2::zeros((t_len, d));
    let mut dv = Array2::zeros((t_len, d));
    let mut dp = vec![0.0; t_len];
    for (h, p) in probs.iter().enumerate() {
        let c0 = h * dh;
        for i in 0..t_len {
            let mut weighted = 0.0;
            for j in 0..=i {
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += dout[[i, c0 + c]] * v[[j, c0 + c]];
                    dv[[j, c0 + c]] += p[[i, j]] * dout[[i, c0 + c]];
                }
                dp[j] = acc;
                weighted += p[[i, j]] * acc;
            }
            for j in 0..=i {
                let ds = p[[i, j]] * (dp[j] - weighted) * scale;
                for c in 0..dh {
                    dq[[i, c0 + c]] += ds * k[[j, c0 + c]];
                    dk[[j, c0 + c]] += ds * q[[i, c0 + c]];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_trace_single_head() {
        // dh = 2, three positions
        let q = array![[0.5, -1.0], [0.0, 2.0], [-0.5, 0.3]];
        let k = array![[1.0, 0.0], [-2.0, 0.5], [0.2, -0.1]];
        let v = array![[1.0, 2.0], [3.0, -1.0], [0.0, 4.0]];
        let (out, _) = attend(AttentionKind::Linear, q.view(), k.view(), v.view(), 1);
        let f = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
        for i in 0..3 {
            let pq = [f(q[[i, 0]]), f(q[[i, 1]])];
            let mut num = [0.0, 0.0];
            let mut den = 0.0;
            for j in 0..=i {
                let pk = [f(k[[j, 0]]), f(k[[j, 1]])];
                let w = pq[0] * pk[0] + pq[1] * pk[1];
                den += w;
                num[0] += w * v[[j, 0]];
                num[1] += w * v[[j, 1]];
            }
            for c in 0..2 {
                assert!((out[[i, c]] - num[c] / den).abs() < 1e-12);
            }
        }
        // the first position only sees itself
        assert!((out[[0, 0]] - 1.0).abs() < 1e-12 && (out[[0, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_position_modes_agree() {
        let q = array![[0.3, -0.7, 1.1, 0.2]];
        let k = array![[-0.4, 0.9, 0.1, 0.5]];
        let v = array![[2.0, -3.0, 0.5, 1.5]];
        let (a, _) = attend(AttentionKind::Linear, q.view(), k.view(), v.view(), 2);
        let (b, _) = attend(AttentionKind::Softmax, q.view(), k.view(), v.view(), 2);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
