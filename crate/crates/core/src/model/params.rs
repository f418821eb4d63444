use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// A `rows x cols` row-major block of the flat parameter buffer. Vectors
/// have `rows == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[self.range()]).expect("slot shape")
    }

    pub fn vec<'a>(&self, buf: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&buf[self.range()])
    }

    pub fn vec_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut buf[self.range()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub ffn_w1: Slot,
    pub ffn_b1: Slot,
    pub ffn_w2: Slot,
    pub ffn_b2: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub attr_w1: Slot,
    pub attr_b1: Slot,
    pub attr_w2: Slot,
    pub attr_b2: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, rows: usize, cols: usize) -> Slot {
        let s = Slot { offset: self.0, rows, cols };
        self.0 += rows * cols;
        s
    }
}

impl ParamLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut cur = Cursor(0);
        let tok_emb = cur.take(c.vocab_size, d);
        let pos_emb = cur.take(c.max_len, d);
        let attr_w1 = cur.take(c.attr_dim, d);
        let attr_b1 = cur.take(1, d);
        let attr_w2 = cur.take(d, d);
        let attr_b2 = cur.take(1, d);
        let layers = (0..c.n_layers)
            .map(|_| LayerSlots {
                ln1_g: cur.take(1, d),
                ln1_b: cur.take(1, d),
                wq: cur.take(d, d),
                wk: cur.take(d, d),
                wv: cur.take(d, d),
                wo: cur.take(d, d),
                bo: cur.take(1, d),
                ln2_g: cur.take(1, d),
                ln2_b: cur.take(1, d),
                ffn_w1: cur.take(d, c.d_ffn),
                ffn_b1: cur.take(1, c.d_ffn),
                ffn_w2: cur.take(c.d_ffn, d),
                ffn_b2: cur.take(1, d),
            })
            .collect();
        let lnf_g = cur.take(1, d);
        let lnf_b = cur.take(1, d);
        Self { tok_emb, pos_emb, attr_w1, attr_b1, attr_w2, attr_b2, layers, lnf_g, lnf_b, total: cur.0 }
    }

    /// Every named parameter group in buffer order.
    pub fn groups(&self) -> Vec<(String, Slot)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb),
            ("pos_emb".into(), self.pos_emb),
            ("attr.w1".into(), self.attr_w1),
            ("attr.b1".into(), self.attr_b1),
            ("attr.w2".into(), self.attr_w2),
            ("attr.b2".into(), self.attr_b2),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, s) in [
                ("ln1.g", l.ln1_g),
                ("ln1.b", l.ln1_b),
                ("attn.wq", l.wq),
                ("attn.wk", l.wk),
                ("attn.wv", l.wv),
                ("attn.wo", l.wo),
                ("attn.bo", l.bo),
                ("ln2.g", l.ln2_g),
                ("ln2.b", l.ln2_b),
                ("ffn.w1", l.ffn_w1),
                ("ffn.b1", l.ffn_b1),
                ("ffn.w2", l.ffn_w2),
                ("ffn.b2", l.ffn_b2),
            ] {
                out.push((format!("layer{i}.{n}"), s));
            }
        }
        out.push(("ln_f.g".into(), self.lnf_g));
        out.push(("ln_f.b".into(), self.lnf_b));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_tile_the_buffer() {
        let layout = ParamLayout::new(&ModelConfig::desk(20));
        let mut next = 0;
        for (_, s) in layout.groups() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, layout.total);
    }
}
