//! Reverse sweep over the tape.

use super::{softmax_temp_slice, Op, Tensor};
use crate::error::{Error, Result};

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tensor {
    /// Propagates gradients from this scalar back to every tracked tensor on
    /// the tape. Nodes with `requires_grad == false` receive no gradient.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        if nodes[self.id].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[self.id].shape
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);

        for i in (0..=self.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let tracked = |id: usize, nodes: &[super::Node]| nodes[id].track;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let m = nodes[a].shape[0];
                    let k = nodes[a].shape[1];
                    let n = nodes[b].shape[1];
                    if tracked(a, nodes) {
                        let bv = &nodes[b].values;
                        let da = acc(&mut grads[a], m * k);
                        for i2 in 0..m {
                            for j in 0..n {
                                let gij = g[i2 * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i2 * k + p] += gij * bv[p * n + j];
                                }
                            }
                        }
                    }
                    if tracked(b, nodes) {
                        let av = nodes[a].values.clone();
                        let db = acc(&mut grads[b], k * n);
                        for i2 in 0..m {
                            for p in 0..k {
                                let aip = av[i2 * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i2 * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose { a } => {
                    let a = *a;
                    if tracked(a, nodes) {
                        let (r, c) = (nodes[a].shape[0], nodes[a].shape[1]);
                        let da = acc(&mut grads[a], r * c);
                        for i2 in 0..r {
                            for j in 0..c {
                                da[i2 * c + j] += g[j * r + i2];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &p in &[*a, *b] {
                        if tracked(p, nodes) {
                            let dp = acc(&mut grads[p], g.len());
                            for (d, gv) in dp.iter_mut().zip(&g) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::AddRow { a, row } => {
                    let (a, row) = (*a, *row);
                    let n = nodes[row].values.len();
                    if tracked(a, nodes) {
                        let da = acc(&mut grads[a], g.len());
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    if tracked(row, nodes) {
                        let dr = acc(&mut grads[row], n);
                        for (idx, gv) in g.iter().enumerate() {
                            dr[idx % n] += gv;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    if tracked(a, nodes) {
                        let da = acc(&mut grads[a], g.len());
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += c * gv;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if tracked(a, nodes) {
                        let bv = nodes[b].values.clone();
                        let da = acc(&mut grads[a], g.len());
                        for ((d, gv), bv) in da.iter_mut().zip(&g).zip(&bv) {
                            *d += gv * bv;
                        }
                    }
                    if tracked(b, nodes) {
                        let av = nodes[a].values.clone();
                        let db = acc(&mut grads[b], g.len());
                        for ((d, gv), av) in db.iter_mut().zip(&g).zip(&av) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Sum { a } => {
                    let a = *a;
                    if tracked(a, nodes) {
                        let len = nodes[a].values.len();
                        let da = acc(&mut grads[a], len);
                        for d in da.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::MeanRows { a } => {
                    let a = *a;
                    if tracked(a, nodes) {
                        let (m, n) = (nodes[a].shape[0], nodes[a].shape[1]);
                        let da = acc(&mut grads[a], m * n);
                        let inv = 1.0 / m as f64;
                        for i2 in 0..m {
                            for j in 0..n {
                                da[i2 * n + j] += g[j] * inv;
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p].values.len();
                        if tracked(p, nodes) {
                            let dp = acc(&mut grads[p], len);
                            for (d, gv) in dp.iter_mut().zip(&g[offset..offset + len]) {
                                *d += gv;
                            }
                        }
                        offset += len;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let a = *a;
                    let rows = rows.clone();
                    if tracked(a, nodes) {
                        let n = nodes[a].shape[1];
                        let len = nodes[a].values.len();
                        let da = acc(&mut grads[a], len);
                        for (out_r, src_r) in rows.iter().enumerate() {
                            for j in 0..n {
                                da[src_r * n + j] += g[out_r * n + j];
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    let a = *a;
                    if tracked(a, nodes) {
                        let da = acc(&mut grads[a], g.len());
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::SoftmaxRows { a, tau } => {
                    let (a, tau) = (*a, *tau);
                    if tracked(a, nodes) {
                        // Own output values are the softmax weights.
                        let w = nodes[i].values.clone();
                        let (rows, cols) = match nodes[a].shape.as_slice() {
                            [n] => (1, *n),
                            [r, c] => (*r, *c),
                            _ => unreachable!(),
                        };
                        let da = acc(&mut grads[a], rows * cols);
                        for r in 0..rows {
                            let wr = &w[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = wr.iter().zip(gr).map(|(w, g)| w * g).sum();
                            for j in 0..cols {
                                da[r * cols + j] += wr[j] / tau * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNormRows { a, eps } => {
                    let (a, eps) = (*a, *eps);
                    if tracked(a, nodes) {
                        let x = nodes[a].values.clone();
                        let (rows, cols) = (nodes[a].shape[0], nodes[a].shape[1]);
                        let da = acc(&mut grads[a], rows * cols);
                        let nf = cols as f64;
                        for r in 0..rows {
                            let xr = &x[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let mean = xr.iter().sum::<f64>() / nf;
                            let var =
                                xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                            let inv = 1.0 / (var + eps).sqrt();
                            let xh: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                            let mg = gr.iter().sum::<f64>() / nf;
                            let mgx = gr.iter().zip(&xh).map(|(g, x)| g * x).sum::<f64>() / nf;
                            for j in 0..cols {
                                da[r * cols + j] += inv * (gr[j] - mg - xh[j] * mgx);
                            }
                        }
                    }
                }
                Op::Gelu { a } => {
                    let a = *a;
                    if tracked(a, nodes) {
                        let x = nodes[a].values.clone();
                        let da = acc(&mut grads[a], g.len());
                        for ((d, gv), xv) in da.iter_mut().zip(&g).zip(&x) {
                            *d += gv * super::ops::gelu_derivative(*xv);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    if tracked(logits, nodes) {
                        let lv = nodes[logits].values.clone();
                        let (batch, vocab) = (nodes[logits].shape[0], nodes[logits].shape[1]);
                        let dl = acc(&mut grads[logits], batch * vocab);
                        let scale = g[0] / batch as f64;
                        for (b, &y) in targets.iter().enumerate() {
                            let row = &lv[b * vocab..(b + 1) * vocab];
                            let p = softmax_temp_slice(row, 1.0);
                            for j in 0..vocab {
                                let indicator = if j == y { 1.0 } else { 0.0 };
                                dl[b * vocab + j] += scale * (p[j] - indicator);
                            }
                        }
                    }
                }
            }
        }

        // Publish gradients for tracked nodes; untracked nodes stay bare.
        for (i, slot) in grads.into_iter().enumerate() {
            if nodes[i].track {
                nodes[i].grad = slot;
            }
        }
        Ok(())
    }
}
