//! Forward operations. Each constructor validates shapes, computes values,
//! and records the node so the backward sweep can replay it.

use super::{softmax_temp_slice, Op, Tensor};
use crate::error::{Error, Result};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-major matrix product kernel shared by the tape op and by value-level
/// inference paths, so both produce bit-identical results.
pub fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Transpose kernel shared with value-level paths.
pub fn transpose_slice(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Broadcast row-add kernel shared with value-level paths.
pub fn add_row_slices(a: &[f64], row: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(a[i * n + j] + row[j]);
        }
    }
    out
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Rows of a tensor treated as a matrix: a 1-D tensor is a single row.
fn as_rows(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("tensors are 1-D or 2-D"),
    }
}

impl Tensor {
    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_tape(rhs)?;
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[rhs.id];
            let (m, k) = dims2(&a.shape, "matmul")?;
            let (k2, n) = dims2(&b.shape, "matmul")?;
            if k != k2 {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let out = matmul_slices(&a.values, &b.values, m, k, n);
            (out, vec![m, n], a.track || b.track)
        };
        Ok(self.tape.push(
            shape,
            values,
            track,
            Op::Matmul {
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let (r, c) = dims2(&a.shape, "transpose")?;
            (transpose_slice(&a.values, r, c), vec![c, r], a.track)
        };
        Ok(self.tape.push(shape, values, track, Op::Transpose { a: self.id }))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_tape(rhs)?;
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[rhs.id];
            if a.shape != b.shape {
                return Err(Error::Dimension {
                    op: "add",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let out = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| x + y)
                .collect();
            (out, a.shape.clone(), a.track || b.track)
        };
        Ok(self.tape.push(
            shape,
            values,
            track,
            Op::Add {
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    /// Adds a length-`n` row vector to every row of an `[m,n]` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.same_tape(row)?;
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[row.id];
            let (m, n) = dims2(&a.shape, "add_row")?;
            if b.values.len() != n {
                return Err(Error::Dimension {
                    op: "add_row",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let out = add_row_slices(&a.values, &b.values, m, n);
            (out, a.shape.clone(), a.track || b.track)
        };
        Ok(self.tape.push(
            shape,
            values,
            track,
            Op::AddRow {
                a: self.id,
                row: row.id,
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            (
                a.values.iter().map(|v| v * c).collect(),
                a.shape.clone(),
                a.track,
            )
        };
        self.tape.push(shape, values, track, Op::Scale { a: self.id, c })
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_tape(rhs)?;
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[rhs.id];
            if a.shape != b.shape {
                return Err(Error::Dimension {
                    op: "mul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let out = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| x * y)
                .collect();
            (out, a.shape.clone(), a.track || b.track)
        };
        Ok(self.tape.push(
            shape,
            values,
            track,
            Op::Mul {
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let (total, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            (a.values.iter().sum::<f64>(), a.track)
        };
        self.tape
            .push(vec![1], vec![total], track, Op::Sum { a: self.id })
    }

    /// Columnwise mean of an `[m,n]` matrix, as a length-`n` vector.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (values, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let (m, n) = dims2(&a.shape, "mean_rows")?;
            if m == 0 {
                return Err(Error::Domain("mean_rows of an empty matrix".into()));
            }
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += a.values[i * n + j];
                }
            }
            for v in &mut out {
                *v /= m as f64;
            }
            (out, a.track)
        };
        let n = values.len();
        Ok(self
            .tape
            .push(vec![n], values, track, Op::MeanRows { a: self.id }))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero tensors".into()))?;
        for p in parts.iter().skip(1) {
            first.same_tape(p)?;
        }
        let (values, shape, track) = {
            let inner = first.tape.inner.borrow();
            let mut cols = None;
            let mut rows = 0;
            let mut values = Vec::new();
            let mut track = false;
            for p in parts {
                let node = &inner.nodes[p.id];
                let (r, c) = dims2(&node.shape, "concat_rows")?;
                match cols {
                    None => cols = Some(c),
                    Some(c0) if c0 != c => {
                        return Err(Error::Dimension {
                            op: "concat_rows",
                            lhs: vec![rows, c0],
                            rhs: node.shape.clone(),
                        })
                    }
                    _ => {}
                }
                rows += r;
                values.extend_from_slice(&node.values);
                track |= node.track;
            }
            (values, vec![rows, cols.unwrap_or(0)], track)
        };
        Ok(first.tape.push(
            shape,
            values,
            track,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Selects rows of a matrix by index; repeats are allowed.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let (m, n) = dims2(&a.shape, "gather_rows")?;
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                if r >= m {
                    return Err(Error::Contract(format!(
                        "gather_rows index {r} out of range for {m} rows"
                    )));
                }
                out.extend_from_slice(&a.values[r * n..(r + 1) * n]);
            }
            (out, vec![rows.len(), n], a.track)
        };
        Ok(self.tape.push(
            shape,
            values,
            track,
            Op::GatherRows {
                a: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let (values, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if shape.iter().product::<usize>() != a.values.len() {
                return Err(Error::Dimension {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (a.values.clone(), a.track)
        };
        Ok(self
            .tape
            .push(shape.to_vec(), values, track, Op::Reshape { a: self.id }))
    }

    /// Temperature softmax. A 1-D tensor is one distribution; each row of a
    /// 2-D tensor is normalized independently.
    pub fn softmax_with_temperature(&self, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!(
                "softmax temperature must be positive and finite, got {tau}"
            )));
        }
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if a.values.is_empty() {
                return Err(Error::Domain("softmax of an empty tensor".into()));
            }
            let (rows, cols) = as_rows(&a.shape);
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                out.extend(softmax_temp_slice(
                    &a.values[r * cols..(r + 1) * cols],
                    tau,
                ));
            }
            (out, a.shape.clone(), a.track)
        };
        Ok(self.tape.push(
            shape,
            values,
            track,
            Op::SoftmaxRows { a: self.id, tau },
        ))
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm_rows(&self, eps: f64) -> Result<Tensor> {
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let (rows, cols) = dims2(&a.shape, "layer_norm_rows")?;
            if cols == 0 {
                return Err(Error::Domain("layer_norm_rows of zero-width matrix".into()));
            }
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let row = &a.values[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|v| (v - mean) * inv));
            }
            (out, a.shape.clone(), a.track)
        };
        Ok(self.tape.push(
            shape,
            values,
            track,
            Op::LayerNormRows { a: self.id, eps },
        ))
    }

    /// Elementwise GELU (tanh approximation, smooth for gradient checks).
    pub fn gelu(&self) -> Tensor {
        let (values, shape, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            (
                a.values.iter().map(|&v| gelu_value(v)).collect(),
                a.shape.clone(),
                a.track,
            )
        };
        self.tape.push(shape, values, track, Op::Gelu { a: self.id })
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (loss, track) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let (batch, vocab) = dims2(&a.shape, "cross_entropy")?;
            if targets.len() != batch {
                return Err(Error::Dimension {
                    op: "cross_entropy",
                    lhs: a.shape.clone(),
                    rhs: vec![targets.len()],
                });
            }
            let mut total = 0.0;
            for (b, &y) in targets.iter().enumerate() {
                if y >= vocab {
                    return Err(Error::Domain(format!(
                        "cross_entropy target {y} out of range for {vocab} classes"
                    )));
                }
                let row = &a.values[b * vocab..(b + 1) * vocab];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            (total / batch as f64, a.track)
        };
        Ok(self.tape.push(
            vec![1],
            vec![loss],
            track,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }
}
