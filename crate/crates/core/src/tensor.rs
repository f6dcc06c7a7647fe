//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: forward operations append nodes, each node stores
//! its values, shape and the op that produced it. [`Graph::backward`] walks
//! the tape in reverse, accumulating gradients additively into every node
//! reachable from the loss. Graphs are rebuilt per example (sequence lengths
//! and knowledge counts vary), so everything here is plain `Vec<f64>` math
//! in 64-bit precision.

use crate::error::{Error, Result};

/// Identity of a tensor within one differentiation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One node of the tape: a value plus the operation that produced it.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    /// Elementwise `mul * x + add`; only the slope matters to backward.
    Affine {
        a: TensorId,
        mul: f64,
    },
    Tanh {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    Log {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Sum {
        a: TensorId,
    },
    Pick {
        a: TensorId,
        index: usize,
    },
    Row {
        a: TensorId,
        index: usize,
    },
    Reshape {
        a: TensorId,
    },
}

/// Ordered record of operations appended during forward evaluation.
///
/// Topological order is by construction: an operation's inputs always
/// precede it on the tape, and `backward` visits nodes exactly once in
/// reverse order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Drop all nodes but keep the allocation for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            values,
            grad: None,
            op,
        });
        id
    }

    /// Insert a leaf tensor (input, parameter or constant).
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != values.len() {
            return Err(Error::Contract(format!(
                "leaf: shape {:?} implies {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        Ok(self.push(values, shape, Op::Leaf))
    }

    /// Scalar leaf of shape `[1]`.
    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(vec![value], vec![1], Op::Leaf)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    // ── forward operations ────────────────────────────────────────────

    /// Matrix product. Accepts `[m,k]x[k,n]` as well as the rank-1
    /// conveniences `[m,k]x[k] -> [m]`, `[k]x[k,n] -> [n]` and the dot
    /// product `[k]x[k] -> [1]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k, out_a_rank1) = match self.shape(a) {
            [m, k] => (*m, *k, false),
            [k] => (1, *k, true),
            other => {
                return Err(Error::DimensionMismatch {
                    op: "matmul",
                    lhs: other.to_vec(),
                    rhs: self.shape(b).to_vec(),
                })
            }
        };
        let (kb, n, out_b_rank1) = match self.shape(b) {
            [kb, n] => (*kb, *n, false),
            [kb] => (*kb, 1, true),
            other => {
                return Err(Error::DimensionMismatch {
                    op: "matmul",
                    lhs: self.shape(a).to_vec(),
                    rhs: other.to_vec(),
                })
            }
        };
        if k != kb {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = matmul_raw(self.values(a), self.values(b), m, k, n);
        let shape = match (out_a_rank1, out_b_rank1) {
            (false, false) => vec![m, n],
            (false, true) => vec![m],
            (true, false) => vec![n],
            (true, true) => vec![1],
        };
        Ok(self.push(values, shape, Op::MatMul { a, b }))
    }

    /// Dot product of two equal-length vectors, producing a scalar.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul(a, b)
    }

    fn binary_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else if numel(sb) == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::DimensionMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary<F: Fn(f64, f64) -> f64>(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: F,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let shape = self.binary_shape(name, a, b)?;
        let va = self.values(a);
        let vb = self.values(b);
        let n = numel(&shape);
        let values = (0..n)
            .map(|i| f(va[i % va.len()], vb[i % vb.len()]))
            .collect();
        Ok((values, shape))
    }

    /// Elementwise sum. Operands must have equal shapes, or one of them
    /// must be a scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (values, shape) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(values, shape, Op::Add { a, b }))
    }

    /// Elementwise difference; same shape rules as [`Graph::add`].
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (values, shape) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(values, shape, Op::Sub { a, b }))
    }

    /// Elementwise product; same shape rules as [`Graph::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (values, shape) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(values, shape, Op::Mul { a, b }))
    }

    /// Elementwise `mul * x + add` with scalar constants.
    pub fn affine(&mut self, a: TensorId, mul: f64, add: f64) -> TensorId {
        let values = self.values(a).iter().map(|&x| mul * x + add).collect();
        let shape = self.shape(a).to_vec();
        self.push(values, shape, Op::Affine { a, mul })
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.affine(a, c, 0.0)
    }

    /// Elementwise `1 - x`.
    pub fn one_minus(&mut self, a: TensorId) -> TensorId {
        self.affine(a, -1.0, 1.0)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(values, shape, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let values = self
            .values(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(values, shape, Op::Sigmoid { a })
    }

    /// Natural logarithm, elementwise.
    pub fn log(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(values, shape, Op::Log { a })
    }

    /// Numerically stable softmax over a rank-1 tensor: the maximum is
    /// subtracted before exponentiation.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        if self.shape(a).len() != 1 {
            return Err(Error::DimensionMismatch {
                op: "softmax",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let va = self.values(a);
        if va.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let max = va.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut values: Vec<f64> = va.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = values.iter().sum();
        for v in values.iter_mut() {
            *v /= total;
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(values, shape, Op::Softmax { a }))
    }

    /// Concatenate tensors along `axis`. All other dimensions must agree.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat: empty input list".into()));
        }
        let rank = self.shape(inputs[0]).len();
        if axis >= rank {
            return Err(Error::Contract(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        let mut out_shape = self.shape(inputs[0]).to_vec();
        for &t in &inputs[1..] {
            let s = self.shape(t);
            let compatible = s.len() == rank
                && s.iter()
                    .enumerate()
                    .all(|(d, &v)| d == axis || v == out_shape[d]);
            if !compatible {
                return Err(Error::DimensionMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let values = match rank {
            1 => {
                let mut v = Vec::with_capacity(numel(&out_shape));
                for &t in inputs {
                    v.extend_from_slice(self.values(t));
                }
                v
            }
            2 => {
                if axis == 0 {
                    let mut v = Vec::with_capacity(numel(&out_shape));
                    for &t in inputs {
                        v.extend_from_slice(self.values(t));
                    }
                    v
                } else {
                    let rows = out_shape[0];
                    let mut v = Vec::with_capacity(numel(&out_shape));
                    for r in 0..rows {
                        for &t in inputs {
                            let cols = self.shape(t)[1];
                            v.extend_from_slice(&self.values(t)[r * cols..(r + 1) * cols]);
                        }
                    }
                    v
                }
            }
            _ => {
                return Err(Error::Contract(format!(
                    "concat: rank {rank} tensors not supported"
                )))
            }
        };
        Ok(self.push(
            values,
            out_shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Stack rank-1 tensors of equal length into a `[n, len]` matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        let reshaped: Vec<TensorId> = rows
            .iter()
            .map(|&r| {
                let len = self.values(r).len();
                self.reshape(r, vec![1, len])
            })
            .collect::<Result<_>>()?;
        self.concat(&reshaped, 0)
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.values(a).iter().sum();
        self.push(vec![total], vec![1], Op::Sum { a })
    }

    /// Select one element of a rank-1 tensor as a scalar.
    pub fn pick(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        if self.shape(a).len() != 1 || index >= self.values(a).len() {
            return Err(Error::Contract(format!(
                "pick: index {index} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        let v = self.values(a)[index];
        Ok(self.push(vec![v], vec![1], Op::Pick { a, index }))
    }

    /// Select one row of a rank-2 tensor.
    pub fn row(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let (rows, cols) = match self.shape(a) {
            [r, c] => (*r, *c),
            other => {
                return Err(Error::DimensionMismatch {
                    op: "row",
                    lhs: other.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if index >= rows {
            return Err(Error::Contract(format!(
                "row: index {index} out of range for {rows} rows"
            )));
        }
        let values = self.values(a)[index * cols..(index + 1) * cols].to_vec();
        Ok(self.push(values, vec![cols], Op::Row { a, index }))
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.values(a).len() {
            return Err(Error::DimensionMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let values = self.values(a).to_vec();
        Ok(self.push(values, shape, Op::Reshape { a }))
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every node reachable from
    /// the loss ends up holding its gradient; gradients accumulate
    /// additively when a tensor feeds several consumers.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = Some(vec![0.0; node.values.len()]);
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let upstream = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => self.backward_matmul(i, a, b, &upstream),
                Op::Add { a, b } => {
                    self.accumulate_binary(a, &upstream, |_, up| up);
                    self.accumulate_binary(b, &upstream, |_, up| up);
                }
                Op::Sub { a, b } => {
                    self.accumulate_binary(a, &upstream, |_, up| up);
                    self.accumulate_binary(b, &upstream, |_, up| -up);
                }
                Op::Mul { a, b } => {
                    let vb = self.nodes[b.0].values.clone();
                    let va = self.nodes[a.0].values.clone();
                    self.accumulate_binary(a, &upstream, |i, up| up * vb[i % vb.len()]);
                    self.accumulate_binary(b, &upstream, |i, up| up * va[i % va.len()]);
                }
                Op::Affine { a, mul } => {
                    self.accumulate(a, upstream.iter().map(|u| mul * u));
                }
                Op::Tanh { a } => {
                    let out = self.nodes[i].values.clone();
                    self.accumulate(a, upstream.iter().zip(&out).map(|(u, t)| u * (1.0 - t * t)));
                }
                Op::Sigmoid { a } => {
                    let out = self.nodes[i].values.clone();
                    self.accumulate(a, upstream.iter().zip(&out).map(|(u, s)| u * s * (1.0 - s)));
                }
                Op::Log { a } => {
                    let inp = self.nodes[a.0].values.clone();
                    self.accumulate(a, upstream.iter().zip(&inp).map(|(u, x)| u / x));
                }
                Op::Softmax { a } => {
                    let out = self.nodes[i].values.clone();
                    let dot: f64 = upstream.iter().zip(&out).map(|(u, s)| u * s).sum();
                    self.accumulate(a, upstream.iter().zip(&out).map(|(u, s)| s * (u - dot)));
                }
                Op::Concat { inputs, axis } => self.backward_concat(i, &inputs, axis, &upstream),
                Op::Sum { a } => {
                    let g = upstream[0];
                    let n = self.nodes[a.0].values.len();
                    self.accumulate(a, std::iter::repeat_n(g, n));
                }
                Op::Pick { a, index } => {
                    if let Some(grad) = self.nodes[a.0].grad.as_mut() {
                        grad[index] += upstream[0];
                    }
                }
                Op::Row { a, index } => {
                    let cols = upstream.len();
                    if let Some(grad) = self.nodes[a.0].grad.as_mut() {
                        for (j, u) in upstream.iter().enumerate() {
                            grad[index * cols + j] += u;
                        }
                    }
                }
                Op::Reshape { a } => {
                    self.accumulate(a, upstream.iter().copied());
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, contributions: impl Iterator<Item = f64>) {
        if let Some(grad) = self.nodes[target.0].grad.as_mut() {
            for (g, c) in grad.iter_mut().zip(contributions) {
                *g += c;
            }
        }
    }

    /// Accumulate into a binary operand, reducing to a scalar when the
    /// operand was broadcast.
    fn accumulate_binary<F: Fn(usize, f64) -> f64>(
        &mut self,
        target: TensorId,
        upstream: &[f64],
        f: F,
    ) {
        let target_len = self.nodes[target.0].values.len();
        if let Some(grad) = self.nodes[target.0].grad.as_mut() {
            if target_len == upstream.len() {
                for (i, (g, &u)) in grad.iter_mut().zip(upstream).enumerate() {
                    *g += f(i, u);
                }
            } else {
                debug_assert_eq!(target_len, 1);
                let total: f64 = upstream.iter().enumerate().map(|(i, &u)| f(i, u)).sum();
                grad[0] += total;
            }
        }
    }

    fn backward_matmul(&mut self, out: usize, a: TensorId, b: TensorId, upstream: &[f64]) {
        let (m, k) = match self.shape(a) {
            [m, k] => (*m, *k),
            [k] => (1, *k),
            _ => unreachable!("validated at forward time"),
        };
        let n = match self.shape(b) {
            [_, n] => *n,
            [_] => 1,
            _ => unreachable!("validated at forward time"),
        };
        let _ = out;
        // dA = dC . B^T  (m x n . n x k)
        let vb = self.nodes[b.0].values.clone();
        let mut bt = vec![0.0; n * k];
        for r in 0..k {
            for c in 0..n {
                bt[c * k + r] = vb[r * n + c];
            }
        }
        let da = matmul_raw(upstream, &bt, m, n, k);
        // dB = A^T . dC  (k x m . m x n)
        let va = self.nodes[a.0].values.clone();
        let mut at = vec![0.0; k * m];
        for r in 0..m {
            for c in 0..k {
                at[c * m + r] = va[r * k + c];
            }
        }
        let db = matmul_raw(&at, upstream, k, m, n);
        self.accumulate(a, da.into_iter());
        self.accumulate(b, db.into_iter());
    }

    fn backward_concat(&mut self, out: usize, inputs: &[TensorId], axis: usize, upstream: &[f64]) {
        let rank = self.nodes[inputs[0].0].shape.len();
        if rank == 1 || axis == 0 {
            let mut offset = 0;
            for &t in inputs {
                let len = self.nodes[t.0].values.len();
                let slice = upstream[offset..offset + len].to_vec();
                self.accumulate(t, slice.into_iter());
                offset += len;
            }
        } else {
            let rows = self.nodes[out].shape[0];
            let out_cols = self.nodes[out].shape[1];
            let mut col_offset = 0;
            for &t in inputs {
                let cols = self.nodes[t.0].shape[1];
                let mut slice = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let start = r * out_cols + col_offset;
                    slice.extend_from_slice(&upstream[start..start + cols]);
                }
                self.accumulate(t, slice.into_iter());
                col_offset += cols;
            }
        }
    }
}

/// Row-major `a[m,k] . b[k,n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
