//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The tape records tensor-level operations (matmul, broadcasts, pointwise
//! maps, reductions) during the forward pass; [`Tape::backward`] walks the
//! node list in reverse, propagating gradients only into subgraphs that
//! contain named parameter leaves. All loops are sequential, so gradients are
//! bit-reproducible.

use super::{NnError, ParameterStore};

/// Dense row-major matrix of f64. Vectors are `1 x n` or `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Input constant or named parameter leaf.
    Leaf { param: Option<String> },
    MatMul(usize, usize),
    /// `[B,n] + [1,n]`, the bias add.
    AddRowBroadcast(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Elementwise minimum; ties route the gradient to the first input.
    MinPair(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Square(usize),
    Sigmoid(usize),
    Softplus(usize),
    /// Hard clamp; gradient passes through only strictly inside the range.
    Clamp(usize, f64, f64),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    /// `[B,m] / [B,1]` with the per-row scalar broadcast across columns.
    DivColBroadcast(usize, usize),
    /// `[1,1] * [B,n]`.
    MulScalarBroadcast(usize, usize),
    /// Row-wise `log((1/m) * sum_j exp(x[r][j]))`, max-subtracted.
    LogMeanExpRows(usize),
    /// `[B,n] -> [B,1]` row sums.
    SumRows(usize),
    /// Mean of all entries, `[1,1]`.
    MeanAll(usize),
    /// Sum of all entries, `[1,1]`.
    SumAll(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert!(t.rows == 1 && t.cols == 1, "node is not a scalar");
        t.data[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Registers a named parameter from the store as a differentiable leaf.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, NnError> {
        let t = store.value(name)?.clone();
        Ok(self.push(
            t,
            Op::Leaf {
                param: Some(name.to_string()),
            },
            true,
        ))
    }

    /// Registers a parameter as a constant (no gradient will be written, but
    /// gradients still flow through it to differentiable inputs).
    pub fn frozen_param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, NnError> {
        let t = store.value(name)?.clone();
        Ok(self.constant(t))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.cols, tb.rows, "matmul shape mismatch");
        let value = matmul(ta, tb);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a.0, b.0), needs)
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert!(tb.rows == 1 && tb.cols == ta.cols, "bias shape mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += tb.data[c];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddRowBroadcast(a.0, bias.0), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a.0, b.0), needs)
    }

    pub fn min_pair(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, f64::min);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MinPair(a.0, b.0), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| -x);
        let needs = self.needs(a);
        self.push(value, Op::Neg(a.0), needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.map(a, |x| k * x);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a.0, k), needs)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.map(a, |x| x + k);
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a.0), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a.0), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a.0), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::exp);
        let needs = self.needs(a);
        self.push(value, Op::Exp(a.0), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x * x);
        let needs = self.needs(a);
        self.push(value, Op::Square(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, sigmoid);
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a.0), needs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.map(a, softplus);
        let needs = self.needs(a);
        self.push(value, Op::Softplus(a.0), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.map(a, |x| x.clamp(lo, hi));
        let needs = self.needs(a);
        self.push(value, Op::Clamp(a.0, lo, hi), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.rows, tb.rows, "concat row mismatch");
        let mut out = Tensor::zeros(ta.rows, ta.cols + tb.cols);
        for r in 0..ta.rows {
            let dst = &mut out.data[r * out.cols..(r + 1) * out.cols];
            dst[..ta.cols].copy_from_slice(&ta.data[r * ta.cols..(r + 1) * ta.cols]);
            dst[ta.cols..].copy_from_slice(&tb.data[r * tb.cols..(r + 1) * tb.cols]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCols(a.0, b.0), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        assert!(start + len <= ta.cols, "slice out of range");
        let mut out = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&ta.data[r * ta.cols + start..r * ta.cols + start + len]);
        }
        let needs = self.needs(a);
        self.push(out, Op::SliceCols(a.0, start, len), needs)
    }

    pub fn div_col_broadcast(&mut self, a: Var, divisor: Var) -> Var {
        let (ta, td) = (&self.nodes[a.0].value, &self.nodes[divisor.0].value);
        assert!(td.cols == 1 && td.rows == ta.rows, "divisor must be [B,1]");
        let mut out = ta.clone();
        for r in 0..out.rows {
            let d = td.data[r];
            for c in 0..out.cols {
                out.data[r * out.cols + c] /= d;
            }
        }
        let needs = self.needs(a) || self.needs(divisor);
        self.push(out, Op::DivColBroadcast(a.0, divisor.0), needs)
    }

    pub fn mul_scalar_broadcast(&mut self, scalar: Var, a: Var) -> Var {
        let (ts, ta) = (&self.nodes[scalar.0].value, &self.nodes[a.0].value);
        assert!(ts.rows == 1 && ts.cols == 1, "first input must be [1,1]");
        let k = ts.data[0];
        let out = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| k * x).collect(),
        };
        let needs = self.needs(scalar) || self.needs(a);
        self.push(out, Op::MulScalarBroadcast(scalar.0, a.0), needs)
    }

    pub fn log_mean_exp_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(ta.rows, 1);
        for r in 0..ta.rows {
            let row = &ta.data[r * ta.cols..(r + 1) * ta.cols];
            out.data[r] = log_mean_exp(row);
        }
        let needs = self.needs(a);
        self.push(out, Op::LogMeanExpRows(a.0), needs)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(ta.rows, 1);
        for r in 0..ta.rows {
            out.data[r] = ta.data[r * ta.cols..(r + 1) * ta.cols].iter().sum();
        }
        let needs = self.needs(a);
        self.push(out, Op::SumRows(a.0), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mean = ta.data.iter().sum::<f64>() / ta.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(mean), Op::MeanAll(a.0), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let sum = ta.data.iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(sum), Op::SumAll(a.0), needs)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = &self.nodes[a.0].value;
        Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "elementwise shape mismatch");
        Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta
                .data
                .iter()
                .zip(&tb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }

    /// Backpropagates from a scalar loss node, accumulating gradients of all
    /// named parameter leaves into the store's gradient buffers.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<(), NnError> {
        let lt = &self.nodes[loss.0].value;
        if lt.rows != 1 || lt.cols != 1 {
            return Err(NnError::Shape("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        store.accumulate_grad(name, &g)?;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        // dA[i,k] = sum_j G[i,j] * B[k,j]
                        let mut da = Tensor::zeros(ta.rows, ta.cols);
                        for r in 0..ta.rows {
                            for k in 0..ta.cols {
                                let grow = &g.data[r * g.cols..(r + 1) * g.cols];
                                let brow = &tb.data[k * tb.cols..(k + 1) * tb.cols];
                                let mut s = 0.0;
                                for j in 0..g.cols {
                                    s += grow[j] * brow[j];
                                }
                                da.data[r * ta.cols + k] = s;
                            }
                        }
                        add_grad(&mut grads[*a], da);
                    }
                    if self.nodes[*b].needs_grad {
                        // dB[k,j] = sum_i A[i,k] * G[i,j]
                        let mut db = Tensor::zeros(tb.rows, tb.cols);
                        for r in 0..ta.rows {
                            for k in 0..ta.cols {
                                let av = ta.data[r * ta.cols + k];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &g.data[r * g.cols..(r + 1) * g.cols];
                                let drow = &mut db.data[k * tb.cols..(k + 1) * tb.cols];
                                for j in 0..g.cols {
                                    drow[j] += av * grow[j];
                                }
                            }
                        }
                        add_grad(&mut grads[*b], db);
                    }
                }
                Op::AddRowBroadcast(a, bias) => {
                    if self.nodes[*a].needs_grad {
                        add_grad(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*bias].needs_grad {
                        let mut db = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                db.data[c] += g.data[r * g.cols + c];
                            }
                        }
                        add_grad(&mut grads[*bias], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].needs_grad {
                        add_grad(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        add_grad(&mut grads[*b], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[*a].needs_grad {
                        add_grad(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        let neg = Tensor {
                            rows: g.rows,
                            cols: g.cols,
                            data: g.data.iter().map(|x| -x).collect(),
                        };
                        add_grad(&mut grads[*b], neg);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        add_grad(&mut grads[*a], hadamard(&g, tb));
                    }
                    if self.nodes[*b].needs_grad {
                        add_grad(&mut grads[*b], hadamard(&g, ta));
                    }
                }
                Op::MinPair(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    let mut gb = Tensor::zeros(g.rows, g.cols);
                    for idx in 0..g.data.len() {
                        if ta.data[idx] <= tb.data[idx] {
                            ga.data[idx] = g.data[idx];
                        } else {
                            gb.data[idx] = g.data[idx];
                        }
                    }
                    if self.nodes[*a].needs_grad {
                        add_grad(&mut grads[*a], ga);
                    }
                    if self.nodes[*b].needs_grad {
                        add_grad(&mut grads[*b], gb);
                    }
                }
                Op::Neg(a) => {
                    let neg = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().map(|x| -x).collect(),
                    };
                    add_grad(&mut grads[*a], neg);
                }
                Op::Scale(a, k) => {
                    let scaled = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().map(|x| k * x).collect(),
                    };
                    add_grad(&mut grads[*a], scaled);
                }
                Op::AddScalar(a) => {
                    add_grad(&mut grads[*a], g);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                            .collect(),
                    };
                    add_grad(&mut grads[*a], da);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let da = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                            .collect(),
                    };
                    add_grad(&mut grads[*a], da);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    add_grad(&mut grads[*a], hadamard(&g, y));
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let da = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(&gi, &xi)| 2.0 * gi * xi)
                            .collect(),
                    };
                    add_grad(&mut grads[*a], da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                            .collect(),
                    };
                    add_grad(&mut grads[*a], da);
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[*a].value;
                    let da = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(&gi, &xi)| gi * sigmoid(xi))
                            .collect(),
                    };
                    add_grad(&mut grads[*a], da);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value;
                    let da = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(&gi, &xi)| if xi > *lo && xi < *hi { gi } else { 0.0 })
                            .collect(),
                    };
                    add_grad(&mut grads[*a], da);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.nodes[*a].value.cols, self.nodes[*b].value.cols);
                    if self.nodes[*a].needs_grad {
                        let mut ga = Tensor::zeros(g.rows, ca);
                        for r in 0..g.rows {
                            ga.data[r * ca..(r + 1) * ca]
                                .copy_from_slice(&g.data[r * g.cols..r * g.cols + ca]);
                        }
                        add_grad(&mut grads[*a], ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let mut gb = Tensor::zeros(g.rows, cb);
                        for r in 0..g.rows {
                            gb.data[r * cb..(r + 1) * cb]
                                .copy_from_slice(&g.data[r * g.cols + ca..(r + 1) * g.cols]);
                        }
                        add_grad(&mut grads[*b], gb);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let ta = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        ga.data[r * ta.cols + start..r * ta.cols + start + len]
                            .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                    }
                    add_grad(&mut grads[*a], ga);
                }
                Op::DivColBroadcast(a, d) => {
                    let (ta, td) = (&self.nodes[*a].value, &self.nodes[*d].value);
                    if self.nodes[*a].needs_grad {
                        let mut ga = Tensor::zeros(ta.rows, ta.cols);
                        for r in 0..ta.rows {
                            let dv = td.data[r];
                            for c in 0..ta.cols {
                                ga.data[r * ta.cols + c] = g.data[r * ta.cols + c] / dv;
                            }
                        }
                        add_grad(&mut grads[*a], ga);
                    }
                    if self.nodes[*d].needs_grad {
                        let mut gd = Tensor::zeros(td.rows, 1);
                        for r in 0..ta.rows {
                            let dv = td.data[r];
                            let mut s = 0.0;
                            for c in 0..ta.cols {
                                s -= g.data[r * ta.cols + c] * ta.data[r * ta.cols + c]
                                    / (dv * dv);
                            }
                            gd.data[r] = s;
                        }
                        add_grad(&mut grads[*d], gd);
                    }
                }
                Op::MulScalarBroadcast(s, a) => {
                    let (ts, ta) = (&self.nodes[*s].value, &self.nodes[*a].value);
                    if self.nodes[*s].needs_grad {
                        let mut acc = 0.0;
                        for idx in 0..g.data.len() {
                            acc += g.data[idx] * ta.data[idx];
                        }
                        add_grad(&mut grads[*s], Tensor::scalar(acc));
                    }
                    if self.nodes[*a].needs_grad {
                        let k = ts.data[0];
                        let ga = Tensor {
                            rows: g.rows,
                            cols: g.cols,
                            data: g.data.iter().map(|x| k * x).collect(),
                        };
                        add_grad(&mut grads[*a], ga);
                    }
                }
                Op::LogMeanExpRows(a) => {
                    // d lme / dx_j = exp(x_j) / sum_k exp(x_k) (softmax row).
                    let ta = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        let row = &ta.data[r * ta.cols..(r + 1) * ta.cols];
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                        let mut z = 0.0;
                        for &x in row {
                            z += (x - max).exp();
                        }
                        for c in 0..ta.cols {
                            ga.data[r * ta.cols + c] =
                                g.data[r] * (row[c] - max).exp() / z;
                        }
                    }
                    add_grad(&mut grads[*a], ga);
                }
                Op::SumRows(a) => {
                    let ta = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        for c in 0..ta.cols {
                            ga.data[r * ta.cols + c] = g.data[r];
                        }
                    }
                    add_grad(&mut grads[*a], ga);
                }
                Op::MeanAll(a) => {
                    let ta = &self.nodes[*a].value;
                    let k = g.data[0] / ta.len() as f64;
                    add_grad(
                        &mut grads[*a],
                        Tensor {
                            rows: ta.rows,
                            cols: ta.cols,
                            data: vec![k; ta.len()],
                        },
                    );
                }
                Op::SumAll(a) => {
                    let ta = &self.nodes[*a].value;
                    add_grad(
                        &mut grads[*a],
                        Tensor {
                            rows: ta.rows,
                            cols: ta.cols,
                            data: vec![g.data[0]; ta.len()],
                        },
                    );
                }
            }
        }
        Ok(())
    }
}

fn add_grad(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data.iter_mut().zip(&delta.data) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

/// Row-major matmul with the accumulation loop ordered for cache locality.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        for kk in 0..k {
            let av = a.data[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * m..(kk + 1) * m];
            let orow = &mut out.data[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log((1/n) * sum exp(x_i))`, max-subtracted.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + (sum / xs.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_mean_exp_is_stable() {
        let v = log_mean_exp(&[1000.0, 1000.0]);
        assert!((v - 1000.0).abs() < 1e-12);
        let v = log_mean_exp(&[-1000.0, 0.0]);
        assert!((v - (0.5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }
}
