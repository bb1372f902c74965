use super::gemm::{gemm, Operand};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        bcast: bool,
    },
    Sub {
        a: Var,
        b: Var,
        bcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: bool,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Square {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSumExpRows {
        a: Var,
    },
    Sum {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
    ReverseCols {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Norm {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Record of operations in evaluation order.
///
/// Nodes are appended as ops run, so the node list is already topologically
/// sorted. `backward` may run once; gradients for tracked nodes are kept on
/// the tape afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn broadcast_rows(a: &Tensor, b: &Tensor, op: &'static str) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    let row_like = b.rank() == 1 || (b.rank() == 2 && b.shape()[0] == 1);
    if a.rank() == 2 && row_like && b.numel() == a.cols() {
        return Ok(true);
    }
    shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}

fn sum_rows(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let g = grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let tracked = self.tracked(a);
        self.push(value, op, tracked, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() > 2 || y.rank() != 2 {
            return shape_err("matmul", format!("{:?} x {:?}", x.shape(), y.shape()));
        }
        let (m, k) = (x.rows(), x.cols());
        let (kb, n) = if trans_b {
            (y.cols(), y.rows())
        } else {
            (y.rows(), y.cols())
        };
        if k != kb {
            return shape_err(
                "matmul",
                format!(
                    "inner dims {k} vs {kb} ({:?} x {:?}{})",
                    x.shape(),
                    y.shape(),
                    if trans_b { "ᵀ" } else { "" }
                ),
            );
        }
        let mut out = vec![0.0; m * n];
        let bop = if trans_b {
            Operand::transposed(y.data(), y.cols())
        } else {
            Operand::normal(y.data(), n)
        };
        gemm(m, k, n, Operand::normal(x.data(), k), bop, &mut out, false);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            tracked,
            "matmul",
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(bool) -> Op,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let bcast = broadcast_rows(x, y, name)?;
        let data = if bcast {
            let c = x.cols();
            x.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| f(v, y.data()[i % c]))
                .collect()
        } else {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&u, &v)| f(u, v))
                .collect()
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, mk(bcast), tracked, name)
    }

    /// Elementwise sum; `b` may be a row broadcast over the leading dim of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |u, v| u + v, |bcast| Op::Add { a, b, bcast })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |u, v| u - v, |bcast| Op::Sub { a, b, bcast })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |u, v| u * v, |bcast| Op::Mul { a, b, bcast })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |v| v * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |v| v + c, Op::AddScalar { a })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(a, "log", f64::ln, Op::Log { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |v| v.max(0.0), Op::Relu { a })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |v| v * v, Op::Square { a })
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last axis where row `i` only sees columns `0..=i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        if causal && m > n {
            return shape_err("causal_softmax", format!("{m} queries against {n} keys"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = x.row(i);
            let valid = if causal { i + 1 } else { n };
            let max = row[..valid]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..i * n + valid];
            let mut sum = 0.0;
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v - max).exp();
                sum += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= sum;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = self.tracked(a);
        self.push(value, Op::Softmax { a }, tracked, "softmax")
    }

    /// Row-wise log-sum-exp: `[m, n] -> [m]` (a vector input gives `[1]`).
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let m = x.rows();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = x.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let tracked = self.tracked(a);
        self.push(
            Tensor::vector(out),
            Op::LogSumExpRows { a },
            tracked,
            "logsumexp",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, tracked, "sum")
    }

    /// Average over rows: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = sum_rows(x.data(), n);
        for v in &mut out {
            *v /= m as f64;
        }
        let tracked = self.tracked(a);
        self.push(
            Tensor::vector(out),
            Op::MeanRows { a },
            tracked,
            "mean_rows",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data()[i * n + j];
            }
        }
        let tracked = self.tracked(a);
        self.push(
            Tensor::new(vec![n, m], out)?,
            Op::Transpose { a },
            tracked,
            "transpose",
        )
    }

    /// Columns `start..start+len` of the 2-D view. Vectors stay vectors.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        if start + len > n {
            return shape_err("slice_cols", format!("{start}+{len} > {n}"));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let shape = if x.rank() <= 1 {
            vec![len]
        } else {
            vec![m, len]
        };
        let tracked = self.tracked(a);
        self.push(
            Tensor::new(shape, out)?,
            Op::SliceCols { a, start },
            tracked,
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs");
        }
        let m = self.value(parts[0]).rows();
        let all_vec = parts.iter().all(|&p| self.value(p).rank() <= 1);
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return shape_err("concat_cols", "row counts differ");
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let shape = if all_vec { vec![n] } else { vec![m, n] };
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Tensor::new(shape, out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            tracked,
            "concat_cols",
        )
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || start + len > x.rows() {
            return shape_err(
                "slice_rows",
                format!("{:?}[{start}..{}]", x.shape(), start + len),
            );
        }
        let n = x.cols();
        let out = x.data()[start * n..(start + len) * n].to_vec();
        let tracked = self.tracked(a);
        self.push(
            Tensor::new(vec![len, n], out)?,
            Op::SliceRows { a, start },
            tracked,
            "slice_rows",
        )
    }

    /// Stack along rows; vector inputs count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no inputs");
        }
        let n = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            return shape_err("concat_rows", "column counts differ");
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            m += v.rows();
            out.extend_from_slice(v.data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            tracked,
            "concat_rows",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let tracked = self.tracked(a);
        self.push(value, Op::Reshape { a }, tracked, "reshape")
    }

    /// Reverse the order of the last axis.
    pub fn reverse_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.reverse();
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = self.tracked(a);
        self.push(value, Op::ReverseCols { a }, tracked, "reverse_cols")
    }

    /// Per-row normalisation followed by an affine map with `gain`, `bias` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != n || b.numel() != n {
            return shape_err(
                "layer_norm",
                format!("cols {n}, gain {}, bias {}", g.numel(), b.numel()),
            );
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
            "layer_norm",
        )
    }

    /// Euclidean norm of all entries. The gradient at zero is taken as zero.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let s = self
            .value(a)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Norm { a }, tracked, "norm")
    }

    /// Reverse sweep from a scalar `loss`. Runs at most once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        delta(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k) = (x.rows(), x.cols());
                let n = node.value.cols();
                self.acc(grads, *a, |ga| {
                    // ga (m×k) += g (m×n) · B', where B' = bᵀ (k×n)ᵀ or b (n×k)
                    let bop = if *trans_b {
                        Operand::normal(y.data(), k)
                    } else {
                        Operand::transposed(y.data(), n)
                    };
                    gemm(m, n, k, Operand::normal(g, n), bop, ga, true);
                });
                self.acc(grads, *b, |gb| {
                    if *trans_b {
                        // gb (n×k) += gᵀ (n×m) · a (m×k)
                        gemm(
                            n,
                            m,
                            k,
                            Operand::transposed(g, n),
                            Operand::normal(x.data(), k),
                            gb,
                            true,
                        );
                    } else {
                        // gb (k×n) += aᵀ (k×m) · g (m×n)
                        gemm(
                            k,
                            m,
                            n,
                            Operand::transposed(x.data(), k),
                            Operand::normal(g, n),
                            gb,
                            true,
                        );
                    }
                });
            }
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v)
                });
                self.acc(grads, *b, |gb| {
                    if *bcast {
                        let s = sum_rows(g, gb.len());
                        gb.iter_mut().zip(&s).for_each(|(o, v)| *o += sign * v);
                    } else {
                        gb.iter_mut().zip(g).for_each(|(o, v)| *o += sign * v);
                    }
                });
            }
            Op::Mul { a, b, bcast } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let c = y.len();
                self.acc(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i] * if *bcast { y[i % c] } else { y[i] };
                    }
                });
                self.acc(grads, *b, |gb| {
                    if *bcast {
                        for (i, (gi, xi)) in g.iter().zip(x).enumerate() {
                            gb[i % c] += gi * xi;
                        }
                    } else {
                        gb.iter_mut()
                            .zip(g.iter().zip(x))
                            .for_each(|(o, (gi, xi))| *o += gi * xi);
                    }
                });
            }
            Op::Scale { a, c } => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)
                });
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v)
                });
            }
            Op::Exp { a } => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(o, (gi, yi))| *o += gi * yi)
                });
            }
            Op::Log { a } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(o, (gi, xi))| *o += gi / xi)
                });
            }
            Op::Tanh { a } => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(o, (gi, yi))| *o += gi * (1.0 - yi * yi))
                });
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(o, (gi, xi))| {
                            if *xi > 0.0 {
                                *o += gi
                            }
                        })
                });
            }
            Op::Square { a } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(o, (gi, xi))| *o += 2.0 * gi * xi)
                });
            }
            Op::Softmax { a } => {
                let n = node.value.cols();
                self.acc(grads, *a, |ga| {
                    for ((go, gi), yi) in ga
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.chunks_exact(n))
                    {
                        let dot: f64 = gi.iter().zip(yi).map(|(u, v)| u * v).sum();
                        for j in 0..n {
                            go[j] += yi[j] * (gi[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExpRows { a } => {
                let x = self.value(*a);
                let n = x.cols();
                self.acc(grads, *a, |ga| {
                    for (i, go) in ga.chunks_exact_mut(n).enumerate() {
                        for (o, xv) in go.iter_mut().zip(x.row(i)) {
                            *o += g[i] * (xv - out[i]).exp();
                        }
                    }
                });
            }
            Op::Sum { a } => {
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::MeanRows { a } => {
                let x = self.value(*a);
                let (m, n) = (x.rows(), x.cols());
                self.acc(grads, *a, |ga| {
                    for row in ga.chunks_exact_mut(n) {
                        row.iter_mut().zip(g).for_each(|(o, v)| *o += v / m as f64);
                    }
                });
            }
            Op::Transpose { a } => {
                let x = self.value(*a);
                let (m, n) = (x.rows(), x.cols());
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let n = self.value(*a).cols();
                let len = node.value.cols();
                self.acc(grads, *a, |ga| {
                    for (row, gr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                        row[*start..start + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for (row, gr) in gp.chunks_exact_mut(w).zip(g.chunks_exact(n)) {
                            row.iter_mut()
                                .zip(&gr[offset..offset + w])
                                .for_each(|(o, v)| *o += v);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { a, start } => {
                let n = node.value.cols();
                self.acc(grads, *a, |ga| {
                    ga[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, v)| *o += v);
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, |gp| {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, v)| *o += v);
                    });
                    offset += len;
                }
            }
            Op::ReverseCols { a } => {
                let n = node.value.cols();
                self.acc(grads, *a, |ga| {
                    for (row, gr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        row.iter_mut()
                            .zip(gr.iter().rev())
                            .for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for gr in g.chunks_exact(n) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let nf = n as f64;
                    for (i, ((go, gr), hr)) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            s1 += gh;
                            s2 += gh * hr[j];
                        }
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            go[j] += inv_std[i] / nf * (nf * gh - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Norm { a } => {
                let x = self.value(*a).data();
                let s = out[0];
                if s > 0.0 {
                    self.acc(grads, *a, |ga| {
                        ga.iter_mut().zip(x).for_each(|(o, v)| *o += g[0] * v / s)
                    });
                }
            }
        }
        Ok(())
    }
}
