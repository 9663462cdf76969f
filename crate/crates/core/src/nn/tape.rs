//! Reverse-mode gradient tape.
//!
//! Every forward operation appends a node holding its output value and the
//! data its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order because an
//! operation can only consume nodes that already exist.

use std::collections::HashMap;

use super::{gemm, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Norms below this are treated as zero by the normalizing operations.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param {
        store: u64,
        id: ParamId,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    RowScale {
        x: Var,
        s: Vec<T>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatDim0 {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Softmax {
        x: Var,
    },
    L2Normalize {
        x: Var,
        inv_norm: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
        a_unit: Vec<T>,
        b_unit: Vec<T>,
        a_inv: Vec<T>,
        b_inv: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    GapTime {
        x: Var,
        channels: usize,
        batch: usize,
        time: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MeanOffDiag {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    batch: usize,
    t_in: usize,
    t_out: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_left == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let nt = self.batch * self.t_out;
        let mut cols = vec![T::zero(); self.c_in * self.k * nt];
        for ci in 0..self.c_in {
            for j in 0..self.k {
                let row = &mut cols[(ci * self.k + j) * nt..(ci * self.k + j + 1) * nt];
                for n in 0..self.batch {
                    let src = &x[(ci * self.batch + n) * self.t_in..][..self.t_in];
                    let dst = &mut row[n * self.t_out..(n + 1) * self.t_out];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let pos = (t * self.stride + j) as isize - self.pad_left as isize;
                        if pos >= 0 && (pos as usize) < self.t_in {
                            *d = src[pos as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, dcols: &[T], dx: &mut [T]) {
        let nt = self.batch * self.t_out;
        for ci in 0..self.c_in {
            for j in 0..self.k {
                let row = &dcols[(ci * self.k + j) * nt..(ci * self.k + j + 1) * nt];
                for n in 0..self.batch {
                    let dst = &mut dx[(ci * self.batch + n) * self.t_in..][..self.t_in];
                    let src = &row[n * self.t_out..(n + 1) * self.t_out];
                    for (t, &g) in src.iter().enumerate() {
                        let pos = (t * self.stride + j) as isize - self.pad_left as isize;
                        if pos >= 0 && (pos as usize) < self.t_in {
                            dst[pos as usize] = dst[pos as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(op, t.shape(), &vec![0; rank]));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is accumulated on the tape (see [`Tape::grad`]).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reads a trainable parameter; its gradient can be routed back to the
    /// store with [`Tape::grads_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        store.note_read();
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param { store: store.tag(), id },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for a leaf or parameter node by previous
    /// [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.0)
    }

    /// `op(a) * op(b)` for rank-2 operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_rank("matmul", av, 2)?;
        check_rank("matmul", bv, 2)?;
        let (m, k) = if ta {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (k2, n) = if tb {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(ta, tb, m, k, n, av.data(), bv.data(), T::zero(), out.data_mut());
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Adds `b` (shape `[cols]`) to every row of rank-2 `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        check_rank("add_bias", xv, 2)?;
        if bv.shape() != [xv.shape()[1]] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let cols = xv.shape()[1];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    /// `x W + b` with `x: [N, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Multiplies row `i` of rank-2 `x` by the constant `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        check_rank("row_scale", xv, 2)?;
        if s.len() != xv.shape()[0] {
            return Err(Error::shape("row_scale", xv.shape(), &[s.len()]));
        }
        let cols = xv.shape()[1];
        let mut out = xv.clone();
        for (row, &f) in out.data_mut().chunks_mut(cols.max(1)).zip(&s) {
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        Ok(self.push(out, Op::RowScale { x, s }, &[x]))
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            check_rank("concat_cols", pv, 2)?;
            if pv.shape()[0] != rows {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), pv.shape()));
            }
            total += pv.shape()[1];
        }
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.shape()[1];
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Concatenation along the leading dimension; trailing dims must agree.
    pub fn concat_dim0(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_dim0", self.value(parts[0]).shape(), pv.shape()));
            }
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::ConcatDim0 { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * slope + T::zero() });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank("softmax", xv, 2)?;
        let cols = xv.shape()[1];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    /// Scales each row of rank-2 `x` to unit Euclidean norm. Rows with norm
    /// below [`NORM_EPS`] pass through unchanged and receive no gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank("l2_normalize", xv, 2)?;
        let cols = xv.shape()[1];
        let mut out = xv.clone();
        let mut inv_norm = Vec::with_capacity(xv.shape()[0]);
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let n = row_norm(row);
            if n.as_f64() < NORM_EPS {
                inv_norm.push(T::zero());
            } else {
                let inv = T::one() / n;
                row.iter_mut().for_each(|v| *v = *v * inv);
                inv_norm.push(inv);
            }
        }
        Ok(self.push(out, Op::L2Normalize { x, inv_norm }, &[x]))
    }

    /// Pairwise cosine similarities between the rows of `a: [N, d]` and
    /// `b: [M, d]`, giving `[N, M]`. Pairs involving a row with norm below
    /// [`NORM_EPS`] are 0 with zero gradient.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_rank("cosine", av, 2)?;
        check_rank("cosine", bv, 2)?;
        if av.shape()[1] != bv.shape()[1] {
            return Err(Error::shape("cosine", av.shape(), bv.shape()));
        }
        let (n, m, d) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
        let (a_unit, a_inv) = unit_rows(av);
        let (b_unit, b_inv) = unit_rows(bv);
        let mut out = Tensor::zeros(&[n, m]);
        gemm(false, true, n, d, m, &a_unit, &b_unit, T::zero(), out.data_mut());
        // clamp rounding excursions past +-1
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.max(-T::one()).min(T::one()));
        Ok(self.push(
            out,
            Op::Cosine {
                a,
                b,
                a_unit,
                b_unit,
                a_inv,
                b_inv,
            },
            &[a, b],
        ))
    }

    /// Cosine similarity of two rank-1 vectors, as a scalar node.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (du, dv) = (self.value(u).shape().to_vec(), self.value(v).shape().to_vec());
        if du.len() != 1 || du != dv {
            return Err(Error::shape("cosine_sim", &du, &dv));
        }
        let u2 = self.reshape(u, &[1, du[0]])?;
        let v2 = self.reshape(v, &[1, dv[0]])?;
        let c = self.cosine_matrix(u2, v2)?;
        self.reshape(c, &[])
    }

    /// 1-D convolution over channel-major batches.
    ///
    /// `x` is `[C_in, N, T]` (or `[C_in, T]` for a single sequence), `w` is
    /// `[C_out, C_in, k]` and `b` is `[C_out]`. With `same_pad` the input is
    /// padded by `floor((k-1)/2)` on the left and `ceil((k-1)/2)` on the right,
    /// giving `ceil(T / stride)` outputs; otherwise no padding is applied.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, same_pad: bool) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (c_in, batch, t_in) = match xv.shape() {
            [c, t] => (*c, 1, *t),
            [c, n, t] => (*c, *n, *t),
            s => return Err(Error::shape("conv1d", s, wv.shape())),
        };
        check_rank("conv1d", wv, 3)?;
        let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
        if wv.shape()[1] != c_in || stride == 0 || k == 0 {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape("conv1d", wv.shape(), self.value(b).shape()));
            }
        }
        let (pad_left, t_out) = if same_pad {
            ((k - 1) / 2, t_in.div_ceil(stride))
        } else {
            if t_in < k {
                return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
            }
            (0, (t_in - k) / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            c_out,
            batch,
            t_in,
            t_out,
            k,
            stride,
            pad_left,
        };
        let nt = batch * t_out;
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(geom.im2col(xv.data()))
        };
        let mut out = vec![T::zero(); c_out * nt];
        {
            let src = cols.as_deref().unwrap_or(xv.data());
            gemm(false, false, c_out, c_in * k, nt, wv.data(), src, T::zero(), &mut out);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (row, &bb) in out.chunks_mut(nt).zip(bv) {
                row.iter_mut().for_each(|v| *v = *v + bb);
            }
        }
        let shape: Vec<usize> = if xv.rank() == 2 {
            vec![c_out, t_out]
        } else {
            vec![c_out, batch, t_out]
        };
        let out = Tensor::from_vec(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv1d { x, w, b, geom, cols }, &inputs))
    }

    /// Mean over time: `[C, N, T] -> [N, C]`, or `[C, T] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (channels, batch, time, shape) = match xv.shape() {
            [c, t] => (*c, 1, *t, vec![*c]),
            [c, n, t] => (*c, *n, *t, vec![*n, *c]),
            s => return Err(Error::shape("global_avg_pool", s, &[0, 0, 0])),
        };
        if time == 0 {
            return Err(Error::shape("global_avg_pool", xv.shape(), &[channels, batch, 1]));
        }
        let inv = T::one() / T::of(time as f64);
        let mut out = vec![T::zero(); channels * batch];
        for c in 0..channels {
            for n in 0..batch {
                let s: T = xv.data()[(c * batch + n) * time..][..time].iter().copied().sum();
                out[n * channels + c] = s * inv;
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            out,
            Op::GapTime {
                x,
                channels,
                batch,
                time,
            },
            &[x],
        ))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_rank("cross_entropy", lv, 2)?;
        let (n, m) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::OutOfRange(format!("label {bad} with {m} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (row, &y) in probs.chunks_mut(m).zip(labels) {
            let lse = log_sum_exp(row);
            total = total + (lse - row[y]);
            softmax_in_place(row);
        }
        let out = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean of the off-diagonal entries of a square matrix.
    pub fn mean_off_diag(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank("mean_off_diag", xv, 2)?;
        let m = xv.shape()[0];
        if xv.shape()[1] != m || m < 2 {
            return Err(Error::shape("mean_off_diag", xv.shape(), &[m, m]));
        }
        let mut s = T::zero();
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s = s + xv.data()[i * m + j];
                }
            }
        }
        let out = Tensor::scalar(s / T::of((m * (m - 1)) as f64));
        Ok(self.push(out, Op::MeanOffDiag { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: T = xv.data().iter().copied().sum();
        let out = Tensor::scalar(s / T::of(xv.len().max(1) as f64));
        self.push(out, Op::MeanAll { x }, &[x])
    }

    /// Selects rows of rank-2 `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check_rank("gather_rows", xv, 2)?;
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::OutOfRange(format!("row {i} of {rows}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Back-propagates from the scalar `loss`, adding into the accumulated
    /// gradients of every leaf and parameter node. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_fn(self.value(loss).shape(), |_| T::one()));
        let mut leaf_out: Vec<(usize, Tensor<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let emit = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf | Op::Param { .. } => leaf_out.push((i, g)),
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                    if needs(*a) {
                        let mut da = Tensor::zeros(av.shape());
                        if !*ta {
                            // dA = dC op(B)^T
                            gemm(false, !*tb, m, n, k, g.data(), bv.data(), T::zero(), da.data_mut());
                        } else {
                            // dA = op(B) dC^T
                            gemm(*tb, true, k, n, m, bv.data(), g.data(), T::zero(), da.data_mut());
                        }
                        emit(*a, da, &mut grads);
                    }
                    if needs(*b) {
                        let mut db = Tensor::zeros(bv.shape());
                        if !*tb {
                            // dB = op(A)^T dC
                            gemm(!*ta, false, k, m, n, av.data(), g.data(), T::zero(), db.data_mut());
                        } else {
                            // dB = dC^T op(A)
                            gemm(true, *ta, n, m, k, g.data(), av.data(), T::zero(), db.data_mut());
                        }
                        emit(*b, db, &mut grads);
                    }
                }
                Op::AddBias { x, b } => {
                    if needs(*b) {
                        let cols = g.shape()[1];
                        let mut db = Tensor::zeros(&[cols]);
                        for row in g.data().chunks(cols.max(1)) {
                            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        emit(*b, db, &mut grads);
                    }
                    emit(*x, g, &mut grads);
                }
                Op::Add { a, b } => {
                    emit(*a, g.clone(), &mut grads);
                    emit(*b, g, &mut grads);
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    emit(*x, g.map(|v| v * c), &mut grads);
                }
                Op::RowScale { x, s } => {
                    let cols = g.shape()[1].max(1);
                    let mut dx = g;
                    for (row, &f) in dx.data_mut().chunks_mut(cols).zip(s) {
                        row.iter_mut().for_each(|v| *v = *v * f);
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::ConcatCols { parts } => {
                    let (rows, total) = (g.shape()[0], g.shape()[1]);
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        if needs(p) {
                            let mut dp = Tensor::zeros(&[rows, w]);
                            for r in 0..rows {
                                dp.data_mut()[r * w..(r + 1) * w]
                                    .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                            }
                            emit(p, dp, &mut grads);
                        }
                        off += w;
                    }
                }
                Op::ConcatDim0 { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        if needs(p) {
                            let dp = Tensor::from_vec(pv.shape(), g.data()[off..off + n].to_vec())?;
                            emit(p, dp, &mut grads);
                        }
                        off += n;
                    }
                }
                Op::Reshape { x } => {
                    let dx = g.reshaped(self.value(*x).shape())?;
                    emit(*x, dx, &mut grads);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *d = *d * *slope;
                        }
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let cols = y.shape()[1].max(1);
                    let mut dx = g;
                    for (drow, yrow) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (d, &yy) in drow.iter_mut().zip(yrow) {
                            *d = yy * (*d - dot);
                        }
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::L2Normalize { x, inv_norm } => {
                    let y = &node.value;
                    let cols = y.shape()[1].max(1);
                    let mut dx = g;
                    for ((drow, yrow), &inv) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)).zip(inv_norm)
                    {
                        project_out(drow, yrow, inv);
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::Cosine {
                    a,
                    b,
                    a_unit,
                    b_unit,
                    a_inv,
                    b_inv,
                } => {
                    let (n, m) = (g.shape()[0], g.shape()[1]);
                    let d = self.value(*a).shape()[1];
                    if needs(*a) {
                        let mut da = vec![T::zero(); n * d];
                        gemm(false, false, n, m, d, g.data(), b_unit, T::zero(), &mut da);
                        for ((drow, urow), &inv) in da.chunks_mut(d.max(1)).zip(a_unit.chunks(d.max(1))).zip(a_inv) {
                            project_out(drow, urow, inv);
                        }
                        emit(*a, Tensor::from_vec(&[n, d], da)?, &mut grads);
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); m * d];
                        gemm(true, false, m, n, d, g.data(), a_unit, T::zero(), &mut db);
                        for ((drow, urow), &inv) in db.chunks_mut(d.max(1)).zip(b_unit.chunks(d.max(1))).zip(b_inv) {
                            project_out(drow, urow, inv);
                        }
                        emit(*b, Tensor::from_vec(&[m, d], db)?, &mut grads);
                    }
                }
                Op::Conv1d { x, w, b, geom, cols } => {
                    let nt = geom.batch * geom.t_out;
                    let kk = geom.c_in * geom.k;
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    if let Some(b) = b {
                        if needs(*b) {
                            let db: Vec<T> = g
                                .data()
                                .chunks(nt.max(1))
                                .map(|row| row.iter().copied().sum())
                                .collect();
                            emit(*b, Tensor::from_vec(&[geom.c_out], db)?, &mut grads);
                        }
                    }
                    if needs(*w) {
                        let src = cols.as_deref().unwrap_or(xv.data());
                        let mut dw = Tensor::zeros(wv.shape());
                        gemm(false, true, geom.c_out, nt, kk, g.data(), src, T::zero(), dw.data_mut());
                        emit(*w, dw, &mut grads);
                    }
                    if needs(*x) {
                        let mut dcols = vec![T::zero(); kk * nt];
                        gemm(
                            true,
                            false,
                            kk,
                            geom.c_out,
                            nt,
                            wv.data(),
                            g.data(),
                            T::zero(),
                            &mut dcols,
                        );
                        let dx = if geom.is_pointwise() {
                            Tensor::from_vec(xv.shape(), dcols)?
                        } else {
                            let mut dx = Tensor::zeros(xv.shape());
                            geom.col2im(&dcols, dx.data_mut());
                            dx
                        };
                        emit(*x, dx, &mut grads);
                    }
                }
                Op::GapTime {
                    x,
                    channels,
                    batch,
                    time,
                } => {
                    let inv = T::one() / T::of(*time as f64);
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for c in 0..*channels {
                        for n in 0..*batch {
                            let v = g.data()[n * channels + c] * inv;
                            dx.data_mut()[(c * batch + n) * time..][..*time]
                                .iter_mut()
                                .for_each(|d| *d = v);
                        }
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let lv = self.value(*logits);
                    let (n, m) = (lv.shape()[0], lv.shape()[1]);
                    let scale = g.item() / T::of(n as f64);
                    let mut dl = probs.clone();
                    for (row, &y) in dl.chunks_mut(m).zip(labels) {
                        row[y] = row[y] - T::one();
                        row.iter_mut().for_each(|v| *v = *v * scale);
                    }
                    emit(*logits, Tensor::from_vec(lv.shape(), dl)?, &mut grads);
                }
                Op::MeanOffDiag { x } => {
                    let m = self.value(*x).shape()[0];
                    let v = g.item() / T::of((m * (m - 1)) as f64);
                    let dx = Tensor::from_fn(&[m, m], |i| if i / m == i % m { T::zero() } else { v });
                    emit(*x, dx, &mut grads);
                }
                Op::SumAll { x } => {
                    let v = g.item();
                    emit(*x, Tensor::from_fn(self.value(*x).shape(), |_| v), &mut grads);
                }
                Op::MeanAll { x } => {
                    let xv = self.value(*x);
                    let v = g.item() / T::of(xv.len().max(1) as f64);
                    emit(*x, Tensor::from_fn(xv.shape(), |_| v), &mut grads);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let cols = xv.shape()[1];
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g.data()[r * cols..(r + 1) * cols];
                        for (d, &s) in dx.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                    emit(*x, dx, &mut grads);
                }
            }
        }

        for (i, g) in leaf_out {
            match self.leaf_grads.get_mut(&i) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.leaf_grads.insert(i, g);
                }
            }
        }
        Ok(())
    }

    /// Adds the accumulated gradients of every parameter read from `store`
    /// into the store's gradient buffers.
    pub fn grads_into(&self, store: &mut ParamStore<T>) {
        let tag = store.tag();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { store: s, id } = node.op {
                if s == tag {
                    if let Some(g) = self.leaf_grads.get(&i) {
                        store.get_mut(id).grad.add_assign(g);
                    }
                }
            }
        }
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn unit_rows<T: Scalar>(t: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let cols = t.shape()[1].max(1);
    let mut unit = t.data().to_vec();
    let mut inv = Vec::with_capacity(t.shape()[0]);
    for row in unit.chunks_mut(cols) {
        let n = row_norm(row);
        if n.as_f64() < NORM_EPS {
            row.iter_mut().for_each(|v| *v = T::zero());
            inv.push(T::zero());
        } else {
            let i = T::one() / n;
            row.iter_mut().for_each(|v| *v = *v * i);
            inv.push(i);
        }
    }
    (unit, inv)
}

/// Gradient of `x / |x|`: `(g - u (u . g)) / |x|`, or zero for guarded rows.
fn project_out<T: Scalar>(g: &mut [T], unit: &[T], inv_norm: T) {
    if inv_norm == T::zero() {
        g.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let dot: T = g.iter().zip(unit).map(|(&a, &b)| a * b).sum();
    for (d, &u) in g.iter_mut().zip(unit) {
        *d = (*d - u * dot) * inv_norm;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}
