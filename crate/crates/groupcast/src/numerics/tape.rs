//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every operation records its inputs and enough metadata to run its adjoint.
//! The tape is append-only, so node indices are already a topological order
//! and the backward pass is a single reverse sweep. A tape lives for one
//! forward/backward pass over one scene; distinct tapes over a shared
//! read-only parameter snapshot may run on different threads.
//!
//! [`Tape::custom`] installs a region whose backward function replaces the
//! true adjoint while the forward output is used unchanged downstream. The
//! group estimator uses this to substitute a surrogate gradient for the unit
//! step.

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Override for one node's adjoint.
///
/// `forward` maps the input tensor to the output tensor. `backward` receives
/// `(input, output, upstream)` and must return the gradient with respect to
/// the input, substituting exactly the declared function for the region's
/// adjoint.
pub struct CustomGradRegion<F: Real> {
    pub forward: Box<dyn Fn(&Tensor<F>) -> Tensor<F> + Send + Sync>,
    pub backward: Box<dyn Fn(&Tensor<F>, &Tensor<F>, &Tensor<F>) -> Tensor<F> + Send + Sync>,
}

enum Op<F: Real> {
    Leaf,
    Param,
    Matmul(usize, usize),
    /// a @ b^T
    MatmulNt(usize, usize),
    /// a^T @ b
    MatmulTn(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, F),
    Relu(usize),
    Tanh(usize),
    Sqrt(usize),
    ClampMin(usize, F),
    /// a: [r, c] plus row vector [1, c] broadcast over rows.
    AddRowBroadcast(usize, usize),
    /// a: [r, c] minus scalar [1, 1] broadcast everywhere.
    SubScalar(usize, usize),
    /// a: [r, c] times column [r, 1] broadcast over columns.
    MulColBroadcast(usize, usize),
    /// a: [r, c] divided by column [r, 1] broadcast over columns.
    DivColBroadcast(usize, usize),
    SoftmaxRows(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        epsilon: F,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        input: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        input: usize,
        index: Vec<usize>,
    },
    /// Sum consecutive groups of `block` rows into one row each.
    SumRowBlocks {
        input: usize,
        block: usize,
    },
    RowwiseDot(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    /// Elementwise minimum across several same-shaped inputs; the recorded
    /// argmin (lowest index on ties) routes the full gradient.
    MinOver {
        inputs: Vec<usize>,
        argmin: Vec<usize>,
    },
    Custom {
        input: usize,
        region: usize,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    regions: Vec<CustomGradRegion<F>>,
    params: Vec<ValueId>,
}

/// Per-node gradients produced by [`Tape::backprop`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient at a node, if any reached it.
    pub fn of(&self, id: ValueId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    /// Gradients for the registered parameters, in registration order.
    /// Parameters unreachable from the loss get exact zeros.
    pub fn param_grads(&self, tape: &Tape<F>) -> Vec<Tensor<F>> {
        tape.params
            .iter()
            .map(|&id| {
                let shape = tape.nodes[id.0].value.shape().to_vec();
                match &self.grads[id.0] {
                    Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            regions: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn param_ids(&self) -> &[ValueId] {
        &self.params
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Record a constant or input; no gradient is tracked for it.
    pub fn leaf(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    /// Record a learnable parameter; it receives a gradient slot.
    pub fn param(&mut self, value: Tensor<F>) -> ValueId {
        let id = self.push(value, Op::Param);
        self.params.push(id);
        id
    }

    fn matrix(&self, id: ValueId, what: &str) -> Result<(usize, usize)> {
        let t = &self.nodes[id.0].value;
        if !t.is_matrix() {
            return Err(Error::Shape(format!(
                "{what}: expected a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    fn same_shape(&self, a: ValueId, b: ValueId, what: &str) -> Result<(usize, usize)> {
        let (ra, ca) = self.matrix(a, what)?;
        let (rb, cb) = self.matrix(b, what)?;
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape(format!(
                "{what}: shapes [{ra}, {ca}] and [{rb}, {cb}] differ"
            )));
        }
        Ok((ra, ca))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner extents {k} and {k2} differ"
            )));
        }
        let mut out = vec![F::ZERO; m * n];
        matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("matmul shape"),
            Op::Matmul(a.0, b.0),
        ))
    }

    /// a @ b^T with a: [m, k], b: [n, k].
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.matrix(a, "matmul_nt lhs")?;
        let (n, k2) = self.matrix(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt: inner extents {k} and {k2} differ"
            )));
        }
        let mut out = vec![F::ZERO; m * n];
        matmul_nt_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("matmul_nt shape"),
            Op::MatmulNt(a.0, b.0),
        ))
    }

    /// a^T @ b with a: [i, j], b: [i, k].
    pub fn matmul_tn(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ia, j) = self.matrix(a, "matmul_tn lhs")?;
        let (ib, k) = self.matrix(b, "matmul_tn rhs")?;
        if ia != ib {
            return Err(Error::Shape(format!(
                "matmul_tn: leading extents {ia} and {ib} differ"
            )));
        }
        let mut out = vec![F::ZERO; j * k];
        matmul_tn_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            ia,
            j,
            k,
        );
        Ok(self.push(
            Tensor::new(vec![j, k], out).expect("matmul_tn shape"),
            Op::MatmulTn(a.0, b.0),
        ))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out: Vec<F> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("add shape"),
            Op::Add(a.0, b.0),
        ))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let out: Vec<F> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("sub shape"),
            Op::Sub(a.0, b.0),
        ))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out: Vec<F> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("mul shape"),
            Op::Mul(a.0, b.0),
        ))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, c) = self.same_shape(a, b, "div")?;
        let out: Vec<F> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x / y)
            .collect();
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("div shape"),
            Op::Div(a.0, b.0),
        ))
    }

    pub fn scale(&mut self, a: ValueId, factor: F) -> Result<ValueId> {
        self.matrix(a, "scale")?;
        let out = self.nodes[a.0].value.clone();
        let data: Vec<F> = out.data().iter().map(|&x| x * factor).collect();
        Ok(self.push(
            Tensor::new(out.shape().to_vec(), data).expect("scale shape"),
            Op::Scale(a.0, factor),
        ))
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        self.matrix(a, "relu")?;
        let v = &self.nodes[a.0].value;
        let data: Vec<F> = v.data().iter().map(|&x| x.maximum(F::ZERO)).collect();
        Ok(self.push(
            Tensor::new(v.shape().to_vec(), data).expect("relu shape"),
            Op::Relu(a.0),
        ))
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId> {
        self.matrix(a, "tanh")?;
        let v = &self.nodes[a.0].value;
        let data: Vec<F> = v.data().iter().map(|&x| x.tanh()).collect();
        Ok(self.push(
            Tensor::new(v.shape().to_vec(), data).expect("tanh shape"),
            Op::Tanh(a.0),
        ))
    }

    pub fn sqrt(&mut self, a: ValueId) -> Result<ValueId> {
        self.matrix(a, "sqrt")?;
        let v = &self.nodes[a.0].value;
        let data: Vec<F> = v.data().iter().map(|&x| x.sqrt()).collect();
        Ok(self.push(
            Tensor::new(v.shape().to_vec(), data).expect("sqrt shape"),
            Op::Sqrt(a.0),
        ))
    }

    pub fn clamp_min(&mut self, a: ValueId, floor: F) -> Result<ValueId> {
        self.matrix(a, "clamp_min")?;
        let v = &self.nodes[a.0].value;
        let data: Vec<F> = v.data().iter().map(|&x| x.maximum(floor)).collect();
        Ok(self.push(
            Tensor::new(v.shape().to_vec(), data).expect("clamp_min shape"),
            Op::ClampMin(a.0, floor),
        ))
    }

    /// a: [r, c] + bias: [1, c], broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (r, c) = self.matrix(a, "add_row_broadcast lhs")?;
        let (rb, cb) = self.matrix(bias, "add_row_broadcast bias")?;
        if rb != 1 || cb != c {
            return Err(Error::Shape(format!(
                "add_row_broadcast: bias [{rb}, {cb}] does not broadcast over [{r}, {c}]"
            )));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] + bv[j]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("add_row_broadcast shape"),
            Op::AddRowBroadcast(a.0, bias.0),
        ))
    }

    /// a: [r, c] − s: [1, 1], broadcast everywhere.
    pub fn sub_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        let (r, c) = self.matrix(a, "sub_scalar lhs")?;
        let (rs, cs) = self.matrix(s, "sub_scalar rhs")?;
        if rs != 1 || cs != 1 {
            return Err(Error::Shape(format!(
                "sub_scalar: rhs must be [1, 1], got [{rs}, {cs}]"
            )));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let out: Vec<F> = self.nodes[a.0].value.data().iter().map(|&x| x - sv).collect();
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("sub_scalar shape"),
            Op::SubScalar(a.0, s.0),
        ))
    }

    /// a: [r, c] ⊙ col: [r, 1], broadcast over columns.
    pub fn mul_col_broadcast(&mut self, a: ValueId, col: ValueId) -> Result<ValueId> {
        let (r, c) = self.matrix(a, "mul_col_broadcast lhs")?;
        let (rc, cc) = self.matrix(col, "mul_col_broadcast col")?;
        if rc != r || cc != 1 {
            return Err(Error::Shape(format!(
                "mul_col_broadcast: column [{rc}, {cc}] does not broadcast over [{r}, {c}]"
            )));
        }
        let av = self.nodes[a.0].value.data();
        let cv = self.nodes[col.0].value.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] * cv[i]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("mul_col_broadcast shape"),
            Op::MulColBroadcast(a.0, col.0),
        ))
    }

    /// a: [r, c] / col: [r, 1], broadcast over columns.
    pub fn div_col_broadcast(&mut self, a: ValueId, col: ValueId) -> Result<ValueId> {
        let (r, c) = self.matrix(a, "div_col_broadcast lhs")?;
        let (rc, cc) = self.matrix(col, "div_col_broadcast col")?;
        if rc != r || cc != 1 {
            return Err(Error::Shape(format!(
                "div_col_broadcast: column [{rc}, {cc}] does not broadcast over [{r}, {c}]"
            )));
        }
        let av = self.nodes[a.0].value.data();
        let cv = self.nodes[col.0].value.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] / cv[i]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("div_col_broadcast shape"),
            Op::DivColBroadcast(a.0, col.0),
        ))
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = self.matrix(a, "softmax_rows")?;
        if c == 0 {
            return Err(Error::Shape("softmax_rows: zero columns".into()));
        }
        let av = self.nodes[a.0].value.data();
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = F::ZERO;
            for (o, &x) in orow.iter_mut().zip(row.iter()) {
                let e = (x - mx).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("softmax shape"),
            Op::SoftmaxRows(a.0),
        ))
    }

    /// Per-row normalization to mean 0 / variance 1 (variance epsilon 1e-5),
    /// followed by an elementwise affine with `gain` and `bias`, both [1, d].
    pub fn layer_norm(&mut self, a: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let (r, d) = self.matrix(a, "layer_norm input")?;
        let (rg, cg) = self.matrix(gain, "layer_norm gain")?;
        let (rb, cb) = self.matrix(bias, "layer_norm bias")?;
        if d == 0 {
            return Err(Error::Shape("layer_norm: zero feature extent".into()));
        }
        if rg != 1 || cg != d || rb != 1 || cb != d {
            return Err(Error::Shape(format!(
                "layer_norm: gain [{rg}, {cg}] / bias [{rb}, {cb}] do not match feature extent {d}"
            )));
        }
        let epsilon = F::from_f64(1e-5);
        let av = self.nodes[a.0].value.data();
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut out = vec![F::ZERO; r * d];
        let inv_d = F::ONE / F::from_f64(d as f64);
        for i in 0..r {
            let row = &av[i * d..(i + 1) * d];
            let mut mean = F::ZERO;
            for &x in row {
                mean += x;
            }
            mean *= inv_d;
            let mut var = F::ZERO;
            for &x in row {
                let dx = x - mean;
                var += dx * dx;
            }
            var *= inv_d;
            let inv_std = F::ONE / (var + epsilon).sqrt();
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                orow[j] = gv[j] * xhat + bv[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, d], out).expect("layer_norm shape"),
            Op::LayerNorm {
                input: a.0,
                gain: gain.0,
                bias: bias.0,
                epsilon,
            },
        ))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let (r, _) = self.matrix(parts[0], "concat_cols")?;
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.matrix(p, "concat_cols")?;
            if rp != r {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts {r} and {rp} differ"
                )));
            }
            total += cp;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.cols();
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, total], out).expect("concat shape"),
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (r, c) = self.matrix(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: range {start}..{} exceeds {c} columns",
                start + len
            )));
        }
        let av = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        Ok(self.push(
            Tensor::new(vec![r, len], out).expect("slice shape"),
            Op::SliceCols {
                input: a.0,
                start,
                len,
            },
        ))
    }

    /// out[p, :] = a[index[p], :]; the adjoint scatter-adds.
    pub fn gather_rows(&mut self, a: ValueId, index: &[usize]) -> Result<ValueId> {
        let (r, c) = self.matrix(a, "gather_rows")?;
        for &i in index {
            if i >= r {
                return Err(Error::Shape(format!(
                    "gather_rows: index {i} out of range for {r} rows"
                )));
            }
        }
        let av = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![index.len(), c], out).expect("gather shape"),
            Op::GatherRows {
                input: a.0,
                index: index.to_vec(),
            },
        ))
    }

    /// Sum each consecutive group of `block` rows: [(g·block), c] -> [g, c].
    pub fn sum_row_blocks(&mut self, a: ValueId, block: usize) -> Result<ValueId> {
        let (r, c) = self.matrix(a, "sum_row_blocks")?;
        if block == 0 || r % block != 0 {
            return Err(Error::Shape(format!(
                "sum_row_blocks: {r} rows not divisible into blocks of {block}"
            )));
        }
        let g = r / block;
        let av = self.nodes[a.0].value.data();
        let mut out = vec![F::ZERO; g * c];
        for i in 0..g {
            for b in 0..block {
                let row = &av[(i * block + b) * c..(i * block + b + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, &x) in orow.iter_mut().zip(row.iter()) {
                    *o += x;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![g, c], out).expect("sum_row_blocks shape"),
            Op::SumRowBlocks { input: a.0, block },
        ))
    }

    /// Per-row dot product: [r, c] × [r, c] -> [r, 1].
    pub fn rowwise_dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, c) = self.same_shape(a, b, "rowwise_dot")?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let mut s = F::ZERO;
            for j in 0..c {
                s += av[i * c + j] * bv[i * c + j];
            }
            out.push(s);
        }
        Ok(self.push(
            Tensor::new(vec![r, 1], out).expect("rowwise_dot shape"),
            Op::RowwiseDot(a.0, b.0),
        ))
    }

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        self.matrix(a, "sum_all")?;
        let mut s = F::ZERO;
        for &x in self.nodes[a.0].value.data() {
            s += x;
        }
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a.0)))
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId> {
        self.matrix(a, "mean_all")?;
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Error::Shape("mean_all: empty tensor".into()));
        }
        let mut s = F::ZERO;
        for &x in self.nodes[a.0].value.data() {
            s += x;
        }
        Ok(self.push(
            Tensor::scalar(s / F::from_f64(n as f64)),
            Op::MeanAll(a.0),
        ))
    }

    pub fn reshape(&mut self, a: ValueId, rows: usize, cols: usize) -> Result<ValueId> {
        let v = &self.nodes[a.0].value;
        if rows * cols != v.numel() {
            return Err(Error::Shape(format!(
                "reshape: {} elements cannot become [{rows}, {cols}]",
                v.numel()
            )));
        }
        let t = Tensor::new(vec![rows, cols], v.data().to_vec()).expect("reshape");
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    /// Elementwise minimum across same-shaped inputs. Ties resolve to the
    /// lowest input index, and only that input receives gradient.
    pub fn min_over(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::Shape("min_over: no inputs".into()));
        }
        let (r, c) = self.matrix(inputs[0], "min_over")?;
        for &x in &inputs[1..] {
            self.same_shape(inputs[0], x, "min_over")?;
        }
        let numel = r * c;
        let mut out = self.nodes[inputs[0].0].value.data().to_vec();
        let mut argmin = vec![0usize; numel];
        for (k, &id) in inputs.iter().enumerate().skip(1) {
            let v = self.nodes[id.0].value.data();
            for e in 0..numel {
                if v[e] < out[e] {
                    out[e] = v[e];
                    argmin[e] = k;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out).expect("min_over shape"),
            Op::MinOver {
                inputs: inputs.iter().map(|i| i.0).collect(),
                argmin,
            },
        ))
    }

    /// Record a custom-gradient region: the forward output is used unchanged
    /// downstream and the backward function replaces the adjoint exactly.
    pub fn custom(&mut self, input: ValueId, region: CustomGradRegion<F>) -> Result<ValueId> {
        self.matrix(input, "custom region input")?;
        let out = (region.forward)(&self.nodes[input.0].value);
        let region_idx = self.regions.len();
        self.regions.push(region);
        Ok(self.push(
            out,
            Op::Custom {
                input: input.0,
                region: region_idx,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Deterministic: the same tape yields
    /// bit-identical gradients on every call.
    pub fn backprop(&self, loss: ValueId) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backprop seed must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g_out) = grads[idx].clone() else {
                continue;
            };
            self.backward_op(idx, &g_out, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let acc = |grads: &mut [Option<Vec<F>>], target: usize, contrib: Vec<F>| {
            match &mut grads[target] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(contrib) {
                        *e += x;
                    }
                }
                None => grads[target] = Some(contrib),
            }
        };
        let val = |i: usize| self.nodes[i].value.data();
        let dims = |i: usize| {
            let t = &self.nodes[i].value;
            (t.rows(), t.cols())
        };

        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}

            Op::Matmul(a, b) => {
                let (m, k) = dims(*a);
                let (_, n) = dims(*b);
                // dA = dC @ B^T
                let mut da = vec![F::ZERO; m * k];
                matmul_nt_acc(g, val(*b), &mut da, m, n, k);
                acc(grads, *a, da);
                // dB = A^T @ dC
                let mut db = vec![F::ZERO; k * n];
                matmul_tn_acc(val(*a), g, &mut db, m, k, n);
                acc(grads, *b, db);
            }

            Op::MatmulNt(a, b) => {
                let (m, k) = dims(*a);
                let (n, _) = dims(*b);
                // C = A @ B^T: dA = dC @ B, dB = dC^T @ A
                let mut da = vec![F::ZERO; m * k];
                matmul_acc(g, val(*b), &mut da, m, n, k);
                acc(grads, *a, da);
                let mut db = vec![F::ZERO; n * k];
                matmul_tn_acc(g, val(*a), &mut db, m, n, k);
                acc(grads, *b, db);
            }

            Op::MatmulTn(a, b) => {
                let (i, j) = dims(*a);
                let (_, k) = dims(*b);
                // C = A^T @ B: dA = B @ dC^T, dB = A @ dC
                let mut da = vec![F::ZERO; i * j];
                matmul_nt_acc(val(*b), g, &mut da, i, k, j);
                acc(grads, *a, da);
                let mut db = vec![F::ZERO; i * k];
                matmul_acc(val(*a), g, &mut db, i, j, k);
                acc(grads, *b, db);
            }

            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }

            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|&x| -x).collect());
            }

            Op::Mul(a, b) => {
                acc(
                    grads,
                    *a,
                    g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect(),
                );
                acc(
                    grads,
                    *b,
                    g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect(),
                );
            }

            Op::Div(a, b) => {
                let bv = val(*b);
                acc(
                    grads,
                    *a,
                    g.iter().zip(bv).map(|(&d, &y)| d / y).collect(),
                );
                let av = val(*a);
                acc(
                    grads,
                    *b,
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&d, (&x, &y))| -d * x / (y * y))
                        .collect(),
                );
            }

            Op::Scale(a, factor) => {
                acc(grads, *a, g.iter().map(|&d| d * *factor).collect());
            }

            Op::Relu(a) => {
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&d, &x)| if x > F::ZERO { d } else { F::ZERO })
                        .collect(),
                );
            }

            Op::Tanh(a) => {
                let y = val(idx);
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&d, &t)| d * (F::ONE - t * t))
                        .collect(),
                );
            }

            Op::Sqrt(a) => {
                let y = val(idx);
                let tiny = F::from_f64(1e-12);
                let two = F::from_f64(2.0);
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&d, &s)| d / (two * s.maximum(tiny)))
                        .collect(),
                );
            }

            Op::ClampMin(a, floor) => {
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&d, &x)| if x > *floor { d } else { F::ZERO })
                        .collect(),
                );
            }

            Op::AddRowBroadcast(a, bias) => {
                let (r, c) = dims(*a);
                acc(grads, *a, g.to_vec());
                let mut db = vec![F::ZERO; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                acc(grads, *bias, db);
            }

            Op::SubScalar(a, s) => {
                acc(grads, *a, g.to_vec());
                let mut total = F::ZERO;
                for &d in g {
                    total += d;
                }
                acc(grads, *s, vec![-total]);
            }

            Op::MulColBroadcast(a, col) => {
                let (r, c) = dims(*a);
                let cv = val(*col);
                let av = val(*a);
                let mut da = vec![F::ZERO; r * c];
                let mut dc = vec![F::ZERO; r];
                for i in 0..r {
                    for j in 0..c {
                        let d = g[i * c + j];
                        da[i * c + j] = d * cv[i];
                        dc[i] += d * av[i * c + j];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *col, dc);
            }

            Op::DivColBroadcast(a, col) => {
                let (r, c) = dims(*a);
                let cv = val(*col);
                let av = val(*a);
                let mut da = vec![F::ZERO; r * c];
                let mut dc = vec![F::ZERO; r];
                for i in 0..r {
                    let s = cv[i];
                    for j in 0..c {
                        let d = g[i * c + j];
                        da[i * c + j] = d / s;
                        dc[i] -= d * av[i * c + j] / (s * s);
                    }
                }
                acc(grads, *a, da);
                acc(grads, *col, dc);
            }

            Op::SoftmaxRows(a) => {
                let (r, c) = dims(*a);
                let y = val(idx);
                let mut da = vec![F::ZERO; r * c];
                for i in 0..r {
                    let mut s = F::ZERO;
                    for j in 0..c {
                        s += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        da[i * c + j] = y[i * c + j] * (g[i * c + j] - s);
                    }
                }
                acc(grads, *a, da);
            }

            Op::LayerNorm {
                input,
                gain,
                bias,
                epsilon,
            } => {
                let (r, d) = dims(*input);
                let xv = val(*input);
                let gv = val(*gain);
                let inv_d = F::ONE / F::from_f64(d as f64);
                let mut dx = vec![F::ZERO; r * d];
                let mut dgain = vec![F::ZERO; d];
                let mut dbias = vec![F::ZERO; d];
                let mut xhat = vec![F::ZERO; d];
                let mut dxhat = vec![F::ZERO; d];
                for i in 0..r {
                    let row = &xv[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let mut mean = F::ZERO;
                    for &x in row {
                        mean += x;
                    }
                    mean *= inv_d;
                    let mut var = F::ZERO;
                    for &x in row {
                        let diff = x - mean;
                        var += diff * diff;
                    }
                    var *= inv_d;
                    let inv_std = F::ONE / (var + *epsilon).sqrt();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let mut mean_dxhat = F::ZERO;
                    let mut mean_dxhat_xhat = F::ZERO;
                    for j in 0..d {
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for j in 0..d {
                        dx[i * d + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                acc(grads, *input, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }

            Op::ConcatCols(parts) => {
                let (r, total) = dims(idx);
                let mut offset = 0usize;
                for &p in parts {
                    let (_, c) = dims(p);
                    let mut dp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    acc(grads, p, dp);
                    offset += c;
                }
            }

            Op::SliceCols { input, start, len } => {
                let (r, c) = dims(*input);
                let mut da = vec![F::ZERO; r * c];
                for i in 0..r {
                    for j in 0..*len {
                        da[i * c + start + j] = g[i * len + j];
                    }
                }
                acc(grads, *input, da);
            }

            Op::GatherRows { input, index } => {
                let (r, c) = dims(*input);
                let mut da = vec![F::ZERO; r * c];
                for (p, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[p * c + j];
                    }
                }
                acc(grads, *input, da);
            }

            Op::SumRowBlocks { input, block } => {
                let (r, c) = dims(*input);
                let g_rows = r / block;
                let mut da = Vec::with_capacity(r * c);
                for i in 0..g_rows {
                    for _ in 0..*block {
                        da.extend_from_slice(&g[i * c..(i + 1) * c]);
                    }
                }
                acc(grads, *input, da);
            }

            Op::RowwiseDot(a, b) => {
                let (r, c) = dims(*a);
                let av = val(*a);
                let bv = val(*b);
                let mut da = vec![F::ZERO; r * c];
                let mut db = vec![F::ZERO; r * c];
                for i in 0..r {
                    let d = g[i];
                    for j in 0..c {
                        da[i * c + j] = d * bv[i * c + j];
                        db[i * c + j] = d * av[i * c + j];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }

            Op::SumAll(a) => {
                let n = self.nodes[*a].value.numel();
                acc(grads, *a, vec![g[0]; n]);
            }

            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.numel();
                let d = g[0] / F::from_f64(n as f64);
                acc(grads, *a, vec![d; n]);
            }

            Op::Reshape(a) => {
                acc(grads, *a, g.to_vec());
            }

            Op::MinOver { inputs, argmin } => {
                for (k, &src) in inputs.iter().enumerate() {
                    let contrib: Vec<F> = argmin
                        .iter()
                        .zip(g)
                        .map(|(&am, &d)| if am == k { d } else { F::ZERO })
                        .collect();
                    acc(grads, src, contrib);
                }
            }

            Op::Custom { input, region } => {
                let r = &self.regions[*region];
                let upstream = Tensor::new(self.nodes[idx].value.shape().to_vec(), g.to_vec())
                    .expect("custom upstream shape");
                let din = (r.backward)(&self.nodes[*input].value, &self.nodes[idx].value, &upstream);
                acc(grads, *input, din.into_data());
            }
        }
    }
}
