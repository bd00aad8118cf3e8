use super::tensor::{gemm, Layout, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    LeakyRelu(Var, f64),
    EluPlusOne(Var),
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    RowSoftmax(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Vec<(Var, Vec<usize>)>),
    GroupMax { x: Var, argmax: Vec<usize> },
    GroupSum(Var, usize),
    Reshape(Var),
    PairwiseDistance(Var, Var),
    GatherElements(Var, Vec<(usize, usize)>),
    AppendBorder(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in execution order, so node
/// indices are already a topological order of the computation DAG.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zero for nodes the seed does not depend on.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::new(self.shapes[var.0].clone(), vec![0.0; self.numel(var)])
                .expect("recorded shape is valid"),
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    fn numel(&self, var: Var) -> usize {
        self.shapes[var.0].iter().product()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let value = x.zip_map(y, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let value = x.zip_map(y, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let value = x.zip_map(y, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::AddScalar(a))
    }

    fn broadcast_row(&mut self, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (rows, cols) = xv.dims();
        if rv.numel() != cols {
            return Err(Error::dim("row broadcast", xv.shape(), rv.shape()));
        }
        let mut out = xv.data().to_vec();
        let rd = rv.data();
        for i in 0..rows {
            for (o, &b) in out[i * cols..(i + 1) * cols].iter_mut().zip(rd) {
                if mul {
                    *o *= b
                } else {
                    *o += b
                }
            }
        }
        let value = Tensor::matrix(rows, cols, out);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push(value, op))
    }

    /// `x[R×C] + b` with `b` holding `C` entries, broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.broadcast_row(x, b, false)
    }

    /// `x[R×C] ⊙ g` with `g` holding `C` entries, broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.broadcast_row(x, g, true)
    }

    fn broadcast_col(&mut self, x: Var, c: Var, kind: u8) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        let (rows, cols) = xv.dims();
        if cv.numel() != rows {
            return Err(Error::dim("column broadcast", xv.shape(), cv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (i, &s) in cv.data().iter().enumerate() {
            for o in &mut out[i * cols..(i + 1) * cols] {
                match kind {
                    0 => *o += s,
                    1 => *o *= s,
                    _ => *o /= s,
                }
            }
        }
        let value = Tensor::matrix(rows, cols, out);
        let op = match kind {
            0 => Op::AddCol(x, c),
            1 => Op::MulCol(x, c),
            _ => Op::DivCol(x, c),
        };
        Ok(self.push(value, op))
    }

    /// `x[R×C] + c` with `c` holding `R` entries, broadcast over columns.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        self.broadcast_col(x, c, 0)
    }

    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        self.broadcast_col(x, c, 1)
    }

    pub fn div_col(&mut self, x: Var, c: Var) -> Result<Var> {
        self.broadcast_col(x, c, 2)
    }

    /// Elementwise `max(x, slope·x)`; the derivative at 0 is taken as 1.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope))
    }

    /// `elu(x) + 1`, the positive kernel feature map of linear attention.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v + 1.0 } else { v.exp() });
        self.push(value, Op::EluPlusOne(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(value, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Ln(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(x, lo, hi))
    }

    /// Per-row standardization: `(x − mean) / sqrt(var + eps)` over the columns.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims();
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::NormalizeRows { x, inv_std },
        )
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut s = 0.0;
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - m).exp();
                s += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= s;
            }
        }
        self.push(Tensor::matrix(rows, cols, out), Op::RowSoftmax(x))
    }

    /// Log-sum-exp over each row, giving an `R×1` column.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let out: Vec<f64> = (0..rows).map(|r| lse(xv.row_slice(r).iter().copied())).collect();
        self.push(Tensor::matrix(rows, 1, out), Op::LogSumExpRows(x))
    }

    /// Log-sum-exp over each column, giving a `1×C` row.
    pub fn logsumexp_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims();
        let out: Vec<f64> = (0..cols)
            .map(|c| lse((0..rows).map(|r| xv.data()[r * cols + c])))
            .collect();
        self.push(Tensor::matrix(1, cols, out), Op::LogSumExpCols(x))
    }

    /// Sum over columns of each row → `R×1`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let out: Vec<f64> = (0..rows).map(|r| xv.row_slice(r).iter().sum()).collect();
        self.push(Tensor::matrix(rows, 1, out), Op::SumRows(x))
    }

    /// Sum over rows of each column → `1×C`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row_slice(r)) {
                *o += v;
            }
        }
        self.push(Tensor::matrix(1, cols, out), Op::SumCols(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / cols;
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ConcatRows(parts.to_vec())))
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims();
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Input(format!("row index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(xv.row_slice(i));
        }
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, out),
            Op::GatherRows(x, idx.to_vec()),
        ))
    }

    /// Assembles a `rows×C` matrix where row `idx[i]` of the output is row `i`
    /// of the corresponding part. Uncovered rows are zero.
    pub fn scatter_rows(&mut self, parts: &[(Var, Vec<usize>)], rows: usize) -> Result<Var> {
        let cols = self.value(parts[0].0).cols();
        let mut out = vec![0.0; rows * cols];
        for (p, idx) in parts {
            let v = self.value(*p);
            if v.cols() != cols || v.rows() != idx.len() {
                return Err(Error::dim("scatter_rows", v.shape(), &[idx.len(), cols]));
            }
            for (i, &dst) in idx.iter().enumerate() {
                if dst >= rows {
                    return Err(Error::Input(format!("scatter target {dst} out of range")));
                }
                out[dst * cols..(dst + 1) * cols].copy_from_slice(v.row_slice(i));
            }
        }
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ScatterRows(parts.to_vec())))
    }

    /// Elementwise max over consecutive groups of `k` rows; ties pick the first row.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims();
        if k == 0 || rows % k != 0 {
            return Err(Error::dim("group_max", xv.shape(), &[k]));
        }
        let groups = rows / k;
        let mut out = vec![f64::NEG_INFINITY; groups * cols];
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for j in 0..k {
                let r = g * k + j;
                for c in 0..cols {
                    let v = xv.data()[r * cols + c];
                    if v > out[g * cols + c] {
                        out[g * cols + c] = v;
                        argmax[g * cols + c] = r;
                    }
                }
            }
        }
        Ok(self.push(Tensor::matrix(groups, cols, out), Op::GroupMax { x, argmax }))
    }

    /// Sum over consecutive groups of `k` rows.
    pub fn group_sum(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims();
        if k == 0 || rows % k != 0 {
            return Err(Error::dim("group_sum", xv.shape(), &[k]));
        }
        let groups = rows / k;
        let mut out = vec![0.0; groups * cols];
        for r in 0..rows {
            let g = r / k;
            for (o, v) in out[g * cols..(g + 1) * cols].iter_mut().zip(xv.row_slice(r)) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::matrix(groups, cols, out), Op::GroupSum(x, k)))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).reshape(vec![rows, cols])?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `D[n,m] = ‖a_n − b_m‖₂`. The gradient at coincident rows is taken as zero.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::dim("pairwise_distance", av.shape(), bv.shape()));
        }
        let (n, m) = (av.rows(), bv.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = av.row_slice(i);
            for j in 0..m {
                let s: f64 = ai
                    .iter()
                    .zip(bv.row_slice(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out[i * m + j] = s.sqrt();
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::PairwiseDistance(a, b)))
    }

    /// Picks `x[r,c]` for each index pair into a `K×1` column.
    pub fn gather_elements(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims();
        if idx.is_empty() {
            return Err(Error::Contract("gather_elements needs at least one index".into()));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= rows || c >= cols {
                return Err(Error::Input(format!(
                    "element ({r},{c}) out of range for {rows}×{cols}"
                )));
            }
            out.push(xv.data()[r * cols + c]);
        }
        Ok(self.push(
            Tensor::matrix(idx.len(), 1, out),
            Op::GatherElements(x, idx.to_vec()),
        ))
    }

    /// Extends `z[N×M]` with one extra row and column filled by the scalar `border`.
    pub fn append_border(&mut self, z: Var, border: Var) -> Result<Var> {
        let (zv, bv) = (self.value(z), self.value(border));
        if bv.numel() != 1 {
            return Err(Error::dim("append_border", zv.shape(), bv.shape()));
        }
        let (n, m) = zv.dims();
        let b = bv.item();
        let mut out = vec![b; (n + 1) * (m + 1)];
        for i in 0..n {
            out[i * (m + 1)..i * (m + 1) + m].copy_from_slice(zv.row_slice(i));
        }
        Ok(self.push(Tensor::matrix(n + 1, m + 1, out), Op::AppendBorder(z, border)))
    }

    /// Reverse sweep from a scalar `seed`, returning `∂seed/∂node` for every node.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let sv = self.value(seed);
        if sv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                sv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(sv.map(|_| 1.0));

        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (p, q) = av.dims();
                let r = bv.cols();
                let mut ga = vec![0.0; p * q];
                gemm(p, r, q, g.data(), Layout::Normal, bv.data(), Layout::Transposed, &mut ga);
                let mut gb = vec![0.0; q * r];
                gemm(q, p, r, av.data(), Layout::Transposed, g.data(), Layout::Normal, &mut gb);
                acc_vec(grads, *a, av, ga);
                acc_vec(grads, *b, bv, gb);
            }
            Op::Transpose(a) => {
                let t = g.transpose();
                acc_vec(grads, *a, val(a), t.into_data());
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, &g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, &g.zip_map(val(b), |p, q| p * q));
                acc(grads, *b, &g.zip_map(val(a), |p, q| p * q));
            }
            Op::Scale(a, s) => acc(grads, *a, &g.map(|v| v * s)),
            Op::AddScalar(a) => acc(grads, *a, g),
            Op::AddRow(x, b) => {
                acc(grads, *x, g);
                let gb = col_sums(g);
                acc_vec(grads, *b, val(b), gb);
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (val(x), val(s));
                let cols = xv.cols();
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; cols];
                for (k, gv) in gx.iter_mut().enumerate() {
                    let c = k % cols;
                    gs[c] += *gv * xv.data()[k];
                    *gv *= sv.data()[c];
                }
                acc_vec(grads, *x, xv, gx);
                acc_vec(grads, *s, sv, gs);
            }
            Op::AddCol(x, c) => {
                acc(grads, *x, g);
                let gc = row_sums(g);
                acc_vec(grads, *c, val(c), gc);
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (val(x), val(c));
                let cols = xv.cols();
                let mut gx = g.data().to_vec();
                let mut gc = vec![0.0; cv.numel()];
                for (k, gv) in gx.iter_mut().enumerate() {
                    let r = k / cols;
                    gc[r] += *gv * xv.data()[k];
                    *gv *= cv.data()[r];
                }
                acc_vec(grads, *x, xv, gx);
                acc_vec(grads, *c, cv, gc);
            }
            Op::DivCol(x, c) => {
                let (xv, cv) = (val(x), val(c));
                let cols = xv.cols();
                let mut gx = g.data().to_vec();
                let mut gc = vec![0.0; cv.numel()];
                for (k, gv) in gx.iter_mut().enumerate() {
                    let r = k / cols;
                    let s = cv.data()[r];
                    gc[r] -= *gv * xv.data()[k] / (s * s);
                    *gv /= s;
                }
                acc_vec(grads, *x, xv, gx);
                acc_vec(grads, *c, cv, gc);
            }
            Op::LeakyRelu(x, slope) => {
                let gx = g.zip_map(val(x), |gv, xv| if xv >= 0.0 { gv } else { gv * slope });
                acc(grads, *x, &gx);
            }
            Op::EluPlusOne(x) => {
                let xv = val(x);
                let mut gx = g.data().to_vec();
                for ((gv, &xi), &yi) in gx.iter_mut().zip(xv.data()).zip(y.data()) {
                    if xi <= 0.0 {
                        *gv *= yi;
                    }
                }
                acc_vec(grads, *x, xv, gx);
            }
            Op::Sigmoid(x) => acc(grads, *x, &g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
            Op::Ln(x) => acc(grads, *x, &g.zip_map(val(x), |gv, xv| gv / xv)),
            Op::Exp(x) => acc(grads, *x, &g.zip_map(y, |gv, e| gv * e)),
            Op::Clamp(x, lo, hi) => {
                let gx = g.zip_map(val(x), |gv, xv| if xv < *lo || xv > *hi { 0.0 } else { gv });
                acc(grads, *x, &gx);
            }
            Op::NormalizeRows { x, inv_std } => {
                let (rows, cols) = y.dims();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = g.row_slice(r);
                    let yr = y.row_slice(r);
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                acc_vec(grads, *x, val(x), gx);
            }
            Op::RowSoftmax(x) => {
                let (rows, cols) = y.dims();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = g.row_slice(r);
                    let yr = y.row_slice(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc_vec(grads, *x, val(x), gx);
            }
            Op::LogSumExpRows(x) => {
                let xv = val(x);
                let (rows, cols) = xv.dims();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (l, gr) = (y.data()[r], g.data()[r]);
                    for c in 0..cols {
                        gx[r * cols + c] = gr * (xv.data()[r * cols + c] - l).exp();
                    }
                }
                acc_vec(grads, *x, xv, gx);
            }
            Op::LogSumExpCols(x) => {
                let xv = val(x);
                let (rows, cols) = xv.dims();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let k = r * cols + c;
                        gx[k] = g.data()[c] * (xv.data()[k] - y.data()[c]).exp();
                    }
                }
                acc_vec(grads, *x, xv, gx);
            }
            Op::SumRows(x) => {
                let xv = val(x);
                let cols = xv.cols();
                let gx = (0..xv.numel()).map(|k| g.data()[k / cols]).collect();
                acc_vec(grads, *x, xv, gx);
            }
            Op::SumCols(x) => {
                let xv = val(x);
                let cols = xv.cols();
                let gx = (0..xv.numel()).map(|k| g.data()[k % cols]).collect();
                acc_vec(grads, *x, xv, gx);
            }
            Op::SumAll(x) => {
                let xv = val(x);
                acc_vec(grads, *x, xv, vec![g.item(); xv.numel()]);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = y.dims();
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let pc = pv.cols();
                    let mut gp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + pc]);
                    }
                    acc_vec(grads, *p, pv, gp);
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let n = pv.numel();
                    acc_vec(grads, *p, pv, g.data()[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let xv = val(x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (i, &src) in idx.iter().enumerate() {
                    for (o, v) in gx[src * cols..(src + 1) * cols].iter_mut().zip(g.row_slice(i)) {
                        *o += v;
                    }
                }
                acc_vec(grads, *x, xv, gx);
            }
            Op::ScatterRows(parts) => {
                for (p, idx) in parts {
                    let pv = val(p);
                    let mut gp = Vec::with_capacity(pv.numel());
                    for &dst in idx {
                        gp.extend_from_slice(g.row_slice(dst));
                    }
                    acc_vec(grads, *p, pv, gp);
                }
            }
            Op::GroupMax { x, argmax } => {
                let xv = val(x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (k, &r) in argmax.iter().enumerate() {
                    gx[r * cols + k % cols] += g.data()[k];
                }
                acc_vec(grads, *x, xv, gx);
            }
            Op::GroupSum(x, k) => {
                let xv = val(x);
                let mut gx = Vec::with_capacity(xv.numel());
                for r in 0..xv.rows() {
                    gx.extend_from_slice(g.row_slice(r / k));
                }
                acc_vec(grads, *x, xv, gx);
            }
            Op::Reshape(x) => {
                let xv = val(x);
                acc_vec(grads, *x, xv, g.data().to_vec());
            }
            Op::PairwiseDistance(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (n, w) = av.dims();
                let m = bv.rows();
                let mut ga = vec![0.0; n * w];
                let mut gb = vec![0.0; m * w];
                for i in 0..n {
                    for j in 0..m {
                        let d = y.data()[i * m + j];
                        if d == 0.0 {
                            continue;
                        }
                        let s = g.data()[i * m + j] / d;
                        for c in 0..w {
                            let diff = av.data()[i * w + c] - bv.data()[j * w + c];
                            ga[i * w + c] += s * diff;
                            gb[j * w + c] -= s * diff;
                        }
                    }
                }
                acc_vec(grads, *a, av, ga);
                acc_vec(grads, *b, bv, gb);
            }
            Op::GatherElements(x, idx) => {
                let xv = val(x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (k, &(r, c)) in idx.iter().enumerate() {
                    gx[r * cols + c] += g.data()[k];
                }
                acc_vec(grads, *x, xv, gx);
            }
            Op::AppendBorder(z, border) => {
                let zv = val(z);
                let (n, m) = zv.dims();
                let mut gz = Vec::with_capacity(n * m);
                let mut gb = 0.0;
                for r in 0..=n {
                    for c in 0..=m {
                        let v = g.data()[r * (m + 1) + c];
                        if r < n && c < m {
                            gz.push(v);
                        } else {
                            gb += v;
                        }
                    }
                }
                acc_vec(grads, *z, zv, gz);
                acc_vec(grads, *border, val(border), vec![gb]);
            }
        }
    }
}

fn lse(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let (rows, cols) = g.dims();
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    out
}

fn row_sums(g: &Tensor) -> Vec<f64> {
    (0..g.rows()).map(|r| g.row_slice(r).iter().sum()).collect()
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn acc_vec(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), data).expect("gradient shape"))
        }
    }
}
