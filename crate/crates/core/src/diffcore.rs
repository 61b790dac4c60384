//! Reverse-mode differentiation over row-major real matrices.
//!
//! A [`Tape`] records a graph of primitive operations. Leaves are declared
//! with a shape and bound to values at [`Tape::forward`], so a recorded graph
//! can be replayed on new inputs; [`Tape::backward`] then returns
//! vector-Jacobian products for every leaf.
//!
//! Complex arrays are stored as interleaved `(re, im)` pairs along the
//! columns: a matrix with `2n` columns holds `n` complex values per row.
//! The gradient convention treats every complex number as its real pair, so
//! for a C-linear map `y = M a` the VJP is `M^H g`.
//!
//! Builder methods never fail; the first shape error is remembered and
//! reported by `forward`.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral;

/// Epsilon added to `|z|` in the modulus backward pass.
pub const MODULUS_GRAD_EPS: f64 = 1e-12;

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, biased variance.
    Train,
    /// Fixed running statistics; an affine map of the input.
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    LeakyRelu(Var, f64),
    /// `1` where the input is at least the threshold, else `0`; zero gradient.
    Step(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    MeanCols(Var),
    MatMul(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        running: Option<(Arc<Vec<f64>>, Arc<Vec<f64>>)>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    Reshape(Var),
    ToComplex(Var),
    Fft(Var),
    Ifft(Var),
    CMul(Var, Var),
    CMulConj(Var, Var),
    Modulus(Var),
    CovPairs {
        a: Var,
        b: Var,
        pairs: Arc<Vec<(usize, usize)>>,
        centered: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Option<Arc<Vec<f64>>>,
    /// Batch mean and variance saved by train-mode batch normalization.
    saved: Option<(Vec<f64>, Vec<f64>)>,
}

/// Per-leaf gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct GradReport {
    leaves: Vec<Var>,
    pub grads: Vec<Vec<f64>>,
    pub max_abs: f64,
    pub norm: f64,
}

impl GradReport {
    pub fn grad(&self, leaf: Var) -> Option<&[f64]> {
        self.leaves
            .iter()
            .position(|&l| l == leaf)
            .map(|i| self.grads[i].as_slice())
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(Var, String)>,
    error: Option<String>,
    evaluated: bool,
}

fn bshape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(shape: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn leaves(&self) -> Vec<Var> {
        self.leaves.iter().map(|(v, _)| *v).collect()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> Var {
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value: None,
            saved: None,
        });
        self.evaluated = false;
        Var(self.nodes.len() - 1)
    }

    fn fail(&mut self, msg: String) -> Var {
        if self.error.is_none() {
            self.error = Some(msg);
        }
        self.push(Op::Const, 0, 0)
    }

    /// Declares an input to be bound at `forward`.
    pub fn leaf(&mut self, name: &str, rows: usize, cols: usize) -> Var {
        let v = self.push(Op::Leaf, rows, cols);
        self.leaves.push((v, name.to_string()));
        v
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.constant_shared(rows, cols, Arc::new(data))
    }

    pub fn constant_shared(&mut self, rows: usize, cols: usize, data: Arc<Vec<f64>>) -> Var {
        if data.len() != rows * cols {
            return self.fail(format!(
                "constant of {} values for shape {rows}x{cols}",
                data.len()
            ));
        }
        let v = self.push(Op::Const, rows, cols);
        self.nodes[v.0].value = Some(data);
        v
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(1, 1, vec![value])
    }

    fn binary(&mut self, a: Var, b: Var, make: fn(Var, Var) -> Op, name: &str) -> Var {
        match bshape(self.shape(a), self.shape(b)) {
            Some((r, c)) => self.push(make(a, b), r, c),
            None => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                self.fail(format!("{name}: cannot broadcast {sa:?} with {sb:?}"))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div, "div")
    }

    fn unary(&mut self, op: Op, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(op, r, c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg(a), a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::Scale(a, k), a)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::Offset(a, k), a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(a, lo, hi), a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Op::LeakyRelu(a, slope), a)
    }

    pub fn step(&mut self, a: Var, threshold: f64) -> Var {
        self.unary(Op::Step(a, threshold), a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), 1, 1)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a), 1, 1)
    }

    /// Sum over rows, giving one row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let c = self.shape(a).1;
        self.push(Op::SumRows(a), 1, c)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let c = self.shape(a).1;
        self.push(Op::MeanRows(a), 1, c)
    }

    /// Sum over columns, giving one column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let r = self.shape(a).0;
        self.push(Op::SumCols(a), r, 1)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let r = self.shape(a).0;
        self.push(Op::MeanCols(a), r, 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return self.fail(format!("matmul: {ra}x{ca} times {rb}x{cb}"));
        }
        self.push(Op::MatMul(a, b), ra, cb)
    }

    /// `x W + b` with `W` of shape `in x out` and `b` of shape `1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        self.batch_norm(x, gamma, beta, eps, NormMode::Train, None)
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running_mean: Arc<Vec<f64>>,
        running_var: Arc<Vec<f64>>,
    ) -> Var {
        self.batch_norm(
            x,
            gamma,
            beta,
            eps,
            NormMode::Eval,
            Some((running_mean, running_var)),
        )
    }

    fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        running: Option<(Arc<Vec<f64>>, Arc<Vec<f64>>)>,
    ) -> Var {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return self.fail(format!("batch_norm: affine parameters must be 1x{c}"));
        }
        if let Some((m, v)) = &running {
            if m.len() != c || v.len() != c {
                return self.fail(format!("batch_norm: running statistics must have {c} entries"));
            }
        }
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mode,
                running,
            },
            r,
            c,
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.unary(Op::Softmax(a), a)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.unary(Op::LogSoftmax(a), a)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let Some(&first) = parts.first() else {
            return self.fail("concat_cols: no inputs".into());
        };
        let r = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return self.fail("concat_cols: row counts differ".into());
        }
        let c = parts.iter().map(|&p| self.shape(p).1).sum();
        self.push(Op::ConcatCols(parts.to_vec()), r, c)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let Some(&first) = parts.first() else {
            return self.fail("concat_rows: no inputs".into());
        };
        let c = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return self.fail("concat_rows: column counts differ".into());
        }
        let r = parts.iter().map(|&p| self.shape(p).0).sum();
        self.push(Op::ConcatRows(parts.to_vec()), r, c)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return self.fail(format!("slice_cols: {start}..{end} of {c}"));
        }
        self.push(Op::SliceCols(a, start, end), r, end - start)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return self.fail(format!("slice_rows: {start}..{end} of {r}"));
        }
        self.push(Op::SliceRows(a, start, end), end - start, c)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let (r, c) = self.shape(a);
        if idx.iter().any(|&i| i >= r) {
            return self.fail(format!("gather_rows: index out of {r} rows"));
        }
        let n = idx.len();
        self.push(Op::GatherRows(a, idx), n, c)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return self.fail(format!("reshape: {r}x{c} to {rows}x{cols}"));
        }
        self.push(Op::Reshape(a), rows, cols)
    }

    /// Real matrix to interleaved complex with zero imaginary part.
    pub fn to_complex(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::ToComplex(a), r, 2 * c)
    }

    fn complex_unary(&mut self, op: Op, a: Var, name: &str) -> Var {
        let (r, c) = self.shape(a);
        if c % 2 != 0 {
            return self.fail(format!("{name}: odd column count {c} for complex input"));
        }
        self.push(op, r, c)
    }

    /// Unnormalized DFT of each row.
    pub fn fft(&mut self, a: Var) -> Var {
        self.complex_unary(Op::Fft(a), a, "fft")
    }

    /// Inverse DFT of each row, normalized by `1/L`.
    pub fn ifft(&mut self, a: Var) -> Var {
        self.complex_unary(Op::Ifft(a), a, "ifft")
    }

    pub fn cmul(&mut self, a: Var, b: Var) -> Var {
        self.complex_binary(a, b, Op::CMul, "cmul")
    }

    /// `a * conj(b)`.
    pub fn cmul_conj(&mut self, a: Var, b: Var) -> Var {
        self.complex_binary(a, b, Op::CMulConj, "cmul_conj")
    }

    fn complex_binary(&mut self, a: Var, b: Var, make: fn(Var, Var) -> Op, name: &str) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 % 2 != 0 || sa.1 != sb.1 {
            return self.fail(format!("{name}: complex shapes {sa:?} and {sb:?}"));
        }
        match bshape(sa, sb) {
            Some((r, c)) => self.push(make(a, b), r, c),
            None => self.fail(format!("{name}: cannot broadcast {sa:?} with {sb:?}")),
        }
    }

    /// Element-wise `|z|`, exact in the forward pass.
    pub fn modulus(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        if c % 2 != 0 {
            return self.fail(format!("modulus: odd column count {c}"));
        }
        self.push(Op::Modulus(a), r, c / 2)
    }

    /// Complex averages `Ave(a_p conj(b_q))` over the row for each pair of
    /// row indices, optionally centering both rows first. Output is one
    /// interleaved complex value per pair.
    pub fn cov_pairs(
        &mut self,
        a: Var,
        b: Var,
        pairs: Arc<Vec<(usize, usize)>>,
        centered: bool,
    ) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 % 2 != 0 || sa.1 != sb.1 || sa.1 == 0 {
            return self.fail(format!("cov_pairs: complex shapes {sa:?} and {sb:?}"));
        }
        if pairs.iter().any(|&(p, q)| p >= sa.0 || q >= sb.0) {
            return self.fail("cov_pairs: row index out of range".into());
        }
        let n = pairs.len();
        self.push(
            Op::CovPairs {
                a,
                b,
                pairs,
                centered,
            },
            n,
            2,
        )
    }

    /// Value of an evaluated node.
    pub fn value(&self, v: Var) -> Result<&[f64]> {
        self.nodes
            .get(v.0)
            .and_then(|n| n.value.as_deref())
            .map(|v| v.as_slice())
            .ok_or(Error::NotEvaluated)
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let val = self.value(v)?;
        if val.len() != 1 {
            return Err(Error::NonScalar(val.len()));
        }
        Ok(val[0])
    }

    /// Batch mean and biased variance recorded by a train-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        self.nodes
            .get(v.0)?
            .saved
            .as_ref()
            .map(|(m, s)| (m.as_slice(), s.as_slice()))
    }

    /// Binds every leaf and evaluates the whole graph in append order.
    pub fn forward(&mut self, bindings: &[(Var, &[f64])]) -> Result<()> {
        if let Some(e) = &self.error {
            return Err(Error::Shape(e.clone()));
        }
        for (v, name) in &self.leaves {
            let Some((_, data)) = bindings.iter().find(|(b, _)| b == v) else {
                return Err(Error::UnboundLeaf(name.clone()));
            };
            let n = &self.nodes[v.0];
            if data.len() != n.rows * n.cols {
                return Err(Error::Shape(format!(
                    "leaf {name} expects {}x{} = {} values, got {}",
                    n.rows,
                    n.cols,
                    n.rows * n.cols,
                    data.len()
                )));
            }
        }
        for i in 0..self.nodes.len() {
            match self.nodes[i].op {
                Op::Const => {}
                Op::Leaf => {
                    let data = bindings.iter().find(|(b, _)| b.0 == i).unwrap().1;
                    self.nodes[i].value = Some(Arc::new(data.to_vec()));
                }
                _ => {
                    let (value, saved) = self.eval(i);
                    self.nodes[i].value = Some(Arc::new(value));
                    self.nodes[i].saved = saved;
                }
            }
        }
        self.evaluated = true;
        Ok(())
    }

    /// Drops intermediate values, keeping constants, so a replayable tape
    /// does not pin memory between evaluations.
    pub fn release(&mut self) {
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Const) {
                n.value = None;
                n.saved = None;
            }
        }
        self.evaluated = false;
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_deref().expect("input evaluated before use")
    }

    fn shp(&self, v: Var) -> (usize, usize) {
        self.shape(v)
    }

    fn eval(&self, i: usize) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let map = |a: Var, f: &dyn Fn(f64) -> f64| -> Vec<f64> { self.val(a).iter().map(|&x| f(x)).collect() };
        let bin = |a: Var, b: Var, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            let (va, vb) = (self.val(a), self.val(b));
            let (sa, sb) = (self.shp(a), self.shp(b));
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    out.push(f(va[bidx(sa, r, c)], vb[bidx(sb, r, c)]));
                }
            }
            out
        };
        let value = match &node.op {
            Op::Leaf | Op::Const => unreachable!(),
            Op::Add(a, b) => bin(*a, *b, &|x, y| x + y),
            Op::Sub(a, b) => bin(*a, *b, &|x, y| x - y),
            Op::Mul(a, b) => bin(*a, *b, &|x, y| x * y),
            Op::Div(a, b) => bin(*a, *b, &|x, y| x / y),
            Op::Neg(a) => map(*a, &|x| -x),
            Op::Scale(a, k) => map(*a, &|x| x * k),
            Op::Offset(a, k) => map(*a, &|x| x + k),
            Op::Square(a) => map(*a, &|x| x * x),
            Op::Sqrt(a) => map(*a, &f64::sqrt),
            Op::Exp(a) => map(*a, &f64::exp),
            Op::Log(a) => map(*a, &f64::ln),
            Op::Clamp(a, lo, hi) => map(*a, &|x| x.clamp(*lo, *hi)),
            Op::LeakyRelu(a, s) => map(*a, &|x| if x > 0.0 { x } else { s * x }),
            Op::Step(a, t) => map(*a, &|x| if x >= *t { 1.0 } else { 0.0 }),
            Op::Sum(a) => vec![self.val(*a).iter().sum()],
            Op::Mean(a) => {
                let v = self.val(*a);
                vec![v.iter().sum::<f64>() / v.len() as f64]
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (r, c) = self.shp(*a);
                let v = self.val(*a);
                let mut out = vec![0.0; c];
                for row in v.chunks(c.max(1)).take(r) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                if matches!(node.op, Op::MeanRows(_)) {
                    out.iter_mut().for_each(|o| *o /= r as f64);
                }
                out
            }
            Op::SumCols(a) | Op::MeanCols(a) => {
                let (r, c) = self.shp(*a);
                let v = self.val(*a);
                let mean = matches!(node.op, Op::MeanCols(_));
                (0..r)
                    .map(|i| {
                        let s: f64 = v[i * c..(i + 1) * c].iter().sum();
                        if mean {
                            s / c as f64
                        } else {
                            s
                        }
                    })
                    .collect()
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.shp(*a);
                let n = self.shp(*b).1;
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, self.val(*a), false, self.val(*b), false, &mut out);
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mode,
                running,
            } => {
                let (r, c) = self.shp(*x);
                let v = self.val(*x);
                let (g, b) = (self.val(*gamma), self.val(*beta));
                let (mean, var) = match mode {
                    NormMode::Train => column_stats(v, r, c),
                    NormMode::Eval => {
                        let (m, s) = running.as_ref().unwrap();
                        (m.to_vec(), s.to_vec())
                    }
                };
                let mut out = vec![0.0; r * c];
                for j in 0..c {
                    let inv = 1.0 / (var[j] + eps).sqrt();
                    for i in 0..r {
                        out[i * c + j] = (v[i * c + j] - mean[j]) * inv * g[j] + b[j];
                    }
                }
                let saved = (*mode == NormMode::Train).then_some((mean, var));
                return (out, saved);
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let v = self.val(*a);
                let log = matches!(node.op, Op::LogSoftmax(_));
                let mut out = Vec::with_capacity(v.len());
                for row in v.chunks(cols.max(1)) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                    let lz = z.ln();
                    for x in row {
                        out.push(if log { x - m - lz } else { (x - m).exp() / z });
                    }
                }
                out
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        let c = self.shp(*p).1;
                        out.extend_from_slice(&self.val(*p)[r * c..(r + 1) * c]);
                    }
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(rows * cols);
                for p in parts {
                    out.extend_from_slice(self.val(*p));
                }
                out
            }
            Op::SliceCols(a, s, e) => {
                let c = self.shp(*a).1;
                let v = self.val(*a);
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend_from_slice(&v[r * c + s..r * c + e]);
                }
                out
            }
            Op::SliceRows(a, s, e) => {
                let c = self.shp(*a).1;
                self.val(*a)[s * c..e * c].to_vec()
            }
            Op::GatherRows(a, idx) => {
                let c = self.shp(*a).1;
                let v = self.val(*a);
                let mut out = Vec::with_capacity(rows * cols);
                for &i in idx.iter() {
                    out.extend_from_slice(&v[i * c..(i + 1) * c]);
                }
                out
            }
            Op::Reshape(a) => self.val(*a).to_vec(),
            Op::ToComplex(a) => self.val(*a).iter().flat_map(|&x| [x, 0.0]).collect(),
            Op::Fft(a) | Op::Ifft(a) => {
                let inverse = matches!(node.op, Op::Ifft(_));
                let v = self.val(*a);
                let mut out = Vec::with_capacity(v.len());
                for row in v.chunks(cols.max(1)) {
                    let mut buf = spectral::deinterleave(row);
                    if inverse {
                        spectral::ifft_in_place(&mut buf);
                    } else {
                        spectral::fft_in_place(&mut buf);
                    }
                    spectral::interleave_into(&buf, &mut out);
                }
                out
            }
            Op::CMul(a, b) | Op::CMulConj(a, b) => {
                let conj = matches!(node.op, Op::CMulConj(..));
                let (va, vb) = (self.val(*a), self.val(*b));
                let (ra, rb) = (self.shp(*a).0, self.shp(*b).0);
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let xa = &va[if ra == 1 { 0 } else { r * cols }..][..cols];
                    let xb = &vb[if rb == 1 { 0 } else { r * cols }..][..cols];
                    for k in 0..cols / 2 {
                        let (p, q) = (xa[2 * k], xa[2 * k + 1]);
                        let (u, w) = (xb[2 * k], if conj { -xb[2 * k + 1] } else { xb[2 * k + 1] });
                        out.push(p * u - q * w);
                        out.push(p * w + q * u);
                    }
                }
                out
            }
            Op::Modulus(a) => self
                .val(*a)
                .chunks(2)
                .map(|z| Complex64::new(z[0], z[1]).norm())
                .collect(),
            Op::CovPairs {
                a,
                b,
                pairs,
                centered,
            } => {
                let c = self.shp(*a).1;
                let (va, vb) = (self.val(*a), self.val(*b));
                let mut out = Vec::with_capacity(2 * pairs.len());
                for &(p, q) in pairs.iter() {
                    let z = complex_cov(&va[p * c..(p + 1) * c], &vb[q * c..(q + 1) * c], *centered);
                    out.push(z.re);
                    out.push(z.im);
                }
                out
            }
        };
        (value, None)
    }

    /// Backward pass from a scalar output with unit cotangent.
    pub fn backward(&self, output: Var) -> Result<GradReport> {
        let (r, c) = self.shape(output);
        if r * c != 1 {
            return Err(Error::NonScalar(r * c));
        }
        self.backward_with(output, &[1.0])
    }

    /// Vector-Jacobian products of `output` against every leaf.
    pub fn backward_with(&self, output: Var, cotangent: &[f64]) -> Result<GradReport> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let (r, c) = self.shape(output);
        if cotangent.len() != r * c {
            return Err(Error::Shape(format!(
                "cotangent has {} values, output is {r}x{c}",
                cotangent.len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent.to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(i, &g, &mut grads);
        }
        let leaves = self.leaves();
        let out: Vec<Vec<f64>> = leaves
            .iter()
            .map(|v| {
                let n = &self.nodes[v.0];
                grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n.rows * n.cols])
            })
            .collect();
        let max_abs = out.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        let norm = out.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        Ok(GradReport {
            leaves,
            grads: out,
            max_abs,
            norm,
        })
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let out = node.value.as_deref().expect("evaluated");
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            if matches!(self.nodes[v.0].op, Op::Const) {
                return;
            }
            let n = &self.nodes[v.0];
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]);
            contrib(slot);
        };
        // broadcasting reduction of `g * d(out)/d(input)` into an input's shape
        let bin_grad = |v: Var, f: &dyn Fn(usize) -> f64, acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64]))| {
            let s = self.shp(v);
            acc(v, &mut |slot: &mut [f64]| {
                for r in 0..rows {
                    for c in 0..cols {
                        let k = r * cols + c;
                        slot[bidx(s, r, c)] += g[k] * f(k);
                    }
                }
            });
        };
        let elem = |a: Var, f: &dyn Fn(usize) -> f64, acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64]))| {
            acc(a, &mut |slot: &mut [f64]| {
                for (k, s) in slot.iter_mut().enumerate() {
                    *s += g[k] * f(k);
                }
            });
        };
        let at = |v: Var, k: usize| {
            let s = self.shp(v);
            self.val(v)[bidx(s, k / cols, k % cols)]
        };
        match &node.op {
            Op::Leaf | Op::Const | Op::Step(..) => {}
            Op::Add(a, b) => {
                bin_grad(*a, &|_| 1.0, &mut acc);
                bin_grad(*b, &|_| 1.0, &mut acc);
            }
            Op::Sub(a, b) => {
                bin_grad(*a, &|_| 1.0, &mut acc);
                bin_grad(*b, &|_| -1.0, &mut acc);
            }
            Op::Mul(a, b) => {
                bin_grad(*a, &|k| at(*b, k), &mut acc);
                bin_grad(*b, &|k| at(*a, k), &mut acc);
            }
            Op::Div(a, b) => {
                bin_grad(*a, &|k| 1.0 / at(*b, k), &mut acc);
                bin_grad(*b, &|k| -out[k] / at(*b, k), &mut acc);
            }
            Op::Neg(a) => elem(*a, &|_| -1.0, &mut acc),
            Op::Scale(a, s) => elem(*a, &|_| *s, &mut acc),
            Op::Offset(a, _) => elem(*a, &|_| 1.0, &mut acc),
            Op::Square(a) => {
                let x = self.val(*a);
                elem(*a, &|k| 2.0 * x[k], &mut acc)
            }
            Op::Sqrt(a) => elem(*a, &|k| 0.5 / out[k], &mut acc),
            Op::Exp(a) => elem(*a, &|k| out[k], &mut acc),
            Op::Log(a) => {
                let x = self.val(*a);
                elem(*a, &|k| 1.0 / x[k], &mut acc)
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a);
                elem(*a, &|k| if x[k] >= *lo && x[k] <= *hi { 1.0 } else { 0.0 }, &mut acc)
            }
            Op::LeakyRelu(a, s) => {
                let x = self.val(*a);
                elem(*a, &|k| if x[k] > 0.0 { 1.0 } else { *s }, &mut acc)
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = {
                    let (r, c) = self.shp(*a);
                    r * c
                };
                let scale = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                acc(*a, &mut |slot: &mut [f64]| slot.iter_mut().for_each(|s| *s += scale));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (r, c) = self.shp(*a);
                let k = if matches!(node.op, Op::MeanRows(_)) { 1.0 / r as f64 } else { 1.0 };
                acc(*a, &mut |slot: &mut [f64]| {
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * c + j] += g[j] * k;
                        }
                    }
                });
            }
            Op::SumCols(a) | Op::MeanCols(a) => {
                let (r, c) = self.shp(*a);
                let k = if matches!(node.op, Op::MeanCols(_)) { 1.0 / c as f64 } else { 1.0 };
                acc(*a, &mut |slot: &mut [f64]| {
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * c + j] += g[i] * k;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, kk) = self.shp(*a);
                let n = self.shp(*b).1;
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, &mut |slot: &mut [f64]| gemm_acc(m, kk, n, g, false, vb, true, slot));
                acc(*b, &mut |slot: &mut [f64]| gemm_acc(kk, n, m, va, true, g, false, slot));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mode,
                running,
            } => {
                let (r, c) = self.shp(*x);
                let v = self.val(*x);
                let gm = self.val(*gamma);
                let (mean, var): (&[f64], &[f64]) = match mode {
                    NormMode::Train => {
                        let (m, s) = node.saved.as_ref().expect("batch stats saved");
                        (m, s)
                    }
                    NormMode::Eval => {
                        let (m, s) = running.as_ref().unwrap();
                        (m, s)
                    }
                };
                let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
                let xhat = |i: usize, j: usize| (v[i * c + j] - mean[j]) * inv[j];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dgamma[j] += g[i * c + j] * xhat(i, j);
                        dbeta[j] += g[i * c + j];
                    }
                }
                acc(*x, &mut |slot: &mut [f64]| {
                    for j in 0..c {
                        let k = gm[j] * inv[j];
                        match mode {
                            NormMode::Eval => {
                                for i in 0..r {
                                    slot[i * c + j] += g[i * c + j] * k;
                                }
                            }
                            NormMode::Train => {
                                let n = r as f64;
                                for i in 0..r {
                                    slot[i * c + j] +=
                                        k / n * (n * g[i * c + j] - dbeta[j] - xhat(i, j) * dgamma[j]);
                                }
                            }
                        }
                    }
                });
                acc(*gamma, &mut |slot: &mut [f64]| {
                    slot.iter_mut().zip(&dgamma).for_each(|(s, d)| *s += d)
                });
                acc(*beta, &mut |slot: &mut [f64]| {
                    slot.iter_mut().zip(&dbeta).for_each(|(s, d)| *s += d)
                });
            }
            Op::Softmax(a) => acc(*a, &mut |slot: &mut [f64]| {
                for r in 0..rows {
                    let (y, gr) = (&out[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        slot[r * cols + c] += y[c] * (gr[c] - dot);
                    }
                }
            }),
            Op::LogSoftmax(a) => acc(*a, &mut |slot: &mut [f64]| {
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        slot[r * cols + c] += gr[c] - out[r * cols + c].exp() * total;
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shp(*p).1;
                    acc(*p, &mut |slot: &mut [f64]| {
                        for r in 0..rows {
                            for j in 0..c {
                                slot[r * c + j] += g[r * cols + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = {
                        let (r, c) = self.shp(*p);
                        r * c
                    };
                    acc(*p, &mut |slot: &mut [f64]| {
                        slot.iter_mut().zip(&g[off..off + n]).for_each(|(s, d)| *s += d)
                    });
                    off += n;
                }
            }
            Op::SliceCols(a, s, _) => {
                let c = self.shp(*a).1;
                acc(*a, &mut |slot: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..cols {
                            slot[r * c + s + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, s, _) => {
                let c = self.shp(*a).1;
                acc(*a, &mut |slot: &mut [f64]| {
                    slot[s * c..s * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, d)| *x += d)
                });
            }
            Op::GatherRows(a, idx) => {
                let c = self.shp(*a).1;
                acc(*a, &mut |slot: &mut [f64]| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            slot[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |slot: &mut [f64]| {
                slot.iter_mut().zip(g).for_each(|(s, d)| *s += d)
            }),
            Op::ToComplex(a) => acc(*a, &mut |slot: &mut [f64]| {
                slot.iter_mut().zip(g.chunks(2)).for_each(|(s, d)| *s += d[0])
            }),
            Op::Fft(a) | Op::Ifft(a) => {
                // adjoint of the unnormalized DFT is L times the normalized inverse
                let forward = matches!(node.op, Op::Fft(_));
                let len = (cols / 2) as f64;
                acc(*a, &mut |slot: &mut [f64]| {
                    for (r, gr) in g.chunks(cols.max(1)).enumerate() {
                        let mut buf = spectral::deinterleave(gr);
                        if forward {
                            spectral::ifft_in_place(&mut buf);
                            buf.iter_mut().for_each(|z| *z *= len);
                        } else {
                            spectral::fft_in_place(&mut buf);
                            buf.iter_mut().for_each(|z| *z /= len);
                        }
                        for (k, z) in buf.iter().enumerate() {
                            slot[r * cols + 2 * k] += z.re;
                            slot[r * cols + 2 * k + 1] += z.im;
                        }
                    }
                });
            }
            Op::CMul(a, b) | Op::CMulConj(a, b) => {
                let conj = matches!(node.op, Op::CMulConj(..));
                let (va, vb) = (self.val(*a), self.val(*b));
                let (ra, rb) = (self.shp(*a).0, self.shp(*b).0);
                let base = |n: usize, r: usize| if n == 1 { 0 } else { r * cols };
                // d(a b)/da: g conj(b); d(a conj b)/da: g b
                acc(*a, &mut |slot: &mut [f64]| {
                    for r in 0..rows {
                        let (oa, ob, og) = (base(ra, r), base(rb, r), r * cols);
                        for k in 0..cols / 2 {
                            let (gr, gi) = (g[og + 2 * k], g[og + 2 * k + 1]);
                            let (u, w) = (vb[ob + 2 * k], vb[ob + 2 * k + 1]);
                            let w = if conj { w } else { -w };
                            slot[oa + 2 * k] += gr * u - gi * w;
                            slot[oa + 2 * k + 1] += gr * w + gi * u;
                        }
                    }
                });
                // d(a b)/db: g conj(a); d(a conj b)/db: conj(g) a
                acc(*b, &mut |slot: &mut [f64]| {
                    for r in 0..rows {
                        let (oa, ob, og) = (base(ra, r), base(rb, r), r * cols);
                        for k in 0..cols / 2 {
                            let (gr, gi) = (g[og + 2 * k], g[og + 2 * k + 1]);
                            let (p, q) = (va[oa + 2 * k], va[oa + 2 * k + 1]);
                            if conj {
                                slot[ob + 2 * k] += gr * p + gi * q;
                                slot[ob + 2 * k + 1] += gr * q - gi * p;
                            } else {
                                slot[ob + 2 * k] += gr * p + gi * q;
                                slot[ob + 2 * k + 1] += gi * p - gr * q;
                            }
                        }
                    }
                });
            }
            Op::Modulus(a) => {
                let x = self.val(*a);
                acc(*a, &mut |slot: &mut [f64]| {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = out[k] + MODULUS_GRAD_EPS;
                        slot[2 * k] += gk * x[2 * k] / d;
                        slot[2 * k + 1] += gk * x[2 * k + 1] / d;
                    }
                });
            }
            Op::CovPairs {
                a,
                b,
                pairs,
                centered,
            } => {
                let c = self.shp(*a).1;
                let n = (c / 2) as f64;
                let (va, vb) = (self.val(*a), self.val(*b));
                let centered_row = |v: &[f64], row: usize| -> Vec<f64> {
                    let x = &v[row * c..(row + 1) * c];
                    if !*centered {
                        return x.to_vec();
                    }
                    let m = mean_interleaved(x);
                    x.chunks(2).flat_map(|z| [z[0] - m.re, z[1] - m.im]).collect()
                };
                acc(*a, &mut |slot: &mut [f64]| {
                    for (k, &(p, q)) in pairs.iter().enumerate() {
                        let (gr, gi) = (g[2 * k] / n, g[2 * k + 1] / n);
                        let bq = centered_row(vb, q);
                        let s = &mut slot[p * c..(p + 1) * c];
                        for m in 0..c / 2 {
                            let (u, w) = (bq[2 * m], bq[2 * m + 1]);
                            s[2 * m] += gr * u - gi * w;
                            s[2 * m + 1] += gr * w + gi * u;
                        }
                    }
                });
                acc(*b, &mut |slot: &mut [f64]| {
                    for (k, &(p, q)) in pairs.iter().enumerate() {
                        let (gr, gi) = (g[2 * k] / n, g[2 * k + 1] / n);
                        let ap = centered_row(va, p);
                        let s = &mut slot[q * c..(q + 1) * c];
                        for m in 0..c / 2 {
                            let (u, w) = (ap[2 * m], ap[2 * m + 1]);
                            s[2 * m] += gr * u + gi * w;
                            s[2 * m + 1] += gr * w - gi * u;
                        }
                    }
                });
            }
        }
    }
}

fn mean_interleaved(x: &[f64]) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for z in x.chunks(2) {
        acc += Complex64::new(z[0], z[1]);
    }
    acc / (x.len() / 2) as f64
}

/// `Ave(a conj b)` over interleaved rows, centered on request; the same
/// arithmetic as the plain scattering covariance kernel.
fn complex_cov(a: &[f64], b: &[f64], centered: bool) -> Complex64 {
    let (ma, mb) = if centered {
        (mean_interleaved(a), mean_interleaved(b))
    } else {
        (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0))
    };
    let mut re = 0.0;
    let mut im = 0.0;
    for (u, v) in a.chunks(2).zip(b.chunks(2)) {
        let (ur, ui, vr, vi) = if centered {
            (u[0] - ma.re, u[1] - ma.im, v[0] - mb.re, v[1] - mb.im)
        } else {
            (u[0], u[1], v[0], v[1])
        };
        re += ur * vr + ui * vi;
        im += ui * vr - ur * vi;
    }
    let n = (a.len() / 2) as f64;
    Complex64::new(re / n, im / n)
}

fn column_stats(v: &[f64], r: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            mean[j] += v[i * c + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mut var = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let d = v[i * c + j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= r as f64);
    (mean, var)
}

/// `out = op(a) op(b)` for row-major `m x k` and `k x n` operands.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    gemm_acc(m, n, k, a, ta, b, tb, out);
}

/// `out += op(a) op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, n: usize, k: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // strides of the stored matrices; a transposed operand is read column-wise
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(leaf index, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error used by the finite-difference checks; gradients below
/// `1e-8` in magnitude are compared absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward gradients against central differences on up to
/// `n_coords` random coordinates drawn across all bound leaves.
pub fn gradcheck_tape(
    tape: &mut Tape,
    output: Var,
    bindings: &[(Var, Vec<f64>)],
    h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    let (r, c) = tape.shape(output);
    if r * c != 1 {
        return Err(Error::NonScalar(r * c));
    }
    let mut point: Vec<(Var, Vec<f64>)> = bindings.to_vec();
    let eval = |tape: &mut Tape, point: &[(Var, Vec<f64>)]| -> Result<f64> {
        let b: Vec<(Var, &[f64])> = point.iter().map(|(v, d)| (*v, d.as_slice())).collect();
        tape.forward(&b)?;
        tape.scalar_value(output)
    };
    eval(tape, &point)?;
    let report = tape.backward(output)?;
    let total: usize = point.iter().map(|(_, d)| d.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, n_coords.min(total)).into_vec();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        coords_checked: picks.len(),
        worst: None,
    };
    for flat in picks {
        let (mut li, mut k) = (0, flat);
        while k >= point[li].1.len() {
            k -= point[li].1.len();
            li += 1;
        }
        let analytic = report.grad(point[li].0).map(|g| g[k]).unwrap_or(0.0);
        let x0 = point[li].1[k];
        point[li].1[k] = x0 + h;
        let fp = eval(tape, &point)?;
        point[li].1[k] = x0 - h;
        let fm = eval(tape, &point)?;
        point[li].1[k] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_error(analytic, numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck coordinate {k} of leaf {li}")));
        }
        if err >= result.max_rel_error {
            result.max_rel_error = err;
            result.worst = Some((li, k, analytic, numeric));
        }
    }
    Ok(result)
}

/// Builds a graph of one `1 x n` input with `builder` and checks it at
/// `point`.
pub fn gradcheck<F>(builder: F, point: &[f64], h: f64, n_coords: usize, seed: u64) -> Result<GradCheck>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf("x", 1, point.len());
    let out = builder(&mut tape, x);
    gradcheck_tape(&mut tape, out, &[(x, point.to_vec())], h, n_coords, seed)
}

fn randn(n: usize, seed: u64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Random fixed weights so each primitive's scalarization is generic.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Var {
    let (r, c) = t.shape(y);
    let w = t.constant(r, c, randn(r * c, seed));
    let z = t.mul(y, w);
    t.sum(z)
}

/// Central-difference check (`h = 1e-6`, every coordinate) of each primitive
/// on a small random point.
pub fn primitive_gradchecks() -> Result<Vec<(String, GradCheck)>> {
    type Build = Box<dyn Fn(&mut Tape, Var) -> Var>;
    let pos: Vec<f64> = randn(24, 11).iter().map(|x| x.abs() + 0.5).collect();
    let gen = randn(24, 12);
    let cases: Vec<(&str, Build, &[f64])> = vec![
        ("add", Box::new(|t, x| { let r = t.reshape(x, 4, 6); let s = t.slice_rows(r, 0, 1); t.add(r, s) }), &gen),
        ("sub", Box::new(|t, x| { let r = t.reshape(x, 4, 6); let s = t.slice_cols(r, 0, 1); t.sub(s, r) }), &gen),
        ("mul", Box::new(|t, x| { let r = t.reshape(x, 4, 6); let s = t.slice_rows(r, 1, 2); t.mul(r, s) }), &gen),
        ("div", Box::new(|t, x| { let r = t.reshape(x, 4, 6); let s = t.slice_rows(r, 2, 3); t.div(s, r) }), &pos),
        ("step", Box::new(|t, x| { let m = t.step(x, 0.0); let s = t.square(x); t.mul(m, s) }), &gen),
        ("slice_cols", Box::new(|t, x| t.slice_cols(x, 3, 17)), &gen),
        ("slice_rows", Box::new(|t, x| { let r = t.reshape(x, 4, 6); t.slice_rows(r, 1, 3) }), &gen),
        ("reshape", Box::new(|t, x| { let r = t.reshape(x, 6, 4); t.exp(r) }), &gen),
        ("neg", Box::new(|t, x| t.neg(x)), &gen),
        ("scale", Box::new(|t, x| t.scale(x, -2.5)), &gen),
        ("offset", Box::new(|t, x| { let o = t.offset(x, 3.0); t.square(o) }), &gen),
        ("square", Box::new(|t, x| t.square(x)), &gen),
        ("sqrt", Box::new(|t, x| t.sqrt(x)), &pos),
        ("exp", Box::new(|t, x| t.exp(x)), &gen),
        ("log", Box::new(|t, x| t.log(x)), &pos),
        ("clamp", Box::new(|t, x| t.clamp(x, -10.0, 10.0)), &gen),
        ("leaky_relu", Box::new(|t, x| t.leaky_relu(x, 0.01)), &gen),
        ("mean", Box::new(|t, x| { let s = t.square(x); t.mean(s) }), &gen),
        ("sum_rows", Box::new(|t, x| { let r = t.reshape(x, 4, 6); t.sum_rows(r) }), &gen),
        ("mean_rows", Box::new(|t, x| { let r = t.reshape(x, 4, 6); t.mean_rows(r) }), &gen),
        ("sum_cols", Box::new(|t, x| { let r = t.reshape(x, 4, 6); t.sum_cols(r) }), &gen),
        ("mean_cols", Box::new(|t, x| { let r = t.reshape(x, 4, 6); t.mean_cols(r) }), &gen),
        ("matmul", Box::new(|t, x| { let a = t.slice_cols(x, 0, 12); let b = t.slice_cols(x, 12, 24); let a = t.reshape(a, 3, 4); let b = t.reshape(b, 4, 3); t.matmul(a, b) }), &gen),
        ("affine", Box::new(|t, x| { let a = t.reshape(x, 4, 6); let w = t.constant(6, 3, randn(18, 40)); let b = t.constant(1, 3, randn(3, 41)); t.affine(a, w, b) }), &gen),
        ("batch_norm_train", Box::new(|t, x| { let a = t.reshape(x, 6, 4); let g = t.constant(1, 4, randn(4, 42)); let b = t.constant(1, 4, randn(4, 43)); t.batch_norm_train(a, g, b, 1e-5) }), &gen),
        ("batch_norm_eval", Box::new(|t, x| { let a = t.reshape(x, 6, 4); let g = t.constant(1, 4, randn(4, 44)); let b = t.constant(1, 4, randn(4, 45)); t.batch_norm_eval(a, g, b, 1e-5, Arc::new(vec![0.1, 0.2, 0.3, 0.4]), Arc::new(vec![1.0, 2.0, 0.5, 3.0])) }), &gen),
        ("softmax", Box::new(|t, x| { let a = t.reshape(x, 4, 6); t.softmax(a) }), &gen),
        ("log_softmax", Box::new(|t, x| { let a = t.reshape(x, 4, 6); t.log_softmax(a) }), &gen),
        ("concat_cols", Box::new(|t, x| { let a = t.reshape(x, 4, 6); let s = t.square(a); t.concat_cols(&[a, s]) }), &gen),
        ("concat_rows", Box::new(|t, x| { let a = t.reshape(x, 4, 6); let s = t.exp(a); t.concat_rows(&[s, a]) }), &gen),
        ("gather_rows", Box::new(|t, x| { let a = t.reshape(x, 4, 6); t.gather_rows(a, Arc::new(vec![3, 0, 3, 1])) }), &gen),
        ("fft", Box::new(|t, x| { let a = t.reshape(x, 2, 12); t.fft(a) }), &gen),
        ("ifft", Box::new(|t, x| { let a = t.reshape(x, 2, 12); t.ifft(a) }), &gen),
        ("to_complex", Box::new(|t, x| t.to_complex(x)), &gen),
        ("cmul", Box::new(|t, x| { let a = t.reshape(x, 2, 12); let b = t.slice_rows(a, 1, 2); let s = t.square(a); t.cmul(s, b) }), &gen),
        ("cmul_conj", Box::new(|t, x| { let a = t.reshape(x, 2, 12); let b = t.slice_rows(a, 0, 1); let s = t.exp(a); t.cmul_conj(s, b) }), &gen),
        ("modulus", Box::new(|t, x| t.modulus(x)), &gen),
        ("cov_pairs", Box::new(|t, x| { let a = t.reshape(x, 3, 8); let s = t.square(a); t.cov_pairs(a, s, Arc::new(vec![(0, 1), (2, 2), (1, 0)]), false) }), &gen),
        ("cov_pairs_centered", Box::new(|t, x| { let a = t.reshape(x, 3, 8); let s = t.exp(a); t.cov_pairs(s, a, Arc::new(vec![(0, 1), (2, 2), (1, 1)]), true) }), &gen),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (seed, (name, build, point)) in cases.into_iter().enumerate() {
        let r = gradcheck(
            |t, x| {
                let y = build(t, x);
                weighted_sum(t, y, 100 + seed as u64)
            },
            point,
            1e-6,
            64,
            3,
        )?;
        out.push((name.to_string(), r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(builder: impl FnOnce(&mut Tape, Var) -> Var, point: &[f64]) -> f64 {
        let r = gradcheck(builder, point, 1e-6, 64, 3).unwrap();
        r.max_rel_error
    }

    #[test]
    fn identity_graph_is_bitwise() {
        let v = randn(17, 1);
        let mut t = Tape::new();
        let x = t.leaf("x", 1, 17);
        t.forward(&[(x, &v)]).unwrap();
        assert_eq!(t.value(x).unwrap(), v.as_slice());
    }

    #[test]
    fn modulus_of_three_four() {
        let mut t = Tape::new();
        let z = t.leaf("z", 1, 2);
        let m = t.modulus(z);
        t.forward(&[(z, &[3.0, 4.0])]).unwrap();
        assert_eq!(t.value(m).unwrap(), &[5.0]);
    }

    #[test]
    fn dft_round_trip() {
        let v = randn(64, 2);
        let mut t = Tape::new();
        let x = t.leaf("x", 1, 64);
        let c = t.to_complex(x);
        let f = t.fft(c);
        let b = t.ifft(f);
        t.forward(&[(x, &v)]).unwrap();
        let out = t.value(b).unwrap();
        for (k, &x) in v.iter().enumerate() {
            assert!((out[2 * k] - x).abs() <= 1e-12);
            assert!(out[2 * k + 1].abs() <= 1e-12);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf("v", 1, 3);
        let s = t.square(x);
        let y = t.sum(s);
        t.forward(&[(x, &[1.0, 2.0, 3.0])]).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.max_abs, 6.0);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf("v", 4, 5);
        let y = t.mean(x);
        t.forward(&[(x, &randn(20, 4))]).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&d| d == 1.0 / 20.0));
    }

    #[test]
    fn errors_are_reported() {
        let mut t = Tape::new();
        let x = t.leaf("x", 1, 3);
        let y = t.sum(x);
        assert!(matches!(t.backward(y), Err(Error::NotEvaluated)));
        assert!(matches!(t.forward(&[]), Err(Error::UnboundLeaf(_))));
        assert!(matches!(t.forward(&[(x, &[1.0])]), Err(Error::Shape(_))));
        t.forward(&[(x, &[1.0, 2.0, 3.0])]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NonScalar(3))));
        let a = t.leaf("a", 2, 3);
        let b = t.leaf("b", 4, 3);
        t.add(a, b);
        let err = t.forward(&[(x, &[0.0; 3]), (a, &[0.0; 6]), (b, &[0.0; 12])]);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert!(matches!(
            gradcheck(|t, x| t.square(x), &[1.0, 2.0], 1e-4, 2, 0),
            Err(Error::NonScalar(2))
        ));
    }

    #[test]
    fn replay_is_bitwise() {
        let mut t = Tape::new();
        let x = t.leaf("x", 1, 32);
        let c = t.to_complex(x);
        let f = t.fft(c);
        let m = t.modulus(f);
        let l = t.log(m);
        let y = t.sum(l);
        let v = randn(32, 5);
        t.forward(&[(x, &v)]).unwrap();
        let first = t.scalar_value(y).unwrap();
        let g1 = t.backward(y).unwrap();
        t.release();
        t.forward(&[(x, &randn(32, 6))]).unwrap();
        t.forward(&[(x, &v)]).unwrap();
        assert_eq!(first.to_bits(), t.scalar_value(y).unwrap().to_bits());
        assert_eq!(g1.grads, t.backward(y).unwrap().grads);
    }

    #[test]
    fn quadratic_form_gradcheck() {
        let n = 6;
        let a = randn(n * n, 7);
        let p = randn(n, 8);
        let err = check(
            |t, x| {
                let m = t.constant(n, n, a.clone());
                let xt = t.reshape(x, n, 1);
                let mx = t.matmul(m, xt);
                let q = t.matmul(x, mx);
                t.sum(q)
            },
            &p,
        );
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn leaky_relu_positive_region() {
        let p: Vec<f64> = randn(10, 9).iter().map(|x| x.abs() + 0.1).collect();
        let err = check(
            |t, x| {
                let y = t.leaky_relu(x, 0.01);
                let w = t.constant(1, 10, (1..=10).map(f64::from).collect());
                let z = t.mul(y, w);
                t.sum(z)
            },
            &p,
        );
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn every_primitive_passes_gradcheck() {
        for (name, r) in primitive_gradchecks().unwrap() {
            assert!(r.max_rel_error <= 1e-5, "{name}: {r:?}");
        }
    }

    #[test]
    fn backward_is_linear_in_graphs() {
        for seed in 0..10u64 {
            let v = randn(16, 200 + seed);
            let build_f = |t: &mut Tape, x: Var| {
                let e = t.exp(x);
                let c = t.to_complex(e);
                let f = t.fft(c);
                let m = t.modulus(f);
                weighted_sum(t, m, 300 + seed)
            };
            let build_g = |t: &mut Tape, x: Var| {
                let r = t.reshape(x, 4, 4);
                let s = t.softmax(r);
                let l = t.log_softmax(s);
                weighted_sum(t, l, 400 + seed)
            };
            let grad = |both: bool, which: bool| {
                let mut t = Tape::new();
                let x = t.leaf("x", 1, 16);
                let y = if both {
                    let a = build_f(&mut t, x);
                    let b = build_g(&mut t, x);
                    t.add(a, b)
                } else if which {
                    build_f(&mut t, x)
                } else {
                    build_g(&mut t, x)
                };
                t.forward(&[(x, &v)]).unwrap();
                t.backward(y).unwrap().grads[0].clone()
            };
            let sum = grad(true, false);
            let (a, b) = (grad(false, true), grad(false, false));
            for k in 0..16 {
                assert!((sum[k] - (a[k] + b[k])).abs() <= 1e-12 * (1.0 + sum[k].abs()));
            }
        }
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let (m, v) = (Arc::new(vec![0.5, -1.0, 2.0]), Arc::new(vec![2.0, 0.25, 1.0]));
        let grad_of_first_row = |batch: &[f64], rows: usize| {
            let mut t = Tape::new();
            let x = t.leaf("x", rows, 3);
            let g = t.constant(1, 3, vec![1.5, -0.5, 2.0]);
            let b = t.constant(1, 3, vec![0.1, 0.2, 0.3]);
            let y = t.batch_norm_eval(x, g, b, 1e-5, m.clone(), v.clone());
            let first = t.slice_rows(y, 0, 1);
            let s = weighted_sum(&mut t, first, 9);
            t.forward(&[(x, batch)]).unwrap();
            let out = t.value(first).unwrap().to_vec();
            (out, t.backward(s).unwrap().grads[0][..3].to_vec())
        };
        let row = randn(3, 50);
        let mut big = row.clone();
        big.extend(randn(12, 51));
        let (o1, g1) = grad_of_first_row(&row, 1);
        let (o2, g2) = grad_of_first_row(&big, 5);
        assert_eq!(o1, o2);
        assert_eq!(g1, g2);
        // affine: f(a x + (1 - a) y) = a f(x) + (1 - a) f(y)
        let other = randn(3, 52);
        let mix: Vec<f64> = row.iter().zip(&other).map(|(p, q)| 0.3 * p + 0.7 * q).collect();
        let (om, _) = grad_of_first_row(&mix, 1);
        let (oo, _) = grad_of_first_row(&other, 1);
        for k in 0..3 {
            assert!((om[k] - (0.3 * o1[k] + 0.7 * oo[k])).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_records_stats() {
        let mut t = Tape::new();
        let x = t.leaf("x", 4, 2);
        let g = t.constant(1, 2, vec![1.0, 1.0]);
        let b = t.constant(1, 2, vec![0.0, 0.0]);
        let y = t.batch_norm_train(x, g, b, 0.0);
        t.forward(&[(x, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 8.0])]).unwrap();
        let (mean, var) = t.batch_stats(y).unwrap();
        assert_eq!(mean, &[2.5, 2.0]);
        assert_eq!(var, &[1.25, 12.0]);
    }

    #[test]
    fn step_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf("x", 1, 3);
        let m = t.step(x, 1.0);
        let y = t.sum(m);
        t.forward(&[(x, &[0.5, 1.0, 2.0])]).unwrap();
        assert_eq!(t.value(m).unwrap(), &[0.0, 1.0, 1.0]);
        assert_eq!(t.backward(y).unwrap().grads[0], vec![0.0; 3]);
    }
}
