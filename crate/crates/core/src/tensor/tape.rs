use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{kernels, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    AddConst(usize),
    MulConst(usize, Vec<f64>),
    Softmax(usize),
    LogSoftmaxPick {
        x: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Entropy {
        x: usize,
        log_probs: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    MeanPool {
        x: usize,
        spans: Vec<Range<usize>>,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    Sum(usize),
    WeightedSum {
        x: usize,
        weights: Vec<f64>,
    },
    Cosine(usize, usize),
    AdjacentCosines(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed operations; replayed in reverse by
/// [`Tape::backward`].
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        [n] => Ok((1, n)),
        _ => Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Gradient buffer for input `i`, allocated on first use; `None` when the
/// input does not require a gradient.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let n = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![0.0; n]))
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Backward("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Registers a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor.shape, tensor.values, Op::Leaf, rg)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.shape, tensor.values, Op::Leaf, false)
    }

    /// Registers a leaf that always receives a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.shape, tensor.values, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.index];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// Value of a single-element variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.index].value[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into the tensor's gradient slot.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor, scale: f64) -> Result<()> {
        if let Some(g) = self.grad(v) {
            if g.len() != tensor.numel() {
                return Err(Error::Shape {
                    op: "accumulate_into",
                    lhs: self.shape(v).to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            for (dst, src) in tensor.grad_mut().iter_mut().zip(g) {
                *dst += scale * src;
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value, m, k, n);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(vec![m, n], value, Op::MatMul(ia, ib), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let value = kernels::matmul_nt(&self.nodes[ia].value, &self.nodes[ib].value, m, k, n);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(vec![m, n], value, Op::MatMulNt(ia, ib), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[ia].shape.clone(),
                rhs: self.nodes[ib].shape.clone(),
            });
        }
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((ia, ib, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary("add", a, b, |x, y| x + y)?;
        let (shape, rg) = (self.nodes[ia].shape.clone(), self.rg(&[ia, ib]));
        Ok(self.push(shape, value, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary("sub", a, b, |x, y| x - y)?;
        let (shape, rg) = (self.nodes[ia].shape.clone(), self.rg(&[ia, ib]));
        Ok(self.push(shape, value, Op::Sub(ia, ib), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary("mul", a, b, |x, y| x * y)?;
        let (shape, rg) = (self.nodes[ia].shape.clone(), self.rg(&[ia, ib]));
        Ok(self.push(shape, value, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.iter().map(|x| x * factor).collect();
        let (shape, rg) = (self.nodes[ia].shape.clone(), self.rg(&[ia]));
        Ok(self.push(shape, value, Op::Scale(ia, factor), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (_, n) = dims2("add_row", &self.nodes[ix].shape)?;
        if self.nodes[ib].value.len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.nodes[ix].shape.clone(),
                rhs: self.nodes[ib].shape.clone(),
            });
        }
        let b = &self.nodes[ib].value;
        let value = self.nodes[ix]
            .value
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let (shape, rg) = (self.nodes[ix].shape.clone(), self.rg(&[ix, ib]));
        Ok(self.push(shape, value, Op::AddRow(ix, ib), rg))
    }

    /// Adds a constant (non-differentiable) tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let ix = self.idx(x)?;
        if self.nodes[ix].value.len() != c.len() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: self.nodes[ix].shape.clone(),
                rhs: vec![c.len()],
            });
        }
        let value = self.nodes[ix].value.iter().zip(c).map(|(x, y)| x + y).collect();
        let (shape, rg) = (self.nodes[ix].shape.clone(), self.rg(&[ix]));
        Ok(self.push(shape, value, Op::AddConst(ix), rg))
    }

    /// Multiplies elementwise by a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let ix = self.idx(x)?;
        if self.nodes[ix].value.len() != c.len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.nodes[ix].shape.clone(),
                rhs: vec![c.len()],
            });
        }
        let value = self.nodes[ix].value.iter().zip(&c).map(|(x, y)| x * y).collect();
        let (shape, rg) = (self.nodes[ix].shape.clone(), self.rg(&[ix]));
        Ok(self.push(shape, value, Op::MulConst(ix, c), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; later
    /// columns get weight exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, n) = dims2("softmax_rows", &self.nodes[ix].shape)?;
        if n == 0 {
            return Err(Error::Shape {
                op: "softmax_rows",
                lhs: self.nodes[ix].shape.clone(),
                rhs: vec![],
            });
        }
        let xv = &self.nodes[ix].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let live = if causal { (i + 1).min(n) } else { n };
            check_finite("softmax_rows", &xv[i * n..i * n + live])?;
            kernels::softmax_prefix(&xv[i * n..(i + 1) * n], live, &mut value[i * n..(i + 1) * n]);
        }
        let (shape, rg) = (self.nodes[ix].shape.clone(), self.rg(&[ix]));
        Ok(self.push(shape, value, Op::Softmax(ix), rg))
    }

    /// For each row `i`, `log softmax(x_i)[targets[i]]`. Output has one
    /// entry per row.
    pub fn log_softmax_pick(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, n) = dims2("log_softmax_pick", &self.nodes[ix].shape)?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "log_softmax_pick",
                lhs: self.nodes[ix].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::InvalidArgument(format!(
                "log_softmax_pick: target {t} out of range for {n} classes"
            )));
        }
        let xv = &self.nodes[ix].value;
        check_finite("log_softmax_pick", xv)?;
        let mut probs = vec![0.0; m * n];
        let mut value = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (p, &z) in p.iter_mut().zip(row) {
                *p = (z - max).exp();
                sum += *p;
            }
            let inv = 1.0 / sum;
            p.iter_mut().for_each(|p| *p *= inv);
            value.push(row[t] - max - sum.ln());
        }
        let rg = self.rg(&[ix]);
        Ok(self.push(
            vec![m],
            value,
            Op::LogSoftmaxPick {
                x: ix,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Shannon entropy (nats) of `softmax(x_i)` for every row.
    pub fn softmax_entropy_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, n) = dims2("softmax_entropy_rows", &self.nodes[ix].shape)?;
        let xv = &self.nodes[ix].value;
        check_finite("softmax_entropy_rows", xv)?;
        let mut log_probs = Vec::with_capacity(m * n);
        let mut value = Vec::with_capacity(m);
        for row in xv.chunks(n) {
            let lp = kernels::log_softmax(row);
            let h: f64 = -lp
                .iter()
                .map(|&l| {
                    let p = l.exp();
                    if p > 0.0 {
                        p * l
                    } else {
                        0.0
                    }
                })
                .sum::<f64>();
            value.push(h.max(0.0));
            log_probs.extend(lp);
        }
        let rg = self.rg(&[ix]);
        Ok(self.push(vec![m], value, Op::Entropy { x: ix, log_probs }, rg))
    }

    /// Per-row standardization followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let (m, n) = dims2("layer_norm", &self.nodes[ix].shape)?;
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm needs at least 2 columns, got {n}"
            )));
        }
        if self.nodes[ig].value.len() != n || self.nodes[ib].value.len() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.nodes[ix].shape.clone(),
                rhs: self.nodes[ig].shape.clone(),
            });
        }
        let xv = &self.nodes[ix].value;
        check_finite("layer_norm", xv)?;
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                xhat[i * n + j] = xh;
                value[i * n + j] = xh * g[j] + b[j];
            }
        }
        let (shape, rg) = (self.nodes[ix].shape.clone(), self.rg(&[ix, ig, ib]));
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.nodes[ix].value.iter().map(|&v| kernels::gelu(v)).collect();
        let (shape, rg) = (self.nodes[ix].shape.clone(), self.rg(&[ix]));
        Ok(self.push(shape, value, Op::Gelu(ix), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.nodes[ix].value.iter().map(|&v| kernels::sigmoid(v)).collect();
        let (shape, rg) = (self.nodes[ix].shape.clone(), self.rg(&[ix]));
        Ok(self.push(shape, value, Op::Sigmoid(ix), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        };
        let (m, _) = dims2("concat_cols", &self.nodes[first].shape)?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = dims2("concat_cols", &self.nodes[i].shape)?;
            if r != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[first].shape.clone(),
                    rhs: self.nodes[i].shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&i, &w) in idx.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[i].value[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(&idx);
        Ok(self.push(vec![m, total], value, Op::ConcatCols(idx), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, n) = dims2("slice_cols", &self.nodes[ix].shape)?;
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.nodes[ix].shape.clone(),
                rhs: vec![start, len],
            });
        }
        let xv = &self.nodes[ix].value;
        let value = (0..m)
            .flat_map(|r| xv[r * n + start..r * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(&[ix]);
        Ok(self.push(vec![m, len], value, Op::SliceCols { x: ix, start }, rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (v, d) = dims2("gather_rows", &self.nodes[it].shape)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: id {bad} out of range for {v} rows"
            )));
        }
        let tv = &self.nodes[it].value;
        let value = ids
            .iter()
            .flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(&[it]);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows by index (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, d) = dims2("select_rows", &self.nodes[ix].shape)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidArgument(format!(
                "select_rows: row {bad} out of range for {m} rows"
            )));
        }
        let xv = &self.nodes[ix].value;
        let value = rows
            .iter()
            .flat_map(|&r| xv[r * d..(r + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(&[ix]);
        Ok(self.push(
            vec![rows.len(), d],
            value,
            Op::SelectRows {
                x: ix,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of the rows in each span; one output row per span.
    pub fn mean_pool_rows(&mut self, x: Var, spans: &[Range<usize>]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, d) = dims2("mean_pool_rows", &self.nodes[ix].shape)?;
        for s in spans {
            if s.start >= s.end || s.end > m {
                return Err(Error::InvalidArgument(format!(
                    "mean_pool_rows: invalid span {s:?} for {m} rows"
                )));
            }
        }
        let xv = &self.nodes[ix].value;
        let mut value = vec![0.0; spans.len() * d];
        for (si, s) in spans.iter().enumerate() {
            let out = &mut value[si * d..(si + 1) * d];
            for r in s.clone() {
                for (o, &v) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            let inv = 1.0 / s.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[ix]);
        Ok(self.push(
            vec![spans.len(), d],
            value,
            Op::MeanPool {
                x: ix,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.iter().sum();
        let rg = self.rg(&[ix]);
        Ok(self.push(vec![], vec![s], Op::Sum(ix), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).iter().product::<usize>();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ weights_i · x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let ix = self.idx(x)?;
        if self.nodes[ix].value.len() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.nodes[ix].shape.clone(),
                rhs: vec![weights.len()],
            });
        }
        let s = kernels::dot(&self.nodes[ix].value, weights);
        let rg = self.rg(&[ix]);
        Ok(self.push(
            vec![],
            vec![s],
            Op::WeightedSum {
                x: ix,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Cosine similarity of two tensors viewed as flat vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let (iu, iv) = (self.idx(u)?, self.idx(v)?);
        let (uv, vv) = (&self.nodes[iu].value, &self.nodes[iv].value);
        if uv.len() != vv.len() || uv.is_empty() {
            return Err(Error::Shape {
                op: "cosine",
                lhs: self.nodes[iu].shape.clone(),
                rhs: self.nodes[iv].shape.clone(),
            });
        }
        let c = kernels::cosine(uv, vv).0;
        let rg = self.rg(&[iu, iv]);
        Ok(self.push(vec![], vec![c], Op::Cosine(iu, iv), rg))
    }

    /// `cos(x_i, x_{i+1})` for consecutive rows; output length `rows − 1`.
    pub fn adjacent_cosines(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, d) = dims2("adjacent_cosines", &self.nodes[ix].shape)?;
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "adjacent_cosines needs at least 2 rows, got {m}"
            )));
        }
        let xv = &self.nodes[ix].value;
        let value = (0..m - 1)
            .map(|i| kernels::cosine(&xv[i * d..(i + 1) * d], &xv[(i + 1) * d..(i + 2) * d]).0)
            .collect();
        let rg = self.rg(&[ix]);
        Ok(self.push(vec![m - 1], value, Op::AdjacentCosines(ix), rg))
    }

    /// Reverse pass from a single-element `loss`. Gradients are retrievable
    /// with [`Tape::grad`]; leaves not reachable from `loss` have none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Backward("loss is not recorded on this tape".into()));
        }
        let ln = &self.nodes[loss.index];
        if ln.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for idx in (0..=loss.index).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        macro_rules! acc {
            ($i:expr) => {
                slot(nodes, grads, $i)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = acc!(*a) {
                    // dA = dC · Bᵀ
                    kernels::matmul_nt_acc(g, &nodes[*b].value, m, n, k, da);
                }
                if let Some(db) = acc!(*b) {
                    // dB = Aᵀ · dC
                    kernels::matmul_tn_acc(&nodes[*a].value, g, m, k, n, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if let Some(da) = acc!(*a) {
                    // dA = dC · B
                    kernels::matmul_acc(g, &nodes[*b].value, m, n, k, da);
                }
                if let Some(db) = acc!(*b) {
                    // dB = dCᵀ · A
                    kernels::matmul_tn_acc(g, &nodes[*a].value, m, n, k, db);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = acc!(*a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(&nodes[*b].value) {
                        *d += g * y;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(&nodes[*a].value) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g * f);
                }
            }
            Op::AddRow(x, b) => {
                let n = nodes[*b].value.len();
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*b) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddConst(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::MulConst(x, c) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, g), c) in dx.iter_mut().zip(g).zip(c) {
                        *d += g * c;
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = acc!(*x) {
                    let n = *node.shape.last().unwrap_or(&1);
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let inner = kernels::dot(grow, yrow);
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - inner);
                        }
                    }
                }
            }
            Op::LogSoftmaxPick { x, targets, probs } => {
                if let Some(dx) = acc!(*x) {
                    let n = probs.len() / targets.len().max(1);
                    for (i, &t) in targets.iter().enumerate() {
                        let gi = g[i];
                        let drow = &mut dx[i * n..(i + 1) * n];
                        for (d, p) in drow.iter_mut().zip(&probs[i * n..(i + 1) * n]) {
                            *d -= gi * p;
                        }
                        drow[t] += gi;
                    }
                }
            }
            Op::Entropy { x, log_probs } => {
                if let Some(dx) = acc!(*x) {
                    let m = node.value.len();
                    let n = log_probs.len() / m.max(1);
                    for i in 0..m {
                        let h = node.value[i];
                        let gi = g[i];
                        for (d, &l) in dx[i * n..(i + 1) * n].iter_mut().zip(&log_probs[i * n..(i + 1) * n]) {
                            let p = l.exp();
                            if p > 0.0 {
                                *d -= gi * p * (l + h);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[*gain].value.len();
                let gv = &nodes[*gain].value;
                if let Some(dg) = acc!(*gain) {
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, gi), xh) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += gi * xh;
                        }
                    }
                }
                if let Some(db) = acc!(*bias) {
                    for grow in g.chunks(n) {
                        db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let mut dxhat = vec![0.0; n];
                    for (i, ((drow, grow), xrow)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = kernels::dot(&dxhat, xrow) / n as f64;
                        for j in 0..n {
                            drow[j] += rstd[i] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, gi), &xi) in dx.iter_mut().zip(g).zip(&nodes[*x].value) {
                        *d += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, gi), &y) in dx.iter_mut().zip(g).zip(&node.value) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = *nodes[p].shape.last().unwrap_or(&1);
                    if let Some(dp) = acc!(p) {
                        for (r, drow) in dp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            drow.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let n = *nodes[*x].shape.last().unwrap_or(&1);
                let len = node.shape[1];
                if let Some(dx) = acc!(*x) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        let dst = &mut dx[r * n + start..r * n + start + len];
                        dst.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                if let Some(dt) = acc!(*table) {
                    for (grow, &id) in g.chunks(d).zip(ids) {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(grow).for_each(|(a, g)| *a += g);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let d = node.shape[1];
                if let Some(dx) = acc!(*x) {
                    for (grow, &r) in g.chunks(d).zip(rows) {
                        let dst = &mut dx[r * d..(r + 1) * d];
                        dst.iter_mut().zip(grow).for_each(|(a, g)| *a += g);
                    }
                }
            }
            Op::MeanPool { x, spans } => {
                let d = node.shape[1];
                if let Some(dx) = acc!(*x) {
                    for (grow, s) in g.chunks(d).zip(spans) {
                        let inv = 1.0 / s.len() as f64;
                        for r in s.clone() {
                            let dst = &mut dx[r * d..(r + 1) * d];
                            dst.iter_mut().zip(grow).for_each(|(a, g)| *a += g * inv);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w);
                }
            }
            Op::Cosine(u, v) => {
                let (uv, vv) = (&nodes[*u].value, &nodes[*v].value);
                if u == v {
                    // cos(u, u) is constant wherever it is defined.
                    return;
                }
                let mut du = vec![0.0; uv.len()];
                let mut dv = vec![0.0; vv.len()];
                kernels::cosine_backward(uv, vv, g[0], Some(&mut du), Some(&mut dv));
                if let Some(d) = acc!(*u) {
                    d.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
                }
                if let Some(d) = acc!(*v) {
                    d.iter_mut().zip(&dv).for_each(|(a, b)| *a += b);
                }
            }
            Op::AdjacentCosines(x) => {
                let d = nodes[*x].shape[1];
                let xv = &nodes[*x].value;
                if let Some(dx) = acc!(*x) {
                    for (i, &gi) in g.iter().enumerate() {
                        let (lo, hi) = dx.split_at_mut((i + 1) * d);
                        kernels::cosine_backward(
                            &xv[i * d..(i + 1) * d],
                            &xv[(i + 1) * d..(i + 2) * d],
                            gi,
                            Some(&mut lo[i * d..]),
                            Some(&mut hi[..d]),
                        );
                    }
                }
            }
        }
    }
}
