//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! Every differentiable computation in the crate is written against
//! [`Tape`]: leaves are registered from [`Tensor`] values, primitive ops are
//! recorded as they execute, and [`Tape::backward`] replays the record in
//! reverse to produce gradients. A tape is built fresh for every forward pass.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_many, DEFAULT_FD_STEP};
pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Variance epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Mutable access to the gradient slot, allocating zeros if empty.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Simultaneous access to values and the (allocated) gradient slot.
    pub fn values_and_grad_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let n = self.values.len();
        let grad = self.grad.get_or_insert_with(|| vec![0.0; n]);
        (&mut self.values, grad)
    }

    /// Adds `delta` into the gradient slot.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(self.clone());
        let b = tape.constant(other.clone());
        let c = tape.matmul(a, b)?;
        Ok(tape.tensor(c))
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(self.clone());
        let y = tape.softmax_rows(x)?;
        Ok(tape.tensor(y))
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(self.clone());
        let g = tape.constant(gain.clone());
        let b = tape.constant(bias.clone());
        let y = tape.layer_norm(x, g, b)?;
        Ok(tape.tensor(y))
    }
}

/// Cosine similarity of two equal-length vectors.
///
/// Returns 0 when either norm is below [`COSINE_EPS`].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    Ok(kernels::cosine(u, v).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{a} != {b} (tol {})", $tol);
        }};
    }

    #[test]
    fn new_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.5, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap().values(), a.values());

        let lhs = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let rhs = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let out = lhs.matmul(&rhs).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.values(), &[2.0, 4.0]);

        let zero = Tensor::zeros(&[2, 2]);
        assert!(zero.matmul(&a).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0]]).unwrap();
        let y = x.softmax_rows().unwrap();
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_close!(y.row(1)[0], 2.0 / 3.0, 1e-15);
        assert_close!(y.row(1)[1], 1.0 / 3.0, 1e-15);

        let single = Tensor::from_rows(&[vec![-7.5]]).unwrap();
        assert_eq!(single.softmax_rows().unwrap().values(), &[1.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(x.softmax_rows(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);

        let constant = Tensor::from_rows(&[vec![3.0, 3.0]]).unwrap();
        assert_eq!(constant.layer_norm(&ones, &zeros).unwrap().values(), &[0.0, 0.0]);

        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = x.layer_norm(&ones, &zeros).unwrap();
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert_close!(y.values()[0], expected, 1e-15);
        assert_close!(y.values()[1], -expected, 1e-15);

        let bias = Tensor::vector(vec![0.25, -4.0]);
        let y = x.layer_norm(&Tensor::zeros(&[2]), &bias).unwrap();
        assert_eq!(y.values(), &[0.25, -4.0]);
    }

    #[test]
    fn layer_norm_needs_two_columns() {
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let g = Tensor::filled(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert!(x.layer_norm(&g, &b).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -2.0, 5.0];
        assert_close!(cosine_similarity(&v, &v).unwrap(), 1.0, 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_close!(
            cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            1e-15
        );
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }
}
