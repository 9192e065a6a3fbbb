use rand::Rng;

use super::Scalar;
use crate::{Error, Result};

/// Dense row-major multi-dimensional array.
///
/// The invariant `data.len() == shape.iter().product()` is enforced by
/// every constructor; empty extents are allowed (a zero-row matrix is a
/// valid embedding of a zero-length sequence).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Data(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(values: &[F]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Row-major rank-2 constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Uniform values in `[lo, hi)`, consuming the rng deterministically
    /// in row-major element order.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a scalar (rank-0 or single-element) tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy precision conversion (used when writing f64 verification
    /// stores into the f32 checkpoint format and back).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    /// Materialized rank-2 transpose.
    pub fn transposed(&self) -> Tensor<F> {
        debug_assert_eq!(self.rank(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// `C = opA(A) @ opB(B)` for row-major rank-2 operands, where `op` is a
/// transpose when the corresponding flag is set. `a_dims`/`b_dims` are the
/// *stored* dimensions. Returns the output data and its (m, n).
pub(crate) fn raw_matmul<F: Scalar>(
    a: &[F],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[F],
    b_dims: (usize, usize),
    trans_b: bool,
) -> (Vec<F>, (usize, usize)) {
    let (m, ka) = if trans_a {
        (a_dims.1, a_dims.0)
    } else {
        a_dims
    };
    let (kb, n) = if trans_b {
        (b_dims.1, b_dims.0)
    } else {
        b_dims
    };
    debug_assert_eq!(ka, kb, "raw_matmul inner extents");
    let k = ka;
    let mut c = vec![F::ZERO; m * n];
    match (trans_a, trans_b) {
        (false, false) => {
            // i-k-j with a contiguous accumulation row: autovectorizes.
            for i in 0..m {
                let c_row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = a[i * k + p];
                    let b_row = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        c_row[j] += a_ip * b_row[j];
                    }
                }
            }
        }
        (false, true) => {
            // Both operands row-contiguous along k: plain dot products.
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                let c_row = &mut c[i * n..(i + 1) * n];
                for (j, c_ij) in c_row.iter_mut().enumerate() {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut acc = F::ZERO;
                    for p in 0..k {
                        acc += a_row[p] * b_row[p];
                    }
                    *c_ij = acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let a_col = &a[p * m..(p + 1) * m];
                let b_row = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let a_pi = a_col[i];
                    let c_row = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        c_row[j] += a_pi * b_row[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = F::ZERO;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] = acc;
                }
            }
        }
    }
    (c, (m, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn raw_matmul_plain() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let (c, dims) = raw_matmul(&a, (2, 2), false, &b, (2, 1), false);
        assert_eq!(dims, (2, 1));
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn raw_matmul_transpose_variants_agree() {
        let a = Tensor::<f64>::new(vec![3, 2], (0..6).map(|v| v as f64 + 0.5).collect()).unwrap();
        let b = Tensor::<f64>::new(vec![3, 4], (0..12).map(|v| v as f64 - 3.0).collect()).unwrap();
        // aT @ b computed directly vs via materialized transpose.
        let (direct, dims) = raw_matmul(a.data(), (3, 2), true, b.data(), (3, 4), false);
        let at = a.transposed();
        let (via, dims2) = raw_matmul(at.data(), (2, 3), false, b.data(), (3, 4), false);
        assert_eq!(dims, dims2);
        for (x, y) in direct.iter().zip(&via) {
            assert!((x - y).abs() < 1e-12);
        }
        // a @ bT vs materialized.
        let c = Tensor::<f64>::new(vec![4, 2], (0..8).map(|v| v as f64 * 0.25).collect()).unwrap();
        let (direct, _) = raw_matmul(a.data(), (3, 2), false, c.data(), (4, 2), true);
        let ct = c.transposed();
        let (via, _) = raw_matmul(a.data(), (3, 2), false, ct.data(), (2, 4), false);
        for (x, y) in direct.iter().zip(&via) {
            assert!((x - y).abs() < 1e-12);
        }
        // aT @ dT: a stored (3,2), d stored (4,3) → (2,3)@(3,4) = (2,4)
        let d = Tensor::<f64>::new(vec![4, 3], (0..12).map(|v| v as f64 * 0.7).collect()).unwrap();
        let (direct, _) = raw_matmul(a.data(), (3, 2), true, d.data(), (4, 3), true);
        let dt = d.transposed();
        let (via, _) = raw_matmul(at.data(), (2, 3), false, dt.data(), (3, 4), false);
        for (x, y) in direct.iter().zip(&via) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
