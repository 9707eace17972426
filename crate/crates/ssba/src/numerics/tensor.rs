//! Dense row-major tensors over `f64` and the numerics error type.
//!
//! Complex quantities elsewhere in the crate are carried as paired
//! real/imaginary tensors; this module only knows about real storage.

use thiserror::Error;

/// Errors produced by tensor construction, tape operations, and the optimizer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op}: dimension mismatch {left:?} vs {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch normalization needs a batch of at least 2 in training mode, got {got}")]
    BatchTooSmall { got: usize },
    #[error("complex modulus {modulus:e} under floor {floor:e} at entry {index}")]
    ModulusUnderflow {
        index: usize,
        modulus: f64,
        floor: f64,
    },
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite gradient in optimizer step (parameter {param}, flat index {index})")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating length and finiteness of every entry.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-1 scalar wrapper (shape `[1]`).
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extracts the single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// The two dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2, "dims2() on non-matrix tensor");
        (self.shape[0], self.shape[1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Fixed row-block size for chunked GEMM dispatch. Output blocks are
/// disjoint and the blocking never depends on the worker count, so results
/// are bit-identical for any number of threads.
const GEMM_ROW_BLOCK: usize = 128;

#[derive(Clone, Copy)]
struct RawParts {
    a: *const f64,
    b: *const f64,
    c: *mut f64,
}
unsafe impl Send for RawParts {}
unsafe impl Sync for RawParts {}

/// `C = alpha * op(A) * op(B) + beta * C` over raw strides, split into fixed
/// row blocks of the output and run in parallel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let raw = RawParts {
        a: a.as_ptr(),
        b: b.as_ptr(),
        c: c.as_mut_ptr(),
    };
    let blocks: Vec<(usize, usize)> = (0..m)
        .step_by(GEMM_ROW_BLOCK)
        .map(|r0| (r0, (r0 + GEMM_ROW_BLOCK).min(m)))
        .collect();
    let run_block = |&(r0, r1): &(usize, usize)| {
        let raw = raw;
        unsafe {
            matrixmultiply::dgemm(
                r1 - r0,
                k,
                n,
                alpha,
                raw.a.offset(r0 as isize * rsa),
                rsa,
                csa,
                raw.b,
                rsb,
                csb,
                beta,
                raw.c.offset(r0 as isize * rsc),
                rsc,
                csc,
            );
        }
    };
    if blocks.len() == 1 {
        run_block(&blocks[0]);
    } else {
        use rayon::prelude::*;
        blocks.par_iter().for_each(run_block);
    }
}

/// `C += A[m×k] · B[k×n]`, all row-major.
pub(crate) fn mm_nn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(
        m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 1.0, c, n as isize, 1,
    );
}

/// `C += A[m×k] · Bᵀ` where B is stored row-major as `[n×k]`.
pub(crate) fn mm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(
        m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, 1.0, c, n as isize, 1,
    );
}

/// `C += Aᵀ · B[k×n]` where A is stored row-major as `[k×m]`.
pub(crate) fn mm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(
        m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, 1.0, c, n as isize, 1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(
            err,
            NumericsError::DataLength {
                expected: 6,
                got: 5,
                ..
            }
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap_err();
        assert_eq!(err, NumericsError::NonFinite { index: 1 });
        let err = Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).unwrap_err();
        assert_eq!(err, NumericsError::NonFinite { index: 0 });
    }

    #[test]
    fn gemm_matches_triple_loop_across_blocks() {
        // Sizes straddling the row-block boundary, vs. a naive oracle.
        for &(m, k, n) in &[(3usize, 4usize, 2usize), (130, 7, 5), (256, 3, 9)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut c = vec![0.0; m * n];
            mm_nn_acc(m, k, n, &a, &b, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[i * k + p] * b[p * n + j];
                    }
                    assert!((c[i * n + j] - s).abs() < 1e-12, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn gemm_transposed_variants_match_oracle() {
        let (m, k, n) = (5usize, 6usize, 4usize);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.17).sin()).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.29).cos()).collect(); // [n×k]
        let mut c = vec![0.0; m * n];
        mm_nt_acc(m, k, n, &a, &bt, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * bt[j * k + p];
                }
                assert!((c[i * n + j] - s).abs() < 1e-12);
            }
        }
        let at: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.23).sin()).collect(); // [k×m]
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut c = vec![0.0; m * n];
        mm_tn_acc(m, k, n, &at, &b, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += at[p * m + i] * b[p * n + j];
                }
                assert!((c[i * n + j] - s).abs() < 1e-12);
            }
        }
    }
}
