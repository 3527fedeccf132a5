//! Dense 64-bit arrays, a recorded differentiation tape and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Binder, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{FbsError, Result};

/// Matrix product of two rank-2 tensors.
///
/// ```
/// use fbs_core::numerics::{matmul, Tensor};
///
/// let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
/// let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
/// assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
/// ```
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(FbsError::Shape(format!("matmul {sa:?} × {sb:?}")));
    }
    let c = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
    Tensor::new(vec![sa[0], sb[1]], c)
}

/// Softmax over the last axis, computed with max subtraction.
pub fn stable_softmax(x: &Tensor) -> Tensor {
    let (_, n) = x.dims2();
    let mut out = x.data().to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            kernels::softmax_inplace(row);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
