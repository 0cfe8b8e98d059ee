//! Differentiable spatiotemporal primitives.
//!
//! Pure functions (`conv3d_forward`, `batchnorm`, ...) implement the math;
//! the small stateful layers in [`layers`] cache activations for the
//! backward pass and own their parameters.

pub mod conv;
pub mod layers;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod reference;
pub mod se;

pub use conv::{
    conv3d_backward, conv3d_forward, spatial_dwconv, temporal_dwconv, ConvLayer, ConvMode, ConvSpec,
};
pub use linear::Linear;
pub use loss::{softmax, softmax_cross_entropy};
pub use norm::{batchnorm, batchnorm_backward, batchnorm_infer, BatchNormCache, BatchNormState};
pub use pool::{global_avg_pool, global_avg_pool_backward, spatial_maxpool2, spatial_maxpool2_backward};
pub use se::{se_block, se_reduced_width, SeWeights};

use serde::{Deserialize, Serialize};

/// Forward-pass mode; only batch normalization distinguishes the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Swish,
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` where `op(A)` is
/// `m x k` and `op(B)` is `k x n`. `trans_a` means `A` is stored `k x m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths; the strides describe dense row/column-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::gemm;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
