//! Dense and graph-convolution layers with hand-written reverse-mode
//! gradients.

use serde::{Deserialize, Serialize};

use crate::nn::Matrix;
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply<T: Scalar>(self, pre: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Relu => pre.map(|v| v.max(T::zero())),
            Activation::Linear => pre.clone(),
        }
    }

    /// Upstream gradient through the activation, given the pre-activation.
    /// The ReLU subgradient at exactly zero is taken as zero.
    fn backprop<T: Scalar>(self, grad_out: &Matrix<T>, pre: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Relu => grad_out.zip_map(pre, |g, p| {
                if p > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }),
            Activation::Linear => grad_out.clone(),
        }
    }
}

/// Fully connected layer: `out = act(x W + b)`, applied row-wise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
    pub act: Activation,
}

/// Intermediates one dense forward pass keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
}

impl<T: Scalar> DenseCache<T> {
    /// Pre-activation values, exposed so numerical checks can verify the
    /// forward pass sits clear of the ReLU kink.
    pub(crate) fn pre(&self) -> &Matrix<T> {
        &self.pre
    }
}

impl<T: Scalar> GraphConvCache<T> {
    pub(crate) fn pre(&self) -> &Matrix<T> {
        &self.pre
    }
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(w: Matrix<T>, b: Matrix<T>, act: Activation) -> Self {
        assert_eq!(b.shape(), (1, w.cols()), "bias shape must be 1 x out_dim");
        Self { w, b, act }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        self.act.apply(&x.matmul(&self.w).add_row_broadcast(&self.b))
    }

    pub fn forward_cached(&self, x: &Matrix<T>) -> (Matrix<T>, DenseCache<T>) {
        let pre = x.matmul(&self.w).add_row_broadcast(&self.b);
        let out = self.act.apply(&pre);
        (
            out,
            DenseCache {
                input: x.clone(),
                pre,
            },
        )
    }

    /// Returns `(grad_w, grad_b, grad_input)` for the cached forward pass.
    pub fn backward(
        &self,
        cache: &DenseCache<T>,
        grad_out: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let grad_pre = self.act.backprop(grad_out, &cache.pre);
        let grad_w = cache.input.transpose().matmul(&grad_pre);
        let grad_b = grad_pre.col_sum();
        let grad_in = grad_pre.matmul(&self.w.transpose());
        (grad_w, grad_b, grad_in)
    }
}

/// Graph convolution: `out = relu(anorm x W + b)` where `anorm` is the
/// symmetric degree-normalized adjacency with self-loops.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphConvLayer<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct GraphConvCache<T> {
    /// `anorm * x`, reused as the weight-gradient left factor.
    ax: Matrix<T>,
    pre: Matrix<T>,
}

impl<T: Scalar> GraphConvLayer<T> {
    pub fn new(w: Matrix<T>, b: Matrix<T>) -> Self {
        assert_eq!(b.shape(), (1, w.cols()), "bias shape must be 1 x out_dim");
        Self { w, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, anorm: &Matrix<T>, x: &Matrix<T>) -> Matrix<T> {
        self.forward_cached(anorm, x).0
    }

    pub fn forward_cached(
        &self,
        anorm: &Matrix<T>,
        x: &Matrix<T>,
    ) -> (Matrix<T>, GraphConvCache<T>) {
        assert_eq!(anorm.rows(), anorm.cols(), "anorm must be square");
        assert_eq!(anorm.cols(), x.rows(), "anorm and feature rows mismatch");
        let ax = anorm.matmul(x);
        let pre = ax.matmul(&self.w).add_row_broadcast(&self.b);
        let out = Activation::Relu.apply(&pre);
        (out, GraphConvCache { ax, pre })
    }

    /// Returns `(grad_w, grad_b, grad_x)` for the cached forward pass.
    ///
    /// With `delta` the gradient at the pre-activation:
    /// `grad_w = (anorm x)^T delta` and `grad_x = anorm^T delta W^T`, so the
    /// aggregation step propagates gradient back through the graph edges.
    pub fn backward(
        &self,
        anorm: &Matrix<T>,
        cache: &GraphConvCache<T>,
        grad_out: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let delta = Activation::Relu.backprop(grad_out, &cache.pre);
        let grad_w = cache.ax.transpose().matmul(&delta);
        let grad_b = delta.col_sum();
        let grad_x = anorm.transpose().matmul(&delta.matmul(&self.w.transpose()));
        (grad_w, grad_b, grad_x)
    }
}
