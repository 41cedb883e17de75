//! Adam with bias correction, and Polyak (soft) target-network updates.

use crate::nn::Matrix;
use crate::num::Scalar;

/// First and second moment accumulators, one pair per parameter tensor,
/// in the same fixed order the owning network enumerates its tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero-initialized state shaped like the given tensors.
    pub fn new(shapes: &[&Matrix<T>]) -> Self {
        Self::with_hyperparams(shapes, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(shapes: &[&Matrix<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Matrix<T>> = shapes
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a parameter list.
///
/// `params` and `grads` pair tensors with their names so a non-finite
/// gradient aborts naming the offending layer. Increments the shared step
/// counter once per call.
pub fn adam_step<T: Scalar>(
    params: &mut [(&'static str, &mut Matrix<T>)],
    grads: &[(&'static str, &Matrix<T>)],
    state: &mut AdamState<T>,
    lr: T,
) -> crate::Result<()> {
    assert_eq!(params.len(), grads.len(), "param/grad arity mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state arity mismatch");

    for (name, g) in grads {
        g.check_finite(&format!("gradient of {name}"))?;
    }

    state.step += 1;
    let bias1 = T::from_f64(1.0 - state.beta1.powi(state.step as i32));
    let bias2 = T::from_f64(1.0 - state.beta2.powi(state.step as i32));
    let beta1 = T::from_f64(state.beta1);
    let beta2 = T::from_f64(state.beta2);
    let one = T::one();
    let eps = T::from_f64(state.eps);

    for (idx, ((_, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for ((pv, mv), (vv, &gv)) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(g.data()))
        {
            *mv = beta1 * *mv + (one - beta1) * gv;
            *vv = beta2 * *vv + (one - beta2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Polyak update `target = (1 - tau) * target + tau * online`.
///
/// `tau = 1` copies the online network; `tau = 0` is a no-op.
pub fn soft_update<T: Scalar>(target: &mut [&mut Matrix<T>], online: &[&Matrix<T>], tau: T) {
    assert_eq!(target.len(), online.len(), "network arity mismatch");
    let keep = T::one() - tau;
    for (t, o) in target.iter_mut().zip(online) {
        assert_eq!(t.shape(), o.shape(), "network tensor shape mismatch");
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = keep * *tv + tau * ov;
        }
    }
}
