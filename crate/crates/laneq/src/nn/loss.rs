//! Masked mean squared error.

use crate::nn::Matrix;
use crate::num::Scalar;

/// Selection-masked MSE over a Q-value matrix.
///
/// `loss = sum(sel * (pred - target)^2) / max(1, count)` where `count` is
/// the number of selected entries; the returned gradient with respect to
/// `pred` is exactly zero wherever `sel = 0`, so padded slots, non-CAV rows
/// and untaken actions cannot leak learning signal.
pub fn masked_mse<T: Scalar>(
    pred: &Matrix<T>,
    target: &Matrix<T>,
    sel: &Matrix<T>,
) -> (T, Matrix<T>) {
    assert_eq!(pred.shape(), target.shape(), "masked_mse shape mismatch");
    assert_eq!(pred.shape(), sel.shape(), "masked_mse mask shape mismatch");

    let count: T = sel.data().iter().copied().sum();
    let denom = count.max(T::one());
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    for i in 0..pred.rows() {
        let (p, t, s) = (pred.row(i), target.row(i), sel.row(i));
        let g = grad.row_mut(i);
        for j in 0..p.len() {
            if s[j] == T::zero() {
                continue;
            }
            let d = p[j] - t[j];
            loss = loss + s[j] * d * d;
            g[j] = T::from_f64(2.0) * s[j] * d / denom;
        }
    }
    (loss / denom, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_selected_entry_matches_hand_value() {
        let pred = Matrix::from_rows(&[vec![2.0]]);
        let target = Matrix::from_rows(&[vec![0.0]]);
        let sel = Matrix::from_rows(&[vec![1.0]]);
        let (loss, grad) = masked_mse(&pred, &target, &sel);
        assert_eq!(loss, 4.0);
        assert_eq!(grad.get(0, 0), 4.0);
    }

    #[test]
    fn empty_selection_gives_zero_loss_and_gradient() {
        let pred = Matrix::from_rows(&[vec![5.0, -3.0]]);
        let target = Matrix::zeros(1, 2);
        let sel = Matrix::zeros(1, 2);
        let (loss, grad) = masked_mse(&pred, &target, &sel);
        assert_eq!(loss, 0.0);
        assert_eq!(grad.abs_max(), 0.0);
    }

    #[test]
    fn unselected_entries_never_contribute() {
        let pred = Matrix::from_rows(&[vec![1.0, 100.0], vec![3.0, -100.0]]);
        let target = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let sel = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let (loss, grad) = masked_mse(&pred, &target, &sel);
        // (1 + 4) / 2 selected entries.
        assert_eq!(loss, 2.5);
        assert_eq!(grad.get(0, 1), 0.0);
        assert_eq!(grad.get(1, 1), 0.0);
        assert_eq!(grad.get(0, 0), 1.0);
        assert_eq!(grad.get(1, 0), 2.0);
    }

    #[test]
    fn normalization_uses_selected_count_not_size() {
        // One selected entry out of six: denominator is 1, not 6.
        let pred = Matrix::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let target = Matrix::zeros(2, 3);
        let mut sel = Matrix::zeros(2, 3);
        sel.set(0, 0, 1.0);
        let (loss, _) = masked_mse(&pred, &target, &sel);
        assert_eq!(loss, 9.0);
    }
}
