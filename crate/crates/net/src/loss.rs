//! Weighted binary cross-entropy on logits and pixel accuracy.

use ndarray::{Array2, Zip};

use crate::model::sigmoid;
use crate::ops::Scalar;

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean over pixels of `-(w·y·ln σ(z) + (1 − y)·ln(1 − σ(z)))`.
pub fn weighted_bce<T: Scalar>(logits: &Array2<T>, labels: &Array2<T>, pos_weight: f64) -> f64 {
    let mut sum = 0.0;
    Zip::from(logits).and(labels).for_each(|&z, &y| {
        let (z, y) = (z.to_f64().unwrap(), y.to_f64().unwrap());
        sum += pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z);
    });
    sum / logits.len() as f64
}

/// Loss and its gradient with respect to the logits.
pub fn weighted_bce_grad<T: Scalar>(logits: &Array2<T>, labels: &Array2<T>, pos_weight: f64) -> (f64, Array2<T>) {
    let loss = weighted_bce(logits, labels, pos_weight);
    let w = T::from_f64(pos_weight).unwrap();
    let scale = T::from_f64(1.0 / logits.len() as f64).unwrap();
    let mut g = Array2::zeros(logits.raw_dim());
    Zip::from(&mut g).and(logits).and(labels).for_each(|g, &z, &y| {
        let s = sigmoid(z);
        *g = (w * y * (s - T::one()) + (T::one() - y) * s) * scale;
    });
    (loss, g)
}

/// Pixels whose thresholded prediction (`σ(z) > 0.5`, i.e. `z > 0`) equals the label.
pub fn correct_pixels<T: Scalar>(logits: &Array2<T>, labels: &Array2<T>) -> usize {
    let half = T::from_f64(0.5).unwrap();
    let mut n = 0;
    Zip::from(logits).and(labels).for_each(|&z, &y| {
        if (sigmoid(z) > half) == (y > half) {
            n += 1;
        }
    });
    n
}
