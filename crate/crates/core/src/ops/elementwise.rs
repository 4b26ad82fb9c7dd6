//! Element-wise maps and reductions.

use alloc::format;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn scale<T: Real>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

/// `Σ_i weights[i] · xs[i]`, accumulated in index order.
pub fn weighted_sum<T: Real>(xs: &[&Tensor<T>], weights: &Tensor<T>) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| shape_err("weighted_sum", "no inputs"))?;
    if weights.len() != xs.len() {
        return Err(shape_err(
            "weighted_sum",
            format!("{} weights for {} inputs", weights.len(), xs.len()),
        ));
    }
    let mut out = Tensor::zeros(first.shape().to_vec());
    for (x, &w) in xs.iter().zip(weights.data()) {
        same_shape("weighted_sum", first, x)?;
        for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape("l1_loss", pred, target)?;
    let n = T::from_usize(pred.len().max(1));
    let s = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::ZERO, |s, (&a, &b)| s + (a - b).abs());
    Ok(s / n)
}

pub fn sum<T: Real>(x: &Tensor<T>) -> T {
    x.data().iter().fold(T::ZERO, |s, &v| s + v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn relu_example() {
        let x = Tensor::new([3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::from_fn([2, 3, 3], |i| i as f64 * 0.1);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((l1_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!(l1_loss(&a, &Tensor::zeros([3])).is_err());
    }
}
