use crate::error::{Result, TensorError};
use crate::ops::sigmoid_scalar;
use crate::scalar::Scalar;
use crate::tape::{Grads, Op, Tape, Var};
use crate::tensor::Tensor;

/// Per-element `-[t·ln σ(x) + (1-t)·ln(1-σ(x))]` in the overflow-free form
/// `max(x, 0) - x·t + ln(1 + e^{-|x|})`.
pub fn bce_with_logits_scalar<T: Scalar>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p()
}

/// `0.5·d²` for `|d| < 1`, `|d| - 0.5` otherwise.
pub fn smooth_l1_scalar<T: Scalar>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::lit(0.5) * d * d
    } else {
        a - T::lit(0.5)
    }
}

impl<T: Scalar> Tape<T> {
    /// Mean binary cross-entropy between logits and targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logit: Var, target: &Tensor<T>) -> Result<Var> {
        self.bce_impl(logit, target, None)
    }

    /// As [`Tape::bce_with_logits`] with a per-element weight; still divided by
    /// the element count, not by the weight total.
    pub fn bce_with_logits_weighted(
        &mut self,
        logit: Var,
        target: &Tensor<T>,
        weight: &Tensor<T>,
    ) -> Result<Var> {
        if weight.shape() != target.shape() {
            return Err(TensorError::mismatch(
                "bce_with_logits",
                target.shape(),
                weight.shape(),
            ));
        }
        self.bce_impl(logit, target, Some(weight.data().to_vec()))
    }

    fn bce_impl(&mut self, logit: Var, target: &Tensor<T>, weight: Option<Vec<T>>) -> Result<Var> {
        if self.shape(logit) != target.shape() {
            return Err(TensorError::mismatch(
                "bce_with_logits",
                self.shape(logit),
                target.shape(),
            ));
        }
        if let Some(bad) = target
            .data()
            .iter()
            .find(|&&t| !(t >= T::zero() && t <= T::one()))
        {
            return Err(TensorError::invalid(
                "bce_with_logits",
                format!("target {bad} outside [0, 1]"),
            ));
        }
        let x = self.value(logit).data();
        let n = T::lit(x.len() as f64);
        let total: T = x
            .iter()
            .zip(target.data())
            .enumerate()
            .map(|(i, (&x, &t))| {
                let w = weight.as_ref().map_or(T::one(), |w| w[i]);
                w * bce_with_logits_scalar(x, t)
            })
            .sum();
        let out = Tensor::scalar(total / n);
        self.push(
            out,
            Op::BceWithLogits {
                logit,
                target: target.data().to_vec(),
                weight,
            },
        )
    }

    /// Mean smooth-L1 (threshold 1) between `pred` and a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(TensorError::mismatch(
                "smooth_l1",
                self.shape(pred),
                target.shape(),
            ));
        }
        let p = self.value(pred).data();
        let n = T::lit(p.len() as f64);
        let total: T = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| smooth_l1_scalar(p - t))
            .sum();
        let out = Tensor::scalar(total / n);
        self.push(
            out,
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let total: T = v.data().iter().copied().sum();
        let n = T::lit(v.len() as f64);
        self.push(Tensor::scalar(total / n), Op::Mean(a))
    }
}

pub(crate) fn bce_backward<T: Scalar>(
    logit: &Tensor<T>,
    target: &[T],
    weight: Option<&[T]>,
    var: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    if !grads.wants(var) {
        return;
    }
    let scale = g[0] / T::lit(logit.len() as f64);
    let slot = grads.slot(var);
    for (i, (&x, &t)) in logit.data().iter().zip(target).enumerate() {
        let w = weight.map_or(T::one(), |w| w[i]);
        slot[i] += scale * w * (sigmoid_scalar(x) - t);
    }
}

pub(crate) fn smooth_l1_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &[T],
    var: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    if !grads.wants(var) {
        return;
    }
    let scale = g[0] / T::lit(pred.len() as f64);
    let slot = grads.slot(var);
    for (i, (&p, &t)) in pred.data().iter().zip(target).enumerate() {
        let d = p - t;
        let dd = if d.abs() < T::one() { d } else { d.signum() };
        slot[i] += scale * dd;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce(x: f64, t: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::new(vec![1], vec![x]).unwrap());
        let out = tape
            .bce_with_logits(l, &Tensor::new(vec![1], vec![t]).unwrap())
            .unwrap();
        tape.value(out).item().unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((bce(0.0, 0.5) - 0.6931472).abs() < 1e-7);
        assert!((bce(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(50.0, 1.0) < 1e-20);
        assert!(bce(-800.0, 0.0).abs() < 1e-300);
    }

    #[test]
    fn bce_rejects_out_of_range_targets() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::zeros(vec![2]));
        let bad = Tensor::new(vec![2], vec![0.5, 1.5]).unwrap();
        assert!(tape.bce_with_logits(l, &bad).is_err());
        let short = Tensor::new(vec![1], vec![0.5]).unwrap();
        assert!(tape.bce_with_logits(l, &short).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        for (d, expected) in [(0.0, 0.0), (0.5, 0.125), (3.0, 2.5), (-3.0, 2.5)] {
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(Tensor::new(vec![1], vec![d]).unwrap());
            let out = tape.smooth_l1(p, &Tensor::zeros(vec![1])).unwrap();
            assert_eq!(tape.value(out).item().unwrap(), expected);
        }
    }

    #[test]
    fn smooth_l1_is_averaged() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![2], vec![0.5, 3.0]).unwrap());
        let out = tape.smooth_l1(p, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(tape.value(out).item().unwrap(), (0.125 + 2.5) / 2.0);
    }
}
