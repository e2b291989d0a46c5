use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Grads, Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// `[r, k] × [k, c] → [r, c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); r * c];
        T::gemm(
            r,
            k,
            c,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let out = Tensor::new(vec![r, c], out)?;
        self.push(out, Op::MatMul(a, b))
    }

    /// Batched product `[n, r, k] × [n, k, c] → [n, r, c]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::mismatch("batch_matmul", sa, sb));
        }
        let (n, r, k, c) = (sa[0], sa[1], sa[2], sb[2]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * r * c];
        for i in 0..n {
            T::gemm(
                r,
                k,
                c,
                &x[i * r * k..(i + 1) * r * k],
                false,
                &y[i * k * c..(i + 1) * k * c],
                false,
                &mut out[i * r * c..(i + 1) * r * c],
                false,
            );
        }
        let out = Tensor::new(vec![n, r, c], out)?;
        self.push(out, Op::BatchMatMul(a, b))
    }
}

pub(crate) fn matmul_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let (r, k, c) = (x.shape()[0], x.shape()[1], y.shape()[1]);
    if grads.wants(a) {
        // dA = G · Bᵀ
        T::gemm(r, c, k, g, false, y.data(), true, grads.slot(a), true);
    }
    if grads.wants(b) {
        // dB = Aᵀ · G
        T::gemm(k, r, c, x.data(), true, g, false, grads.slot(b), true);
    }
}

pub(crate) fn bmm_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let (n, r, k, c) = (x.shape()[0], x.shape()[1], x.shape()[2], y.shape()[2]);
    for i in 0..n {
        let gi = &g[i * r * c..(i + 1) * r * c];
        if grads.wants(a) {
            let yi = &y.data()[i * k * c..(i + 1) * k * c];
            let slot = &mut grads.slot(a)[i * r * k..(i + 1) * r * k];
            T::gemm(r, c, k, gi, false, yi, true, slot, true);
        }
        if grads.wants(b) {
            let xi = &x.data()[i * r * k..(i + 1) * r * k];
            let slot = &mut grads.slot(b)[i * k * c..(i + 1) * k * c];
            T::gemm(k, r, c, xi, true, gi, false, slot, true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let m = Tensor::new(vec![3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let (e, mv) = (tape.constant(eye), tape.constant(m.clone()));
        let p = tape.matmul(e, mv).unwrap();
        assert_eq!(tape.value(p), &m);

        let z = tape.constant(Tensor::zeros(vec![2, 3]));
        let p = tape.matmul(z, mv).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));

        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn batch_matmul_matches_per_item_products() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(vec![2, 1, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(vec![2, 3, 1], |i| 1.0 + i as f64));
        let p = tape.batch_matmul(a, b).unwrap();
        // [0,1,2]·[1,2,3] = 8 ; [3,4,5]·[4,5,6] = 62
        assert_eq!(tape.value(p).data(), &[8.0, 62.0]);
    }
}
