use crate::error::{Result, TensorError};
use crate::ops::sigmoid_scalar;
use crate::scalar::Scalar;
use crate::tape::{Grads, Op, Tape, Var};
use crate::tensor::Tensor;

/// Flat index into `small` for every element of `big`. `small` has the same rank
/// and each extent is either 1 or equal to the matching extent of `big`.
fn broadcast_map(op: &'static str, big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if big.len() != small.len() || big.iter().zip(small).any(|(&b, &s)| s != 1 && s != b) {
        return Err(TensorError::mismatch(op, big, small));
    }
    let n: usize = big.iter().product();
    let mut small_strides = vec![0; small.len()];
    let mut acc = 1;
    for d in (0..small.len()).rev() {
        small_strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            offset += small_strides[d];
            if idx[d] < big[d] {
                break;
            }
            offset -= small_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(map)
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::mismatch(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + b` where `b` matches `a` in rank and each of its extents is 1 or
    /// equal to `a`'s (e.g. a `[1, c]` bias on `[n, c]` rows).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map("add_broadcast", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(&map)
            .map(|(&p, &j)| p + y.data()[j])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::AddBroadcast(a, b))
    }

    /// `a ⊙ b` with the same broadcasting rule as [`Tape::add_broadcast`].
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map("mul_broadcast", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(&map)
            .map(|(&p, &j)| p * y.data()[j])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::MulBroadcast(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.unary(a, |v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, sigmoid_scalar);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |v| v.tanh());
        self.push(out, Op::Tanh(a))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. `slope` must lie in (0, 1).
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(TensorError::invalid(
                "leaky_relu",
                format!("slope {slope} outside (0,1)"),
            ));
        }
        let out = self.unary(a, |v| if v >= T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    y[at(j)] = y[at(j)] / total;
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        self.push(out, Op::Softmax(a, axis))
    }
}

/// (product of extents before axis, extent at axis, product after axis)
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn mul_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    if grads.wants(a) {
        let d: Vec<T> = g.iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
        grads.add(a, &d);
    }
    if grads.wants(b) {
        let d: Vec<T> = g.iter().zip(x.data()).map(|(&g, &x)| g * x).collect();
        grads.add(b, &d);
    }
}

pub(crate) fn add_bcast_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    grads.add(a, g);
    if grads.wants(b) {
        let map = broadcast_map("add_broadcast", x.shape(), y.shape()).expect("checked in forward");
        let slot = grads.slot(b);
        for (&gv, &j) in g.iter().zip(&map) {
            slot[j] += gv;
        }
    }
}

pub(crate) fn mul_bcast_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let map = broadcast_map("mul_broadcast", x.shape(), y.shape()).expect("checked in forward");
    if grads.wants(a) {
        let d: Vec<T> = g
            .iter()
            .zip(&map)
            .map(|(&gv, &j)| gv * y.data()[j])
            .collect();
        grads.add(a, &d);
    }
    if grads.wants(b) {
        let slot = grads.slot(b);
        for ((&gv, &j), &xv) in g.iter().zip(&map).zip(x.data()) {
            slot[j] += gv * xv;
        }
    }
}

pub(crate) fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, a: Var, g: &[T], grads: &mut Grads<T>) {
    if grads.wants(a) {
        let d: Vec<T> = g
            .iter()
            .zip(out.data())
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect();
        grads.add(a, &d);
    }
}

pub(crate) fn tanh_backward<T: Scalar>(out: &Tensor<T>, a: Var, g: &[T], grads: &mut Grads<T>) {
    if grads.wants(a) {
        let d: Vec<T> = g
            .iter()
            .zip(out.data())
            .map(|(&g, &t)| g * (T::one() - t * t))
            .collect();
        grads.add(a, &d);
    }
}

pub(crate) fn leaky_relu_backward<T: Scalar>(
    x: &Tensor<T>,
    slope: T,
    a: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    if grads.wants(a) {
        let d: Vec<T> = g
            .iter()
            .zip(x.data())
            .map(|(&g, &x)| if x >= T::zero() { g } else { g * slope })
            .collect();
        grads.add(a, &d);
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    out: &Tensor<T>,
    axis: usize,
    a: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    if !grads.wants(a) {
        return;
    }
    let (outer, n, inner) = axis_split(out.shape(), axis);
    let y = out.data();
    let slot = grads.slot(a);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                slot[at(j)] += y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, -1.0]));
        let y = tape.sigmoid(x).unwrap();
        let y = tape.value(y).data();
        assert_eq!(y[0], 0.5);
        assert!((y[1] - 0.7310586).abs() < 1e-7);
        assert!((y[1] + y[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-200.0f32, 200.0]).unwrap());
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[2.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let y = tape.value(y).data();
        assert!((y[0] - 0.8807971).abs() < 1e-7);
        assert!((y[1] - 0.1192029).abs() < 1e-7);

        let x = tape.constant(t(&[4], &[0.3; 4]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 5.0, 2.0, 5.0]));
        let y = tape.softmax(x, 0).unwrap();
        let y = tape.value(y);
        assert!((y.at(&[0, 0]) + y.at(&[1, 0]) - 1.0).abs() < 1e-12);
        assert!((y.at(&[0, 1]) - 0.5).abs() < 1e-12);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 5.0, -2.0]));
        let y = tape.leaky_relu(x, 0.1).unwrap();
        let y = tape.value(y).data();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 5.0);
        assert!((y[2] + 0.2).abs() < 1e-15);
        assert!(tape.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::<f64>::new();
        let a = tape.variable(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let bias = tape.variable(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let col = tape.variable(t(&[2, 1], &[2.0, -1.0]));
        let y = tape.add_broadcast(a, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let z = tape.mul_broadcast(y, col).unwrap();
        assert_eq!(
            tape.value(z).data(),
            &[22.0, 44.0, 66.0, -14.0, -25.0, -36.0]
        );
        let bad = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add_broadcast(a, bad).is_err());

        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(bias).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(col).unwrap().data(), &[66.0, 75.0]);
    }
}
