use crate::error::{Result, TensorError};
use crate::ops::elementwise::axis_split;
use crate::scalar::Scalar;
use crate::tape::{Grads, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(a))
    }

    /// Joins tensors along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Sub-range `[start, start + len)` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if axis >= src.len() || len == 0 || start + len > src[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {src:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&src, axis);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = src;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Slice {
                src: a,
                axis,
                start,
            },
        )
    }

    /// `k` equal pieces along `axis`.
    pub fn split(&mut self, a: Var, axis: usize, k: usize) -> Result<Vec<Var>> {
        let extent = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::invalid("split", format!("axis {axis} out of range")))?;
        if k == 0 || extent % k != 0 {
            return Err(TensorError::invalid(
                "split",
                format!("extent {extent} not divisible into {k} parts"),
            ));
        }
        let len = extent / k;
        (0..k).map(|i| self.slice(a, axis, i * len, len)).collect()
    }

    /// `k` equal channel groups (last axis).
    pub fn split_channels(&mut self, a: Var, k: usize) -> Result<Vec<Var>> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.split(a, axis, k)
    }

    /// Inverse of [`Tape::split_channels`].
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let axis = parts
            .first()
            .map(|p| self.shape(*p).len().saturating_sub(1))
            .unwrap_or(0);
        self.concat(parts, axis)
    }

    /// Rows of `table: [v, e]` selected by `ids`, giving `[ids.len(), e]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("table {shape:?}, {} ids", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("id {bad} outside table of {} rows", shape[0]),
            ));
        }
        let e = shape[1];
        let x = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&x[i * e..(i + 1) * e]);
        }
        let out = Tensor::new(vec![ids.len(), e], data)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Flat (row-major) element selection, giving a rank-1 tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if indices.is_empty() {
            return Err(TensorError::invalid("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::invalid(
                "gather",
                format!("index {bad} outside {n} elements"),
            ));
        }
        let x = self.value(a).data();
        let data = indices.iter().map(|&i| x[i]).collect();
        let out = Tensor::new(vec![indices.len()], data)?;
        self.push(
            out,
            Op::Gather {
                src: a,
                indices: indices.to_vec(),
            },
        )
    }
}

pub(crate) fn concat_backward<T: Scalar>(
    shapes: &[&[usize]],
    parts: &[Var],
    axis: usize,
    out_shape: &[usize],
    g: &[T],
    grads: &mut Grads<T>,
) {
    let (outer, _, inner) = axis_split(out_shape, axis);
    let mut offset = 0;
    for o in 0..outer {
        for (p, s) in parts.iter().zip(shapes) {
            let block = s[axis] * inner;
            if grads.wants(*p) {
                let slot = &mut grads.slot(*p)[o * block..(o + 1) * block];
                for (d, &gv) in slot.iter_mut().zip(&g[offset..offset + block]) {
                    *d += gv;
                }
            }
            offset += block;
        }
    }
}

pub(crate) fn slice_backward<T: Scalar>(
    src_shape: &[usize],
    axis: usize,
    start: usize,
    out_shape: &[usize],
    src: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    if !grads.wants(src) {
        return;
    }
    let (outer, n, inner) = axis_split(src_shape, axis);
    let len = out_shape[axis];
    let slot = grads.slot(src);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        let gb = o * len * inner;
        for (d, &gv) in slot[base..base + len * inner]
            .iter_mut()
            .zip(&g[gb..gb + len * inner])
        {
            *d += gv;
        }
    }
}

pub(crate) fn gather_rows_backward<T: Scalar>(
    table_shape: &[usize],
    ids: &[usize],
    table: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    if !grads.wants(table) {
        return;
    }
    let e = table_shape[1];
    let slot = grads.slot(table);
    for (r, &i) in ids.iter().enumerate() {
        for (d, &gv) in slot[i * e..(i + 1) * e]
            .iter_mut()
            .zip(&g[r * e..(r + 1) * e])
        {
            *d += gv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_channel_probe_keeps_indices() {
        let mut tape = Tape::<f64>::new();
        // value = channel index at every position of a 2×2×4 map
        let x = tape.constant(Tensor::from_fn(vec![2, 2, 4], |i| (i % 4) as f64));
        let halves = tape.split_channels(x, 2).unwrap();
        assert_eq!(halves.len(), 2);
        for pos in tape.value(halves[0]).data().chunks(2) {
            assert_eq!(pos, &[0.0, 1.0]);
        }
        for pos in tape.value(halves[1]).data().chunks(2) {
            assert_eq!(pos, &[2.0, 3.0]);
        }
    }

    #[test]
    fn split_identity_and_errors() {
        let mut tape = Tape::<f32>::new();
        let t = Tensor::from_fn(vec![3, 3, 6], |i| i as f32);
        let x = tape.constant(t.clone());
        let one = tape.split_channels(x, 1).unwrap();
        assert_eq!(tape.value(one[0]), &t);
        assert!(tape.split_channels(x, 4).is_err());
        assert!(tape.split_channels(x, 0).is_err());
    }

    #[test]
    fn concat_inner_axis() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = tape.concat(&[a, b], 0);
        assert!(d.is_err());
    }

    #[test]
    fn gathers() {
        let mut tape = Tape::<f64>::new();
        let table = tape.variable(Tensor::from_fn(vec![3, 2], |i| i as f64));
        let rows = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(tape.gather_rows(table, &[3]).is_err());
        let picked = tape.gather(rows, &[1, 5]).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0, 5.0]);
        let loss = tape.sum(picked).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(table).unwrap().data(),
            &[0.0, 0.0, 0.0, 0.0, 0.0, 2.0]
        );
    }
}
