//! Shared model plumbing: linear layers and parameter (un)flattening.

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Dense layer storing weights as (in_dim, out_dim) so a row batch
/// `x (r, in)` maps through `x @ w + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let w = Tensor::init_uniform(vec![in_dim, out_dim], in_dim, rng);
        let b = Tensor::init_uniform(vec![out_dim], in_dim, rng);
        Self { w, b }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        let mut w = Tensor::zeros(vec![in_dim, out_dim]);
        let mut b = Tensor::zeros(vec![out_dim]);
        w.requires_grad = true;
        b.requires_grad = true;
        Self { w, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Tape handles for one bound [`Linear`].
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: TensorId,
    pub b: TensorId,
}

impl LinearIds {
    /// `x @ w + b` with the bias broadcast over rows.
    pub fn apply(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let xw = tape.matmul(x, self.w)?;
        tape.add(xw, self.b)
    }
}

/// Concatenate parameter values into one flat 1-D tensor.
pub fn flatten_params(params: &[&Tensor]) -> Tensor {
    let total: usize = params.iter().map(|p| p.len()).sum();
    let mut data = Vec::with_capacity(total);
    for p in params {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![total], data)
}

/// Overwrite parameter values from a flat buffer laid out by
/// [`flatten_params`].
pub fn unflatten_params(flat: &[f64], params: &mut [&mut Tensor]) {
    let mut offset = 0;
    for p in params.iter_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len(), "flat buffer length mismatch");
}

/// Slice a flat 1-D tape leaf back into per-parameter views with the
/// given shapes. Lets a gradient check differentiate an entire model
/// against a single input vector.
pub fn bind_from_flat(
    tape: &mut Tape,
    flat: TensorId,
    shapes: &[Vec<usize>],
) -> Result<Vec<TensorId>> {
    let mut ids = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        let piece = tape.slice_rows(flat, offset, offset + n)?;
        ids.push(tape.reshape(piece, shape.clone())?);
        offset += n;
    }
    Ok(ids)
}

/// Copy tape gradients back into parameter tensors, accumulating.
pub fn harvest_grads(tape: &Tape, ids: &[TensorId], params: &mut [&mut Tensor]) {
    assert_eq!(ids.len(), params.len());
    for (id, p) in ids.iter().zip(params.iter_mut()) {
        tape.accumulate_grad_into(*id, p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut rng = SeededRng::new(1);
        let mut a = Tensor::init_uniform(vec![2, 3], 2, &mut rng);
        let mut b = Tensor::init_uniform(vec![4], 4, &mut rng);
        let flat = flatten_params(&[&a, &b]);
        assert_eq!(flat.len(), 10);

        let doubled: Vec<f64> = flat.data().iter().map(|v| v * 2.0).collect();
        unflatten_params(&doubled, &mut [&mut a, &mut b]);
        assert_eq!(a.data()[0], flat.data()[0] * 2.0);
        assert_eq!(b.data()[3], flat.data()[9] * 2.0);
    }

    #[test]
    fn bind_from_flat_reconstructs_shapes() {
        let mut tape = Tape::new();
        let flat = tape.constant(vec![10], (0..10).map(|i| i as f64).collect());
        let ids = bind_from_flat(&mut tape, flat, &[vec![2, 3], vec![4]]).unwrap();
        assert_eq!(tape.shape(ids[0]), &[2, 3]);
        assert_eq!(tape.value(ids[1]), &[6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn linear_apply_shapes() {
        let mut rng = SeededRng::new(2);
        let layer = Linear::init(3, 4, &mut rng);
        let mut tape = Tape::new();
        let ids = LinearIds {
            w: tape.leaf(&layer.w),
            b: tape.leaf(&layer.b),
        };
        let x = tape.constant(vec![2, 3], vec![0.5; 6]);
        let y = ids.apply(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 4]);
    }
}
