//! Dense row-major tensors and the shape-manipulation kernels shared by the
//! autodiff tape and the plain (non-differentiable) volume code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::TensorError;

/// Floating point element type. `f32` is used for training and inference,
/// `f64` for gradient checks.
pub trait Scalar: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// A dense, contiguous, row-major N-dimensional array.
///
/// A rank-0 tensor (empty shape) holds exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                msg: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "shape {shape:?} holds {n} elements but buffer has {}",
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from a shape and data the caller has already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Vec::new(), vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        self.expect_same_shape("zip", other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_axis(&self, op: &'static str, axis: usize) -> Result<(), TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, TensorError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("permutation {perm:?} does not match rank {rank}"),
            });
        }
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(TensorError::InvalidArgument {
                    op: "permute",
                    msg: format!("{perm:?} is not a permutation of 0..{rank}"),
                });
            }
            seen[p] = true;
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.len() {
            out.push(self.data[offset]);
            // odometer increment over the output index
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Cyclic shift: element at index `i` along an axis moves to `i + shift`
    /// (mod the axis length). `shifts` has one entry per axis.
    pub fn roll(&self, shifts: &[i64]) -> Result<Self, TensorError> {
        if shifts.len() != self.rank() {
            return Err(TensorError::InvalidArgument {
                op: "roll",
                msg: format!("{} shifts for rank {}", shifts.len(), self.rank()),
            });
        }
        let rank = self.rank();
        let st = strides(&self.shape);
        let norm: Vec<usize> = shifts
            .iter()
            .zip(&self.shape)
            .map(|(&s, &n)| s.rem_euclid(n as i64) as usize)
            .collect();
        let mut out = vec![T::zero(); self.len()];
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut dst = 0;
            for ax in 0..rank {
                let mut j = idx[ax] + norm[ax];
                if j >= self.shape[ax] {
                    j -= self.shape[ax];
                }
                dst += j * st[ax];
            }
            out[dst] = v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < self.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Cyclic shift of the three leading (spatial) axes of a `[H, W, D, ...]`
    /// token grid.
    pub fn roll3d(&self, shifts: [i64; 3]) -> Result<Self, TensorError> {
        if self.rank() < 3 {
            return Err(TensorError::InvalidArgument {
                op: "roll3d",
                msg: format!("needs rank >= 3, got shape {:?}", self.shape),
            });
        }
        let mut all = vec![0i64; self.rank()];
        all[..3].copy_from_slice(&shifts);
        self.roll(&all)
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self, TensorError> {
        self.check_axis("slice", axis)?;
        if start >= end || end > self.shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {start}..{end} invalid for axis {axis} of length {}",
                    self.shape[axis]
                ),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Self::from_parts(shape, out))
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self, TensorError> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        first.check_axis("concat", axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_parts(shape, out))
    }
}

/// Inverse of a permutation.
pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_validates_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn permute_transposes_matrix() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_rejects_bad_permutation() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0]).is_err());
    }

    #[test]
    fn roll_moves_elements_forward() {
        let t = Tensor::<f64>::new(vec![4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.roll(&[1]).unwrap().data(), &[3.0, 0.0, 1.0, 2.0]);
        assert_eq!(t.roll(&[-1]).unwrap().data(), &[1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn slice_and_concat() {
        let t = Tensor::<f64>::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let a = t.slice(1, 0, 1).unwrap();
        let b = t.slice(1, 1, 4).unwrap();
        assert_eq!(a.data(), &[0.0, 4.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c, t);
        assert!(t.slice(1, 3, 3).is_err());
        assert!(t.slice(2, 0, 1).is_err());
    }

    fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    proptest! {
        #[test]
        fn permute_roundtrip_bit_exact(seed in 0u64..1000, dims in proptest::collection::vec(1usize..4, 1..5)) {
            let t = random_tensor(seed, &dims);
            let mut perm: Vec<usize> = (0..dims.len()).collect();
            perm.reverse();
            perm.rotate_left((seed as usize) % dims.len());
            let back = t.permute(&perm).unwrap().permute(&inverse_permutation(&perm)).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn roll3d_roundtrip_bit_exact(seed in 0u64..1000, s in proptest::array::uniform3(-7i64..7)) {
            let t = random_tensor(seed, &[4, 3, 5, 2]);
            let back = t.roll3d(s).unwrap().roll3d([-s[0], -s[1], -s[2]]).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn reshape_preserves_buffer(seed in 0u64..1000) {
            let t = random_tensor(seed, &[2, 3, 4]);
            let r = t.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
            prop_assert_eq!(r, t);
        }
    }
}
