//! Window partitioning of `[H, W, D, C]` token grids, the relative position
//! index, and the attention mask for cyclically shifted windows.
//!
//! Tokens inside a window are flattened H-then-W-then-D, the same raster
//! order used for the whole grid.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_NEG: f64 = -1e9;

fn grid_err(grid: [usize; 3], m: usize) -> TensorError {
    TensorError::InvalidArgument {
        op: "window_partition",
        msg: format!("token grid {grid:?} is not divisible by window {m}"),
    }
}

fn check_grid(grid: [usize; 3], m: usize) -> Result<(), TensorError> {
    if m == 0 || grid.iter().any(|&g| g == 0 || g % m != 0) {
        return Err(grid_err(grid, m));
    }
    Ok(())
}

pub fn num_windows(grid: [usize; 3], m: usize) -> usize {
    grid.iter().map(|g| g / m).product()
}

const PARTITION_PERM: [usize; 7] = [0, 2, 4, 1, 3, 5, 6];
const REVERSE_PERM: [usize; 7] = [0, 3, 1, 4, 2, 5, 6];

fn split_shape(grid: [usize; 3], m: usize, c: usize) -> [usize; 7] {
    [grid[0] / m, m, grid[1] / m, m, grid[2] / m, m, c]
}

fn windowed_shape(grid: [usize; 3], m: usize, c: usize) -> [usize; 7] {
    [grid[0] / m, grid[1] / m, grid[2] / m, m, m, m, c]
}

fn channels<T: Scalar>(t: &Tensor<T>, grid: [usize; 3]) -> Result<usize, TensorError> {
    let s = t.shape();
    if s.len() != 4 || s[..3] != grid {
        return Err(TensorError::InvalidArgument {
            op: "window_partition",
            msg: format!("expected [{}, {}, {}, C] grid, got {s:?}", grid[0], grid[1], grid[2]),
        });
    }
    Ok(s[3])
}

/// `[H, W, D, C]` → `[n_windows, M³, C]`.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidArgument {
            op: "window_partition",
            msg: format!("expected [H, W, D, C], got {s:?}"),
        });
    }
    let grid = [s[0], s[1], s[2]];
    check_grid(grid, m)?;
    let c = s[3];
    x.reshape(&split_shape(grid, m, c))?
        .permute(&PARTITION_PERM)?
        .reshape(&[num_windows(grid, m), m * m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(w: &Tensor<T>, grid: [usize; 3], m: usize) -> Result<Tensor<T>, TensorError> {
    check_grid(grid, m)?;
    let s = w.shape();
    if s.len() != 3 || s[0] != num_windows(grid, m) || s[1] != m * m * m {
        return Err(TensorError::InvalidArgument {
            op: "window_reverse",
            msg: format!("windows {s:?} do not tile grid {grid:?} with window {m}"),
        });
    }
    let c = s[2];
    w.reshape(&windowed_shape(grid, m, c))?
        .permute(&REVERSE_PERM)?
        .reshape(&[grid[0], grid[1], grid[2], c])
}

/// Differentiable [`window_partition`].
pub fn window_partition_var<T: Scalar>(tape: &mut Tape<T>, x: Var, m: usize) -> Result<Var, TensorError> {
    let s = tape.shape(x).to_vec();
    let grid = [s[0], s[1], s[2]];
    check_grid(grid, m)?;
    let c = channels(tape.value(x), grid)?;
    let v = tape.reshape(x, &split_shape(grid, m, c))?;
    let v = tape.permute(v, &PARTITION_PERM)?;
    tape.reshape(v, &[num_windows(grid, m), m * m * m, c])
}

/// Differentiable [`window_reverse`].
pub fn window_reverse_var<T: Scalar>(tape: &mut Tape<T>, w: Var, grid: [usize; 3], m: usize) -> Result<Var, TensorError> {
    check_grid(grid, m)?;
    let c = *tape.shape(w).last().unwrap_or(&0);
    let v = tape.reshape(w, &windowed_shape(grid, m, c))?;
    let v = tape.permute(v, &REVERSE_PERM)?;
    tape.reshape(v, &[grid[0], grid[1], grid[2], c])
}

/// Map from an intra-window token pair `(i, j)` to a row of the
/// `[(2M−1)³, heads]` bias table. The row depends only on the coordinate
/// difference of the two tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelativePositionIndex {
    window: usize,
    index: Arc<Vec<usize>>,
}

impl RelativePositionIndex {
    pub fn new(m: usize) -> Self {
        let n = m * m * m;
        let span = 2 * m - 1;
        let coord = |t: usize| [t / (m * m), (t / m) % m, t % m];
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            let a = coord(i);
            for j in 0..n {
                let b = coord(j);
                let d = [0, 1, 2].map(|ax| a[ax] + m - 1 - b[ax]);
                index.push((d[0] * span + d[1]) * span + d[2]);
            }
        }
        Self {
            window: m,
            index: Arc::new(index),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Rows in the bias table: `(2M−1)³`.
    pub fn table_rows(&self) -> usize {
        (2 * self.window - 1).pow(3)
    }

    pub fn tokens(&self) -> usize {
        self.window.pow(3)
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.index[i * self.tokens() + j]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.index
    }

    pub fn shared(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.index)
    }

    /// Swaps two entries. Only used to exercise failure paths in self-tests.
    pub fn corrupt(&mut self, a: usize, b: usize) {
        Arc::make_mut(&mut self.index).swap(a, b);
    }
}

/// Region label of each coordinate along one axis of length `len` for the
/// standard three-slab split `[0, len−M) ∪ [len−M, len−s) ∪ [len−s, len)`.
fn slab_labels(len: usize, m: usize, s: usize) -> Vec<usize> {
    (0..len)
        .map(|i| {
            if i < len - m {
                0
            } else if i < len - s {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Additive mask `[n_windows, M³, M³]` for attention over cyclically shifted
/// windows. Entry `(w, i, j)` is 0 when tokens `i` and `j` of window `w`
/// came from the same pre-shift region and [`MASK_NEG`] otherwise. With
/// `shift == 0` the mask is all zeros.
pub fn build_shift_mask<T: Scalar>(grid: [usize; 3], m: usize, shift: usize) -> Result<Tensor<T>, TensorError> {
    check_grid(grid, m)?;
    if shift >= m {
        return Err(TensorError::InvalidArgument {
            op: "build_shift_mask",
            msg: format!("shift {shift} must be smaller than window {m}"),
        });
    }
    let n = m * m * m;
    let nw = num_windows(grid, m);
    if shift == 0 {
        return Ok(Tensor::zeros(&[nw, n, n]));
    }
    let labels: Vec<Vec<usize>> = grid.iter().map(|&g| slab_labels(g, m, shift)).collect();
    let mut region = vec![0usize; grid.iter().product()];
    for h in 0..grid[0] {
        for w in 0..grid[1] {
            for d in 0..grid[2] {
                region[(h * grid[1] + w) * grid[2] + d] = labels[0][h] * 9 + labels[1][w] * 3 + labels[2][d];
            }
        }
    }
    let region = Tensor::from_parts(vec![grid[0], grid[1], grid[2], 1], region.into_iter().map(|r| T::from_f64(r as f64)).collect());
    let win = window_partition(&region, m)?;
    let neg = T::from_f64(MASK_NEG);
    let mut out = Vec::with_capacity(nw * n * n);
    for wi in 0..nw {
        let r = &win.data()[wi * n..(wi + 1) * n];
        for i in 0..n {
            for j in 0..n {
                out.push(if r[i] == r[j] { T::zero() } else { neg });
            }
        }
    }
    Ok(Tensor::from_parts(vec![nw, n, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn window_counts() {
        let x = Tensor::<f32>::zeros(&[8, 8, 8, 3]);
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.shape(), &[8, 64, 3]);
        let x = Tensor::<f32>::zeros(&[16, 16, 16, 1]);
        assert_eq!(window_partition(&x, 8).unwrap().shape()[0], 8);
        assert!(window_partition(&Tensor::<f32>::zeros(&[6, 8, 8, 1]), 4).is_err());
    }

    #[test]
    fn partition_groups_contiguous_blocks() {
        let x = Tensor::<f64>::from_fn(&[4, 4, 4, 1], |i| i as f64);
        let w = window_partition(&x, 2).unwrap();
        // window 0 holds the 2x2x2 corner block in raster order
        let expect = [0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0];
        assert_eq!(&w.data()[..8], &expect);
    }

    #[test]
    fn partition_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::randn(&[8, 4, 12, 5], 1.0, &mut rng);
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(window_reverse(&w, [8, 4, 12], 4).unwrap(), x);
    }

    #[test]
    fn relative_index_small_case() {
        for m in 2..=4 {
            let rpi = RelativePositionIndex::new(m);
            let distinct: HashSet<_> = rpi.as_slice().iter().collect();
            assert_eq!(distinct.len(), (2 * m - 1).pow(3));
            assert!(rpi.as_slice().iter().all(|&i| i < rpi.table_rows()));
            let mut by_delta: HashMap<[i64; 3], usize> = HashMap::new();
            let n = m * m * m;
            let c = |t: usize| [(t / (m * m)) as i64, ((t / m) % m) as i64, (t % m) as i64];
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = (c(i), c(j));
                    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                    let idx = *by_delta.entry(d).or_insert(rpi.get(i, j));
                    assert_eq!(idx, rpi.get(i, j));
                }
            }
        }
    }

    #[test]
    fn zero_shift_mask_is_zero() {
        let m: Tensor<f32> = build_shift_mask([4, 4, 4], 4, 0).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_mask_is_symmetric() {
        let m: Tensor<f64> = build_shift_mask([8, 8, 8], 4, 2).unwrap();
        let n = 64;
        for w in 0..m.shape()[0] {
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(m.data()[(w * n + i) * n + j], m.data()[(w * n + j) * n + i]);
                }
            }
        }
        // first window never wraps
        assert!(m.data()[..n * n].iter().all(|&v| v == 0.0));
        assert!(m.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn one_dimensional_boundary_window_is_block_diagonal() {
        assert_eq!(slab_labels(8, 4, 2), vec![0, 0, 0, 0, 1, 1, 2, 2]);
        // grid 8 along D only; the second window is the wrapped boundary one
        let m: Tensor<f64> = build_shift_mask([4, 4, 8], 4, 2).unwrap();
        let n = 64;
        let boundary = 1;
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (i % 4 / 2, j % 4 / 2);
                let v = m.data()[(boundary * n + i) * n + j];
                // H and W also wrap in a single-window axis, so compare only
                // pairs that agree on those coordinates
                if i / 4 == j / 4 {
                    assert_eq!(v == 0.0, a == b, "pair {i},{j}");
                }
            }
        }
    }
}
