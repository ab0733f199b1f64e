//! Slow reference implementations used to cross-check the fast paths.

use crate::tensor::{Scalar, Tensor};

/// Weights of one attention layer, as plain tensors.
#[derive(Clone, Debug)]
pub struct AttnWeights<'a, T> {
    pub qkv_w: &'a Tensor<T>,
    pub qkv_b: &'a Tensor<T>,
    pub rel_bias: &'a Tensor<T>,
    pub proj_w: &'a Tensor<T>,
    pub proj_b: &'a Tensor<T>,
}

/// Window attention over `[N, C]` tokens of a `grid`, computed token by
/// token without any roll, partition, or mask.
///
/// Windows are the physical (non-cyclic) partitions displaced by `shift`:
/// along each axis, coordinate `x` belongs to segment `⌊(x + M − shift) / M⌋`
/// when `shift > 0` and `⌊x / M⌋` otherwise, so boundary segments are
/// truncated instead of wrapped. Each token attends to every token in the
/// same segment triple, with bias looked up from the true coordinate delta.
pub fn window_attention_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &AttnWeights<'_, T>,
    grid: [usize; 3],
    m: usize,
    shift: usize,
    heads: usize,
) -> Tensor<f64> {
    let n: usize = grid.iter().product();
    let c = x.shape()[1];
    let d = c / heads;
    let f = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let (xs, qw, qb, rb, pw, pb) = (f(x), f(w.qkv_w), f(w.qkv_b), f(w.rel_bias), f(w.proj_w), f(w.proj_b));

    let mut qkv = vec![0.0; n * 3 * c];
    for t in 0..n {
        for o in 0..3 * c {
            let mut acc = qb[o];
            for i in 0..c {
                acc += xs[t * c + i] * qw[i * 3 * c + o];
            }
            qkv[t * 3 * c + o] = acc;
        }
    }
    let coord = |t: usize| [t / (grid[1] * grid[2]), (t / grid[2]) % grid[1], t % grid[2]];
    let segment = |t: usize| {
        coord(t).map(|x| if shift > 0 { (x + m - shift) / m } else { x / m })
    };
    let span = (2 * m - 1) as i64;
    let scale = 1.0 / (d as f64).sqrt();

    let mut attended = vec![0.0; n * c];
    for i in 0..n {
        let si = segment(i);
        let members: Vec<usize> = (0..n).filter(|&j| segment(j) == si).collect();
        let ci = coord(i);
        for h in 0..heads {
            let logits: Vec<f64> = members
                .iter()
                .map(|&j| {
                    let cj = coord(j);
                    let delta = [0, 1, 2].map(|a| ci[a] as i64 - cj[a] as i64 + m as i64 - 1);
                    let row = ((delta[0] * span + delta[1]) * span + delta[2]) as usize;
                    let dot: f64 = (0..d)
                        .map(|k| qkv[i * 3 * c + h * d + k] * qkv[j * 3 * c + c + h * d + k])
                        .sum();
                    dot * scale + rb[row * heads + h]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (e, &j) in ex.iter().zip(&members) {
                for k in 0..d {
                    attended[i * c + h * d + k] += e / z * qkv[j * 3 * c + 2 * c + h * d + k];
                }
            }
        }
    }
    let mut out = vec![0.0; n * c];
    for t in 0..n {
        for o in 0..c {
            let mut acc = pb[o];
            for i in 0..c {
                acc += attended[t * c + i] * pw[i * c + o];
            }
            out[t * c + o] = acc;
        }
    }
    Tensor::from_parts(vec![n, c], out)
}
